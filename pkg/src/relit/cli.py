"""``relit`` command line: file-based wrappers around the toolkit.

Exit codes: 0 success, 2 invalid input (missing/corrupt files, bad flags),
1 internal error.  Every command writes only inside ``--out-dir`` and leaves a
``manifest.json`` there that ``relit replay`` can re-run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import image_quality as iq
from .dataset_synthesis import DegradeConfig, keep_pair, mean_sh, pair_rng, synthesize_input
from .lighting_correction import CorrectionConfig, fit_lighting, initial_lighting, render_state
from .morphable_model import evaluate_model, load_coeffs, load_model
from .sh_lighting import ShCoeffs, load_sh
from .soft_rasterizer import Camera, RasterConfig, build_cache, gbuffer

log = logging.getLogger("relit")

MANIFEST = "manifest.json"
PATH_FLAGS = ("--model", "--coeffs", "--sh", "--input", "--target", "--camera", "--mask", "--manifest")


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers

def _parse_size(text):
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _parse_rgb(text):
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"background must be r,g,b, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background must have three components")
    return vals


def _require(path, what):
    if path is None:
        raise InputError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_json_input(loader, path, what):
    p = _require(path, what)
    try:
        return loader(p)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid {what} {p}: {exc}") from exc


def _read_image(path, what):
    p = _require(path, what)
    try:
        return iq.read_image(p)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _camera(args, size=None) -> Camera:
    if getattr(args, "camera", None):
        cam = _load_json_input(lambda p: Camera.from_dict(json.loads(p.read_text())), args.camera, "camera")
        if size is not None and (cam.height, cam.width) != tuple(size):
            raise InputError(f"camera is {cam.height}x{cam.width} but the image is {size[0]}x{size[1]}")
        return cam
    if size is None:
        size = args.size or (64, 64)
    elif args.size is not None and tuple(args.size) != tuple(size):
        raise InputError(f"--size {args.size[0]}x{args.size[1]} disagrees with the image size {size[0]}x{size[1]}")
    return Camera(*size)


def _raster(args, cam: Camera) -> RasterConfig:
    kw = {}
    if args.sigma is not None:
        kw["sigma"] = args.sigma
    if args.gamma_depth is not None:
        kw["gamma_depth"] = args.gamma_depth
    if args.background is not None:
        kw["background_color"] = args.background
    try:
        return RasterConfig.for_camera(cam, **kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _mesh(args):
    model = _load_json_input(load_model, args.model, "model file")
    coeffs = _load_json_input(load_coeffs, args.coeffs, "coefficients file")
    try:
        return evaluate_model(model, coeffs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _history_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _correction_config(args) -> CorrectionConfig:
    kw = dict(seed=args.seed)
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.lambda_crt is not None:
        kw["lambda_crt"] = args.lambda_crt
    try:
        return CorrectionConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands; each returns (outputs, config snapshot)

def cmd_render(args):
    mesh = _mesh(args)
    sh = _load_json_input(load_sh, args.sh, "SH file")
    cam = _camera(args)
    cfg = _raster(args, cam)
    cache = build_cache(mesh, cam, cfg, threads=args.threads)
    img = render_state(cache, sh)
    out = args.out_dir / "render.png"
    iq.write_png(img.pixels, out)
    return [out.name], {"camera": cam.to_dict(), "sigma": cfg.sigma, "gamma_depth": cfg.gamma_depth,
                        "background": list(cfg.background_color)}


def _setup_fit(args):
    I_s = _read_image(args.input, "input image")
    I_t = None if args.target is None else _read_image(args.target, "target image")
    if I_t is not None and I_t.shape != I_s.shape:
        raise InputError(f"target size {I_t.shape[:2]} differs from input size {I_s.shape[:2]}")
    mesh = _mesh(args)
    cam = _camera(args, I_s.shape[:2])
    cfg = _raster(args, cam)
    cache = build_cache(mesh, cam, cfg, threads=args.threads)
    if not (cache.coverage() >= 0.5).any():
        raise InputError("the face does not cover any pixel under this camera")
    return I_s, I_t, mesh, cam, cfg, cache


def cmd_estimate(args):
    I_s, _, _, cam, cfg, cache = _setup_fit(args)
    sh = initial_lighting(cache, I_s, CorrectionConfig(seed=args.seed))
    out = args.out_dir / "sh.json"
    _write_json(out, sh.to_dict())
    return [out.name], {"camera": cam.to_dict(), "sigma": cfg.sigma, "gamma_depth": cfg.gamma_depth}


def _run_correction(args):
    I_s, I_t, mesh, cam, cfg, cache = _setup_fit(args)
    ccfg = _correction_config(args)
    if I_t is None:
        log.warning("no --target given: the correction offset has no supervision and stays at zero")
    state = fit_lighting(mesh, cam, cfg, I_s, I_t, ccfg, cache=cache)
    d = args.out_dir
    guidance = render_state(cache, state.eps_crt)
    iq.write_png(guidance.pixels, d / "guidance.png")
    _write_json(d / "eps_est.json", state.eps_est.to_dict())
    _write_json(d / "eps_crt.json", state.eps_crt.to_dict())
    _history_csv(d / "loss_history.csv", ["step", "total", "term_est", "term_crt"], state.loss_history)
    outputs = ["guidance.png", "eps_est.json", "eps_crt.json", "loss_history.csv"]
    snap = {"camera": cam.to_dict(), "sigma": cfg.sigma, "gamma_depth": cfg.gamma_depth,
            "correction": {k: getattr(ccfg, k) for k in ccfg.__dataclass_fields__}}
    return I_s, I_t, cache, state, guidance, outputs, snap


def cmd_correct(args):
    *_, outputs, snap = _run_correction(args)
    return outputs, snap


def cmd_pipeline(args):
    I_s, I_t, cache, state, guidance, outputs, snap = _run_correction(args)
    d = args.out_dir
    init = initial_lighting(cache, I_s, CorrectionConfig(seed=args.seed))
    _write_json(d / "estimate.json", init.to_dict())
    iq.write_png(render_state(cache, state.eps_est).pixels, d / "reconstruction.png")
    outputs += ["estimate.json", "reconstruction.png"]
    if I_t is not None:
        g = iq.read_png(d / "guidance.png")  # score what was written
        metrics = {
            "schema_version": 1,
            "guidance_vs_target": iq.MetricReport(iq.psnr(g, I_t), iq.ssim(g, I_t)).to_dict(),
            "input_vs_target": iq.MetricReport(iq.psnr(I_s, I_t), iq.ssim(I_s, I_t)).to_dict(),
        }
        _write_json(d / "metrics.json", metrics)
        outputs.append("metrics.json")
    return outputs, snap


def _sidecar_sh(side: dict, base: Path):
    sh = side.get("sh")
    if isinstance(sh, str):
        return load_sh(base / sh)
    return ShCoeffs.from_dict(sh)


def cmd_degrade(args):
    src = _require(args.input, "input directory")
    if not src.is_dir():
        raise InputError(f"--input must be a directory of target PNGs, got {src}")
    pngs = sorted(src.glob("*.png"))
    if not pngs:
        raise InputError(f"no PNG files in {src}")
    items = []
    for png in pngs:
        side_path = png.with_suffix(".json")
        if not side_path.exists():
            raise InputError(f"missing sidecar {side_path.name} for {png.name}")
        try:
            side = json.loads(side_path.read_text())
            model = load_model(src / side["model"])
            coeffs = load_coeffs(src / side["coeffs"])
            sh = _sidecar_sh(side, src)
            cam = Camera.from_dict(side["camera"]) if "camera" in side else None
        except (ValueError, KeyError, TypeError, OSError) as exc:
            raise InputError(f"invalid sidecar {side_path}: {exc}") from exc
        items.append((png, model, coeffs, sh, cam))

    kw = {"seed": args.seed}
    if args.lambda_range is not None:
        kw["lambda_sh_range"] = tuple(args.lambda_range)
    for flag, key in (("ideal_radius", "ideal_radius"), ("blur_max", "blur_max_sigma"), ("noise_max", "noise_max_sigma")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    try:
        cfg = DegradeConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    mean = mean_sh([it[3] for it in items])

    pairs_dir = args.out_dir / "pairs"
    pairs_dir.mkdir(exist_ok=True)
    records, outputs = [], []
    for index, (png, model, coeffs, sh, cam) in enumerate(items):
        I_t = _read_image(png, "target image")
        cam = cam or _camera(args, I_t.shape[:2])
        raster = _raster(args, cam)
        cache = build_cache(evaluate_model(model, coeffs), cam, raster, threads=args.threads)
        normals, _, cov = gbuffer(cache)
        mask = cov >= 0.5
        rng = pair_rng(cfg.seed, index)
        I_s, sh_in, lam, ideal = synthesize_input(I_t, normals, mask, sh, mean, cfg, rng)
        stem = png.stem
        iq.write_png(I_s.pixels, pairs_dir / f"{stem}_input.png")
        iq.write_png(I_t, pairs_dir / f"{stem}_target.png")
        brightness = float(I_s.pixels[mask].mean()) if mask.any() else 0.0
        rec = {"name": stem, "pair_index": index, "pair_seed": cfg.seed ^ index, "lambda_sh": lam,
               "ideal_point": ideal.coeffs.tolist(), "sh_input": sh_in.coeffs.tolist(),
               "sh_target": sh.coeffs.tolist(), "brightness": brightness,
               "kept": brightness >= cfg.min_brightness}
        _write_json(pairs_dir / f"{stem}.json", rec)
        records.append(rec)
        outputs += [f"pairs/{stem}_input.png", f"pairs/{stem}_target.png", f"pairs/{stem}.json"]

    kept = [r["name"] for r in records if r["kept"]]
    n_train = int(round(args.split * len(kept)))
    index_doc = {"schema_version": 1, "config": cfg.snapshot(), "mean_sh": mean.coeffs.tolist(),
                 "pairs": records, "split": {"fraction": args.split, "train": kept[:n_train], "test": kept[n_train:]}}
    _write_json(args.out_dir / "pairs.json", index_doc)
    outputs.append("pairs.json")
    return outputs, {"degrade": cfg.snapshot()}


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    report = run_suite(args.seed, renderer_scenes=args.scenes)
    _write_json(args.out_dir / "gradcheck.json", report)
    worst = max(report["max_rel_error"].values())
    log.info("worst relative error %.3g", worst)
    return ["gradcheck.json"], {"scenes": args.scenes}


def _image_pairs(a: Path, b: Path):
    if a.is_dir() != b.is_dir():
        raise InputError("--input and --target must both be files or both be directories")
    if not a.is_dir():
        return [(a.stem, a, b)]
    names = sorted(p.name for p in a.iterdir() if p.suffix.lower() in (".png", ".pfm", ".npy"))
    missing = [n for n in names if not (b / n).exists()]
    if missing:
        raise InputError(f"target directory lacks {missing[0]}")
    if not names:
        raise InputError(f"no images in {a}")
    return [(Path(n).stem, a / n, b / n) for n in names]


def cmd_metrics(args):
    a = _require(args.input, "input image/directory")
    b = _require(args.target, "target image/directory")
    mask = None
    if args.mask is not None:
        mask = _read_image(args.mask, "mask image").mean(axis=2) > 0.5
    rows = []
    for name, pa, pb in _image_pairs(a, b):
        ia, ib = _read_image(pa, "input image"), _read_image(pb, "target image")
        if ia.shape != ib.shape:
            raise InputError(f"{name}: size mismatch {ia.shape} vs {ib.shape}")
        try:
            rows.append(iq.compare(ia, ib, name, mask))
        except ValueError as exc:
            raise InputError(f"{name}: {exc}") from exc
    rep = iq.report(rows)
    _write_json(args.out_dir / "metrics.json", rep.to_dict())
    _history_csv(args.out_dir / "per_image.csv", ["name", "psnr_db", "ssim"],
                 [(r["name"], r["psnr_db"], r["ssim"]) for r in rows])
    with open(args.out_dir / "table.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["Metric", args.label])
        w.writerow(["PSNR", f"{rep.psnr_db:.2f}"])
        w.writerow(["SSIM", f"{rep.ssim:.4f}"])
    return ["metrics.json", "per_image.csv", "table.csv"], {"label": args.label, "masked": mask is not None}


def cmd_demo_train(args):
    from .demo_training import DemoConfig, train

    kw = {"seed": args.seed}
    if args.steps is not None:
        kw["steps"] = args.steps
    cfg = DemoConfig(**kw)
    hist = train(cfg)
    keys = ["step", "loss_D", "gan", "fm", "percep", "fm_percep", "total"]
    _history_csv(args.out_dir / "demo_history.csv", keys, [[h[k] for k in keys] for h in hist])
    summary = {"schema_version": 1, "steps": cfg.steps,
               "fm_percep_start": hist[0]["fm_percep"], "fm_percep_end": hist[-1]["fm_percep"],
               "reduction": 1.0 - hist[-1]["fm_percep"] / hist[0]["fm_percep"]}
    _write_json(args.out_dir / "demo.json", summary)
    return ["demo_history.csv", "demo.json"], {"demo": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}}


def cmd_replay(args):
    mpath = _require(args.manifest, "manifest")
    try:
        manifest = json.loads(mpath.read_text())
        argv = list(manifest["argv"])
    except (ValueError, KeyError) as exc:
        raise InputError(f"invalid manifest {mpath}: {exc}") from exc
    if argv and argv[0] == "replay":
        raise InputError("refusing to replay a replay manifest")
    if "--out-dir" in argv:
        i = argv.index("--out-dir")
        argv[i + 1] = str(args.out_dir)
    else:
        argv += ["--out-dir", str(args.out_dir)]
    code = main(argv)
    if code != 0:
        raise InputError(f"replayed command exited with {code}")
    return None, None


COMMANDS = {
    "render": cmd_render,
    "estimate": cmd_estimate,
    "correct": cmd_correct,
    "pipeline": cmd_pipeline,
    "degrade": cmd_degrade,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
    "demo-train": cmd_demo_train,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", type=Path, required=True)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="cap on renderer worker threads")

    geometry = argparse.ArgumentParser(add_help=False)
    geometry.add_argument("--model", help="morphable model JSON")
    geometry.add_argument("--coeffs", help="face coefficients JSON")
    geometry.add_argument("--camera", help="camera JSON (default: orthographic, centred)")
    geometry.add_argument("--size", type=_parse_size, help="image size HxW")
    geometry.add_argument("--sigma", type=float, help="rasterizer softness in pixels^2")
    geometry.add_argument("--gamma-depth", type=float, help="depth aggregation temperature")
    geometry.add_argument("--background", type=_parse_rgb, help="background colour r,g,b in [0,1]")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--input", help="input image I_s")
    fit.add_argument("--target", help="target image I_t")
    fit.add_argument("--steps", type=int)
    fit.add_argument("--lambda-crt", type=float)

    p = argparse.ArgumentParser(prog="relit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("render", parents=[common, geometry], help="render the face under given lighting")
    s.add_argument("--sh", help="SH coefficients JSON")
    sub.add_parser("estimate", parents=[common, geometry, fit], help="least-squares SH estimate of an image")
    sub.add_parser("correct", parents=[common, geometry, fit], help="bi-branch lighting correction")
    sub.add_parser("pipeline", parents=[common, geometry, fit], help="estimate, correct, emit guidance and metrics")
    s = sub.add_parser("degrade", parents=[common, geometry], help="synthesize degraded/target pairs")
    s.add_argument("--input", help="directory of target PNGs with JSON sidecars")
    s.add_argument("--split", type=float, default=0.9, help="train fraction of kept pairs")
    s.add_argument("--lambda-range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--ideal-radius", type=float)
    s.add_argument("--blur-max", type=float)
    s.add_argument("--noise-max", type=float)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    s.add_argument("--scenes", type=int, default=3)
    s = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM between images or directories")
    s.add_argument("--input")
    s.add_argument("--target")
    s.add_argument("--mask", help="optional face mask image (bright = face)")
    s.add_argument("--label", default="ours")
    s = sub.add_parser("demo-train", parents=[common], help="toy enhancement-stage training run")
    s.add_argument("--steps", type=int)
    s = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a manifest")
    s.add_argument("--manifest")
    return p


def _absolute_argv(argv):
    out = list(argv)
    for i, tok in enumerate(out[:-1]):
        if tok in PATH_FLAGS:
            out[i + 1] = str(Path(out[i + 1]).resolve())
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RELIT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    if getattr(args, "split", 0.5) is not None and not 0.0 <= getattr(args, "split", 0.5) <= 1.0:
        print("error: --split must lie in [0, 1]", file=sys.stderr)
        return 2
    start = time.time()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        outputs, snapshot = COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    if outputs is not None:
        manifest = {
            "schema_version": 1,
            "subcommand": args.command,
            "argv": _absolute_argv(argv),
            "config": snapshot,
            "seeds": {"seed": args.seed},
            "inputs": {k: str(Path(getattr(args, k)).resolve()) for k in
                       ("model", "coeffs", "sh", "input", "target", "camera", "mask")
                       if getattr(args, k, None)},
            "out_dir": str(args.out_dir.resolve()),
            "outputs": outputs,
            "toolkit_version": __version__,
            "wall_time_s": round(time.time() - start, 3),
        }
        _write_atomic(args.out_dir / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
