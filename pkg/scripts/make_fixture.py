"""Regenerate the shipped 64x64 end-to-end fixture in src/relit/fixtures/.

The target is rendered from the synthetic face under a known lighting; the
input is produced by the degradation pipeline (extrapolated lighting,
reshading, darkness-driven blur and noise).

    python scripts/make_fixture.py [--out DIR]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from relit import image_quality as iq
from relit.dataset_synthesis import DegradeConfig, build_pair, mean_sh, pair_rng
from relit.fixtures import FIXTURE_DIR
from relit.morphable_model import FaceCoefficients, make_synthetic_model, quaternion_to_matrix, save_coeffs, save_model
from relit.sh_lighting import directional_sh, save_sh
from relit.soft_rasterizer import Camera, RasterConfig

SEED = 7


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=FIXTURE_DIR)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(SEED)
    model = make_synthetic_model(12, SEED)
    coeffs = FaceCoefficients(
        alpha=0.3 * rng.standard_normal(model.n_id),
        beta=0.2 * rng.standard_normal(model.n_exp),
        zeta=0.3 * rng.standard_normal(model.n_tex),
        rotation=quaternion_to_matrix([1.0, 0.05, -0.08, 0.02]),
        translation=np.array([0.02, -0.01, 0.0]),
    )
    cam = Camera(64, 64)
    raster = RasterConfig.for_camera(cam)

    ideal_set = [directional_sh(rng.normal([0.0, 0.3, 1.0], 0.25), rng.uniform(0.6, 0.8), rng.uniform(0.4, 0.5))
                 for _ in range(8)]
    mean = mean_sh(ideal_set)
    sh_target = ideal_set[0]
    cfg = DegradeConfig(seed=SEED, lambda_sh_range=(1.5, 1.5), blur_max_sigma=1.0, noise_max_sigma=0.02)
    pair = build_pair(model, coeffs, cam, sh_target, mean, cfg, pair_rng(SEED, 0), raster, 0)

    save_model(model, args.out / "model.json")
    save_coeffs(coeffs, args.out / "coeffs.json")
    save_sh(sh_target, args.out / "sh_target.json")
    save_sh(pair.sh_input, args.out / "sh_input.json")
    iq.write_png(pair.input_image.pixels, args.out / "input.png")
    iq.write_png(pair.target_image.pixels, args.out / "target.png")
    (args.out / "camera.json").write_text(json.dumps(cam.to_dict(), indent=1) + "\n")
    (args.out / "fixture.json").write_text(json.dumps({
        "schema_version": 1, "seed": SEED, "lambda_sh": pair.lambda_used,
        "degrade": cfg.snapshot(), "sigma": raster.sigma, "gamma_depth": raster.gamma_depth,
        "psnr_input_vs_target": iq.psnr(pair.input_image, pair.target_image),
    }, indent=1) + "\n")
    print(f"fixture written to {args.out} (lambda_sh={pair.lambda_used:.3f}, "
          f"PSNR(I_s, I_t)={iq.psnr(pair.input_image, pair.target_image):.2f} dB)")


if __name__ == "__main__":
    main()
