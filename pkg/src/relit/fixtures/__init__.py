"""Shipped synthetic end-to-end fixture (see scripts/make_fixture.py)."""
from pathlib import Path

FIXTURE_DIR = Path(__file__).resolve().parent


def path(name: str) -> Path:
    return FIXTURE_DIR / name
