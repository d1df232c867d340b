"""Portrait lighting correction toolkit: SH-lit soft rasterizer, bi-branch lighting fits,
degradation pipeline, toy enhancement blocks and image metrics."""

__version__ = "0.1.0"
