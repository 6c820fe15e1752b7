"""Debris segmentation toolkit for post-hurricane aerial RGB imagery."""

__version__ = "0.1.0"

DENSITY_PROMPTS = {
    0: "no debris",
    1: "debris at low-density",
    2: "debris at high-density",
}
LEVELS = (0, 1, 2)
