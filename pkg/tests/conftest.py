from pathlib import Path

import numpy as np
import pytest
import yaml

from debrisseg.synthetic import write_synthetic_dataset

# small decoder that still overfits the synthetic scenes in < 200 epochs
SMALL_MODEL = {
    "backend": "mock",
    "backend_options": {"hidden_dim": 32},
    "decoder": {"token_dim": 32, "intermediate_dim": 64, "num_heads": 4},
}


def write_config(path: Path, data_root: Path, output_root: Path, epochs: int = 200, **sections) -> Path:
    cfg = {
        "paths": {
            "output_root": str(output_root),
            "raster_dir": str(data_root / "rasters"),
            "records": str(data_root / "records.csv"),
            "annotation_dir": str(data_root / "annotations"),
        },
        "tiling": {"target_px": 64},
        "training": {"batch_size": 8, "epochs": epochs, "checkpoint_every": 100},
        "model": SMALL_MODEL,
        "evaluation": {"held_out_event": "Ida", "val_fraction": 0.2},
        "runtime": {"seed": 0, "deterministic_mode": True},
    }
    for name, values in sections.items():
        cfg.setdefault(name, {}).update(values)
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory) -> Path:
    """32 train + 8 validation (Ian/Ike) and 8 test (Ida) synthetic scenes."""
    root = tmp_path_factory.mktemp("synthetic")
    write_synthetic_dataset(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
