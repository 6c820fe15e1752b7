"""Dense density labels, multi-annotator consensus and dataset manifests."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import DENSITY_PROMPTS
from .errors import (
    ConfigurationError,
    ContractError,
    EmptyInputError,
    IncompleteError,
    MaskEncodingError,
    ShapeError,
)

MANIFEST_SCHEMA_VERSION = 1
SPLITS = ("train", "validation", "test")
CONSENSUS_SUFFIX = "consensus"


class DensityLevel(IntEnum):
    NO_DEBRIS = 0
    LOW_DENSITY = 1
    HIGH_DENSITY = 2

    @property
    def prompt(self) -> str:
        return DENSITY_PROMPTS[int(self)]


def as_dense_mask(labels, name="mask") -> np.ndarray:
    """Validate an HxW label grid and return it as uint8."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected an HxW grid, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 2):
        raise MaskEncodingError(f"{name}: labels outside {{0,1,2}}")
    return arr.astype(np.uint8, copy=False)


@dataclass
class AnnotationStack:
    stack: np.ndarray  # H x W x N
    annotator_ids: list[str]

    def __post_init__(self):
        stack = np.asarray(self.stack)
        if stack.ndim != 3:
            raise ShapeError(f"annotation stack must be HxWxN, got shape {stack.shape}")
        if stack.shape[2] == 0:
            raise EmptyInputError("annotation stack has no annotators")
        if len(self.annotator_ids) != stack.shape[2]:
            raise ShapeError(
                f"{len(self.annotator_ids)} annotator ids for {stack.shape[2]} slices"
            )
        if len(set(self.annotator_ids)) != len(self.annotator_ids):
            raise ContractError("annotator ids must be distinct")
        if stack.size and (stack.min() < 0 or stack.max() > 2):
            raise MaskEncodingError("annotation stack has labels outside {0,1,2}")
        self.stack = stack

    @classmethod
    def from_masks(cls, masks: Sequence[np.ndarray], annotator_ids: Sequence[str]) -> "AnnotationStack":
        if not masks:
            raise EmptyInputError("annotation stack has no annotators")
        shapes = {np.shape(m) for m in masks}
        if len(shapes) != 1:
            raise ShapeError(f"annotator masks disagree in shape: {sorted(shapes)}")
        return cls(np.stack([as_dense_mask(m) for m in masks], axis=-1), list(annotator_ids))

    @property
    def n_annotators(self) -> int:
        return self.stack.shape[2]


def aggregate_consensus(stack: AnnotationStack) -> np.ndarray:
    """Per-pixel ceiling of the mean annotator label.

    Uses the standard ceiling, so an integer mean maps to itself. Computed in
    integer arithmetic as ``(sum + N - 1) // N``.
    """
    if not isinstance(stack, AnnotationStack):
        stack = AnnotationStack(np.asarray(stack), [str(i) for i in range(np.shape(stack)[-1])])
    n = stack.n_annotators
    total = stack.stack.astype(np.int64).sum(axis=2)
    return ((total + n - 1) // n).astype(np.uint8)


def binarize(mask: np.ndarray, level: int) -> np.ndarray:
    if int(level) not in (0, 1, 2):
        raise ContractError(f"density level must be 0, 1 or 2, got {level}")
    return (as_dense_mask(mask) == int(level)).astype(np.uint8)


def classify_positive(consensus: np.ndarray) -> bool:
    return bool(np.any(as_dense_mask(consensus) != 0))


# ---------------------------------------------------------------------------
# mask files


def read_mask(path) -> np.ndarray:
    """Load a single-channel 8-bit label image; any value outside {0,1,2} is fatal."""
    path = Path(path)
    img = Image.open(path)
    if img.mode not in ("L", "P"):
        raise MaskEncodingError(f"{path}: expected a single-channel 8-bit mask, got mode {img.mode}")
    arr = np.asarray(img, dtype=np.uint8)
    bad = np.setdiff1d(np.unique(arr), [0, 1, 2])
    if bad.size:
        raise MaskEncodingError(f"{path}: mask values {bad.tolist()} outside {{0,1,2}}")
    return arr.copy()


def write_mask(path, mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_dense_mask(mask), mode="L").save(path)
    return path


def annotation_filename(image_id: str, annotator_id: str) -> str:
    return f"{image_id}__{annotator_id}.png"


def consensus_filename(image_id: str) -> str:
    return annotation_filename(image_id, CONSENSUS_SUFFIX)


def find_annotations(annotation_dir, image_id: str) -> dict[str, Path]:
    """Map annotator id to mask path for one image, consensus files excluded."""
    out = {}
    for p in sorted(Path(annotation_dir).glob(f"{image_id}__*.png")):
        annotator = p.stem[len(image_id) + 2 :]
        if annotator and annotator != CONSENSUS_SUFFIX and "__" not in annotator:
            out[annotator] = p
    return out


def load_annotation_stack(paths: dict[str, Path]) -> AnnotationStack:
    ids = sorted(paths)
    return AnnotationStack.from_masks([read_mask(paths[a]) for a in ids], ids)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetRecord:
    image_id: str
    event: str
    region: str
    image_path: str
    split: str | None = None
    is_positive: bool | None = None
    annotation_paths: list[str] = field(default_factory=list)
    consensus_path: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DatasetManifest:
    records: list[DatasetRecord]
    held_out_event: str

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ContractError(f"duplicate image ids in manifest: {dupes}")
        leaked = [
            r.image_id
            for r in self.records
            if r.event == self.held_out_event and r.split in ("train", "validation")
        ]
        if leaked:
            raise ContractError(f"held-out event records outside the test split: {leaked}")

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, DatasetRecord]:
        return {r.image_id: r for r in self.records}

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "held_out_event": self.held_out_event,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported manifest schema_version {version!r}")
        return cls([DatasetRecord.from_dict(r) for r in d["records"]], d["held_out_event"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def split_by_event(
    records: Iterable[DatasetRecord],
    held_out_event: str,
    val_fraction: float = 0.15,
    seed: int = 0,
) -> DatasetManifest:
    """Send every held-out event record to test; shuffle the rest into train/validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    records = sorted(records, key=lambda r: r.image_id)
    held = [r for r in records if r.event == held_out_event]
    rest = [r for r in records if r.event != held_out_event]
    if not held:
        raise ConfigurationError(f"no records of held-out event {held_out_event!r}")
    if not rest:
        raise ConfigurationError("no records outside the held-out event to train on")

    order = np.random.default_rng(seed).permutation(len(rest))
    n_val = int(round(val_fraction * len(rest)))
    if len(rest) > 1:
        n_val = min(max(n_val, 1), len(rest) - 1)
    else:
        n_val = 0
    val_idx = set(order[:n_val].tolist())
    out = [dataclasses.replace(r, split="test") for r in held]
    out += [
        dataclasses.replace(r, split="validation" if i in val_idx else "train")
        for i, r in enumerate(rest)
    ]
    out.sort(key=lambda r: r.image_id)
    return DatasetManifest(out, held_out_event)


def class_balance_report(manifest: DatasetManifest) -> dict:
    missing = [r.image_id for r in manifest.records if r.is_positive is None]
    if missing:
        raise IncompleteError("records without consensus", missing)
    counts = {s: {"positive": 0, "negative": 0} for s in SPLITS}
    for r in manifest.records:
        if r.split not in counts:
            raise IncompleteError("records without a split", [r.image_id])
        counts[r.split]["positive" if r.is_positive else "negative"] += 1
    counts["test_subsets"] = {
        "debris_positive": counts["test"]["positive"],
        "debris_free": counts["test"]["negative"],
        "total": counts["test"]["positive"] + counts["test"]["negative"],
    }
    return counts
