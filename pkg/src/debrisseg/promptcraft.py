"""Engineered visual prompts: darken and blur everything outside one density level."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotation import DatasetManifest, as_dense_mask, read_mask
from .errors import ContractError, ShapeError, TrainingPreconditionError
from .geotile import DEFAULT_TARGET_PX, read_rgb, resize_for_model, resize_labels, write_rgb

DEFAULT_BRIGHTNESS_FACTOR = 0.2
DEFAULT_BLUR_SIGMA_PX = 5.0
POOL_LEVELS = (0, 1, 2)


@dataclass
class EngineeredPrompt:
    image: np.ndarray
    level: int
    source_image_id: str


@dataclass
class PromptPool:
    pools: dict[int, list[EngineeredPrompt]] = field(
        default_factory=lambda: {lvl: [] for lvl in POOL_LEVELS}
    )
    params: dict = field(default_factory=dict)

    def ids(self, level: int) -> list[str]:
        return [p.source_image_id for p in self.pools[level]]

    def check_nonempty(self) -> None:
        empty = [f"P{lvl}" for lvl in POOL_LEVELS if not self.pools.get(lvl)]
        if empty:
            raise TrainingPreconditionError(f"empty prompt pool(s): {', '.join(empty)}")


def _background_blur(image: np.ndarray, background: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur restricted to background pixels.

    Kernel weight that would fall on foreground pixels stays on the pixel
    itself. The reflect-padded Gaussian is a symmetric stochastic operator, so
    this keeps the background mean unchanged and never leaks foreground in.
    """
    weight = background.astype(np.float64)
    kept = 1.0 - ndimage.gaussian_filter(weight, sigma, mode="reflect")
    out = np.empty(image.shape, dtype=np.float64)
    for ch in range(image.shape[2]):
        spread = ndimage.gaussian_filter(image[..., ch] * weight, sigma, mode="reflect")
        out[..., ch] = spread + kept * image[..., ch]
    return out


def engineer_prompt(
    image: np.ndarray,
    consensus: np.ndarray,
    level: int,
    brightness_factor: float = DEFAULT_BRIGHTNESS_FACTOR,
    blur_sigma_px: float = DEFAULT_BLUR_SIGMA_PX,
    source_image_id: str = "",
) -> EngineeredPrompt | None:
    """Keep pixels of ``level`` untouched; blur then darken the rest.

    Returns None when the consensus has no pixel of ``level``.
    """
    if int(level) not in (1, 2):
        raise ContractError("only density levels 1 and 2 are engineered; level 0 prompts are raw negatives")
    if not 0.0 < brightness_factor < 1.0:
        raise ContractError(f"brightness_factor must lie in (0, 1), got {brightness_factor}")
    if not blur_sigma_px > 0:
        raise ContractError(f"blur_sigma_px must be positive, got {blur_sigma_px}")
    image = np.asarray(image)
    consensus = as_dense_mask(consensus, "consensus")
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != consensus.shape:
        raise ShapeError(f"image {image.shape} and consensus {consensus.shape} do not match")

    foreground = consensus == int(level)
    if not foreground.any():
        return None
    out = image.copy()
    background = ~foreground
    if background.any():
        blurred = _background_blur(image.astype(np.float64), background, blur_sigma_px)
        dimmed = np.floor(blurred * brightness_factor + 0.5)
        out[background] = np.clip(dimmed, 0, 255).astype(np.uint8)[background]
    return EngineeredPrompt(image=out, level=int(level), source_image_id=source_image_id)


def load_model_pair(record, target_px: int):
    """Image and consensus of one record at model resolution."""
    image = resize_for_model(read_rgb(record.image_path), target_px)
    consensus = resize_labels(read_mask(record.consensus_path), (target_px, target_px))
    return image, consensus


def build_pools(
    manifest: DatasetManifest,
    brightness_factor: float = DEFAULT_BRIGHTNESS_FACTOR,
    blur_sigma_px: float = DEFAULT_BLUR_SIGMA_PX,
    target_px: int = DEFAULT_TARGET_PX,
    loader=None,
) -> PromptPool:
    """Build P0/P1/P2 from training-split records, ordered by image id.

    ``loader(record) -> (image, consensus)`` defaults to reading the record's
    files and resizing to ``target_px``.
    """
    if loader is None:
        def loader(rec):
            return load_model_pair(rec, target_px)

    pool = PromptPool(
        params={
            "brightness_factor": brightness_factor,
            "blur_sigma_px": blur_sigma_px,
            "target_px": target_px,
        }
    )
    train = sorted(manifest.split("train"), key=lambda r: r.image_id)
    missing = [r.image_id for r in train if r.is_positive is None]
    if missing:
        raise TrainingPreconditionError(f"training records without consensus: {missing}")
    for rec in train:
        image, consensus = loader(rec)
        if not rec.is_positive:
            pool.pools[0].append(EngineeredPrompt(np.asarray(image), 0, rec.image_id))
            continue
        for lvl in (1, 2):
            prompt = engineer_prompt(
                image, consensus, lvl, brightness_factor, blur_sigma_px, rec.image_id
            )
            if prompt is not None:
                pool.pools[lvl].append(prompt)
    pool.check_nonempty()
    return pool


def save_pools(pool: PromptPool, prompts_dir) -> Path:
    prompts_dir = Path(prompts_dir)
    entries = []
    for lvl in POOL_LEVELS:
        for p in pool.pools[lvl]:
            rel = Path(str(lvl)) / f"{p.source_image_id}.png"
            write_rgb(prompts_dir / rel, p.image)
            entries.append({"level": lvl, "source_image_id": p.source_image_id, "path": rel.as_posix()})
    index = prompts_dir / "index.json"
    index.write_text(
        json.dumps({"schema_version": 1, "params": pool.params, "prompts": entries}, indent=2) + "\n"
    )
    return index


def load_pools(prompts_dir) -> PromptPool:
    prompts_dir = Path(prompts_dir)
    meta = json.loads((prompts_dir / "index.json").read_text())
    pool = PromptPool(params=meta.get("params", {}))
    for e in meta["prompts"]:
        img = read_rgb(prompts_dir / e["path"])
        pool.pools[int(e["level"])].append(EngineeredPrompt(img, int(e["level"]), e["source_image_id"]))
    return pool
