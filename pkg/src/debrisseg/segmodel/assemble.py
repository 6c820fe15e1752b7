"""Conditional-embedding interpolation and multi-class label assembly."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .. import DENSITY_PROMPTS
from ..errors import ContractError, ShapeError
from .backend import EMBED_DIM, EncoderActivations


def interpolate_embeddings(e_t, e_v, alpha: float):
    """Blend text and visual embeddings: ``alpha * e_t + (1 - alpha) * e_v``.

    Works on numpy arrays or torch tensors; the endpoints return exact copies.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if tuple(e_t.shape) != tuple(e_v.shape) or e_t.shape[-1] != EMBED_DIM:
        raise ShapeError(f"embeddings must both be {EMBED_DIM}-d, got {tuple(e_t.shape)} and {tuple(e_v.shape)}")
    if alpha == 1.0:
        return e_t.clone() if isinstance(e_t, torch.Tensor) else np.array(e_t, copy=True)
    if alpha == 0.0:
        return e_v.clone() if isinstance(e_v, torch.Tensor) else np.array(e_v, copy=True)
    return alpha * e_t + (1.0 - alpha) * e_v


def assemble_levels(logits, tie_break: str = "lowest") -> np.ndarray:
    """Per-pixel argmax over a (3, H, W) stack of level logits."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if arr.ndim < 1 or arr.shape[0] != 3:
        raise ShapeError(f"expected logits stacked over 3 levels, got shape {arr.shape}")
    if tie_break == "lowest":
        return np.argmax(arr, axis=0).astype(np.uint8)
    if tie_break == "highest":
        return (2 - np.argmax(arr[::-1], axis=0)).astype(np.uint8)
    raise ContractError(f"unknown tie_break {tie_break!r}")


@torch.no_grad()
def level_logits(decoder, activations: EncoderActivations, cond_per_level: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """Decode one query against all three level embeddings as a batch of 3."""
    missing = [lvl for lvl in (0, 1, 2) if lvl not in cond_per_level]
    if missing:
        raise ContractError(f"missing conditional embeddings for levels {missing}")
    if activations.batch_size != 1:
        raise ShapeError("level_logits takes activations of a single query")
    conds = torch.stack([torch.as_tensor(cond_per_level[lvl]).reshape(-1) for lvl in (0, 1, 2)])
    conds = conds.to(decoder.film_mul.weight.dtype)
    return decoder(activations.repeat(3), conds)


def segment_multiclass(query, cond_per_level, backend, decoder, tie_break: str = "lowest") -> np.ndarray:
    """Label every pixel of ``query`` with the level whose logit is highest."""
    _, acts = backend.encode_image(query)
    was_training = decoder.training
    decoder.eval()
    try:
        logits = level_logits(decoder, acts, cond_per_level)
    finally:
        decoder.train(was_training)
    return assemble_levels(logits, tie_break)


def text_conditions(backend, cache_path=None) -> dict[int, torch.Tensor]:
    """Text-only level embeddings, cached on disk by backend fingerprint."""
    key = backend.fingerprint()
    cache = {}
    if cache_path is not None and Path(cache_path).is_file():
        cache = json.loads(Path(cache_path).read_text())
    entry = cache.get(key, {})
    out, dirty = {}, False
    for lvl, prompt in DENSITY_PROMPTS.items():
        if prompt in entry:
            out[lvl] = torch.tensor(entry[prompt], dtype=torch.float32)
        else:
            out[lvl] = backend.encode_text(prompt).float()
            entry[prompt] = [float(v) for v in out[lvl].tolist()]
            dirty = True
    if cache_path is not None and dirty:
        cache[key] = entry
        Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
        Path(cache_path).write_text(json.dumps(cache, indent=1) + "\n")
    return out
