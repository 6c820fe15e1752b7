"""Decoder fine-tuning with text/visual interpolated conditioning and BCE loss."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import DENSITY_PROMPTS
from .annotation import DatasetManifest, binarize
from .errors import (
    CheckpointWriteError,
    ConfigurationError,
    ContractError,
    NonFiniteLossError,
    ShapeError,
    TrainingPreconditionError,
)
from .evalsuite import DEBRIS_CLASSES, confusion, dice, sum_counts
from .promptcraft import PromptPool, load_model_pair
from .segmodel.assemble import assemble_levels, interpolate_embeddings, level_logits
from .segmodel.backend import EncoderActivations
from .segmodel.decoder import SegDecoder, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 2000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    mixed_precision: bool = True
    deterministic: bool = False
    level_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    checkpoint_every: int = 100
    device: str = "cpu"

    def __post_init__(self):
        self.level_weights = tuple(float(w) for w in self.level_weights)
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigurationError("need 0 < lr_end <= lr_start")
        if len(self.level_weights) != 3 or min(self.level_weights) < 0 or sum(self.level_weights) <= 0:
            raise ConfigurationError("level_weights must be three non-negative weights")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["level_weights"] = list(self.level_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainSample:
    query_image_id: str
    level: int
    text_prompt: str
    visual_prompt_id: str
    alpha: float
    gt_binary: np.ndarray


@dataclass
class CheckpointRecord:
    epoch: int
    val_debris_dice: float
    checkpoint_path: str | None = None


# ---------------------------------------------------------------------------
# schedule and loss


def cosine_lr(step: int, total_steps: int, lr_start: float = 1e-3, lr_end: float = 1e-4) -> float:
    if total_steps < 1:
        raise ContractError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def bce_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Mean binary cross-entropy on raw logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``, which never exponentiates a
    positive number.
    """
    gt = torch.as_tensor(gt, dtype=logits.dtype, device=logits.device)
    if gt.shape != logits.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(gt.shape)} differ")
    loss = logits.clamp(min=0) - logits * gt + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


# ---------------------------------------------------------------------------
# sampling


def _draw(query_ids, consensus, pools: PromptPool, rng: np.random.Generator, weights) -> list[TrainSample]:
    probs = np.asarray(weights, dtype=np.float64)
    probs = probs / probs.sum()
    out = []
    for qid in query_ids:
        level = int(rng.choice(3, p=probs))
        candidates = pools.ids(level)
        others = [c for c in candidates if c != qid]
        # self-prompting only when the query is the sole pool member
        pick_from = others or candidates
        prompt_id = pick_from[int(rng.integers(len(pick_from)))]
        alpha = float(rng.uniform(0.0, 1.0))
        out.append(
            TrainSample(
                query_image_id=qid,
                level=level,
                text_prompt=DENSITY_PROMPTS[level],
                visual_prompt_id=prompt_id,
                alpha=alpha,
                gt_binary=binarize(consensus[qid], level),
            )
        )
    return out


def sample_training_batch(
    train_ids: Sequence[str],
    consensus: Mapping[str, np.ndarray],
    pools: PromptPool,
    rng: np.random.Generator,
    batch_size: int,
    level_weights=(1.0, 1.0, 1.0),
) -> list[TrainSample]:
    """Draw ``batch_size`` (query, level, prompt, alpha) samples; queries with replacement."""
    if not train_ids:
        raise TrainingPreconditionError("train split is empty")
    pools.check_nonempty()
    ids = list(train_ids)
    picks = rng.integers(len(ids), size=batch_size)
    return _draw([ids[i] for i in picks], consensus, pools, rng, level_weights)


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingSet:
    """Model-resolution images and consensus masks for train and validation."""

    images: dict[str, np.ndarray]
    consensus: dict[str, np.ndarray]
    train_ids: list[str]
    val_ids: list[str]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, target_px: int, loader=None) -> "TrainingSet":
        loader = loader or (lambda rec: load_model_pair(rec, target_px))
        images, consensus = {}, {}
        train = sorted(r.image_id for r in manifest.split("train"))
        val = sorted(r.image_id for r in manifest.split("validation"))
        by_id = manifest.by_id()
        for iid in train + val:
            images[iid], consensus[iid] = loader(by_id[iid])
        return cls(images, consensus, train, val)


class EncodingCache:
    """Memoizes frozen-encoder outputs; valid because the encoders never change."""

    def __init__(self, backend, images: Mapping[str, np.ndarray], pools: PromptPool):
        self.backend = backend
        self.images = images
        self.pools = pools
        self._acts: dict[str, EncoderActivations] = {}
        self._prompt_emb: dict[tuple[int, str], torch.Tensor] = {}
        self.text = {lvl: backend.encode_text(p).float().reshape(-1) for lvl, p in DENSITY_PROMPTS.items()}

    def activations(self, image_id: str) -> EncoderActivations:
        if image_id not in self._acts:
            _, acts = self.backend.encode_image(self.images[image_id])
            self._acts[image_id] = acts
        return self._acts[image_id]

    def prompt_embedding(self, level: int, image_id: str) -> torch.Tensor:
        key = (level, image_id)
        if key not in self._prompt_emb:
            for p in self.pools.pools[level]:
                if p.source_image_id == image_id:
                    emb, _ = self.backend.encode_image(p.image)
                    self._prompt_emb[key] = emb.float().reshape(-1)
                    break
            else:
                raise KeyError(f"no prompt {image_id!r} in P{level}")
        return self._prompt_emb[key]


# ---------------------------------------------------------------------------
# training


def evaluate_dice(decoder: SegDecoder, cache: EncodingCache, ids, consensus) -> float:
    """Debris-class Dice of text-conditioned predictions, pooled over ``ids``."""
    was_training = decoder.training
    decoder.eval()
    try:
        counts = []
        for iid in ids:
            logits = level_logits(decoder, cache.activations(iid), cache.text)
            counts.append(confusion(assemble_levels(logits.float()), consensus[iid]))
    finally:
        decoder.train(was_training)
    return float(dice(sum_counts(counts), DEBRIS_CLASSES))


def predict_ids(decoder: SegDecoder, cache: EncodingCache, ids) -> dict[str, np.ndarray]:
    decoder.eval()
    return {iid: assemble_levels(level_logits(decoder, cache.activations(iid), cache.text).float()) for iid in ids}


def _atomic_torch_save(obj, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(obj, fh)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@contextlib.contextmanager
def _deterministic(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _append_log(path: Path | None, entry: dict) -> None:
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def train(
    config: TrainConfig,
    data: TrainingSet,
    pools: PromptPool,
    backend,
    decoder: SegDecoder,
    checkpoint_dir=None,
    log_path=None,
    resume: bool = False,
    history: list | None = None,
) -> list[CheckpointRecord]:
    """Optimize decoder parameters only; returns one record per epoch.

    With ``checkpoint_dir`` set, weights are written whenever validation
    Dice improves and every ``config.checkpoint_every`` epochs, and a
    ``resume.pt`` state allows ``resume=True`` to continue an interrupted run.
    """
    if not data.train_ids:
        raise TrainingPreconditionError("train split is empty")
    if not data.val_ids:
        raise TrainingPreconditionError("validation split is empty; checkpoint selection needs it")
    pools.check_nonempty()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_path = Path(log_path) if log_path is not None else None
    device = torch.device(config.device)
    decoder.to(device)

    opt = torch.optim.AdamW(decoder.parameters(), lr=config.lr_start, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(data.train_ids) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    records: list[CheckpointRecord] = []
    best = -math.inf
    start_epoch, step = 0, 0
    last_good = None

    if resume:
        if checkpoint_dir is None or not (checkpoint_dir / "resume.pt").is_file():
            raise TrainingPreconditionError("nothing to resume: no resume.pt in checkpoint dir")
        state = torch.load(checkpoint_dir / "resume.pt", weights_only=False)
        decoder.load_state_dict(state["decoder"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        start_epoch, step, best = state["epoch"], state["step"], state["best"]
        records = [CheckpointRecord(**r) for r in state["records"]]
        last_good = state.get("last_good")

    if config.epochs == 0:
        return records

    cache = EncodingCache(backend, data.images, pools)
    use_amp = config.mixed_precision and not config.deterministic and device.type == "cuda"
    digest_before = backend.weights_digest()

    with _deterministic(config.deterministic):
        decoder.train()
        for epoch in range(start_epoch, config.epochs):
            order = [data.train_ids[i] for i in rng.permutation(len(data.train_ids))]
            samples = _draw(order, data.consensus, pools, rng, config.level_weights)
            epoch_losses = []
            for b in range(steps_per_epoch):
                batch = samples[b * config.batch_size : (b + 1) * config.batch_size]
                lr = cosine_lr(step, total_steps, config.lr_start, config.lr_end)
                for group in opt.param_groups:
                    group["lr"] = lr
                acts = EncoderActivations.stack([cache.activations(s.query_image_id) for s in batch])
                acts = EncoderActivations(
                    {k: v.to(device) for k, v in acts.per_layer.items()}, acts.image_px, acts.patch_size
                )
                cond = torch.stack(
                    [
                        interpolate_embeddings(
                            cache.text[s.level], cache.prompt_embedding(s.level, s.visual_prompt_id), s.alpha
                        )
                        for s in batch
                    ]
                ).to(device)
                gt = torch.from_numpy(np.stack([s.gt_binary for s in batch])).to(device)
                with torch.autocast(device.type, enabled=use_amp):
                    logits = decoder(acts, cond)
                loss = bce_loss(logits.float(), gt)
                if not torch.isfinite(loss.detach()):
                    raise NonFiniteLossError(epoch, b, lr, loss.detach().item())
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                loss_value = float(loss.detach())
                epoch_losses.append(loss_value)
                entry = {"epoch": epoch, "step": step, "lr": lr, "loss": loss_value, "val_dice": None}
                step += 1
                if b == steps_per_epoch - 1:
                    entry["val_dice"] = evaluate_dice(decoder, cache, data.val_ids, data.consensus)
                _append_log(log_path, entry)
                if history is not None:
                    history.append(entry)

            val_dice = entry["val_dice"]
            rec = CheckpointRecord(epoch=epoch, val_debris_dice=val_dice)
            improved = val_dice > best
            if improved:
                best = val_dice
            periodic = config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0
            if checkpoint_dir is not None and (improved or periodic or epoch == config.epochs - 1):
                path = checkpoint_dir / f"epoch_{epoch:05d}.npz"
                try:
                    save_checkpoint(decoder, path, {"epoch": epoch, "val_debris_dice": val_dice})
                except OSError as exc:
                    raise CheckpointWriteError(path, last_good, exc) from exc
                rec.checkpoint_path = str(path)
                last_good = str(path)
            records.append(rec)
            log.info("epoch %d  loss %.5f  val dice %.4f", epoch, float(np.mean(epoch_losses)), val_dice)
            if checkpoint_dir is not None:
                state = {
                    "epoch": epoch + 1,
                    "step": step,
                    "best": best,
                    "decoder": decoder.state_dict(),
                    "optimizer": opt.state_dict(),
                    "rng": rng.bit_generator.state,
                    "records": [dataclasses.asdict(r) for r in records],
                    "last_good": last_good,
                }
                try:
                    _atomic_torch_save(state, checkpoint_dir / "resume.pt")
                except OSError as exc:
                    raise CheckpointWriteError(checkpoint_dir / "resume.pt", last_good, exc) from exc

    if backend.weights_digest() != digest_before:
        raise RuntimeError("frozen encoder weights changed during training")
    return records


def select_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest validation Dice; the earliest epoch wins ties."""
    if not records:
        raise ContractError("no checkpoint records to select from")
    return min(records, key=lambda r: (-r.val_debris_dice, r.epoch))
