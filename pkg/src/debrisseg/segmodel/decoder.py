"""Trainable CLIPSeg-style transformer decoder.

Module and parameter names mirror the published CLIPSeg decoder so that its
``rd64-uni-refined`` weights load without renaming.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ShapeError
from .backend import DEFAULT_LAYERS, EMBED_DIM, PATCH_SIZE, EncoderActivations

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class DecoderConfig:
    token_dim: int = 64
    encoder_dim: int = 768
    layers: tuple[int, ...] = DEFAULT_LAYERS
    patch_size: int = PATCH_SIZE
    num_heads: int = 4
    intermediate_dim: int = 2048
    cond_dim: int = EMBED_DIM
    refined: bool = True
    activation: str = "relu"
    conditional_layer: int = 0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.layers = tuple(int(x) for x in self.layers)
        if self.token_dim % self.num_heads:
            raise ConfigurationError("token_dim must be divisible by num_heads")
        if self.refined and (self.patch_size % 4 or self.token_dim < 2):
            raise ConfigurationError("refined upsampling needs patch_size divisible by 4")
        if self.activation not in ("relu", "quick_gelu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape

        def heads(y):
            return y.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

        q = heads(self.q_proj(x) * self.scale)
        k = heads(self.k_proj(x))
        v = heads(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-1, -2), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, activation: str):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.activation = activation

    def forward(self, x):
        x = self.fc1(x)
        x = F.relu(x) if self.activation == "relu" else x * torch.sigmoid(1.702 * x)
        return self.fc2(x)


class DecoderLayer(nn.Module):
    """Post-norm transformer block."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.self_attn = Attention(cfg.token_dim, cfg.num_heads)
        self.layer_norm1 = nn.LayerNorm(cfg.token_dim, eps=cfg.layer_norm_eps)
        self.mlp = MLP(cfg.token_dim, cfg.intermediate_dim, cfg.activation)
        self.layer_norm2 = nn.LayerNorm(cfg.token_dim, eps=cfg.layer_norm_eps)

    def forward(self, x):
        x = self.layer_norm1(x + self.self_attn(x))
        return self.layer_norm2(x + self.mlp(x))


class SegDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.config = cfg
        d = cfg.token_dim
        self.film_mul = nn.Linear(cfg.cond_dim, d)
        self.film_add = nn.Linear(cfg.cond_dim, d)
        if cfg.refined:
            k = cfg.patch_size // 4
            self.transposed_convolution = nn.Sequential(
                nn.Conv2d(d, d, kernel_size=3, padding=1),
                nn.ReLU(),
                nn.ConvTranspose2d(d, d // 2, kernel_size=k, stride=k),
                nn.ReLU(),
                nn.ConvTranspose2d(d // 2, 1, kernel_size=k, stride=k),
            )
        else:
            self.transposed_convolution = nn.ConvTranspose2d(
                d, 1, kernel_size=cfg.patch_size, stride=cfg.patch_size
            )
        self.reduces = nn.ModuleList(nn.Linear(cfg.encoder_dim, d) for _ in cfg.layers)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in cfg.layers)

    def forward(self, activations: EncoderActivations, cond: torch.Tensor) -> torch.Tensor:
        """Return logits of shape (B, H, W) for B queries and B conditional embeddings."""
        cfg = self.config
        if set(activations.layers) != set(cfg.layers):
            raise ShapeError(f"decoder expects layers {cfg.layers}, got {activations.layers}")
        if cond.ndim == 1:
            cond = cond.unsqueeze(0)
        cond = cond.to(self.film_mul.weight.dtype)
        if cond.shape[-1] != cfg.cond_dim:
            raise ShapeError(f"conditional embedding has dim {cond.shape[-1]}, expected {cfg.cond_dim}")
        b = cond.shape[0]
        if activations.batch_size != b:
            raise ShapeError(f"{activations.batch_size} queries for {b} conditional embeddings")
        side = activations.image_px // cfg.patch_size
        n_tok = 1 + side * side

        out = None
        # deepest captured layer enters first
        for i, layer_id in enumerate(sorted(cfg.layers, reverse=True)):
            act = activations.per_layer[layer_id]
            if act.shape[1] != n_tok or act.shape[2] != cfg.encoder_dim:
                raise ShapeError(
                    f"layer {layer_id}: tokens {tuple(act.shape[1:])} != ({n_tok}, {cfg.encoder_dim})"
                )
            act = act.to(self.film_mul.weight.dtype)
            reduced = self.reduces[i](act)
            out = reduced if out is None else out + reduced
            if i == cfg.conditional_layer:
                out = self.film_mul(cond)[:, None, :] * out + self.film_add(cond)[:, None, :]
            out = self.layers[i](out)

        grid = out[:, 1:, :].transpose(1, 2).reshape(b, cfg.token_dim, side, side)
        return self.transposed_convolution(grid).squeeze(1)

    def load_published(self, state: dict[str, torch.Tensor]) -> None:
        """Load a published CLIPSeg decoder state dict (``decoder.`` prefix optional)."""
        stripped = {k[len("decoder."):] if k.startswith("decoder.") else k: v for k, v in state.items()}
        self.load_state_dict(stripped, strict=True)


def build_decoder(cfg: DecoderConfig | None = None, seed: int = 0, dtype=torch.float32) -> SegDecoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegDecoder(cfg).to(dtype)


def decode(decoder: SegDecoder, activations: EncoderActivations, cond: torch.Tensor) -> torch.Tensor:
    return decoder(activations, cond)


# ---------------------------------------------------------------------------
# checkpoints: npz of named float arrays plus a JSON metadata entry

_META_KEY = "__metadata__"


def save_checkpoint(decoder: SegDecoder, path, extra: dict | None = None) -> Path:
    """Atomically write decoder weights; an interrupted write leaves the old file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "token_dim": decoder.config.token_dim,
        "layers": list(decoder.config.layers),
        "patch_size": decoder.config.patch_size,
        "decoder_config": decoder.config.to_dict(),
        **(extra or {}),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in decoder.state_dict().items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(npz[_META_KEY].tobytes().decode())
        arrays = {k: npz[k] for k in npz.files if k != _META_KEY}
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
    return meta, arrays


def load_checkpoint(path, dtype=torch.float32) -> tuple[SegDecoder, dict]:
    meta, arrays = read_checkpoint(path)
    cfg_d = dict(meta["decoder_config"])
    cfg_d["layers"] = tuple(cfg_d["layers"])
    decoder = SegDecoder(DecoderConfig(**cfg_d)).to(dtype)
    decoder.load_state_dict({k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()})
    return decoder, meta
