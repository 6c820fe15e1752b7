"""Frozen encoder backends.

A backend maps query/prompt images to a global 512-d embedding plus token
activations from selected transformer layers, and text prompts to 512-d
embeddings. Backends hold no trainable state.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from ..errors import BackendError, ShapeError

log = logging.getLogger(__name__)

EMBED_DIM = 512
PATCH_SIZE = 16
DEFAULT_LAYERS = (3, 7, 9)


@dataclass
class EncoderActivations:
    """Token activations (B, 1 + (H/P)*(W/P), d_enc) per captured layer, CLS first."""

    per_layer: dict[int, torch.Tensor]
    image_px: int
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        n_tok = 1 + (self.image_px // self.patch_size) ** 2
        for layer, t in self.per_layer.items():
            if t.ndim != 3 or t.shape[1] != n_tok:
                raise ShapeError(
                    f"layer {layer}: expected (B, {n_tok}, d) tokens for a "
                    f"{self.image_px}px query, got {tuple(t.shape)}"
                )

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_layer))

    @property
    def batch_size(self) -> int:
        return next(iter(self.per_layer.values())).shape[0]

    def select(self, index) -> "EncoderActivations":
        return EncoderActivations(
            {k: v[index] for k, v in self.per_layer.items()}, self.image_px, self.patch_size
        )

    def repeat(self, n: int) -> "EncoderActivations":
        return EncoderActivations(
            {k: v.repeat_interleave(n, dim=0) for k, v in self.per_layer.items()},
            self.image_px,
            self.patch_size,
        )

    @staticmethod
    def stack(items: Sequence["EncoderActivations"]) -> "EncoderActivations":
        first = items[0]
        return EncoderActivations(
            {k: torch.cat([it.per_layer[k] for it in items]) for k in first.per_layer},
            first.image_px,
            first.patch_size,
        )


class EncoderBackend(Protocol):
    embed_dim: int
    hidden_dim: int
    layers: tuple[int, ...]

    def encode_image(self, images) -> tuple[torch.Tensor, EncoderActivations]: ...

    def encode_text(self, prompts: Sequence[str] | str) -> torch.Tensor: ...

    def fingerprint(self) -> str: ...

    def weights_digest(self) -> str: ...


def _as_image_batch(images, patch_size: int) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (B,)H,W,3 RGB images, got shape {arr.shape}")
    h, w = arr.shape[1:3]
    if h != w:
        raise ShapeError(f"query images must be square, got {h}x{w}")
    if h % patch_size:
        raise ShapeError(f"image side {h} is not divisible by patch size {patch_size}")
    return arr


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class MockBackend:
    """Deterministic stand-in for the CLIP encoders.

    Each captured layer is ``tanh`` of a fixed random projection of the
    flattened 16x16 RGB patches; the CLS token is the mean patch token. The
    image embedding projects the mean deepest-layer token to 512 dims and text
    embeddings are seeded from a hash of the prompt. All outputs are
    L2-normalized like CLIP embeddings.
    """

    def __init__(self, hidden_dim: int = 64, layers=DEFAULT_LAYERS, seed: int = 0,
                 patch_size: int = PATCH_SIZE):
        self.hidden_dim = int(hidden_dim)
        self.layers = tuple(sorted(int(x) for x in layers))
        self.seed = int(seed)
        self.patch_size = int(patch_size)
        self.embed_dim = EMBED_DIM
        gen = torch.Generator().manual_seed(self.seed)
        n_in = 3 * self.patch_size**2
        self._weights: dict[str, torch.Tensor] = {}
        for layer in self.layers:
            gain = 1.0 + 0.25 * layer / max(self.layers)
            self._weights[f"proj{layer}"] = torch.randn(n_in, self.hidden_dim, generator=gen) * (gain * 4.0 / n_in**0.5)
            self._weights[f"bias{layer}"] = torch.randn(self.hidden_dim, generator=gen) * 0.1
        self._weights["embed"] = torch.randn(self.hidden_dim, EMBED_DIM, generator=gen) / self.hidden_dim**0.5
        for t in self._weights.values():
            t.requires_grad_(False)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return dict(self._weights)

    def weights_digest(self) -> str:
        return tensor_digest(self._weights)

    def fingerprint(self) -> str:
        return f"mock-d{self.hidden_dim}-p{self.patch_size}-s{self.seed}-{self.weights_digest()[:16]}"

    @torch.no_grad()
    def encode_image(self, images) -> tuple[torch.Tensor, EncoderActivations]:
        arr = _as_image_batch(images, self.patch_size)
        b, h, w, _ = arr.shape
        p = self.patch_size
        x = torch.from_numpy(arr.astype(np.float32) / 255.0 - 0.5)
        patches = (
            x.reshape(b, h // p, p, w // p, p, 3)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, (h // p) * (w // p), p * p * 3)
        )
        per_layer = {}
        for layer in self.layers:
            tok = torch.tanh(patches @ self._weights[f"proj{layer}"] + self._weights[f"bias{layer}"])
            per_layer[layer] = torch.cat([tok.mean(dim=1, keepdim=True), tok], dim=1)
        deepest = per_layer[self.layers[-1]][:, 0]
        emb = torch.nn.functional.normalize(deepest @ self._weights["embed"], dim=-1)
        return emb, EncoderActivations(per_layer, h, p)

    @torch.no_grad()
    def encode_text(self, prompts) -> torch.Tensor:
        single = isinstance(prompts, str)
        prompts = [prompts] if single else list(prompts)
        out = []
        for text in prompts:
            if not text:
                log.warning("encoding an empty text prompt")
            digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
            gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
            out.append(torch.nn.functional.normalize(torch.randn(EMBED_DIM, generator=gen), dim=0))
        emb = torch.stack(out)
        return emb[0] if single else emb


class ClipSegBackend:
    """Frozen CLIP ViT-B/16 encoders from a published CLIPSeg checkpoint.

    Requires ``transformers`` and locally cached (or downloadable) weights.
    Layer ``k`` means the output of transformer block ``k`` (hidden state
    index ``k + 1``), the convention of the published decoder.
    """

    CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
    CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name: str = "CIDAS/clipseg-rd64-refined", layers=DEFAULT_LAYERS,
                 device: str = "cpu"):
        try:
            from transformers import AutoTokenizer, CLIPSegForImageSegmentation
        except ImportError as exc:
            raise BackendError("the CLIPSeg backend needs the 'transformers' package") from exc
        try:
            self.model = CLIPSegForImageSegmentation.from_pretrained(model_name).eval().to(device)
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        except Exception as exc:
            raise BackendError(f"cannot load CLIPSeg weights {model_name!r}: {exc}") from exc
        for prm in self.model.parameters():
            prm.requires_grad_(False)
        self.model_name = model_name
        self.device = device
        self.layers = tuple(sorted(int(x) for x in layers))
        self.patch_size = self.model.config.vision_config.patch_size
        self.hidden_dim = self.model.config.vision_config.hidden_size
        self.embed_dim = self.model.config.projection_dim

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.model.clip.state_dict().items()}

    def weights_digest(self) -> str:
        return tensor_digest(self.state_dict())

    def fingerprint(self) -> str:
        return f"clipseg:{self.model_name}"

    def published_decoder_state(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.model.decoder.state_dict().items()}

    @torch.no_grad()
    def encode_image(self, images):
        arr = _as_image_batch(images, self.patch_size)
        x = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
        mean = torch.tensor(self.CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.CLIP_STD).view(1, 3, 1, 1)
        x = ((x - mean) / std).to(self.device)
        vis = self.model.clip.vision_model(
            pixel_values=x, output_hidden_states=True, interpolate_pos_encoding=True
        )
        per_layer = {k: vis.hidden_states[k + 1].float().cpu() for k in self.layers}
        emb = self.model.clip.visual_projection(vis.pooler_output).float().cpu()
        return emb, EncoderActivations(per_layer, arr.shape[1], self.patch_size)

    @torch.no_grad()
    def encode_text(self, prompts):
        single = isinstance(prompts, str)
        prompts = [prompts] if single else list(prompts)
        if any(not p for p in prompts):
            log.warning("encoding an empty text prompt")
        tok = self.tokenizer(prompts, padding=True, return_tensors="pt").to(self.device)
        txt = self.model.clip.text_model(input_ids=tok["input_ids"], attention_mask=tok["attention_mask"])
        emb = self.model.clip.text_projection(txt.pooler_output).float().cpu()
        return emb[0] if single else emb


def make_backend(kind: str = "mock", **kwargs):
    if kind == "mock":
        return MockBackend(**kwargs)
    if kind == "clipseg":
        return ClipSegBackend(**kwargs)
    raise BackendError(f"unknown backend kind {kind!r}")
