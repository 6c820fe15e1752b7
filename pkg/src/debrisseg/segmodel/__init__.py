from .assemble import (
    assemble_levels,
    interpolate_embeddings,
    level_logits,
    segment_multiclass,
    text_conditions,
)
from .backend import (
    EMBED_DIM,
    PATCH_SIZE,
    ClipSegBackend,
    EncoderActivations,
    EncoderBackend,
    MockBackend,
    make_backend,
)
from .decoder import (
    DecoderConfig,
    SegDecoder,
    build_decoder,
    decode,
    load_checkpoint,
    save_checkpoint,
)


def encode_text(backend, prompt):
    return backend.encode_text(prompt)


def encode_image(backend, image):
    return backend.encode_image(image)


__all__ = [
    "EMBED_DIM",
    "PATCH_SIZE",
    "ClipSegBackend",
    "DecoderConfig",
    "EncoderActivations",
    "EncoderBackend",
    "MockBackend",
    "SegDecoder",
    "assemble_levels",
    "build_decoder",
    "decode",
    "encode_image",
    "encode_text",
    "interpolate_embeddings",
    "level_logits",
    "load_checkpoint",
    "make_backend",
    "save_checkpoint",
    "segment_multiclass",
    "text_conditions",
]
