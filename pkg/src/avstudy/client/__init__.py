"""Training-side streaming over published dataset snapshots."""

from .serialize import decode_unit, encode_unit
from .stream import (
    CacheSpec,
    NGramSpec,
    PassReport,
    ShuffleSpec,
    Stream,
    StreamError,
    StreamSpec,
    ThroughputReport,
    bench_stream,
    buffered_shuffle,
    cached_stream,
    make_ngrams,
    open_stream,
)
from .transforms import REGISTRY, TransformError, TransformRegistry, apply_transforms, default_registry

__all__ = [
    "CacheSpec",
    "NGramSpec",
    "PassReport",
    "REGISTRY",
    "ShuffleSpec",
    "Stream",
    "StreamError",
    "StreamSpec",
    "ThroughputReport",
    "TransformError",
    "TransformRegistry",
    "apply_transforms",
    "bench_stream",
    "buffered_shuffle",
    "cached_stream",
    "decode_unit",
    "default_registry",
    "encode_unit",
    "make_ngrams",
    "open_stream",
]
