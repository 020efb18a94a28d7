"""Pure per-row transforms, registered by name and instrumented with
invocation counters so cached passes can prove they skipped them."""

from __future__ import annotations

import threading
from collections import Counter
from typing import Callable

import numpy as np


class TransformError(ValueError):
    pass


def _image_columns(row: dict, columns) -> list[str]:
    if columns is not None:
        return list(columns)
    return [k for k, v in row.items() if isinstance(v, np.ndarray) and v.ndim >= 2]


def crop(row: dict, box, columns=None) -> dict:
    """Keep the ``(x, y, w, h)`` window of every image column."""
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0 or x < 0 or y < 0:
        raise TransformError(f"bad crop box {box}")
    out = dict(row)
    for name in _image_columns(row, columns):
        img = row[name]
        if y + h > img.shape[0] or x + w > img.shape[1]:
            raise TransformError(f"crop box {box} exceeds {name} of shape {img.shape}")
        out[name] = np.ascontiguousarray(img[y : y + h, x : x + w])
    return out


def resize(row: dict, width: int, height: int, columns=None) -> dict:
    """Nearest-neighbour resize: output pixel (r, c) samples source
    (floor(r * H / height), floor(c * W / width))."""
    if width < 1 or height < 1:
        raise TransformError("resize target must be at least 1x1")
    out = dict(row)
    for name in _image_columns(row, columns):
        img = row[name]
        src_h, src_w = img.shape[:2]
        rows = (np.arange(height) * src_h) // height
        cols = (np.arange(width) * src_w) // width
        out[name] = np.ascontiguousarray(img[rows[:, None], cols[None, :]])
    return out


def normalize(row: dict, columns=None) -> dict:
    """Scale integer images to float32 in [0, 1] by the dtype's maximum."""
    out = dict(row)
    for name in _image_columns(row, columns):
        img = row[name]
        if np.issubdtype(img.dtype, np.integer):
            out[name] = img.astype(np.float32) / np.float32(np.iinfo(img.dtype).max)
        else:
            out[name] = img.astype(np.float32)
    return out


def drop_payload(row: dict) -> dict:
    return {k: v for k, v in row.items() if not isinstance(v, (np.ndarray, bytes))}


class TransformRegistry:
    def __init__(self):
        self._fns: dict[str, Callable] = {}
        self.invocations: Counter = Counter()
        self._lock = threading.Lock()

    def register(self, name: str, fn: Callable) -> None:
        if name in self._fns:
            raise TransformError(f"transform {name!r} already registered")
        self._fns[name] = fn

    def __contains__(self, name) -> bool:
        return name in self._fns

    def reset_counters(self) -> None:
        with self._lock:
            self.invocations.clear()

    @property
    def total_invocations(self) -> int:
        return sum(self.invocations.values())

    def check(self, chain) -> list[tuple[str, dict]]:
        """Normalize a chain to ``[(name, kwargs)]`` and reject unknown names."""
        out = []
        for step in chain:
            if isinstance(step, str):
                name, kwargs = step, {}
            elif isinstance(step, dict):
                name, kwargs = step["name"], dict(step.get("args", {}))
            else:
                name, kwargs = step[0], dict(step[1]) if len(step) > 1 else {}
            if name not in self._fns:
                raise TransformError(f"unknown transform {name!r}")
            out.append((name, kwargs))
        return out

    def apply(self, row: dict, chain) -> dict:
        """Compose left to right. An empty chain returns the row unchanged."""
        for name, kwargs in self.check(chain):
            with self._lock:
                self.invocations[name] += 1
            row = self._fns[name](row, **kwargs)
        return row


def default_registry() -> TransformRegistry:
    reg = TransformRegistry()
    reg.register("crop", crop)
    reg.register("resize", resize)
    reg.register("normalize", normalize)
    reg.register("drop_payload", drop_payload)
    return reg


REGISTRY = default_registry()


def apply_transforms(row: dict, chain, registry: TransformRegistry | None = None) -> dict:
    return (registry or REGISTRY).apply(row, chain)
