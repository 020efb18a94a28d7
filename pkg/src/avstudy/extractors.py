"""Deterministic stub feature extractors and their registry.

Each extractor declares the modality it reads and a cost model: the virtual
milliseconds one invocation takes on a CPU worker and on an accelerated
(GPU) worker. Outputs depend only on the payload (and, for motion energy, the
predecessor frame), so retries reproduce identical values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import IMAGE_CHANNELS, Channel
from .synth import AUDIO_FULL_SCALE, MARKERS, marker_box

MIN_SPEEDUP, MAX_SPEEDUP = 10.0, 60.0


class ExtractorError(RuntimeError):
    pass


@dataclass
class ExtractContext:
    """What an extractor may look at besides its own payload."""

    sequence: int
    previous: Callable[[], np.ndarray | None]


@dataclass(frozen=True)
class ExtractorSpec:
    name: str
    modality: str  # "image" | "audio"
    cpu_ms: float
    accelerated_ms: float
    fn: Callable[[np.ndarray, ExtractContext], object]

    def __post_init__(self):
        if self.modality not in ("image", "audio"):
            raise ValueError(f"{self.name}: unknown modality {self.modality!r}")
        if self.cpu_ms <= 0 or self.accelerated_ms <= 0:
            raise ValueError(f"{self.name}: costs must be positive")
        ratio = self.cpu_ms / self.accelerated_ms
        if not MIN_SPEEDUP <= ratio <= MAX_SPEEDUP:
            raise ValueError(f"{self.name}: cpu/accelerated ratio {ratio:.2f} outside [{MIN_SPEEDUP}, {MAX_SPEEDUP}]")

    def applies_to(self, channel: Channel) -> bool:
        if self.modality == "image":
            return channel in IMAGE_CHANNELS
        return channel is Channel.AUDIO

    def cost_ms(self, accelerated: bool) -> float:
        return self.accelerated_ms if accelerated else self.cpu_ms


def _marker(frame: np.ndarray, which: int) -> list[int]:
    markers = MARKERS.get(frame.dtype)
    if markers is None:
        raise ExtractorError(f"no marker convention for dtype {frame.dtype}")
    box = marker_box(frame, markers[which])
    if box is None:
        raise ExtractorError("marker not found")
    return list(box)


def bed_region(frame, ctx):
    return _marker(frame, 1)


def person_region(frame, ctx):
    return _marker(frame, 2)


def mean_brightness(frame, ctx):
    return float(frame.mean(dtype=np.float64))


def motion_energy(frame, ctx):
    if ctx.sequence == 0:
        return 0.0
    prev = ctx.previous()
    if prev is None:
        raise ExtractorError(f"predecessor of sequence {ctx.sequence} unavailable")
    if prev.shape != frame.shape:
        raise ExtractorError("predecessor shape differs")
    return float(np.abs(frame.astype(np.float64) - prev.astype(np.float64)).mean())


def audio_rms(samples, ctx):
    x = samples.astype(np.float64) / AUDIO_FULL_SCALE
    return math.sqrt(float(np.mean(x * x))) if x.size else 0.0


BUILTINS: dict[str, tuple[str, Callable]] = {
    "bed_region": ("image", bed_region),
    "person_region": ("image", person_region),
    "mean_brightness": ("image", mean_brightness),
    "motion_energy": ("image", motion_energy),
    "audio_rms": ("audio", audio_rms),
}

# virtual ms per invocation: (cpu, accelerated)
DEFAULT_COSTS = {
    "bed_region": (120.0, 4.0),
    "person_region": (300.0, 6.0),
    "mean_brightness": (20.0, 2.0),
    "motion_energy": (40.0, 2.0),
    "audio_rms": (60.0, 1.0),
}


class ExtractorRegistry:
    def __init__(self, specs=(), schema_version: int = 1):
        self.schema_version = schema_version
        self._specs: dict[str, ExtractorSpec] = {}
        for spec in specs:
            self.register(spec)

    def register(self, spec: ExtractorSpec) -> None:
        if spec.name in self._specs:
            raise ValueError(f"extractor {spec.name!r} already registered")
        self._specs[spec.name] = spec

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self):
        return len(self._specs)

    def __contains__(self, name) -> bool:
        return name in self._specs

    def __getitem__(self, name: str) -> ExtractorSpec:
        return self._specs[name]

    def for_channel(self, channel: Channel) -> list[ExtractorSpec]:
        return [s for s in self._specs.values() if s.applies_to(channel)]

    @classmethod
    def default(cls) -> "ExtractorRegistry":
        return cls.from_config({"schema_version": 1, "extractors": [{"name": n} for n in BUILTINS]})

    @classmethod
    def from_config(cls, config: dict) -> "ExtractorRegistry":
        """Build from a declarative config:
        ``{"schema_version": 1, "extractors": [{"name", "impl"?, "cpu_ms"?, "accelerated_ms"?}]}``."""
        specs = []
        for entry in config.get("extractors", []):
            name = entry["name"]
            impl = entry.get("impl", name)
            if impl not in BUILTINS:
                raise ValueError(f"unknown extractor implementation {impl!r}")
            modality, fn = BUILTINS[impl]
            cpu, acc = DEFAULT_COSTS[impl]
            specs.append(
                ExtractorSpec(
                    name=name,
                    modality=entry.get("modality", modality),
                    cpu_ms=float(entry.get("cpu_ms", cpu)),
                    accelerated_ms=float(entry.get("accelerated_ms", acc)),
                    fn=fn,
                )
            )
        return cls(specs, schema_version=int(config.get("schema_version", 1)))

    @classmethod
    def from_file(cls, path) -> "ExtractorRegistry":
        return cls.from_config(json.loads(Path(path).read_text()))
