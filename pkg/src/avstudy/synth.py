"""Seeded synthetic sensor payloads with planted ground truth.

Frames are noise backgrounds with two flat rectangles: a bed and a person
lying strictly inside the bed's interior. Noise never reaches the marker
values, so the rectangles can be recovered exactly from the pixels. Audio
chunks are a pure sinusoid with an integer frequency, which makes the RMS of
a one-second chunk exactly amplitude / sqrt(2) up to PCM quantization.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .core import Channel

# (noise upper bound exclusive, bed value, person value)
MARKERS = {
    np.dtype(np.uint8): (128, 180, 240),
    np.dtype(np.uint16): (32768, 46080, 61440),
}

AUDIO_FULL_SCALE = 32767

Box = tuple[int, int, int, int]  # x, y, w, h


def _seed_words(*parts) -> list[int]:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return [int.from_bytes(h[i : i + 4], "little") for i in range(0, 16, 4)]


def item_rng(seed: int, session_id: str, channel: Channel | str, sequence: int) -> np.random.Generator:
    return np.random.default_rng(_seed_words(seed, session_id, Channel(channel).value, sequence))


def bed_box(width: int, height: int) -> Box:
    x, y = width // 5, (3 * height) // 10
    return x, y, width - 2 * x, height - y - height // 10


def person_box(width: int, height: int, sequence: int) -> Box:
    """Person rectangle for a frame; it drifts slowly across the bed."""
    bx, by, bw, bh = bed_box(width, height)
    pw, ph = max(1, (bw - 2) * 2 // 5), max(1, (bh - 2) // 2)
    span_x, span_y = bw - 2 - pw, bh - 2 - ph
    phase = sequence * 0.05
    px = bx + 1 + int(round(span_x * (0.5 + 0.5 * math.sin(phase))))
    py = by + 1 + int(round(span_y * (0.5 + 0.5 * math.cos(0.7 * phase))))
    return px, py, pw, ph


def render_frame(
    width: int,
    height: int,
    *,
    bed: Box,
    person: Box,
    rng: np.random.Generator,
    dtype=np.uint8,
    rgb: bool = True,
) -> np.ndarray:
    dtype = np.dtype(dtype)
    noise_top, bed_value, person_value = MARKERS[dtype]
    shape = (height, width, 3) if rgb else (height, width)
    frame = rng.integers(0, noise_top, size=shape, dtype=dtype)
    bx, by, bw, bh = bed
    px, py, pw, ph = person
    frame[by : by + bh, bx : bx + bw] = bed_value
    frame[py : py + ph, px : px + pw] = person_value
    return frame


def marker_box(frame: np.ndarray, value: int) -> Box | None:
    """Bounding box (x, y, w, h) of pixels equal to ``value`` in every band."""
    mask = frame == value
    if mask.ndim == 3:
        mask = mask.all(axis=2)
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if len(xs) == 0:
        return None
    return int(xs[0]), int(ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1)


@dataclass(frozen=True)
class AudioTone:
    amplitude: float  # fraction of full scale
    frequency: int  # Hz
    phase: float


# PCM rounding may correlate with the tone; tones whose rendered RMS drifts
# further than this from the closed form are redrawn.
RMS_QUANTIZATION_BUDGET = 5e-7


def audio_tone(rng: np.random.Generator, sample_rate: int = 8000) -> AudioTone:
    while True:
        tone = AudioTone(
            amplitude=float(rng.uniform(0.1, 0.8)),
            frequency=int(rng.integers(100, min(1000, sample_rate // 2))),
            phase=float(rng.uniform(0, 2 * math.pi)),
        )
        x = render_audio(tone, sample_rate) / AUDIO_FULL_SCALE
        if abs(math.sqrt(float(np.mean(x * x))) - tone.amplitude / math.sqrt(2)) <= RMS_QUANTIZATION_BUDGET:
            return tone


def render_audio(tone: AudioTone, sample_rate: int, seconds: float = 1.0) -> np.ndarray:
    n = int(round(sample_rate * seconds))
    t = np.arange(n) / sample_rate
    wave = tone.amplitude * AUDIO_FULL_SCALE * np.sin(2 * math.pi * tone.frequency * t + tone.phase)
    return np.round(wave).astype(np.int16)
