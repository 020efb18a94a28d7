"""Minimal-profile media codecs used by the format-conversion stage.

* TIFF: baseline, uncompressed, 8/16-bit, grayscale or RGB, chunky planar
  configuration. The decoder accepts either byte order and any number of
  strips; the encoder writes one little-endian strip.
* PNG: standard PNG (8/16-bit grayscale or RGB, no interlace). The encoder
  uses the Sub filter on every scanline and zlib level 6, so the output is a
  pure function of the pixels.
* WAV: PCM-16 RIFF via :mod:`wave`.
* FLAC-class audio ("AVFL" container): per-block fixed polynomial prediction
  (order 0-2) with Rice-coded residuals. The layout is documented in
  ``docs/formats.md``. It is lossless but not bitstream-compatible with FLAC.
"""

from __future__ import annotations

import io
import struct
import wave
import zlib

import numpy as np


class CodecError(ValueError):
    """Payload cannot be decoded."""


# TIFF ----------------------------------------------------------------------

_TIFF_TYPES = {1: (1, "B"), 3: (2, "H"), 4: (4, "I")}


def encode_tiff(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype not in (np.uint8, np.uint16):
        raise CodecError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 2:
        height, width = arr.shape
        spp = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        height, width, spp = arr.shape
    else:
        raise CodecError(f"unsupported shape {arr.shape}")
    bits = arr.dtype.itemsize * 8
    data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()

    n_tags = 10
    ifd_offset = 8
    ifd_size = 2 + n_tags * 12 + 4
    extra_offset = ifd_offset + ifd_size
    extra = b""
    if spp == 3:
        bps_value = extra_offset
        extra = struct.pack("<3H", bits, bits, bits)
    else:
        bps_value = bits
    data_offset = extra_offset + len(extra)
    tags = [
        (256, 4, 1, width),
        (257, 4, 1, height),
        (258, 3, spp, bps_value),
        (259, 3, 1, 1),
        (262, 3, 1, 2 if spp == 3 else 1),
        (273, 4, 1, data_offset),
        (277, 3, 1, spp),
        (278, 4, 1, height),
        (279, 4, 1, len(data)),
        (284, 3, 1, 1),
    ]
    out = bytearray(b"II*\x00" + struct.pack("<I", ifd_offset))
    out += struct.pack("<H", n_tags)
    for tag, typ, count, value in tags:
        if typ == 3 and count == 1:
            out += struct.pack("<HHIHH", tag, typ, count, value, 0)
        else:
            out += struct.pack("<HHII", tag, typ, count, value)
    out += struct.pack("<I", 0)
    out += extra
    out += data
    return bytes(out)


def decode_tiff(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise CodecError("truncated TIFF header")
    order = data[:2]
    if order == b"II":
        e = "<"
    elif order == b"MM":
        e = ">"
    else:
        raise CodecError("not a TIFF")
    if struct.unpack(e + "H", data[2:4])[0] != 42:
        raise CodecError("bad TIFF magic")
    (ifd,) = struct.unpack(e + "I", data[4:8])
    if ifd + 2 > len(data):
        raise CodecError("truncated TIFF: IFD offset past end")
    (n,) = struct.unpack(e + "H", data[ifd : ifd + 2])
    if ifd + 2 + n * 12 > len(data):
        raise CodecError("truncated TIFF: IFD")
    tags: dict[int, list[int]] = {}
    for i in range(n):
        entry = data[ifd + 2 + i * 12 : ifd + 14 + i * 12]
        tag, typ, count = struct.unpack(e + "HHI", entry[:8])
        if typ not in _TIFF_TYPES:
            continue
        size, fmt = _TIFF_TYPES[typ]
        if size * count <= 4:
            raw = entry[8 : 8 + size * count]
        else:
            (off,) = struct.unpack(e + "I", entry[8:12])
            raw = data[off : off + size * count]
            if len(raw) != size * count:
                raise CodecError(f"truncated TIFF: tag {tag} values")
        tags[tag] = list(struct.unpack(e + fmt * count, raw))

    def one(tag, default=None):
        if tag in tags:
            return tags[tag][0]
        if default is None:
            raise CodecError(f"missing TIFF tag {tag}")
        return default

    width, height = one(256), one(257)
    spp = one(277, 1)
    bits = tags.get(258, [1])
    if one(259, 1) != 1:
        raise CodecError("compressed TIFF is outside the minimal profile")
    if one(284, 1) != 1:
        raise CodecError("planar TIFF is outside the minimal profile")
    if spp not in (1, 3) or len(set(bits)) != 1 or bits[0] not in (8, 16):
        raise CodecError(f"unsupported TIFF sample layout spp={spp} bits={bits}")
    offsets, counts = tags.get(273), tags.get(279)
    if not offsets or not counts or len(offsets) != len(counts):
        raise CodecError("missing strip layout")
    chunks = []
    for off, cnt in zip(offsets, counts):
        chunk = data[off : off + cnt]
        if len(chunk) != cnt:
            raise CodecError("truncated TIFF: strip data")
        chunks.append(chunk)
    raw = b"".join(chunks)
    dtype = np.dtype(np.uint8 if bits[0] == 8 else e + "u2")
    expected = width * height * spp * dtype.itemsize
    if len(raw) < expected:
        raise CodecError("truncated TIFF: pixel data")
    arr = np.frombuffer(raw[:expected], dtype=dtype).astype(dtype.newbyteorder("="))
    shape = (height, width) if spp == 1 else (height, width, spp)
    return arr.reshape(shape)


# PNG -----------------------------------------------------------------------

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)


def encode_png(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype not in (np.uint8, np.uint16):
        raise CodecError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 2:
        height, width = arr.shape
        color, spp = 0, 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        height, width, _ = arr.shape
        color, spp = 2, 3
    else:
        raise CodecError(f"unsupported shape {arr.shape}")
    depth = arr.dtype.itemsize * 8
    bpp = spp * arr.dtype.itemsize
    rows = arr.astype(arr.dtype.newbyteorder(">"), copy=False).tobytes()
    rows = np.frombuffer(rows, dtype=np.uint8).reshape(height, width * bpp)
    filtered = rows.copy()
    filtered[:, bpp:] = rows[:, bpp:] - rows[:, :-bpp]  # uint8 wraps mod 256
    scan = np.empty((height, width * bpp + 1), dtype=np.uint8)
    scan[:, 0] = 1
    scan[:, 1:] = filtered
    ihdr = struct.pack(">IIBBBBB", width, height, depth, color, 0, 0, 0)
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(scan.tobytes(), 6))
        + _chunk(b"IEND", b"")
    )


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def decode_png(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise CodecError("not a PNG")
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    while True:
        if pos + 8 > len(data):
            raise CodecError("truncated PNG")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        crc = data[pos + 8 + length : pos + 12 + length]
        if len(body) != length or len(crc) != 4:
            raise CodecError("truncated PNG chunk")
        if struct.unpack(">I", crc)[0] != zlib.crc32(kind + body) & 0xFFFFFFFF:
            raise CodecError(f"bad CRC in {kind!r}")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
    if header is None:
        raise CodecError("missing IHDR")
    width, height, depth, color, _, _, interlace = header
    if color not in (0, 2) or depth not in (8, 16) or interlace:
        raise CodecError("PNG outside the minimal profile")
    spp = 1 if color == 0 else 3
    bpp = spp * depth // 8
    stride = width * bpp
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CodecError(f"corrupt IDAT: {exc}") from None
    if len(raw) != height * (stride + 1):
        raise CodecError("PNG data length mismatch")
    scan = np.frombuffer(raw, dtype=np.uint8).reshape(height, stride + 1)
    if height and (scan[:, 0] == 1).all():
        # every row Sub-filtered, as our encoder writes them: one vectorized pass
        lines = scan[:, 1:].reshape(height, width, bpp).astype(np.uint64)
        out = (np.cumsum(lines, axis=1) % 256).astype(np.uint8).reshape(height, stride)
        return _png_pixels(out, height, width, depth, spp)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        ftype = scan[y, 0]
        line = scan[y, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            cur = (np.cumsum(line.reshape(width, bpp).astype(np.uint64), axis=0) % 256).astype(np.uint8).ravel()
        elif ftype == 2:
            cur = line + prev
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.uint8)
            for i in range(stride):
                a = int(cur[i - bpp]) if i >= bpp else 0
                b = int(prev[i])
                if ftype == 3:
                    pred = (a + b) // 2
                else:
                    c = int(prev[i - bpp]) if i >= bpp else 0
                    pred = _paeth(a, b, c)
                cur[i] = (int(line[i]) + pred) & 0xFF
        else:
            raise CodecError(f"unknown PNG filter {ftype}")
        out[y] = cur
        prev = cur
    return _png_pixels(out, height, width, depth, spp)


def _png_pixels(out: np.ndarray, height: int, width: int, depth: int, spp: int) -> np.ndarray:
    dtype = np.dtype(np.uint8 if depth == 8 else ">u2")
    arr = np.frombuffer(out.tobytes(), dtype=dtype).astype(dtype.newbyteorder("="))
    return arr.reshape((height, width) if spp == 1 else (height, width, 3))


# WAV -----------------------------------------------------------------------


def encode_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    arr = np.asarray(samples)
    if arr.dtype != np.int16:
        raise CodecError("WAV minimal profile is PCM-16")
    channels = 1 if arr.ndim == 1 else arr.shape[1]
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(arr.astype("<i2", copy=False).tobytes())
    return buf.getvalue()


def decode_wav(data: bytes) -> tuple[np.ndarray, int]:
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            if w.getsampwidth() != 2:
                raise CodecError("WAV minimal profile is PCM-16")
            channels, rate, nframes = w.getnchannels(), w.getframerate(), w.getnframes()
            frames = w.readframes(nframes)
    except (wave.Error, EOFError, struct.error) as exc:
        raise CodecError(f"bad WAV: {exc}") from None
    if len(frames) != nframes * channels * 2:
        raise CodecError("truncated WAV data")
    arr = np.frombuffer(frames, dtype="<i2").astype(np.int16)
    if channels > 1:
        arr = arr.reshape(-1, channels)
    return arr, rate


# FLAC-class ----------------------------------------------------------------

AVFL_MAGIC = b"AVFL"
AVFL_VERSION = 1
AVFL_BLOCK = 4096
_MAX_RICE = 30


def _zigzag(r: np.ndarray) -> np.ndarray:
    return ((r << 1) ^ (r >> 63)).astype(np.uint64)


def _unzigzag(u: np.ndarray) -> np.ndarray:
    u = u.astype(np.int64)
    return (u >> 1) ^ -(u & 1)


def _rice_encode(u: np.ndarray) -> tuple[int, bytes, bytes]:
    n = len(u)
    if n == 0:
        return 0, b"", b""
    costs = [int(np.sum(u >> np.uint64(k))) + n * (k + 1) for k in range(_MAX_RICE + 1)]
    k = int(np.argmin(costs))
    q = (u >> np.uint64(k)).astype(np.int64)
    ones = np.cumsum(q + 1) - 1
    unary = np.zeros(int(ones[-1]) + 1, dtype=np.uint8)
    unary[ones] = 1
    if k:
        shifts = np.arange(k - 1, -1, -1, dtype=np.uint64)
        rem = ((u[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel()
    else:
        rem = np.zeros(0, dtype=np.uint8)
    return k, np.packbits(unary).tobytes(), np.packbits(rem).tobytes()


def _rice_decode(n: int, k: int, unary: bytes, rem: bytes) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(unary, dtype=np.uint8))
    ones = np.flatnonzero(bits)
    if len(ones) < n:
        raise CodecError("truncated residual stream")
    ones = ones[:n]
    q = np.diff(np.concatenate(([-1], ones))) - 1
    u = q.astype(np.uint64) << np.uint64(k)
    if k:
        rbits = np.unpackbits(np.frombuffer(rem, dtype=np.uint8))
        if len(rbits) < n * k:
            raise CodecError("truncated remainder stream")
        weights = np.uint64(1) << np.arange(k - 1, -1, -1, dtype=np.uint64)
        u = u | (rbits[: n * k].reshape(n, k).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
    return u


def _encode_block(x: np.ndarray) -> bytes:
    best = None
    for order in range(3):
        if order >= len(x) and order > 0:
            break
        resid = np.diff(x, n=order) if order else x
        score = int(np.abs(resid).sum())
        if best is None or score < best[0]:
            best = (score, order, resid)
    _, order, resid = best
    warm = x[:order]
    k, unary, rem = _rice_encode(_zigzag(resid))
    head = struct.pack("<BB", order, k) + struct.pack(f"<{order}q", *warm.tolist())
    return head + struct.pack("<II", len(unary), len(rem)) + unary + rem


def _decode_block(buf: memoryview, pos: int, n: int) -> tuple[np.ndarray, int]:
    try:
        order, k = struct.unpack_from("<BB", buf, pos)
        pos += 2
        warm = np.array(struct.unpack_from(f"<{order}q", buf, pos), dtype=np.int64)
        pos += 8 * order
        ulen, rlen = struct.unpack_from("<II", buf, pos)
        pos += 8
    except struct.error:
        raise CodecError("truncated block header") from None
    if order > 2:
        raise CodecError(f"bad predictor order {order}")
    unary = bytes(buf[pos : pos + ulen])
    rem = bytes(buf[pos + ulen : pos + ulen + rlen])
    if len(unary) != ulen or len(rem) != rlen:
        raise CodecError("truncated block body")
    pos += ulen + rlen
    resid = _unzigzag(_rice_decode(n - order, k, unary, rem))
    x = resid
    # integrate back up through each difference order
    for level in range(order - 1, -1, -1):
        start = np.diff(warm, n=level)[0] if level < order else 0
        x = np.concatenate(([start], start + np.cumsum(x)))
    return x.astype(np.int64), pos


def encode_flac(samples: np.ndarray, sample_rate: int) -> bytes:
    arr = np.asarray(samples)
    if arr.dtype != np.int16:
        raise CodecError("FLAC-class encoder expects PCM-16 samples")
    arr2 = arr[:, None] if arr.ndim == 1 else arr
    nframes, channels = arr2.shape
    out = bytearray(AVFL_MAGIC)
    out += struct.pack("<BBBIIH", AVFL_VERSION, channels, 16, sample_rate, nframes, AVFL_BLOCK)
    out += struct.pack("<B", 1 if arr.ndim == 1 else 2)
    data = arr2.astype(np.int64)
    for start in range(0, nframes, AVFL_BLOCK):
        for ch in range(channels):
            out += _encode_block(data[start : start + AVFL_BLOCK, ch])
    return bytes(out)


def decode_flac(data: bytes) -> tuple[np.ndarray, int]:
    head = struct.calcsize("<BBBIIH") + 1
    if not data.startswith(AVFL_MAGIC) or len(data) < 4 + head:
        raise CodecError("not an AVFL stream")
    version, channels, bits, rate, nframes, block = struct.unpack_from("<BBBIIH", data, 4)
    (ndim,) = struct.unpack_from("<B", data, 4 + head - 1)
    if version != AVFL_VERSION or bits != 16 or channels < 1 or block < 1:
        raise CodecError("unsupported AVFL header")
    buf = memoryview(data)
    pos = 4 + head
    out = np.zeros((nframes, channels), dtype=np.int64)
    for start in range(0, nframes, block):
        n = min(block, nframes - start)
        for ch in range(channels):
            x, pos = _decode_block(buf, pos, n)
            if len(x) != n:
                raise CodecError("block length mismatch")
            out[start : start + n, ch] = x
    if pos != len(data):
        raise CodecError("trailing bytes after last block")
    if out.size and (out.min() < -32768 or out.max() > 32767):
        raise CodecError("decoded samples out of PCM-16 range")
    samples = out.astype(np.int16)
    return (samples[:, 0] if ndim == 1 else samples), rate


# dispatch ------------------------------------------------------------------


def sniff(data: bytes) -> str | None:
    if data.startswith(PNG_SIGNATURE):
        return "png"
    if data[:4] in (b"II*\x00", b"MM\x00*"):
        return "tiff"
    if data.startswith(AVFL_MAGIC):
        return "flac"
    if data[:4] == b"RIFF" and data[8:12] == b"WAVE":
        return "wav"
    if data.startswith(b"timestamp,"):
        return "vitals_csv"
    return None


def decode_any(data: bytes):
    """Decode an image to its pixel array or audio to its sample array."""
    kind = sniff(data)
    if kind == "png":
        return decode_png(data)
    if kind == "tiff":
        return decode_tiff(data)
    if kind == "flac":
        return decode_flac(data)[0]
    if kind == "wav":
        return decode_wav(data)[0]
    raise CodecError("unrecognized media payload")
