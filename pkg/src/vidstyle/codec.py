"""Pixel <-> latent codec, patchify, and on-disk video formats.

Videos are float32 arrays shaped (F, H, W, 3) with values in [0, 1].
Latents are (C, F, H/s, W/s) with C = 3 * s**2: every s x s pixel block of a
channel is folded into s**2 latent channels, so the codec is an exact
bijection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STRIDE = 2
PATCH = 2


class CodecError(ValueError):
    pass


def latent_channels(s: int = STRIDE) -> int:
    return 3 * s * s


def check_video(v: np.ndarray) -> None:
    if v.ndim != 4 or v.shape[-1] != 3:
        raise CodecError(f"video must be (F, H, W, 3), got {v.shape}")
    if v.shape[0] < 1:
        raise CodecError("video needs at least one frame")


def encode(v: np.ndarray, s: int = STRIDE) -> np.ndarray:
    check_video(v)
    f, h, w, c = v.shape
    if h % s or w % s:
        raise CodecError(f"frame size {h}x{w} not divisible by stride {s}")
    # (F, H/s, s, W/s, s, C) -> (C, s, s, F, H/s, W/s)
    z = v.reshape(f, h // s, s, w // s, s, c).transpose(5, 2, 4, 0, 1, 3)
    return np.ascontiguousarray(z.reshape(c * s * s, f, h // s, w // s), dtype=np.float32)


def decode(z: np.ndarray, s: int = STRIDE, clamp: bool = False) -> np.ndarray:
    if z.ndim != 4 or z.shape[0] != latent_channels(s):
        raise CodecError(f"latent must have {latent_channels(s)} channels for stride {s}, got {z.shape}")
    _, f, hh, ww = z.shape
    v = z.reshape(3, s, s, f, hh, ww).transpose(3, 4, 1, 5, 2, 0)
    v = np.ascontiguousarray(v.reshape(f, hh * s, ww * s, 3), dtype=np.float32)
    if clamp:
        v = np.clip(v, 0.0, 1.0)
    return v


@dataclass
class TokenSeq:
    tokens: np.ndarray  # (T, C * p * p)
    frame_index: np.ndarray
    spatial_index: np.ndarray
    channels: int
    frames: int
    height: int
    width: int
    patch: int

    @property
    def dims(self):
        return (self.channels, self.frames, self.height, self.width)

    def __len__(self):
        return self.tokens.shape[0]


def patchify(z: np.ndarray, p: int = PATCH) -> TokenSeq:
    """(C, F, H, W) slab -> frame-major, row-major token sequence."""
    if z.ndim != 4:
        raise CodecError(f"slab must be (C, F, H, W), got {z.shape}")
    c, f, h, w = z.shape
    if h % p or w % p:
        raise CodecError(f"slab spatial size {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    t = z.reshape(c, f, gh, p, gw, p).transpose(1, 2, 4, 0, 3, 5)
    tokens = np.ascontiguousarray(t.reshape(f * gh * gw, c * p * p))
    per = gh * gw
    frame_index = np.repeat(np.arange(f), per)
    spatial_index = np.tile(np.arange(per), f)
    return TokenSeq(tokens, frame_index, spatial_index, c, f, h, w, p)


def unpatchify(tokens: np.ndarray, dims, p: int = PATCH) -> np.ndarray:
    c, f, h, w = dims
    if h % p or w % p:
        raise CodecError(f"dims {dims} not divisible by patch {p}")
    gh, gw = h // p, w // p
    if tokens.ndim != 2 or tokens.shape != (f * gh * gw, c * p * p):
        raise CodecError(
            f"token array {tokens.shape} does not match dims {dims} with patch {p}"
        )
    z = tokens.reshape(f, gh, gw, c, p, p).transpose(3, 0, 1, 4, 2, 5)
    return np.ascontiguousarray(z.reshape(c, f, h, w))


# -- files ----------------------------------------------------------------

VTF_MAGIC = b"VTF1"


def write_vtf(path, v: np.ndarray) -> None:
    v = np.asarray(v, dtype="<f4")
    if v.ndim != 4:
        raise CodecError(f"vtf payload must be 4-D, got {v.shape}")
    with open(path, "wb") as fh:
        fh.write(VTF_MAGIC)
        fh.write(struct.pack("<4I", *v.shape))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_vtf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VTF_MAGIC:
        raise CodecError(f"{path}: bad magic {raw[:4]!r}")
    shape = struct.unpack("<4I", raw[4:20])
    n = int(np.prod(shape))
    if len(raw) != 20 + 4 * n:
        raise CodecError(f"{path}: expected {20 + 4 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(shape).astype(np.float32)


def to_bytes8(frame: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(frame, 0.0, 1.0)).astype(np.uint8)


def write_ppm(path, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(to_bytes8(frame).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise CodecError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3).astype(np.float32) / 255.0


def export_frames(out_dir, v: np.ndarray, prefix: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(v):
        p = out_dir / f"{prefix}_{i:03d}.ppm"
        write_ppm(p, frame)
        paths.append(p)
    return paths
