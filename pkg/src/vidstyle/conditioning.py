"""Condition slabs and the frame-wise assembled model input.

A slab is a (2*C + 4, F, H, W) array laid out as
``[noisy latent | 4 mask channels | clean condition latent]``.
Video slabs carry mask 0; style-image and first-frame slabs carry mask 1 and
are placed as extra frames after / before the video frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import PATCH, patchify, unpatchify
from .flow import add_noise

MASK_CHANNELS = 4

FIRST, VIDEO, STYLE = 0, 1, 2
MODES = ("text", "style_image", "first_frame", "fused")


class ConditionError(ValueError):
    pass


@dataclass
class ConditionSlab:
    data: np.ndarray
    kind: int  # FIRST / VIDEO / STYLE

    @property
    def latent_channels(self) -> int:
        return (self.data.shape[0] - MASK_CHANNELS) // 2

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def parts(self):
        c = self.latent_channels
        return self.data[:c], self.data[c:c + MASK_CHANNELS], self.data[c + MASK_CHANNELS:]


def make_slab(noisy: np.ndarray, clean: np.ndarray, mask_value: float, kind: int) -> ConditionSlab:
    if noisy.shape != clean.shape:
        raise ConditionError(f"noisy part {noisy.shape} and clean part {clean.shape} differ")
    _, f, h, w = noisy.shape
    mask = np.full((MASK_CHANNELS, f, h, w), mask_value, dtype=np.float32)
    data = np.concatenate([noisy.astype(np.float32), mask, clean.astype(np.float32)], axis=0)
    return ConditionSlab(data, kind)


def _single_frame(z: np.ndarray, what: str) -> None:
    if z.ndim != 4 or z.shape[1] != 1:
        raise ConditionError(f"{what} latent must be single-frame (C, 1, H, W), got {z.shape}")


def build_style_image_input(z_s: np.ndarray, t: float, eps: np.ndarray,
                            mask_value: float = 1.0) -> ConditionSlab:
    _single_frame(z_s, "style image")
    return make_slab(add_noise(z_s, t, eps), z_s, mask_value, STYLE)


def build_first_frame_input(z_1st: np.ndarray, t: float, eps: np.ndarray) -> ConditionSlab:
    _single_frame(z_1st, "first frame")
    return make_slab(add_noise(z_1st, t, eps), z_1st, 1.0, FIRST)


def build_video_input(z_sty: np.ndarray, z_raw: np.ndarray | None, t: float,
                      eps: np.ndarray) -> ConditionSlab:
    """``z_raw=None`` gives the empty video condition (text-to-video)."""
    if z_raw is None:
        z_raw = np.zeros_like(z_sty)
    if z_sty.shape != z_raw.shape:
        raise ConditionError(f"stylized latent {z_sty.shape} and raw latent {z_raw.shape} differ")
    return make_slab(add_noise(z_sty, t, eps), z_raw, 0.0, VIDEO)


def video_slab_from_noisy(z_t: np.ndarray, z_raw: np.ndarray | None) -> ConditionSlab:
    if z_raw is None:
        z_raw = np.zeros_like(z_t)
    return make_slab(z_t, z_raw, 0.0, VIDEO)


@dataclass
class ModelInput:
    tokens: np.ndarray  # (T, (2C+4) p^2)
    type_map: np.ndarray  # (T,) labels in {0, 1, 2}
    frame_pos: np.ndarray  # (T,) -1 for first frame, F for style image
    spatial_index: np.ndarray
    video_token_range: tuple[int, int]
    mode: str
    latent_channels: int
    video_frames: int
    height: int
    width: int
    patch: int
    slab_kinds: tuple[int, ...] = field(default=())

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def segments(self):
        """Runs of equal token type as (start, stop, label)."""
        out = []
        start = 0
        labels = self.type_map
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                out.append((start, i, int(labels[start])))
                start = i
        return out

    def mask_values(self) -> np.ndarray:
        """The four mask channels read back per token, shape (T, 4)."""
        c, p = self.latent_channels, self.patch
        m = self.tokens[:, c * p * p:(c + MASK_CHANNELS) * p * p]
        return m.reshape(len(m), MASK_CHANNELS, p * p)[:, :, 0]

    def slabs(self) -> list[ConditionSlab]:
        """Rebuild the slabs this input was assembled from."""
        out = []
        tpf = self.tokens_per_frame
        pos = 0
        chans = 2 * self.latent_channels + MASK_CHANNELS
        for kind in self.slab_kinds:
            f = self.video_frames if kind == VIDEO else 1
            toks = self.tokens[pos:pos + f * tpf]
            out.append(ConditionSlab(unpatchify(toks, (chans, f, self.height, self.width), self.patch), kind))
            pos += f * tpf
        return out


_REQUIRED = {
    "text": (False, False),
    "style_image": (False, True),
    "first_frame": (True, False),
}


def assemble(mode: str, video_slab: ConditionSlab, first_slab: ConditionSlab | None = None,
             style_slab: ConditionSlab | None = None, p: int = PATCH) -> ModelInput:
    if mode not in MODES:
        raise ConditionError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in _REQUIRED:
        need_first, need_style = _REQUIRED[mode]
        if (first_slab is not None) != need_first or (style_slab is not None) != need_style:
            raise ConditionError(
                f"mode {mode!r} needs first-frame slab={need_first}, style slab={need_style}"
            )
    if video_slab.kind != VIDEO:
        raise ConditionError("video_slab must be a video slab")
    if first_slab is not None and first_slab.kind != FIRST:
        raise ConditionError("first_slab must be a first-frame slab")
    if style_slab is not None and style_slab.kind != STYLE:
        raise ConditionError("style_slab must be a style-image slab")

    chans, f, h, w = video_slab.data.shape
    ordered = [s for s in (first_slab, video_slab, style_slab) if s is not None]
    for s in ordered:
        if s.data.shape[0] != chans or s.data.shape[2:] != (h, w):
            raise ConditionError(
                f"slab shape {s.data.shape} does not fit video slab {video_slab.data.shape}"
            )
    tokens, labels, fpos, spatial = [], [], [], []
    for s in ordered:
        ts = patchify(s.data, p)
        tokens.append(ts.tokens)
        labels.append(np.full(len(ts), s.kind, dtype=np.int64))
        if s.kind == FIRST:
            fpos.append(ts.frame_index - 1)
        elif s.kind == STYLE:
            fpos.append(ts.frame_index + f)
        else:
            fpos.append(ts.frame_index)
        spatial.append(ts.spatial_index)
    type_map = np.concatenate(labels)
    vid = np.flatnonzero(type_map == VIDEO)
    return ModelInput(
        tokens=np.concatenate(tokens, axis=0),
        type_map=type_map,
        frame_pos=np.concatenate(fpos),
        spatial_index=np.concatenate(spatial),
        video_token_range=(int(vid[0]), int(vid[-1]) + 1),
        mode=mode,
        latent_channels=(chans - MASK_CHANNELS) // 2,
        video_frames=f,
        height=h,
        width=w,
        patch=p,
        slab_kinds=tuple(s.kind for s in ordered),
    )
