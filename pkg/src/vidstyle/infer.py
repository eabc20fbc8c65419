"""Inference: stylize a video under any condition mix, and chain segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .codec import PATCH, STRIDE, decode, encode, latent_channels
from .conditioning import (
    assemble,
    build_first_frame_input,
    build_style_image_input,
    video_slab_from_noisy,
)
from .flow import NoiseDraw, SamplerConfig, euler_sample
from .metrics import global_style_feature
from .trainer import style_mask_value

INFER_MODES = ("text", "style_image", "first_frame", "t2v", "fuse")


class InferError(ValueError):
    """Inconsistent condition set for the requested mode."""


@dataclass
class Conditions:
    raw: np.ndarray | None = None  # (F, H, W, 3); None means empty video condition
    content_tags: list = field(default_factory=list)
    style_tag: int | None = None
    style_image: np.ndarray | None = None  # (H, W, 3) or (1, H, W, 3)
    first_frame: np.ndarray | None = None  # (H, W, 3) or (1, H, W, 3)


def check_conditions(mode: str, c: Conditions) -> str:
    """Validate the condition set and return the assembly mode."""
    if mode not in INFER_MODES:
        raise InferError(f"unknown mode {mode!r}; expected one of {INFER_MODES}")
    have = {"style_tag": c.style_tag is not None, "style_image": c.style_image is not None,
            "first_frame": c.first_frame is not None}
    need = {
        "text": {"style_tag"},
        "style_image": {"style_image"},
        "first_frame": {"first_frame"},
    }
    if mode in need:
        if c.raw is None:
            raise InferError(f"mode {mode!r} needs an input video")
        given = {k for k, v in have.items() if v}
        if given != need[mode]:
            raise InferError(f"mode {mode!r} takes exactly {sorted(need[mode])}, got {sorted(given)}")
        return mode
    if mode == "t2v":
        if c.raw is not None:
            raise InferError("t2v runs with an empty video condition; do not pass an input video")
        if not (have["style_tag"] or have["style_image"]):
            raise InferError("t2v needs a style tag or a style image")
        return "fused" if have["style_image"] or have["first_frame"] else "text"
    if not (have["style_tag"] and have["style_image"]) and not have["first_frame"]:
        raise InferError("fuse needs both a style tag and a style image, or a first frame")
    return "fused"


def _latent_shape(c: Conditions, geometry: dict | None):
    if c.raw is not None:
        f, h, w = np.shape(c.raw)[:3]
    elif geometry is not None:
        f, h, w = geometry["frames"], geometry["height"], geometry["width"]
    else:
        raise InferError("no input video and no geometry given")
    return (latent_channels(STRIDE), f, h // STRIDE, w // STRIDE)


def _image_latent(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    return encode(img.reshape((1,) + img.shape[-3:]))


def stylize(model: net.Model, mode: str, c: Conditions, steps: int = 16, seed: int = 0,
            geometry: dict | None = None, noise_keys=(), return_latent: bool = False):
    amode = check_conditions(mode, c)
    shape = _latent_shape(c, geometry)
    z_raw = encode(c.raw) if c.raw is not None else None
    z_s = _image_latent(c.style_image) if c.style_image is not None else None
    z_1 = _image_latent(c.first_frame) if c.first_frame is not None else None
    mask = style_mask_value(model.cfg.lora_mode)
    txt = list(c.content_tags) + ([int(c.style_tag)] if c.style_tag is not None else [])
    g = global_style_feature(c.style_image) if c.style_image is not None else None

    def build_input(z_t, t, noise):
        video = video_slab_from_noisy(z_t, z_raw)
        first = build_first_frame_input(z_1, t, noise.eps_first) if z_1 is not None else None
        style = build_style_image_input(z_s, t, noise.eps_style, mask) if z_s is not None else None
        return assemble(amode, video, first_slab=first, style_slab=style, p=PATCH)

    def velocity(x, t):
        return net.predict(model, x, t, txt, g)

    noise = NoiseDraw.draw(shape, seed, "sample", *noise_keys)
    return euler_sample(velocity, build_input, shape, SamplerConfig(steps, seed), noise, return_latent)


def long_video(model: net.Model, segments: list[np.ndarray], style: Conditions, steps: int = 16,
               seed: int = 0) -> tuple[np.ndarray, list[np.ndarray]]:
    """Stylize segment 1 with ``style``; each later segment is generated in fuse
    mode with the previous output's last frame as its first-frame condition."""
    if len(segments) < 2:
        raise InferError("long-video chaining needs at least two segments")
    geo = np.shape(segments[0])
    if any(np.shape(s) != geo for s in segments):
        raise InferError(f"segments must share geometry; got {[np.shape(s) for s in segments]}")
    if style.style_tag is not None and style.style_image is not None:
        first_mode = "fuse"
    elif style.style_image is not None:
        first_mode = "style_image"
    elif style.style_tag is not None:
        first_mode = "text"
    else:
        raise InferError("long-video chaining needs a style tag or a style image")
    outs = []
    for k, seg in enumerate(segments):
        c = Conditions(raw=seg, content_tags=style.content_tags, style_tag=style.style_tag,
                       style_image=style.style_image)
        mode = first_mode
        if k > 0:
            c.first_frame = outs[-1][-1]
            mode = "fuse"
        outs.append(stylize(model, mode, c, steps, seed, noise_keys=("segment", k)))
    return np.concatenate(outs, axis=0), outs


def reconstruct(frame: np.ndarray) -> np.ndarray:
    """decode(encode(frame)): what the first-frame condition can express."""
    return decode(_image_latent(frame), clamp=True)[0]
