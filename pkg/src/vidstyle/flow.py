"""Flow-matching path, velocity target, masked training loss, Euler sampler.

The noising path runs from pure noise at t=0 to data at t=1:
``z_t = t * z + (1 - t) * eps``, so the velocity target is ``z - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .codec import decode, unpatchify
from .rng import make_rng


class FlowError(ValueError):
    pass


def _check_t(t) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise FlowError(f"time {t} outside [0, 1]")
    return t


def add_noise(z: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    if z.shape != eps.shape:
        raise FlowError(f"add_noise: latent {z.shape} and noise {eps.shape} differ")
    t = _check_t(t)
    # written as a blend so both endpoints are exact
    if t == 1.0:
        return z.astype(np.float32, copy=True)
    if t == 0.0:
        return eps.astype(np.float32, copy=True)
    return (np.float32(t) * z + np.float32(1.0 - t) * eps).astype(np.float32)


def velocity_target(z_sty: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """float64, where the difference of two float32 arrays is exact, so
    ``velocity_target(z, eps) + eps == z`` holds bitwise."""
    if z_sty.shape != eps.shape:
        raise FlowError(f"velocity_target: latent {z_sty.shape} and noise {eps.shape} differ")
    return np.asarray(z_sty, np.float64) - np.asarray(eps, np.float64)


@dataclass
class NoiseDraw:
    eps_video: np.ndarray
    eps_style: np.ndarray
    eps_first: np.ndarray
    seed: int

    @classmethod
    def draw(cls, latent_shape, seed: int, *keys) -> "NoiseDraw":
        c, f, h, w = latent_shape
        rng = make_rng(seed, "noise", *keys)
        return cls(
            rng.standard_normal((c, f, h, w), dtype=np.float32),
            rng.standard_normal((c, 1, h, w), dtype=np.float32),
            rng.standard_normal((c, 1, h, w), dtype=np.float32),
            seed,
        )


def video_prediction(pred: np.ndarray, x) -> np.ndarray:
    """Per-token prediction array (T, C*p*p) -> latent over video frames only."""
    lo, hi = x.video_token_range
    c = x.latent_channels
    return unpatchify(pred[lo:hi], (c, x.video_frames, x.height, x.width), x.patch)


def training_loss(pred: ad.Tensor, target, inputs) -> ad.Tensor:
    """MSE over video tokens; condition-token predictions never reach the loss.

    ``pred`` is (B, T, C*p*p) (or (T, C*p*p)), ``target`` a latent or list of
    latents covering only the video frames, ``inputs`` the matching ModelInput(s).
    """
    from .codec import patchify

    if not isinstance(inputs, (list, tuple)):
        inputs, target = [inputs], [target]
    if pred.ndim == 2:
        pred = pred.reshape((1,) + pred.shape)
    lo, hi = inputs[0].video_token_range
    for x in inputs:
        if x.video_token_range != (lo, hi):
            raise FlowError("training_loss: inputs in one batch disagree on video token range")
    if len(target) != pred.shape[0]:
        raise FlowError(f"training_loss: {len(target)} targets for batch of {pred.shape[0]}")
    tgt = np.stack([patchify(z, inputs[0].patch).tokens for z in target])
    if tgt.shape[1] != hi - lo or tgt.shape[2] != pred.shape[2]:
        raise FlowError(
            f"training_loss: target tokens {tgt.shape[1:]} do not cover video range [{lo}, {hi})"
        )
    return ad.mse(ad.slice_axis(pred, 1, lo, hi), ad.Tensor(tgt))


@dataclass
class SamplerConfig:
    steps: int = 16
    seed: int = 0

    def timesteps(self):
        if self.steps < 1:
            raise FlowError(f"sampler needs at least one step, got {self.steps}")
        return [k / self.steps for k in range(self.steps)]


def euler_sample(velocity_fn, build_input, latent_shape, cfg: SamplerConfig,
                 noise: NoiseDraw | None = None, return_latent: bool = False):
    """Integrate the learned ODE from t=0 (noise) to t=1.

    ``build_input(z_t, t, noise)`` returns a ModelInput whose video noisy part
    is ``z_t`` and whose condition slabs are re-noised at ``t``;
    ``velocity_fn(x, t)`` returns the (T, C*p*p) prediction array.
    """
    ts = cfg.timesteps()
    if noise is None:
        noise = NoiseDraw.draw(latent_shape, cfg.seed, "sample")
    # the state is integrated in float64; the model only ever sees float32
    z = noise.eps_video.astype(np.float64)
    dt = 1.0 / cfg.steps
    for t in ts:
        x = build_input(z.astype(np.float32), t, noise)
        v = video_prediction(np.asarray(velocity_fn(x, t)), x)
        z = z + dt * v.astype(np.float64)
    z = z.astype(np.float32)
    if return_latent:
        return z
    return decode(z, clamp=True)
