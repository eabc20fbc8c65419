"""Training loops: base pretraining, then the CT and SFT LoRA stages.

Every random choice in an iteration (mode, samples, timesteps, noise,
reference pick) comes from a generator keyed on (seed, stage, iteration), so
a run resumed from a checkpoint replays the remaining steps exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import net
from .codec import PATCH, encode
from .conditioning import (
    assemble,
    build_first_frame_input,
    build_style_image_input,
    build_video_input,
    ModelInput,
)
from .datagen import SamplePair
from .flow import NoiseDraw, training_loss, velocity_target
from .metrics import global_style_feature
from .rng import make_rng

log = logging.getLogger(__name__)

TRAIN_MODES = ("text", "style_image", "first_frame")
BASE_MODES = ("text", "first_frame")
STAGES = ("base", "CT", "SFT")
LOG_FIELDS = ["iteration", "mode", "loss", "lr", "grad_norm"]


class TrainError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class StageConfig:
    stage: str = "CT"
    manifest: str | None = None
    iterations: int = 2000
    lr: float = 1e-3
    accum: int = 2
    batch: int = 4
    ratios: tuple = (1.0, 2.0, 1.0)
    seed: int = 0
    lora_mode: str = "token_specific"
    val_count: int = 16
    val_every: int = 250
    checkpoint_every: int = 500

    def validate(self):
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.iterations < 1:
            raise TrainError("iterations must be at least 1")
        if self.accum < 1 or self.batch < 1:
            raise TrainError("accum and batch must be at least 1")
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise TrainError(f"condition ratios must be three positive numbers, got {self.ratios}")
        if self.lora_mode not in net.LORA_MODES:
            raise TrainError(f"unknown lora mode {self.lora_mode!r}")
        return self


def sample_mode(rng: np.random.Generator, ratios=(1.0, 2.0, 1.0), modes=TRAIN_MODES) -> str:
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (len(modes),) or np.any(r < 0) or r.sum() <= 0:
        raise TrainError(f"bad ratios {ratios} for modes {modes}")
    return modes[int(np.searchsorted(np.cumsum(r / r.sum()), rng.random(), side="right"))]


def style_mask_value(lora_mode: str) -> float:
    """Standard LoRA tells token types apart through the mask: -1 for style tokens."""
    return -1.0 if lora_mode == "standard" else 1.0


@dataclass
class Example:
    x: ModelInput
    t: float
    txt: list
    g: np.ndarray | None
    target: np.ndarray
    mode: str


def _image_latent(img: np.ndarray) -> np.ndarray:
    return encode(np.asarray(img).reshape((1,) + np.shape(img)[-3:]))


def build_batch(sample: SamplePair, mode: str, t: float, noise: NoiseDraw,
                rng: np.random.Generator | None = None, ref_index: int | None = None,
                style_mask: float = 1.0, p: int = PATCH) -> Example:
    """One training example for a LoRA stage (branches I / II / III)."""
    z_sty = encode(sample.x_sty)
    z_raw = encode(sample.x_raw)
    if noise.eps_video.shape != z_sty.shape:
        raise TrainError(f"noise {noise.eps_video.shape} does not match latent {z_sty.shape}")
    video = build_video_input(z_sty, z_raw, t, noise.eps_video)
    g = None
    if mode == "text":
        if len(sample.t_sty) <= len(sample.t_ns):
            raise TrainError("text mode needs a styled caption with a style tag")
        x = assemble("text", video, p=p)
        txt = list(sample.t_sty)
    elif mode == "style_image":
        if not sample.refs:
            raise TrainError("style-image mode needs at least one reference image")
        if ref_index is None:
            ref_index = int(rng.integers(len(sample.refs))) if rng is not None else 0
        ref = sample.refs[ref_index]
        slab = build_style_image_input(_image_latent(ref), t, noise.eps_style, style_mask)
        x = assemble("style_image", video, style_slab=slab, p=p)
        txt = list(sample.t_ns)
        g = global_style_feature(ref)
    elif mode == "first_frame":
        slab = build_first_frame_input(encode(sample.x_sty[:1]), t, noise.eps_first)
        x = assemble("first_frame", video, first_slab=slab, p=p)
        txt = list(sample.t_ns)
    else:
        raise TrainError(f"unknown training mode {mode!r}; expected one of {TRAIN_MODES}")
    return Example(x, float(t), txt, g, velocity_target(z_sty, noise.eps_video), mode)


def build_base_batch(sample: SamplePair, mode: str, t: float, noise: NoiseDraw, p: int = PATCH) -> Example:
    """Base-model example on the raw video: text-to-video or first-frame-to-video."""
    z_raw = encode(sample.x_raw)
    video = build_video_input(z_raw, None, t, noise.eps_video)
    if mode == "text":
        x = assemble("text", video, p=p)
    elif mode == "first_frame":
        slab = build_first_frame_input(z_raw[:, :1], t, noise.eps_first)
        x = assemble("first_frame", video, first_slab=slab, p=p)
    else:
        raise TrainError(f"unknown base mode {mode!r}; expected one of {BASE_MODES}")
    return Example(x, float(t), list(sample.t_ns), None, velocity_target(z_raw, noise.eps_video), mode)


# -- optimiser ----------------------------------------------------------------

class AdamW:
    def __init__(self, names, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, decay=None):
        self.names = list(names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.decay = set(self.names if decay is None else decay)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ad.Tensor], lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            p = params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p.data)
                self.v[n] = np.zeros_like(p.data)
            v = self.v[n]
            m *= np.float32(self.b1)
            m += np.float32(1 - self.b1) * g
            v *= np.float32(self.b2)
            v += np.float32(1 - self.b2) * (g * g)
            upd = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(self.eps))
            if n in self.decay:
                upd = upd + np.float32(self.wd) * p.data
            p.data = (p.data - np.float32(lr) * upd).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        out["opt.step"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, extra: dict[str, np.ndarray]):
        self.t = int(extra.get("opt.step", np.zeros(1))[0])
        for n in self.names:
            if f"opt.m.{n}" in extra:
                self.m[n] = extra[f"opt.m.{n}"].copy()
                self.v[n] = extra[f"opt.v.{n}"].copy()


def decay_names(m: net.Model) -> list[str]:
    """Weight decay hits LoRA matrices in adapter mode, weight matrices otherwise."""
    if m.cfg.lora_mode == "off":
        return [n for n, p in m.params.items() if p.data.ndim == 2]
    return [n for n in m.params if ".lora." in n]


@dataclass
class TrainState:
    model: net.Model
    opt: AdamW
    iteration: int = 0
    micro: int = 0
    losses: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: net.Model, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01) -> "TrainState":
        model.apply_freeze()
        return cls(model, AdamW(model.trainable_names(), betas, eps, weight_decay, decay_names(model)))


def _grad_norm(m: net.Model, names) -> float:
    total = 0.0
    for n in names:
        g = m.params[n].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def forward_examples(m: net.Model, batch: list[Example]) -> ad.Tensor:
    return net.forward(m, [e.x for e in batch], [e.t for e in batch],
                       [e.txt for e in batch], [e.g for e in batch])


def train_step(state: TrainState, batch: list[Example], lr: float, accum: int = 1) -> dict:
    """Forward + backward on one micro-batch; AdamW update every ``accum`` calls."""
    if not batch:
        raise TrainError("empty batch")
    m = state.model
    loss = training_loss(forward_examples(m, batch), [e.target for e in batch], [e.x for e in batch])
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(
            f"non-finite loss {value} at iteration {state.iteration} "
            f"(mode {batch[0].mode}, t={[round(e.t, 4) for e in batch]})"
        )
    ad.backward(loss)
    state.micro += 1
    out = {"loss": value, "updated": False}
    if state.micro % accum == 0:
        names = state.opt.names
        for n in names:
            g = m.params[n].grad
            if g is not None:
                g /= np.float32(accum)
        gn = _grad_norm(m, names)
        if not math.isfinite(gn):
            raise NumericError(f"non-finite gradient norm at iteration {state.iteration}")
        state.opt.step(m.params, lr)
        m.zero_grad()
        state.iteration += 1
        out.update(updated=True, grad_norm=gn)
    return out


# -- data order / validation -----------------------------------------------------

def _sample_index(n: int, seed: int, stage: str, counter: int) -> int:
    epoch, pos = divmod(counter, n)
    return int(make_rng(seed, stage, "epoch", epoch).permutation(n)[pos])


def draw_examples(samples: list[SamplePair], cfg: StageConfig, iteration: int, micro: int,
                  style_mask: float = 1.0) -> list[Example]:
    rng = make_rng(cfg.seed, cfg.stage, "iter", iteration, micro)
    if cfg.stage == "base":
        mode = sample_mode(rng, (cfg.ratios[0], cfg.ratios[2]), BASE_MODES)
    else:
        mode = sample_mode(rng, cfg.ratios)
    out = []
    for j in range(cfg.batch):
        counter = (iteration * cfg.accum + micro) * cfg.batch + j
        s = samples[_sample_index(len(samples), cfg.seed, cfg.stage, counter)]
        t = float(rng.random())
        noise = NoiseDraw.draw(encode(s.x_raw).shape, cfg.seed, cfg.stage, iteration, micro, j)
        if cfg.stage == "base":
            out.append(build_base_batch(s, mode, t, noise))
        else:
            out.append(build_batch(s, mode, t, noise, rng=rng, style_mask=style_mask))
    return out


def validation_examples(samples: list[SamplePair], stage: str, seed: int,
                        style_mask: float = 1.0) -> list[Example]:
    """Fixed held-out examples: modes cycle, times on a grid, seeded noise."""
    modes = BASE_MODES if stage == "base" else TRAIN_MODES
    out = []
    for i, s in enumerate(samples):
        mode = modes[i % len(modes)]
        t = (i + 0.5) / len(samples)
        noise = NoiseDraw.draw(encode(s.x_raw).shape, seed, "val", i)
        if stage == "base":
            out.append(build_base_batch(s, mode, t, noise))
        else:
            out.append(build_batch(s, mode, t, noise, ref_index=0, style_mask=style_mask))
    return out


def validation_loss(m: net.Model, examples: list[Example]) -> float:
    """Mean per-example flow loss; examples are grouped by layout for batching."""
    groups: dict[tuple, list[Example]] = {}
    for e in examples:
        groups.setdefault((e.mode, len(e.txt)), []).append(e)
    total = 0.0
    with ad.no_grad():
        for batch in groups.values():
            loss = training_loss(forward_examples(m, batch), [e.target for e in batch], [e.x for e in batch])
            total += loss.item() * len(batch)
    return total / len(examples)


def split_validation(samples: list[SamplePair], count: int) -> tuple[list, list]:
    """Last ``count`` samples are held out (at most a quarter of the set)."""
    count = min(count, len(samples) // 4)
    if count == 0:
        return list(samples), []
    return list(samples[:-count]), list(samples[-count:])


# -- checkpoints ------------------------------------------------------------------

def save_state(path, state: TrainState, cfg: StageConfig, extra_meta: dict | None = None) -> Path:
    tensors = state.opt.state_tensors()
    tensors["state.iteration"] = np.array([state.iteration], dtype=np.float32)
    meta = {"stage": asdict(cfg), "iteration": state.iteration}
    meta.update(extra_meta or {})
    return net.save_checkpoint(path, state.model, tensors, meta)


def load_state(path, **opt) -> tuple[TrainState, dict]:
    """``opt`` holds the AdamW settings (betas, eps, weight_decay)."""
    m, extra, meta = net.load_checkpoint(path)
    state = TrainState.fresh(m, **opt)
    state.opt.load_state(extra)
    state.iteration = int(extra.get("state.iteration", np.zeros(1))[0])
    state.micro = 0
    return state, meta


def latest_checkpoint(out_dir, stage: str) -> Path | None:
    """Newest periodic ``<stage>_NNNNN.json`` in ``out_dir``, if any."""
    found = sorted(Path(out_dir).glob(f"{stage}_[0-9][0-9][0-9][0-9][0-9].json"))
    return found[-1] if found else None


def resume(out_dir, stage: str, **opt):
    """(state, validation history) from the newest periodic checkpoint, or None."""
    path = latest_checkpoint(out_dir, stage)
    if path is None:
        return None
    state, meta = load_state(path, **opt)
    log.info("resuming %s from %s (iteration %d)", stage, path.name, state.iteration)
    return state, meta.get("val_history", [])


class CsvLog:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self.fh = open(self.path, "a" if not fresh else "w", newline="")
        self.wr = csv.DictWriter(self.fh, fieldnames=LOG_FIELDS)
        if fresh:
            self.wr.writeheader()

    def write(self, row: dict):
        self.wr.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_stage(cfg: StageConfig, state: TrainState, samples: list[SamplePair],
              val_samples: list[SamplePair] | None = None, out_dir=None,
              history: list | None = None) -> tuple[TrainState, dict]:
    """Train ``state`` up to ``cfg.iterations`` optimiser updates.

    Returns the state and a summary holding the validation history.
    Checkpoints and ``<stage>_log.csv`` go to ``out_dir`` when given.
    """
    cfg.validate()
    if not samples:
        raise TrainError(f"stage {cfg.stage}: no training samples")
    mask = style_mask_value(state.model.cfg.lora_mode)
    val = validation_examples(val_samples, cfg.stage, cfg.seed, mask) if val_samples else []
    out_dir = Path(out_dir) if out_dir is not None else None
    logger = CsvLog(out_dir / f"{cfg.stage}_log.csv", append=state.iteration > 0) if out_dir else None
    history = [tuple(h) for h in history or []]
    if val and state.iteration == 0:
        history.append((0, validation_loss(state.model, val)))
        log.info("%s: initial validation loss %.5f", cfg.stage, history[-1][1])
    try:
        while state.iteration < cfg.iterations:
            it = state.iteration
            losses, modes, gn = [], [], 0.0
            for a in range(cfg.accum):
                batch = draw_examples(samples, cfg, it, a, mask)
                r = train_step(state, batch, cfg.lr, cfg.accum)
                losses.append(r["loss"])
                modes.append(batch[0].mode)
                gn = r.get("grad_norm", gn)
            loss = float(np.mean(losses))
            state.losses.append(loss)
            del state.losses[:-100]
            if logger:
                logger.write({"iteration": it + 1, "mode": "+".join(modes), "loss": f"{loss:.6f}",
                              "lr": cfg.lr, "grad_norm": f"{gn:.6f}"})
            done = state.iteration
            if val and (done % cfg.val_every == 0 or done == cfg.iterations):
                history.append((done, validation_loss(state.model, val)))
                log.info("%s: iter %d validation loss %.5f", cfg.stage, done, history[-1][1])
            if out_dir and (done % cfg.checkpoint_every == 0 or done == cfg.iterations):
                save_state(out_dir / f"{cfg.stage}_{done:05d}.json", state, cfg, {"val_history": history})
    finally:
        if logger:
            logger.close()
    summary = {"stage": cfg.stage, "iterations": state.iteration, "val_history": history}
    if out_dir:
        save_state(out_dir / f"{cfg.stage}.json", state, cfg, {"val_history": history})
        summary["checkpoint"] = str(out_dir / f"{cfg.stage}.json")
    return state, summary
