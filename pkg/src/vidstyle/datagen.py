"""Procedural paired stylization data.

Raw clips are a single shape moving over a gradient background, rendered
together with its exact per-frame footprint. Deterministic style operators
play the role of the image stylizer; the same operator is applied to K other
scenes to produce the style references. Captions are tag lists; the
style-free caption never contains a style tag.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .codec import read_vtf, write_vtf
from .rng import make_rng

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
    "white": (0.95, 0.95, 0.95),
}
MOTIONS = ("linear", "circular")
BACKGROUNDS = {
    "lagoon": ((0.27, 0.57, 0.62), (0.52, 0.82, 0.87)),
    "sea": ((0.32, 0.62, 0.72), (0.62, 0.87, 0.97)),
    "reef": ((0.22, 0.52, 0.57), (0.47, 0.77, 0.77)),
    "shallows": ((0.37, 0.67, 0.67), (0.67, 0.92, 0.92)),
}
TEXTURE_AMP = 0.08
GRADIENT_DIRS = ("horizontal", "vertical", "diagonal", "radial")

SHAPE_TAG0 = 0
COLOR_TAG0 = SHAPE_TAG0 + len(SHAPES)
MOTION_TAG0 = COLOR_TAG0 + len(COLORS)
BG_TAG0 = MOTION_TAG0 + len(MOTIONS)
CONTENT_TAGS = frozenset(range(BG_TAG0 + len(BACKGROUNDS)))
STYLE_TAG0 = 32

DEFAULT_GEOMETRY = {"frames": 8, "height": 16, "width": 16}


class DataError(RuntimeError):
    pass


# -- scenes -----------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    background: str
    gradient: str
    size: float  # subject half-extent in pixels
    start: tuple[float, float]  # linear: first centre; circular: orbit centre
    velocity: tuple[float, float]  # linear: px/frame; circular: (orbit radius, rad/frame)
    phase: float = 0.0

    def tags(self) -> list[int]:
        return [
            SHAPE_TAG0 + SHAPES.index(self.shape),
            COLOR_TAG0 + list(COLORS).index(self.color),
            MOTION_TAG0 + MOTIONS.index(self.motion),
            BG_TAG0 + list(BACKGROUNDS).index(self.background),
        ]

    def centre(self, f: int) -> tuple[float, float]:
        if self.motion == "linear":
            return self.start[0] + f * self.velocity[0], self.start[1] + f * self.velocity[1]
        r, w = self.velocity
        a = self.phase + f * w
        return self.start[0] + r * np.cos(a), self.start[1] + r * np.sin(a)

    def with_speed(self, factor: float) -> "SceneSpec":
        if self.motion == "linear":
            vel = (self.velocity[0] * factor, self.velocity[1] * factor)
        else:
            vel = (self.velocity[0], self.velocity[1] * factor)
        return SceneSpec(self.shape, self.color, self.motion, self.background, self.gradient,
                         self.size, self.start, vel, self.phase)


def random_scene(rng: np.random.Generator, frames: int, height: int, width: int,
                 motion: str | None = None) -> SceneSpec:
    # the clamps only bind below the 16x16 desk geometry
    side = min(height, width)
    size = min(float(rng.uniform(2.5, 3.5)), side / 4)
    motion = motion or MOTIONS[rng.integers(len(MOTIONS))]
    margin = size + 0.5
    r_hi = min(3.0, (side - 1) / 2 - margin)
    if motion == "circular" and r_hi <= 0:
        motion = "linear"
    if motion == "linear":
        span = max(frames - 1, 1)
        vmax = min(1.0, max(side - 1 - 2 * margin, 0.0) / span)
        vx, vy = rng.uniform(-vmax, vmax, size=2)
        # start so that the whole path stays inside the frame
        lo_x, hi_x = margin - min(0, vx * span), width - 1 - margin - max(0, vx * span)
        lo_y, hi_y = margin - min(0, vy * span), height - 1 - margin - max(0, vy * span)
        start = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
        velocity = (float(vx), float(vy))
        phase = 0.0
    else:
        r = float(rng.uniform(min(1.5, r_hi), r_hi))
        cx = float(rng.uniform(margin + r, width - 1 - margin - r))
        cy = float(rng.uniform(margin + r, height - 1 - margin - r))
        start = (cx, cy)
        velocity = (r, float(rng.choice([-1, 1]) * rng.uniform(0.2, 0.5)))
        phase = float(rng.uniform(0, 2 * np.pi))
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=list(COLORS)[rng.integers(len(COLORS))],
        motion=motion,
        background=list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))],
        gradient=GRADIENT_DIRS[rng.integers(len(GRADIENT_DIRS))],
        size=size,
        start=start,
        velocity=velocity,
        phase=phase,
    )


def _background(spec: SceneSpec, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.gradient == "horizontal":
        a = xx / (w - 1)
    elif spec.gradient == "vertical":
        a = yy / (h - 1)
    elif spec.gradient == "diagonal":
        a = (xx + yy) / (h + w - 2)
    else:
        a = np.hypot(xx - (w - 1) / 2, yy - (h - 1) / 2)
        a = a / a.max()
    c0, c1 = (np.array(c) for c in BACKGROUNDS[spec.background])
    return (1 - a)[..., None] * c0 + a[..., None] * c1


def rasterize(spec: SceneSpec, f: int, h: int, w: int) -> np.ndarray:
    cx, cy = spec.centre(f)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    s = spec.size
    if spec.shape == "circle":
        return dx * dx + dy * dy <= s * s
    if spec.shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upright triangle with apex at top
    inside_y = (dy >= -s) & (dy <= s)
    half = (dy + s) / 2.0
    return inside_y & (np.abs(dx) <= half)


def gen_raw_video(spec: SceneSpec, frames: int, height: int, width: int, seed: int):
    """Returns (video (F, H, W, 3), masks (F, H, W) bool)."""
    rng = make_rng(seed, "texture")
    bg = _background(spec, height, width)
    bg = np.clip(bg + rng.uniform(-TEXTURE_AMP, TEXTURE_AMP, size=(height, width, 1)), 0, 1)
    color = np.array(COLORS[spec.color])
    video = np.empty((frames, height, width, 3), dtype=np.float32)
    masks = np.empty((frames, height, width), dtype=bool)
    for f in range(frames):
        m = rasterize(spec, f, height, width)
        masks[f] = m
        video[f] = np.where(m[..., None], color, bg)
    return video, masks


# -- style operators ----------------------------------------------------------

PALETTE = np.array([(0.12, 0.05, 0.3), (0.55, 0.1, 0.45), (0.95, 0.45, 0.2), (1.0, 0.92, 0.55)])
SEPIA = np.array([[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]])


def _palette_remap(v, k):
    lum = metrics.luminance(v)
    idx = np.clip((lum * k).astype(int), 0, k - 1)
    pal = PALETTE[np.round(np.linspace(0, len(PALETTE) - 1, k)).astype(int)]
    return pal[idx]


def _invert(v):
    return 1.0 - v


def _sepia(v):
    return np.clip(v @ SEPIA.T, 0, 1)


def _posterize(v, k):
    return np.round(v * (k - 1)) / (k - 1)


def _edge_sketch(v):
    e = metrics.sobel_magnitude(metrics.luminance(v).reshape((-1,) + v.shape[-3:-1]))
    g = np.clip(1.0 - 1.0 * (e - 0.4), 0, 1).reshape(v.shape[:-1])
    return np.repeat(g[..., None], 3, axis=-1)


def _checker_overlay(v, cell=4, dark=0.55):
    h, w = v.shape[-3:-1]
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return v * (dark + (1.0 - dark) * board)[..., None]


def _hue_rotate(v, degrees):
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    # Rodrigues rotation about the grey axis (1, 1, 1) / sqrt(3)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + (1 - c) * k, k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + (1 - c) * k],
    ])
    return np.clip(v @ m.T, 0, 1)


def _pixelate(v, b):
    h, w = v.shape[-3:-1]
    lead, c = v.shape[:-3], v.shape[-1]
    grid = lead + (h // b, b, w // b, b, c)
    blocks = v.reshape(grid).mean(axis=(-4, -2), keepdims=True)
    return np.broadcast_to(blocks, grid).reshape(v.shape)


@dataclass(frozen=True)
class StyleOperator:
    name: str
    params: tuple = ()

    @property
    def tag(self) -> int:
        return STYLE_TAG0 + list(OPERATORS).index(self.name)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return apply_style(self, v)


_IMPLS = {
    "palette_remap": _palette_remap,
    "invert": _invert,
    "sepia": _sepia,
    "posterize": _posterize,
    "edge_sketch": _edge_sketch,
    "checker_overlay": _checker_overlay,
    "hue_rotate": _hue_rotate,
    "pixelate": _pixelate,
}

OPERATORS = {
    "palette_remap": StyleOperator("palette_remap", (4,)),
    "invert": StyleOperator("invert"),
    "sepia": StyleOperator("sepia"),
    "posterize": StyleOperator("posterize", (3,)),
    "edge_sketch": StyleOperator("edge_sketch"),
    "checker_overlay": StyleOperator("checker_overlay", (4, 0.25)),
    "hue_rotate": StyleOperator("hue_rotate", (120.0,)),
    "pixelate": StyleOperator("pixelate", (2,)),
}
STYLE_TAGS = frozenset(op.tag for op in OPERATORS.values())
TAG_TO_OP = {op.tag: name for name, op in OPERATORS.items()}

# operator draw pools per data profile
POOLS = {"CT": tuple(OPERATORS), "SFT": tuple(OPERATORS)}


def get_operator(name: str) -> StyleOperator:
    try:
        return OPERATORS[name]
    except KeyError:
        raise DataError(f"unknown style operator {name!r}; known: {sorted(OPERATORS)}") from None


def apply_style(op: StyleOperator | str, v: np.ndarray) -> np.ndarray:
    if isinstance(op, str):
        op = get_operator(op)
    if op.name not in _IMPLS:
        raise DataError(f"unknown style operator {op.name!r}")
    out = _IMPLS[op.name](np.asarray(v, dtype=np.float64), *op.params)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def style_mask(op: StyleOperator | str, masks: np.ndarray) -> np.ndarray:
    """Subject footprint after the operator's geometric part."""
    name = op if isinstance(op, str) else op.name
    if name != "pixelate":
        return masks.copy()
    b = get_operator(name).params[0]
    m = masks.astype(np.float64)[..., None]
    return _pixelate(m, b)[..., 0] >= 0.5


def extract_control(v: np.ndarray) -> np.ndarray:
    """Per-frame Sobel edge map of luminance, normalised to [0, 1]."""
    e = metrics.sobel_magnitude(metrics.luminance(v))
    peak = e.max(axis=(1, 2), keepdims=True)
    return np.where(peak > 0, e / np.where(peak > 0, peak, 1), 0.0).astype(np.float32)


# -- samples ------------------------------------------------------------------

K_RANGE = {"CT": (1, 1), "SFT": (1, 16)}
CT_NOISE = 0.03
CT_BRIGHTNESS = 0.02


@dataclass
class SamplePair:
    x_raw: np.ndarray
    x_sty: np.ndarray
    t_ns: list[int]
    t_sty: list[int]
    refs: list[np.ndarray]  # each (1, H, W, 3)
    op: str
    control: np.ndarray
    tier: str
    masks: np.ndarray | None = None
    spec: SceneSpec | None = None

    @property
    def K(self) -> int:
        return len(self.refs)


def make_sample(spec: SceneSpec, op: StyleOperator | str, K: int, tier: str, seed: int,
                frames: int = 8, height: int = 16, width: int = 16) -> SamplePair:
    if isinstance(op, str):
        op = get_operator(op)
    if tier not in K_RANGE:
        raise DataError(f"unknown tier {tier!r}")
    lo, hi = K_RANGE[tier]
    if not lo <= K <= hi:
        raise DataError(f"K={K} outside [{lo}, {hi}] for tier {tier}")
    x_raw, masks = gen_raw_video(spec, frames, height, width, seed)
    x_sty = apply_style(op, x_raw)
    rng = make_rng(seed, "sample")
    if tier == "CT":
        noise = rng.uniform(-CT_NOISE, CT_NOISE, size=x_sty.shape)
        jitter = rng.uniform(-CT_BRIGHTNESS, CT_BRIGHTNESS, size=(frames, 1, 1, 1))
        x_sty = np.clip(x_sty + noise + jitter, 0, 1).astype(np.float32)
    refs = []
    for j in range(K):
        while True:
            other = random_scene(rng, 1, height, width)
            if other.tags() != spec.tags() or other.start != spec.start:
                break
        frame, _ = gen_raw_video(other, 1, height, width, int(rng.integers(2**31 - 1)))
        refs.append(apply_style(op, frame))
    t_ns = spec.tags()
    return SamplePair(
        x_raw=x_raw,
        x_sty=x_sty,
        t_ns=t_ns,
        t_sty=t_ns + [op.tag],
        refs=refs,
        op=op.name,
        control=extract_control(x_raw),
        tier=tier,
        masks=masks,
        spec=spec,
    )


def auto_filter(s: SamplePair, tau_style: float, tau_struct: float | None = None):
    """Returns (accepted, scores)."""
    scores = {"style": metrics.style_score(s.x_sty, s.refs)}
    ok = scores["style"] >= tau_style
    if s.tier == "SFT":
        scores["structure"] = metrics.structure_score(s.x_raw, s.x_sty)
        if tau_struct is not None:
            ok = ok and scores["structure"] >= tau_struct
    return bool(ok), scores


# -- datasets -----------------------------------------------------------------

# calibrated against the operator swap test; the run config can override them
DEFAULT_THRESHOLDS = {
    "CT": {"tau_style": 0.5, "tau_struct": None},
    "SFT": {"tau_style": 0.68, "tau_struct": 0.4},
}
MAX_RETRIES = 20


@dataclass
class DatasetManifest:
    profile: str
    seed: int
    geometry: dict
    thresholds: dict
    samples: list[dict] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> str:
        d = {
            "profile": self.profile,
            "seed": self.seed,
            "geometry": self.geometry,
            "thresholds": self.thresholds,
            "samples": self.samples,
        }
        return json.dumps(d, indent=1, sort_keys=True)

    def __len__(self):
        return len(self.samples)


def _draw_sample(profile: str, index: int, attempt: int, seed: int, geometry: dict) -> SamplePair:
    rng = make_rng(seed, profile, index, attempt)
    f, h, w = geometry["frames"], geometry["height"], geometry["width"]
    spec = random_scene(rng, f, h, w)
    pool = POOLS[profile]
    op = pool[int(rng.integers(len(pool)))]
    lo, hi = K_RANGE[profile]
    k = lo + index % (hi - lo + 1)
    return make_sample(spec, op, k, profile, int(rng.integers(2**31 - 1)), f, h, w)


def write_sample(d: Path, s: SamplePair) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    write_vtf(d / "raw.vtf", s.x_raw)
    write_vtf(d / "sty.vtf", s.x_sty)
    write_vtf(d / "control.vtf", s.control[..., None])
    write_vtf(d / "masks.vtf", s.masks[..., None].astype(np.float32))
    ref_files = []
    for j, r in enumerate(s.refs):
        write_vtf(d / f"ref_{j}.vtf", r)
        ref_files.append(f"ref_{j}.vtf")
    (d / "tags.json").write_text(json.dumps({"t_ns": s.t_ns, "t_sty": s.t_sty, "op": s.op}, sort_keys=True))
    return {
        "raw": "raw.vtf",
        "sty": "sty.vtf",
        "control": "control.vtf",
        "masks": "masks.vtf",
        "refs": ref_files,
        "tags": "tags.json",
    }


def build_dataset(profile: str, n: int, seed: int, out_dir=None, geometry: dict | None = None,
                  thresholds: dict | None = None, max_retries: int = MAX_RETRIES):
    """Generate, filter and (optionally) write ``n`` accepted samples.

    Returns (manifest, samples, stats) where stats counts accepted/rejected
    draws and keeps every filter score.
    """
    if profile not in POOLS:
        raise DataError(f"unknown profile {profile!r}; expected CT or SFT")
    if n < 1:
        raise DataError("n must be at least 1")
    geometry = dict(geometry or DEFAULT_GEOMETRY)
    th = dict(DEFAULT_THRESHOLDS[profile])
    th.update(thresholds or {})
    out_dir = Path(out_dir) if out_dir is not None else None
    manifest = DatasetManifest(profile, seed, geometry, th, root=out_dir)
    samples = []
    rejected = Counter()
    scores_seen = []
    for i in range(n):
        for attempt in range(max_retries):
            s = _draw_sample(profile, i, attempt, seed, geometry)
            ok, sc = auto_filter(s, th["tau_style"], th.get("tau_struct"))
            scores_seen.append(sc)
            if ok:
                break
            rejected[s.op] += 1
        else:
            raise DataError(
                f"sample {i}: no accepted draw after {max_retries} retries; "
                f"rejections by operator: {dict(rejected)}"
            )
        entry = {
            "id": f"{i:05d}",
            "op": s.op,
            "tier": profile,
            "K": s.K,
            "t_ns": s.t_ns,
            "t_sty": s.t_sty,
            "scores": {k: round(v, 6) for k, v in sc.items()},
            "attempt": attempt,
        }
        if out_dir is not None:
            entry["dir"] = f"samples/{entry['id']}"
            entry["files"] = write_sample(out_dir / entry["dir"], s)
        manifest.samples.append(entry)
        samples.append(s)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(manifest.to_json())
    stats = {"accepted": n, "rejected": sum(rejected.values()), "rejected_by_op": dict(rejected),
             "scores": scores_seen}
    return manifest, samples, stats


def load_sample(root: Path, entry: dict) -> SamplePair:
    d = Path(root) / entry["dir"]
    files = entry["files"]
    tags = json.loads((d / files["tags"]).read_text())
    return SamplePair(
        x_raw=read_vtf(d / files["raw"]),
        x_sty=read_vtf(d / files["sty"]),
        t_ns=tags["t_ns"],
        t_sty=tags["t_sty"],
        refs=[read_vtf(d / r) for r in files["refs"]],
        op=tags["op"],
        control=read_vtf(d / files["control"])[..., 0],
        tier=entry["tier"],
        masks=read_vtf(d / files["masks"])[..., 0] > 0.5,
    )


def load_dataset(path):
    """``path`` is a dataset directory or its manifest.json. Returns (manifest dict, samples)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    root = path.parent
    return manifest, [load_sample(root, e) for e in manifest["samples"]]


def validate_dataset(path) -> list[str]:
    """Problems found in a written dataset (empty list when valid)."""
    manifest, samples = load_dataset(path)
    problems = []
    th = manifest["thresholds"]
    for e, s in zip(manifest["samples"], samples):
        if e["scores"]["style"] < th["tau_style"]:
            problems.append(f"{e['id']}: style score below threshold")
        if set(s.t_ns) & STYLE_TAGS:
            problems.append(f"{e['id']}: style tag in style-free caption")
        if len(s.refs) != e["K"]:
            problems.append(f"{e['id']}: expected {e['K']} refs, found {len(s.refs)}")
    return problems
