"""Hand-crafted stand-ins for the usual video-stylization metrics.

* style score: cosine between style descriptors (Gram matrix of fixed random
  texture filters + colour histogram) of output frames and reference images
* structure score: cosine between per-patch edge features of two videos
* dynamic degree, subject / background consistency, text-style alignment
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .rng import make_rng

METRIC_SEED = 1234
N_FILTERS = 8
HIST_BINS = 8
PATCH_PIX = 4
PATCH_DIM = 16
PATCH_BIAS = 0.1
DESCRIPTOR_DIM = N_FILTERS * (N_FILTERS + 1) // 2 + 3 * HIST_BINS

COLUMNS = {
    "style": "CSD Score",
    "text": "CLIP-T",
    "structure": "DINO Score",
    "dynamic": "Dynamic Degree",
    "subject": "Subject Consistency",
    "background": "Background Consistency",
}

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def luminance(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) @ _LUMA


def _texture_filters(seed: int = METRIC_SEED) -> np.ndarray:
    w = make_rng(seed, "texture-filters").standard_normal((N_FILTERS, 9))
    w -= w.mean(axis=1, keepdims=True)
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _patch_projection(seed: int = METRIC_SEED) -> np.ndarray:
    return make_rng(seed, "patch-proj").standard_normal((PATCH_PIX * PATCH_PIX, PATCH_DIM)) / PATCH_PIX


_FILTERS = _texture_filters()
_PROJ = _patch_projection()


def _shifted(lum: np.ndarray) -> np.ndarray:
    """(N, H, W) -> (N, 9, H-2, W-2) stack of 3x3 neighbourhood views."""
    h, w = lum.shape[-2:]
    return np.stack([lum[:, dy:h - 2 + dy, dx:w - 2 + dx] for dy in range(3) for dx in range(3)], axis=1)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def style_descriptor(frames: np.ndarray, masks: np.ndarray | None = None) -> np.ndarray:
    """Unit-norm descriptor per frame, shape (N, DESCRIPTOR_DIM).

    With ``masks`` (N, H, W) only the selected pixels contribute; an empty
    region gives the zero vector.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    n, h, w, _ = frames.shape
    resp = np.einsum("kj,njhw->nkhw", _FILTERS, _shifted(luminance(frames)))
    if masks is None:
        inner = np.ones((n, h - 2, w - 2))
        full = np.ones((n, h, w))
    else:
        full = np.asarray(masks, dtype=np.float64).reshape(n, h, w)
        inner = full[:, 1:-1, 1:-1]
    cnt = inner.sum(axis=(1, 2))
    gram = np.einsum("nahw,nbhw,nhw->nab", resp, resp, inner) / np.maximum(cnt, 1)[:, None, None]
    iu = np.triu_indices(N_FILTERS)
    g = gram[:, iu[0], iu[1]]
    g = np.sign(g) * np.sqrt(np.abs(g))

    idx = np.clip((np.clip(frames, 0, 1) * HIST_BINS).astype(int), 0, HIST_BINS - 1)
    hist = np.zeros((n, 3, HIST_BINS))
    for c in range(3):
        for b in range(HIST_BINS):
            hist[:, c, b] = ((idx[..., c] == b) * full).sum(axis=(1, 2))
    hist = np.sqrt(hist / np.maximum(full.sum(axis=(1, 2)), 1)[:, None, None]).reshape(n, -1)
    # centring each part turns the cosine into a correlation; raw histograms
    # and Gram entries share a large positive baseline across all images
    g = g - g.mean(axis=1, keepdims=True)
    hist = np.where(hist.any(axis=1, keepdims=True), hist - hist.mean(axis=1, keepdims=True), 0.0)
    return _unit(np.concatenate([_unit(g), _unit(hist)], axis=1))


def global_style_feature(image: np.ndarray) -> np.ndarray:
    """Frozen style feature of a reference image (or mean over a clip), float32."""
    return style_descriptor(image).mean(axis=0).astype(np.float32)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(_unit(a) * _unit(b), axis=-1), -1.0, 1.0)


def style_score(v: np.ndarray, refs) -> float:
    """Mean cosine over (frame, reference) pairs."""
    refs = [np.asarray(r) for r in refs]
    if not refs:
        raise ValueError("style_score needs at least one reference image")
    ref_frames = np.concatenate([r.reshape((-1,) + r.shape[-3:]) for r in refs])
    dv = style_descriptor(v)
    dr = style_descriptor(ref_frames)
    return float((dv @ dr.T).mean())


def sobel_magnitude(lum: np.ndarray) -> np.ndarray:
    """(N, H, W) luminance -> same-size gradient magnitude (edge-replicated border)."""
    p = np.pad(lum, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, :-2, 2:] + 2 * p[:, 1:-1, 2:] + p[:, 2:, 2:]) - (p[:, :-2, :-2] + 2 * p[:, 1:-1, :-2] + p[:, 2:, :-2])
    gy = (p[:, 2:, :-2] + 2 * p[:, 2:, 1:-1] + p[:, 2:, 2:]) - (p[:, :-2, :-2] + 2 * p[:, :-2, 1:-1] + p[:, :-2, 2:])
    return np.hypot(gx, gy)


def patch_features(frames: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) -> (N, patches, PATCH_DIM + 1) edge-patch features."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    n, h, w, _ = frames.shape
    if h % PATCH_PIX or w % PATCH_PIX:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {PATCH_PIX}")
    e = sobel_magnitude(luminance(frames))
    gh, gw = h // PATCH_PIX, w // PATCH_PIX
    patches = e.reshape(n, gh, PATCH_PIX, gw, PATCH_PIX).transpose(0, 1, 3, 2, 4).reshape(n, gh * gw, -1)
    feats = patches @ _PROJ
    # the constant coordinate keeps flat patches comparable
    bias = np.full(feats.shape[:-1] + (1,), PATCH_BIAS)
    return np.concatenate([feats, bias], axis=-1)


def structure_score(a: np.ndarray, b: np.ndarray) -> float:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"structure_score: geometries {np.shape(a)} and {np.shape(b)} differ")
    return float(_cos(patch_features(a), patch_features(b)).mean())


def dynamic_degree(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.abs(np.diff(v, axis=0)).mean(axis=(1, 2, 3)).mean())


def region_consistency(v: np.ndarray, masks: np.ndarray) -> tuple[float, float]:
    """Mean adjacent-frame descriptor cosine inside / outside the subject mask."""
    masks = np.asarray(masks, dtype=bool)
    if len(v) < 2:
        return 1.0, 1.0
    out = []
    for region in (masks, ~masks):
        d = style_descriptor(v, region)
        empty = ~region.reshape(len(v), -1).any(axis=1)
        sims = []
        for f in range(len(v) - 1):
            if empty[f] and empty[f + 1]:
                sims.append(1.0)
            else:
                sims.append(float(np.clip(d[f] @ d[f + 1], -1, 1)))
        out.append(float(np.mean(sims)))
    return out[0], out[1]


def video_descriptor(v: np.ndarray) -> np.ndarray:
    return _unit(style_descriptor(v).mean(axis=0))


def build_centroids(corpus: dict[int, list[np.ndarray]]) -> dict[int, np.ndarray]:
    """style tag -> renormalised mean descriptor of that tag's reference videos."""
    return {tag: _unit(np.mean([video_descriptor(v) for v in vids], axis=0)) for tag, vids in corpus.items()}


def text_style_alignment(style_tag: int, v: np.ndarray, centroids: dict[int, np.ndarray]) -> float:
    if style_tag not in centroids:
        raise KeyError(f"no centroid for style tag {style_tag}")
    return float(np.clip(video_descriptor(v) @ centroids[style_tag], -1, 1))


def classify_style(v: np.ndarray, centroids: dict[int, np.ndarray]) -> int:
    d = video_descriptor(v)
    return max(centroids, key=lambda tag: float(d @ centroids[tag]))


# -- reports --------------------------------------------------------------

def write_report(out_dir, rows: list[dict], summary: dict | None = None, name: str = "metrics") -> tuple[Path, Path]:
    """``rows`` are dicts with keys sample, mode, metric, value."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["sample", "mode", "metric", "value"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r[k] for k in ("sample", "mode", "metric", "value")})
    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps({"rows": rows, "summary": summary or {}}, indent=1))
    return csv_path, json_path
