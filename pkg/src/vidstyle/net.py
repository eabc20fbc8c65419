"""Toy diffusion transformer with token-routed LoRA adapters.

Every block runs full self-attention over all tokens (video and condition
frames together), cross-attention to the caption tags plus one global style
token, and an FFN. The self-attention projections and both FFN matrices can
carry a LoRA adapter whose down projection is shared and whose up projection
is picked by token type (first frame / video / style image).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .conditioning import FIRST, MASK_CHANNELS, STYLE, VIDEO, ModelInput
from .rng import make_rng

LORA_MODES = ("token_specific", "standard", "off")
STYLE_FEATURE_DIM = 60  # see metrics.style_descriptor
ADAPTED = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    blocks: int = 4
    heads: int = 4
    ffn_mult: int = 4
    patch: int = 2
    latent_channels: int = 12
    lora_rank: int = 8
    lora_mode: str = "token_specific"
    lora_scale: float = 1.0
    vocab: int = 64
    style_dim: int = STYLE_FEATURE_DIM

    def validate(self):
        if self.dim % self.heads:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.lora_rank <= self.dim:
            raise ModelError(f"lora rank {self.lora_rank} must be in [1, {self.dim}]")
        if self.lora_mode not in LORA_MODES:
            raise ModelError(f"unknown lora mode {self.lora_mode!r}")

    @property
    def in_dim(self) -> int:
        return (2 * self.latent_channels + MASK_CHANNELS) * self.patch**2

    @property
    def out_dim(self) -> int:
        return self.latent_channels * self.patch**2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)


class LoraAdapter:
    """Shared down projection, one up projection per token type."""

    def __init__(self, down: ad.Tensor, ups: list[ad.Tensor], scale: float = 1.0):
        self.down = down  # (D_in, r)
        self.ups = ups  # each (r, D_out); 3 for token_specific, 1 for standard
        self.scale = scale

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def n_params(self) -> int:
        return self.down.data.size + sum(u.data.size for u in self.ups)

    def up_for(self, type_idx: int) -> ad.Tensor:
        if type_idx not in (FIRST, VIDEO, STYLE):
            raise ModelError(f"invalid token type {type_idx}")
        return self.ups[type_idx] if len(self.ups) == 3 else self.ups[0]


def lora_apply(x_in: np.ndarray, type_idx: int, a: LoraAdapter | None, mode: str = "token_specific") -> np.ndarray:
    """Residual for one token vector: scale * up[type] @ (down @ x)."""
    if type_idx not in (FIRST, VIDEO, STYLE):
        raise ModelError(f"invalid token type {type_idx}")
    if a is None or mode == "off":
        d_out = a.ups[0].shape[1] if a is not None else 0
        return np.zeros(d_out, dtype=np.float32)
    up = a.up_for(type_idx) if mode == "token_specific" else a.ups[0]
    return np.float32(a.scale) * ((x_in @ a.down.data) @ up.data)


def _sinusoid(pos: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / max(half, 1))
    ang = np.asarray(pos, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, ad.Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}
        self._collect_adapters()

    # -- construction -----------------------------------------------------
    def _collect_adapters(self):
        self.adapters = {}
        for name in self.params:
            if name.endswith(".lora.down"):
                stem = name[: -len(".lora.down")]
                ups = [self.params[f"{stem}.lora.up{i}"] for i in range(3)
                       if f"{stem}.lora.up{i}" in self.params]
                self.adapters[stem] = LoraAdapter(self.params[name], ups, self.cfg.lora_scale)

    def named_parameters(self):
        return self.params.items()

    def is_adapter_param(self, name: str) -> bool:
        return (".lora." in name or name.startswith("text_embed")
                or name.startswith("style_proj") or name.startswith("time_mlp"))

    def trainable_names(self) -> list[str]:
        if self.cfg.lora_mode == "off":
            return list(self.params)
        return [n for n in self.params if self.is_adapter_param(n)]

    def apply_freeze(self):
        train = set(self.trainable_names())
        for n, p in self.params.items():
            p.requires_grad = n in train

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        with ad.precision(dtype):
            params = {n: ad.Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
                      for n, p in self.params.items()}
        return Model(self.cfg, params)

    def copy(self) -> "Model":
        m = Model(self.cfg, {n: ad.Tensor(p.data.copy(), requires_grad=p.requires_grad)
                             for n, p in self.params.items()})
        return m

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _base_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.dim, cfg.dim * cfg.ffn_mult
    shapes = {
        "in_proj.weight": (cfg.in_dim, d),
        "in_proj.bias": (d,),
        "time_mlp.fc1.weight": (d, d),
        "time_mlp.fc1.bias": (d,),
        "time_mlp.fc2.weight": (d, d),
        "time_mlp.fc2.bias": (d,),
        "text_embed": (cfg.vocab, d),
        "style_proj": (cfg.style_dim, d),
    }
    for i in range(cfg.blocks):
        b = f"blocks.{i}"
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"{b}.{ln}.weight"] = (d,)
            shapes[f"{b}.{ln}.bias"] = (d,)
        for part in ("attn", "xattn"):
            for proj in "qkvo":
                shapes[f"{b}.{part}.{proj}.weight"] = (d, d)
                shapes[f"{b}.{part}.{proj}.bias"] = (d,)
        shapes[f"{b}.ffn.fc1.weight"] = (d, hid)
        shapes[f"{b}.ffn.fc1.bias"] = (hid,)
        shapes[f"{b}.ffn.fc2.weight"] = (hid, d)
        shapes[f"{b}.ffn.fc2.bias"] = (d,)
    shapes["out_ln.weight"] = (d,)
    shapes["out_ln.bias"] = (d,)
    shapes["out_proj.weight"] = (d, cfg.out_dim)
    shapes["out_proj.bias"] = (cfg.out_dim,)
    return shapes


def _init_base(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in _base_shapes(cfg).items():
        rng = make_rng(seed, "init", name)
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif ".ln" in name or name.startswith("out_ln"):
            arr = np.ones(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        out[name] = arr.astype(np.float32)
    return out


def _init_lora(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    out = {}
    if cfg.lora_mode == "off":
        return out
    n_up = 3 if cfg.lora_mode == "token_specific" else 1
    shapes = _base_shapes(cfg)
    for i in range(cfg.blocks):
        for stem in ADAPTED:
            full = f"blocks.{i}.{stem}"
            d_in, d_out = shapes[f"{full}.weight"]
            rng = make_rng(seed, "lora", full)
            out[f"{full}.lora.down"] = (rng.standard_normal((d_in, cfg.lora_rank)) / math.sqrt(d_in)).astype(np.float32)
            for u in range(n_up):
                out[f"{full}.lora.up{u}"] = np.zeros((cfg.lora_rank, d_out), dtype=np.float32)
    return out


def _ordered(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {n: ad.Tensor(a, name=n) for n, a in arrays.items()}


def init_model(cfg: ModelConfig, seed: int) -> Model:
    cfg.validate()
    arrays = _init_base(cfg, seed)
    arrays.update(_init_lora(cfg, seed))
    m = Model(cfg, _ordered(cfg, arrays))
    m.apply_freeze()
    return m


def attach_lora(base: Model, mode: str, rank: int | None = None, seed: int = 0,
                scale: float | None = None) -> Model:
    """Copy of ``base`` with fresh zero-up LoRA adapters in ``mode``."""
    d = asdict(base.cfg)
    d["lora_mode"] = mode
    if rank is not None:
        d["lora_rank"] = rank
    if scale is not None:
        d["lora_scale"] = scale
    cfg = ModelConfig(**d)
    cfg.validate()
    arrays = {n: p.data.copy() for n, p in base.params.items() if ".lora." not in n}
    arrays.update(_init_lora(cfg, seed))
    m = Model(cfg, _ordered(cfg, arrays))
    m.apply_freeze()
    return m


# -- forward ----------------------------------------------------------------

def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    return _sinusoid(np.asarray(t, dtype=np.float64) * 1000.0, dim)


def _linear(x, m: Model, stem: str):
    return ad.matmul(x, m.params[f"{stem}.weight"]) + m.params[f"{stem}.bias"]


def _time_mlp(m: Model, t: np.ndarray) -> ad.Tensor:
    feats = ad.Tensor(timestep_features(t, m.cfg.dim))
    h = ad.gelu(_linear(feats, m, "time_mlp.fc1"))
    return _linear(h, m, "time_mlp.fc2")


def timestep_embed(m: Model, t: float) -> np.ndarray:
    if not 0.0 <= float(t) <= 1.0:
        raise ModelError(f"time {t} outside [0, 1]")
    with ad.no_grad():
        return _time_mlp(m, np.array([t])).data[0]


def _adapted(x, m: Model, stem: str, segments):
    y = _linear(x, m, stem)
    a = m.adapters.get(stem)
    if a is None or m.cfg.lora_mode == "off":
        return y
    h = ad.matmul(x, a.down)
    if m.cfg.lora_mode == "standard":
        r = ad.matmul(h, a.ups[0])
    else:
        parts = [ad.matmul(ad.slice_axis(h, 1, lo, hi), a.up_for(label)) for lo, hi, label in segments]
        r = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return y + ad.scale(r, a.scale)


def _attention(q, k, v, heads: int):
    d = q.shape[-1]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        qh = ad.slice_axis(q, -1, h * dh, (h + 1) * dh)
        kh = ad.slice_axis(k, -1, h * dh, (h + 1) * dh)
        vh = ad.slice_axis(v, -1, h * dh, (h + 1) * dh)
        att = ad.softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), scale))
        outs.append(ad.matmul(att, vh))
    return outs[0] if heads == 1 else ad.concat(outs, axis=-1)


def position_embedding(x: ModelInput, dim: int) -> np.ndarray:
    gw = x.width // x.patch
    row, col = x.spatial_index // gw, x.spatial_index % gw
    fdim = dim // 2
    sdim = (dim - fdim) // 2
    return np.concatenate([
        _sinusoid(x.frame_pos, fdim, base=100.0),
        _sinusoid(row, sdim, base=100.0),
        _sinusoid(col, dim - fdim - sdim, base=100.0),
    ], axis=1)


def _as_batch(x, t, txt, g):
    if isinstance(x, ModelInput):
        x, t, txt, g = [x], [t], [txt], [g]
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if len({len(tags) for tags in txt}) > 1:
        raise ModelError("caption tag lists in one batch must have equal length")
    ref = x[0]
    for xi in x[1:]:
        if xi.tokens.shape != ref.tokens.shape or not np.array_equal(xi.type_map, ref.type_map):
            raise ModelError("model inputs in one batch must share token layout")
    return x, t, txt, g


def forward(m: Model, x, t, txt, g) -> ad.Tensor:
    """Velocity prediction per token, shape (B, T, C*p*p).

    ``x``/``t``/``txt``/``g`` are either single items or equal-length lists:
    ModelInput, time in [0, 1], caption tag ids, global style feature (or None).
    """
    xs, ts, txts, gs = _as_batch(x, t, txt, g)
    if np.any(ts < 0) or np.any(ts > 1):
        raise ModelError(f"time outside [0, 1]: {ts}")
    cfg = m.cfg
    b, n = len(xs), xs[0].tokens.shape[0]
    d = cfg.dim
    segments = xs[0].segments()

    tok = ad.Tensor(np.stack([xi.tokens for xi in xs]))
    h = _linear(tok, m, "in_proj")
    h = h + ad.Tensor(position_embedding(xs[0], d))
    temb = _time_mlp(m, ts)  # (B, D)
    h = h + ad.matmul(ad.Tensor(np.ones((b, n, 1))), ad.reshape(temb, (b, 1, d)))

    # cross-attention context: caption tags followed by the global style token
    n_tags = len(txts[0])
    gfeat = np.stack([np.zeros(cfg.style_dim) if gi is None else np.asarray(gi) for gi in gs])
    gtok = ad.matmul(ad.Tensor(gfeat.reshape(b, 1, cfg.style_dim)), m.params["style_proj"])
    if n_tags:
        onehot = np.zeros((b, n_tags, cfg.vocab))
        for i, tags in enumerate(txts):
            for j, tag in enumerate(tags):
                if not 0 <= tag < cfg.vocab:
                    raise ModelError(f"tag id {tag} outside vocabulary of {cfg.vocab}")
                onehot[i, j, tag] = 1.0
        ctx = ad.concat([ad.matmul(ad.Tensor(onehot), m.params["text_embed"]), gtok], axis=1)
    else:
        ctx = gtok

    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        a = ad.layer_norm(h, m.params[f"{p}.ln1.weight"], m.params[f"{p}.ln1.bias"])
        q = _adapted(a, m, f"{p}.attn.q", segments)
        k = _adapted(a, m, f"{p}.attn.k", segments)
        v = _adapted(a, m, f"{p}.attn.v", segments)
        h = h + _adapted(_attention(q, k, v, cfg.heads), m, f"{p}.attn.o", segments)

        a = ad.layer_norm(h, m.params[f"{p}.ln2.weight"], m.params[f"{p}.ln2.bias"])
        q = _linear(a, m, f"{p}.xattn.q")
        k = _linear(ctx, m, f"{p}.xattn.k")
        v = _linear(ctx, m, f"{p}.xattn.v")
        h = h + _linear(_attention(q, k, v, cfg.heads), m, f"{p}.xattn.o")

        a = ad.layer_norm(h, m.params[f"{p}.ln3.weight"], m.params[f"{p}.ln3.bias"])
        f = ad.gelu(_adapted(a, m, f"{p}.ffn.fc1", segments))
        h = h + _adapted(f, m, f"{p}.ffn.fc2", segments)

    h = ad.layer_norm(h, m.params["out_ln.weight"], m.params["out_ln.bias"])
    return _linear(h, m, "out_proj")


def predict(m: Model, x: ModelInput, t: float, txt, g) -> np.ndarray:
    with ad.no_grad():
        return forward(m, x, t, txt, g).data[0]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, m: Model, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """``path`` is the manifest JSON; the blob sits next to it as ``.bin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    tensors = {n: p.data for n, p in m.params.items()}
    for n, arr in (extra_tensors or {}).items():
        tensors[n] = arr
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob.write_bytes(b"".join(chunks))
    manifest = {"config": asdict(m.cfg), "blob": blob.name, "tensors": entries, "meta": meta or {}}
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path):
    """Returns (model, extra tensors, meta)."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["blob"]).read_bytes()
    cfg = ModelConfig.from_dict(manifest["config"])
    params, extra = {}, {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
        if e["name"].startswith("opt.") or e["name"].startswith("state."):
            extra[e["name"]] = arr
        else:
            params[e["name"]] = ad.Tensor(arr, name=e["name"])
    m = Model(cfg, params)
    m.apply_freeze()
    return m, extra, manifest.get("meta", {})


def tensor_manifest(path) -> list[tuple[str, tuple[int, ...]]]:
    manifest = json.loads(Path(path).read_text())
    return [(e["name"], tuple(e["shape"])) for e in manifest["tensors"]]
