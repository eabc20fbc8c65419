"""Acceptance criteria 1-11, one test each, each printing one PASS/FAIL line.

Criteria 9 and 11 need the desk-scale run (data generation plus base, CT and
SFT training, about ten minutes on one core). Set VIDSTYLE_DESK_RUN to a
directory to keep that run between sessions; finished steps are skipped.
"""

import json
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from conftest import record, tiny_model
from vidstyle import autodiff as ad
from vidstyle import cli, codec, datagen, flow, metrics, net, pipeline
from vidstyle import conditioning as C
from vidstyle import trainer as T
from vidstyle.config import RunConfig
from vidstyle.infer import Conditions, long_video, reconstruct
from vidstyle.rng import make_rng

OPS = list(datagen.OPERATORS)


def _lat(rng, f=2, hw=4):
    return rng.standard_normal((12, f, hw, hw))


# -- 1 ---------------------------------------------------------------------------

def _op_cases(rng):
    other = ad.Tensor(rng.standard_normal((3, 4)))
    w = ad.Tensor(rng.standard_normal((4, 2)))
    lw, lb = ad.Tensor(rng.standard_normal(4)), ad.Tensor(rng.standard_normal(4))
    return {
        "add": lambda x: ad.add(x, other),
        "sub": lambda x: ad.sub(other, x),
        "mul": lambda x: ad.mul(x, other),
        "scale": lambda x: ad.scale(x, -1.7),
        "matmul": lambda x: ad.matmul(x, w),
        "transpose": ad.transpose,
        "reshape": lambda x: ad.reshape(x, (2, 6)),
        "concat": lambda x: ad.concat([other, x], axis=1),
        "slice_axis": lambda x: ad.slice_axis(x, 1, 1, 3),
        "gelu": ad.gelu,
        "softmax": ad.softmax,
        "layer_norm": lambda x: ad.layer_norm(x, lw, lb),
        "sum_all": ad.sum_all,
        "mean_all": ad.mean_all,
        "mse": lambda x: ad.mse(x, other),
    }


def _fused_batch(rng, b=2):
    xs, targets = [], []
    for i in range(b):
        t = 0.3 + 0.3 * i
        z, eps = codec.encode(rng.random((2, 8, 8, 3))), _lat(rng)
        video = C.build_video_input(z, codec.encode(rng.random((2, 8, 8, 3))), t, eps)
        first = C.build_first_frame_input(codec.encode(rng.random((1, 8, 8, 3))), t, _lat(rng, 1))
        style = C.build_style_image_input(codec.encode(rng.random((1, 8, 8, 3))), t, _lat(rng, 1))
        xs.append(C.assemble("fused", video, first, style))
        targets.append(flow.velocity_target(z, eps))
    return xs, targets


def test_c01_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    with ad.precision(np.float64):
        for name, fn in _op_cases(rng).items():
            proj = rng.standard_normal((64,))

            def f(x, fn=fn, proj=proj):
                out = fn(x)
                r = ad.Tensor(np.resize(proj, out.shape))
                return ad.sum_all(ad.mul(out, r))

            worst[name] = ad.grad_check(f, ad.Tensor(rng.standard_normal((3, 4))), h=1e-3)

        # full model + loss: F=2, 8x8 frames, D_m=32, B=2, every token type and LoRA path live
        m = tiny_model("token_specific", dim=32)
        for p in m.params.values():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        xs, targets = _fused_batch(rng)
        g = [rng.standard_normal(60) for _ in xs]

        def loss(_):
            out = net.forward(m, xs, [0.3, 0.6], [[1, 34], [2, 35]], g)
            return flow.training_loss(out, targets, xs)

        assert loss(None).data.dtype == np.float64
        for n, p in m.params.items():
            worst[f"model:{n}"] = ad.grad_check(loss, p, h=1e-3, coords=16, seed=2)
    secs = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and secs < 60
    record(1, "gradient correctness", ok,
           f"{len(worst)} checks, max rel err {worst[top]:.2e} ({top}) < 1e-3", secs)
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_c02_codec_bijectivity():
    start = time.perf_counter()
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        f, gh, gw = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
        v = rng.random((f, 4 * gh, 4 * gw, 3), dtype=np.float32)
        z = codec.encode(v)
        ts = codec.patchify(z)
        back = codec.unpatchify(ts.tokens, ts.dims)
        bad += not (np.array_equal(back, z) and np.array_equal(codec.decode(back), v))
    secs = time.perf_counter() - start
    ok = bad == 0 and secs < 1.0
    record(2, "codec/patchify bijectivity", ok, f"{100 - bad}/100 bitwise roundtrips", secs)
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_c03_input_construction():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    f32 = lambda a: a.astype(np.float32)  # noqa: E731
    z, raw, eps = f32(_lat(rng)), f32(_lat(rng)), f32(_lat(rng))
    video = C.build_video_input(z, raw, 0.4, eps)
    first = C.build_first_frame_input(f32(_lat(rng, 1)), 0.4, f32(_lat(rng, 1)))
    style = C.build_style_image_input(f32(_lat(rng, 1)), 0.4, f32(_lat(rng, 1)))
    x = C.assemble("fused", video, first, style)
    mv = x.mask_values()
    checks = {
        "mask video 0.0": bool(np.all(video.parts()[1] == 0.0) and np.all(mv[x.type_map == C.VIDEO] == 0.0)),
        "mask style 1.0": bool(np.all(style.parts()[1] == 1.0) and np.all(mv[x.type_map == C.STYLE] == 1.0)),
        "mask first 1.0": bool(np.all(first.parts()[1] == 1.0) and np.all(mv[x.type_map == C.FIRST] == 1.0)),
        "channels 28": all(s.data.shape[0] == 2 * codec.latent_channels() + 4 for s in (video, first, style)),
        "t=1 gives z": np.array_equal(flow.add_noise(z, 1.0, eps), z),
        "t=0 gives eps": np.array_equal(flow.add_noise(z, 0.0, eps), eps),
        "target+eps=z": np.array_equal((flow.velocity_target(z, eps) + eps).astype(np.float32), z),
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(3, "input construction", ok, f"{sum(checks.values())}/{len(checks)} exact" +
           (f", failed {failed}" if failed else ""), time.perf_counter() - start)
    assert ok, failed


# -- 4 ---------------------------------------------------------------------------

def test_c04_lora_routing():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    m = tiny_model()
    for n, p in m.params.items():
        if ".lora.up" in n:
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(np.float32)
    xs, _ = _fused_batch(rng, 1)
    x = xs[0]
    segs = x.segments()
    keep = x.type_map != C.STYLE
    routing = True
    for stem in m.adapters:
        h = ad.Tensor(rng.standard_normal((1, len(x.tokens), m.params[f"{stem}.weight"].shape[0])))
        before = net._adapted(h, m, stem, segs).data.copy()
        m.params[f"{stem}.lora.up2"].data += np.float32(0.5)
        after = net._adapted(h, m, stem, segs).data
        routing &= np.array_equal(before[0, keep], after[0, keep]) and not np.array_equal(before, after)

    base = tiny_model("off")
    g = rng.standard_normal(60).astype(np.float32)
    ref = net.predict(base, x, 0.6, [3], g)
    zero_init = all(np.array_equal(net.predict(net.attach_lora(base, mode, 4, seed=9), x, 0.6, [3], g), ref)
                    for mode in ("token_specific", "standard"))

    m.zero_grad()
    text_x = C.assemble("text", C.build_video_input(*(_lat(rng).astype(np.float32) for _ in range(2)),
                                                    0.5, _lat(rng).astype(np.float32)))
    out = net.forward(m, text_x, 0.5, [1, 20], None)
    ad.backward(ad.mean_all(ad.mul(out, ad.Tensor(rng.standard_normal(out.shape)))))

    def zero(name):
        gr = m.params[name].grad
        return gr is None or not gr.any()

    text_only = all(zero(f"{s}.lora.up0") and zero(f"{s}.lora.up2") for s in m.adapters)
    ok = bool(routing and zero_init and text_only)
    record(4, "LoRA routing", ok, f"W_up[2] isolation {routing}, zero-init bitwise {zero_init}, "
           f"text-only zero grads {text_only}", time.perf_counter() - start)
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_c05_sampler_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    z_star = _lat(rng).astype(np.float32)
    errs = {}
    for steps in (1, 4, 16):
        noise = flow.NoiseDraw.draw(z_star.shape, 0, "oracle")
        v = codec.patchify(flow.velocity_target(z_star, noise.eps_video)).tokens

        def build(z_t, t, nz):
            return C.assemble("text", C.video_slab_from_noisy(z_t, None))

        out = flow.euler_sample(lambda x, t, v=v: v, build, z_star.shape, flow.SamplerConfig(steps),
                                noise, return_latent=True)
        errs[steps] = float(np.abs(out - z_star).max())
    ok = errs[1] == 0.0 and errs[4] <= 1e-5 and errs[16] <= 1e-5
    record(5, "sampler oracle", ok, f"max-abs S=1 {errs[1]:.1e} (exact), S=4 {errs[4]:.1e}, "
           f"S=16 {errs[16]:.1e} <= 1e-5", time.perf_counter() - start)
    assert ok


# -- 6 ---------------------------------------------------------------------------

def test_c06_condition_ratio():
    start = time.perf_counter()
    rng = make_rng(RunConfig().seeds.train, "acceptance", "modes")
    c = Counter(T.sample_mode(rng, (1.0, 2.0, 1.0)) for _ in range(10_000))
    freq = [c[m] / 10_000 for m in T.TRAIN_MODES]
    dev = max(abs(f - p) for f, p in zip(freq, (0.25, 0.5, 0.25)))
    ok = dev <= 0.02
    record(6, "condition ratio", ok, f"freqs {[round(f, 4) for f in freq]}, max dev {dev:.4f} <= 0.02",
           time.perf_counter() - start)
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_c07_accumulation(sft_samples):
    start = time.perf_counter()
    a, b = sft_samples[:2]

    def noise(s, k):
        return flow.NoiseDraw.draw(codec.encode(s.x_raw).shape, 0, "acc", k)

    ex = [T.build_batch(a, "style_image", 0.35, noise(a, 0), ref_index=0),
          T.build_batch(b, "style_image", 0.7, noise(b, 1), ref_index=1)]
    s1, s2 = T.TrainState.fresh(tiny_model()), T.TrainState.fresh(tiny_model())
    T.train_step(s1, ex[:1], 1e-2, accum=2)
    T.train_step(s1, ex[1:], 1e-2, accum=2)
    T.train_step(s2, ex, 1e-2, accum=1)
    diff = max(float(np.abs(p.data - s2.model.params[n].data).max()) for n, p in s1.model.params.items())
    moved = any(not np.array_equal(p.data, tiny_model().params[n].data) for n, p in s1.model.params.items())
    ok = diff <= 1e-6 and moved
    record(7, "gradient accumulation", ok, f"max weight diff {diff:.2e} <= 1e-6", time.perf_counter() - start)
    assert ok


# -- 8 ---------------------------------------------------------------------------

def _refs(op, key, k=4):
    rr = make_rng(key, "acceptance-refs", op)
    out = []
    for j in range(k):
        f, _ = datagen.gen_raw_video(datagen.random_scene(rr, 1, 16, 16), 1, 16, 16, j)
        out.append(datagen.apply_style(op, f)[0])
    return out


def _separation():
    rng = make_rng(RunConfig().seeds.eval, "acceptance-corpus")
    S = np.zeros((8, 8))
    for i in range(32):
        v, _ = datagen.gen_raw_video(datagen.random_scene(rng, 8, 16, 16), 8, 16, 16, i)
        styled = [datagen.apply_style(op, v) for op in OPS]
        for b, ob in enumerate(OPS):
            refs = _refs(ob, i)
            for a in range(8):
                S[a, b] += metrics.style_score(styled[a], refs)
    S /= 32
    margins = [S[a, a] - S[a, b] for a in range(8) for b in range(8) if a != b]
    return min(margins)


def _classification(cfg):
    centroids = pipeline.centroid_table(cfg)
    rng = make_rng(cfg.seeds.eval, "acceptance-classify")
    ok = 0
    for i in range(64):
        op = datagen.OPERATORS[OPS[i % 8]]
        v, _ = datagen.gen_raw_video(datagen.random_scene(rng, 8, 16, 16), 8, 16, 16, i)
        ok += metrics.classify_style(datagen.apply_style(op, v), centroids) == op.tag
    return ok / 64


def _filter_rates(n=512):
    """Clean SFT pairs vs the same pairs scored against another operator's refs."""
    th = datagen.DEFAULT_THRESHOLDS["SFT"]
    seed = RunConfig().seeds.eval
    rng = make_rng(seed, "acceptance-filter")
    accepted = rejected = 0
    for i in range(n):
        a, b = OPS[i % 8], OPS[(i // 8) % 8]
        if a == b:
            b = OPS[(i // 8 + 1) % 8]
        spec = datagen.random_scene(rng, 8, 16, 16)
        K = 1 + (i * 5) % 16
        sa = datagen.make_sample(spec, a, K, "SFT", 1_000_000 + i)
        sb = datagen.make_sample(spec, b, K, "SFT", 2_000_000 + i)
        accepted += datagen.auto_filter(sa, **th)[0]
        swapped = datagen.SamplePair(**{**sa.__dict__, "refs": sb.refs})
        rejected += not datagen.auto_filter(swapped, **th)[0]
    return accepted / n, rejected / n


def test_c08_metric_fitness():
    start = time.perf_counter()
    cfg = RunConfig()
    margin = _separation()
    acc = _classification(cfg)
    clean, swap = _filter_rates()
    secs = time.perf_counter() - start
    ok = margin > 0 and acc >= 0.9 and swap >= 0.95 and clean >= 0.99 and secs < 300
    record(8, "metric fitness", ok, f"separation margin {margin:.3f} > 0 over 56 ordered pairs, "
           f"classification {acc:.3f} >= 0.90, swap rejection {swap:.3f} >= 0.95, "
           f"clean acceptance {clean:.3f} >= 0.99", secs)
    assert ok


# -- 9 / 11: desk run ---------------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    env = os.environ.get("VIDSTYLE_DESK_RUN")
    root = Path(env) if env else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    cfgfile = root / "config.json"
    cfg = RunConfig().override({"paths.data": str(root / "data")})
    cfgfile.write_text(cfg.to_json())
    c = ["--log-level", "WARNING", "--config", str(cfgfile)]
    start = time.perf_counter()
    for profile, extra, out in (("CT", [], "data/CT"), ("SFT", [], "data/SFT"),
                                ("SFT", ["--n", "32", "--seed", "7"], "data/test")):
        if not (root / out / "manifest.json").exists():
            assert cli.main([*c, "gen-data", "--profile", profile, *extra, "--out", str(root / out)]) == 0
    if not (root / "run/final.json").exists():
        assert cli.main([*c, "train", "--stage", "full", "--out", str(root / "run")]) == 0
    model = net.load_checkpoint(root / "run/final.json")[0]
    test = pipeline.load_profile(cfg, "test", root / "data/test")
    return cfg, root, model, test, time.perf_counter() - start


def test_c09_desk_training(desk):
    cfg, root, model, test, build_secs = desk
    start = time.perf_counter()
    ct = json.loads((root / "run/CT.json").read_text())["meta"]
    hist = ct["val_history"]
    ratio = hist[-1][1] / hist[0][1]
    gain = pipeline.style_gain(model, test, cfg)
    ok = ratio <= 0.5 and gain["gain"] >= 0.10 and len(test) == 32
    record(9, "desk training", ok, f"CT val loss {hist[0][1]:.4f} -> {hist[-1][1]:.4f} "
           f"(ratio {ratio:.3f} <= 0.5); style gain {gain['gain']:.3f} >= 0.10 "
           f"(output {gain['output']:.3f}, raw {gain['raw']:.3f}, n={len(test)})",
           build_secs + time.perf_counter() - start)
    assert ok


def test_c11_long_video(desk):
    cfg, root, model, test, _ = desk
    start = time.perf_counter()
    drifts, seams, lengths = [], [], []
    for k in range(8):
        s = test[k]
        rng = make_rng(cfg.seeds.eval, "acceptance-long", k)
        v, _ = datagen.gen_raw_video(datagen.random_scene(rng, 15, 16, 16), 15, 16, 16, k)
        video, parts = long_video(model, cli.split_segments(v, 8, 1),
                                  Conditions(style_image=s.refs[0], content_tags=list(s.t_ns)),
                                  cfg.flow.steps, cfg.seeds.sample)
        lengths.append(video.shape[0])
        drifts.append(abs(metrics.style_score(parts[1], s.refs) - metrics.style_score(parts[0], s.refs)))
        seams.append(float(np.abs(parts[1][0] - reconstruct(parts[0][-1])).max()))
    # every chain must meet both bounds
    ok = all(n == 16 for n in lengths) and max(drifts) <= 0.15 and max(seams) <= 0.1
    record(11, "long-video chaining", ok, f"{len(lengths)} chains of 16 frames; drift max {max(drifts):.3f} "
           f"(mean {np.mean(drifts):.3f}) <= 0.15; seam max-abs max {max(seams):.3f} "
           f"(mean {np.mean(seams):.3f}) <= 0.1", time.perf_counter() - start)
    assert ok


# -- 10 --------------------------------------------------------------------------

ABL = {
    "geometry": {"frames": 2, "height": 8, "width": 8},
    "model": {"dim": 32, "blocks": 1, "heads": 2, "ffn_mult": 2, "lora_rank": 4},
    "trainer": {"base": {"iterations": 2}, "ct": {"iterations": 2}, "sft": {"iterations": 2},
                "val_count": 1, "val_every": 2, "checkpoint_every": 2},
    "flow": {"steps": 2},
    "metrics": {"centroid_videos": 1},
}


def test_c10_ablation_harness(tmp_path):
    start = time.perf_counter()
    cfgfile = tmp_path / "tiny.json"
    cfgfile.write_text(json.dumps({**ABL, "paths": {"data": str(tmp_path / "data")}}))
    c = ["--log-level", "WARNING", "--config", str(cfgfile)]
    for profile, n, seed, out in (("CT", 6, 0, "data/CT"), ("SFT", 6, 0, "data/SFT"), ("SFT", 2, 7, "test")):
        assert cli.main([*c, "gen-data", "--profile", profile, "--n", str(n), "--seed", str(seed),
                         "--out", str(tmp_path / out)]) == 0
    code = cli.main([*c, "ablate", "--test", str(tmp_path / "test"), "--out", str(tmp_path / "abl")])
    rows = (tmp_path / "abl/ablation.csv").read_text().splitlines()
    docs = {a: json.loads((tmp_path / "abl" / a / "run.json").read_text()) for a in pipeline.ARMS}

    def stripped(doc):
        d = json.loads(json.dumps(doc["config"]))
        d["model"].pop("lora_mode")
        return d

    ref = stripped(docs["full"])
    same_rest = all(stripped(d) == ref for d in docs.values())
    declared = all(
        d["config"]["model"]["lora_mode"] == pipeline.ARMS[a]["lora_mode"]
        and d["declaration"] == pipeline.ARMS[a]
        and net.load_checkpoint(tmp_path / "abl" / a / "final.json")[2]["stages"] == pipeline.ARMS[a]["stages"]
        and d["base_checkpoint"] == docs["full"]["base_checkpoint"]
        for a, d in docs.items()
    )
    note = json.loads((tmp_path / "abl/ablation.json").read_text())["note"]
    ok = (code == 0 and rows[0] == "arm,CSD Score,DINO Score" and len(rows) == 5 and same_rest
          and declared and "expected" in note)
    record(10, "ablation harness", ok, f"4 arms reported; configs equal apart from declared fields {same_rest}; "
           f"declarations match checkpoints {declared}", time.perf_counter() - start)
    assert ok
