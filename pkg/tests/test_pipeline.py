import numpy as np
import pytest

from conftest import tiny_model
from vidstyle import datagen, net, pipeline
from vidstyle.config import RunConfig
from vidstyle.infer import Conditions, InferError, check_conditions, long_video, reconstruct, stylize

TINY = {
    "geometry": {"frames": 2, "height": 8, "width": 8},
    "model": {"dim": 32, "blocks": 1, "heads": 2, "ffn_mult": 2, "lora_rank": 4},
    "trainer": {"base": {"iterations": 2}, "ct": {"iterations": 2}, "sft": {"iterations": 2},
                "val_count": 1, "val_every": 1, "checkpoint_every": 1},
    "flow": {"steps": 2},
    "metrics": {"centroid_videos": 1},
}


@pytest.fixture
def cfg():
    return RunConfig.from_dict(TINY)


def _raw(rng, f=2):
    return rng.random((f, 8, 8, 3), dtype=np.float32)


@pytest.mark.parametrize("mode,kw,expect", [
    ("text", dict(style_tag=34), "text"),
    ("style_image", dict(style_image=1), "style_image"),
    ("first_frame", dict(first_frame=1), "first_frame"),
    ("fuse", dict(style_tag=34, style_image=1), "fused"),
    ("fuse", dict(first_frame=1), "fused"),
    ("fuse", dict(style_tag=34, first_frame=1), "fused"),
])
def test_condition_rules(mode, kw, expect):
    assert check_conditions(mode, Conditions(raw=1, **kw)) == expect


@pytest.mark.parametrize("mode,kw", [
    ("text", dict(style_tag=34, style_image=1)),
    ("style_image", dict()),
    ("fuse", dict(style_tag=34)),
    ("t2v", dict(raw=1, style_tag=34)),
    ("t2v", dict(raw=None)),
    ("painting", dict(style_tag=34)),
])
def test_condition_rule_violations(mode, kw):
    kw.setdefault("raw", 1)
    with pytest.raises(InferError):
        check_conditions(mode, Conditions(**kw))


def test_t2v_uses_geometry(rng):
    m = tiny_model()
    out = stylize(m, "t2v", Conditions(content_tags=[1], style_tag=34), steps=1,
                  geometry={"frames": 3, "height": 8, "width": 8})
    assert out.shape == (3, 8, 8, 3)
    with pytest.raises(InferError, match="geometry"):
        stylize(m, "t2v", Conditions(style_tag=34), steps=1)


def test_stylize_modes_and_determinism(rng):
    m = tiny_model()
    raw, img = _raw(rng), _raw(rng, 1)[0]
    a = stylize(m, "style_image", Conditions(raw=raw, style_image=img), steps=2, seed=4)
    b = stylize(m, "style_image", Conditions(raw=raw, style_image=img), steps=2, seed=4)
    assert np.array_equal(a, b) and a.shape == raw.shape
    c = stylize(m, "style_image", Conditions(raw=raw, style_image=img), steps=2, seed=5)
    assert not np.array_equal(a, c)


def test_long_video_chains_last_frame(rng, monkeypatch):
    import vidstyle.infer as infer

    calls = []
    real = infer.stylize

    def spy(model, mode, c, *a, **kw):
        calls.append((mode, None if c.first_frame is None else c.first_frame.copy()))
        return real(model, mode, c, *a, **kw)

    monkeypatch.setattr(infer, "stylize", spy)
    m = tiny_model()
    video, parts = long_video(m, [_raw(rng), _raw(rng)], Conditions(style_tag=34), steps=1)
    assert video.shape == (4, 8, 8, 3)
    assert calls[0] == ("text", None)
    assert calls[1][0] == "fuse" and np.array_equal(calls[1][1], parts[0][-1])
    with pytest.raises(InferError):
        long_video(m, [_raw(rng)], Conditions(style_tag=34))
    with pytest.raises(InferError, match="geometry"):
        long_video(m, [_raw(rng), _raw(rng, 3)], Conditions(style_tag=34))


def test_reconstruct_is_identity_on_valid_frames(rng):
    f = _raw(rng, 1)[0]
    assert np.array_equal(reconstruct(f), f)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = RunConfig.from_dict(TINY)
    root = tmp_path_factory.mktemp("pipe")
    g = dict(frames=2, height=8, width=8)
    data = {}
    for profile, n in (("CT", 6), ("SFT", 6)):
        _, data[profile], _ = datagen.build_dataset(profile, n, 0, geometry=g,
                                                    thresholds={"tau_style": -1.0, "tau_struct": None})
    base = pipeline.ensure_base(cfg, root, data["CT"])
    return cfg, root, base, data


def test_base_is_trained_once(trained):
    cfg, root, base, data = trained
    stamp = base.stat().st_mtime_ns
    assert pipeline.ensure_base(cfg, root, data["CT"]) == base
    assert base.stat().st_mtime_ns == stamp
    m, _, _ = net.load_checkpoint(base)
    assert m.cfg.lora_mode == "off"


def test_lora_stages_and_resume(trained, tmp_path):
    cfg, root, base, data = trained
    out = tmp_path / "arm"
    sums = pipeline.run_lora_stages(cfg, out, ["CT", "SFT"], "token_specific", base, data)
    assert set(sums) == {"CT", "SFT"} and (out / "final.json").exists()
    first = net.load_checkpoint(out / "final.json")[0]
    # drop the finished SFT stage; it resumes from its last periodic checkpoint
    (out / "SFT.json").unlink()
    (out / "SFT_00002.json").unlink()
    pipeline.run_lora_stages(cfg, out, ["CT", "SFT"], "token_specific", base, data)
    again = net.load_checkpoint(out / "final.json")[0]
    for n, p in first.params.items():
        assert np.array_equal(p.data, again.params[n].data), n


def test_arms_are_reproducible(trained, tmp_path):
    cfg, root, base, data = trained
    for k in range(2):
        pipeline.run_lora_stages(cfg, tmp_path / str(k), ["SFT"], "standard", base, data)
    a = net.load_checkpoint(tmp_path / "0/final.json")[0]
    b = net.load_checkpoint(tmp_path / "1/final.json")[0]
    assert all(np.array_equal(p.data, b.params[n].data) for n, p in a.params.items())
    assert a.cfg.lora_mode == "standard"


def test_evaluate_layout(trained):
    cfg, root, base, data = trained
    m = net.attach_lora(net.load_checkpoint(base)[0], "token_specific", 4)
    samples = data["SFT"][:2]
    rows, table, summary = pipeline.evaluate(m, samples, cfg)
    assert len(table) == 2 * len(pipeline.EVAL_MODES)
    assert set(summary) == {"raw", *pipeline.EVAL_MODES}
    assert len(rows) == 2 * (len(pipeline.EVAL_MODES) + 1) * 6
    gain = pipeline.style_gain(m, samples, cfg)
    assert abs(gain["gain"] - (gain["output"] - gain["raw"])) < 1e-12


def test_arm_declarations_and_note():
    assert pipeline.arm_declaration("ct_only") == {"lora_mode": "token_specific", "stages": ["CT"]}
    with pytest.raises(ValueError):
        pipeline.arm_declaration("half")
    rows = [{"arm": a, "CSD Score": s, "DINO Score": d} for a, s, d in
            [("full", 0.6, 0.8), ("no_token_lora", 0.5, 0.7), ("sft_only", 0.4, 0.6)]]
    note = pipeline.direction_note(rows)
    assert note["full_ge_no_token_lora_csd"] and note["sft_only_lowest_dino"]


def test_style_tag_of_requires_one_extra_tag(sft_samples):
    s = sft_samples[0]
    assert pipeline.style_tag_of(s) == datagen.OPERATORS[s.op].tag
    s2 = datagen.SamplePair(**{**s.__dict__, "t_sty": list(s.t_ns)})
    with pytest.raises(ValueError):
        pipeline.style_tag_of(s2)


def test_missing_profile(cfg, tmp_path):
    with pytest.raises(pipeline.DataMissing, match="gen-data"):
        pipeline.load_profile(cfg, "CT", tmp_path / "none")
