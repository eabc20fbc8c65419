import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidstyle import datagen, metrics
from vidstyle.rng import make_rng


def _video(seed, op=None):
    spec = datagen.random_scene(make_rng(seed, "m"), 8, 16, 16)
    v, masks = datagen.gen_raw_video(spec, 8, 16, 16, seed)
    return (datagen.apply_style(op, v) if op else v), masks


def test_descriptor_shape_and_norm():
    v, _ = _video(0)
    d = metrics.style_descriptor(v)
    assert d.shape == (8, metrics.DESCRIPTOR_DIM) == (8, 60)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def test_descriptor_is_pinned():
    # frozen from the first run; guards the fixed filter bank and projection seeds
    v, _ = _video(0)
    d = metrics.style_descriptor(v[:1])[0]
    np.testing.assert_allclose(d[[0, 5, 40]], DESCRIPTOR_PIN, atol=1e-8)
    assert abs(metrics.patch_features(v[:1]).sum() - PATCH_SUM) < 1e-9


def test_empty_mask_gives_zero_descriptor():
    v, _ = _video(1)
    d = metrics.style_descriptor(v, np.zeros(v.shape[:3], bool))
    assert not d.any()


def test_style_score_identity_and_frame_order():
    v, _ = _video(2, "sepia")
    assert abs(metrics.style_score(v[:1], [v[:1]]) - 1.0) < 1e-12
    refs = [_video(3, "sepia")[0][:1]]
    a = metrics.style_score(v, refs)
    assert abs(a - metrics.style_score(v[::-1], refs)) < 1e-12
    with pytest.raises(ValueError):
        metrics.style_score(v, [])


def test_structure_score_properties():
    a, _ = _video(4)
    b, _ = _video(5)
    assert abs(metrics.structure_score(a, a) - 1.0) < 1e-12
    assert abs(metrics.structure_score(a, b) - metrics.structure_score(b, a)) < 1e-12
    perm = make_rng(0, "shuffle").permutation(16)
    shuffled = a[:, perm][:, :, perm]
    assert metrics.structure_score(a, shuffled) < 1.0
    with pytest.raises(ValueError):
        metrics.structure_score(a, a[:4])


def test_structure_prefers_the_stylized_self():
    a, _ = _video(6)
    b, _ = _video(7)
    sty = datagen.apply_style("hue_rotate", a)
    assert metrics.structure_score(a, sty) > metrics.structure_score(a, b)


def test_dynamic_degree():
    v, _ = _video(8)
    static = np.repeat(v[:1], 8, axis=0)
    assert metrics.dynamic_degree(static) == 0.0
    assert metrics.dynamic_degree(v) > 0.0
    assert metrics.dynamic_degree(v[:1]) == 0.0


def test_region_consistency():
    v, masks = _video(9)
    static = np.repeat(v[:1], 8, axis=0)
    assert metrics.region_consistency(static, np.repeat(masks[:1], 8, axis=0)) == pytest.approx((1.0, 1.0), abs=1e-12)
    noise = make_rng(1, "noise").random((8, 16, 16, 3))
    s, b = metrics.region_consistency(noise, masks)
    assert s < 0.8 and b < 0.8
    ones = np.ones(v.shape[:3], bool)
    d = metrics.style_descriptor(v)
    whole = np.mean([d[f] @ d[f + 1] for f in range(7)])
    assert abs(metrics.region_consistency(v, ones)[0] - whole) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_scores_stay_in_range(seed):
    v = make_rng(seed, "r").random((3, 16, 16, 3))
    w = make_rng(seed, "s").random((3, 16, 16, 3))
    assert -1 <= metrics.style_score(v, [w[:1]]) <= 1
    assert -1 <= metrics.structure_score(v, w) <= 1
    assert metrics.dynamic_degree(v) >= 0


def _centroids():
    corpus = {}
    rng = make_rng(11, "centroids")
    for name, op in datagen.OPERATORS.items():
        vids = []
        for j in range(6):
            spec = datagen.random_scene(rng, 8, 16, 16)
            vids.append(datagen.apply_style(op, datagen.gen_raw_video(spec, 8, 16, 16, 500 + j)[0]))
        corpus[op.tag] = vids
    return metrics.build_centroids(corpus)


def test_text_alignment_and_classification():
    cent = _centroids()
    v, _ = _video(12, "invert")
    tag = datagen.OPERATORS["invert"].tag
    assert metrics.classify_style(v, cent) == tag
    assert metrics.text_style_alignment(tag, v, cent) == max(
        metrics.text_style_alignment(t, v, cent) for t in cent)
    with pytest.raises(KeyError):
        metrics.text_style_alignment(999, v, cent)
    one = {tag: metrics.video_descriptor(v)}
    assert abs(metrics.text_style_alignment(tag, v, one) - 1.0) < 1e-12


def test_global_style_feature():
    v, _ = _video(13, "sepia")
    g = metrics.global_style_feature(v[:1])
    assert g.shape == (60,) and g.dtype == np.float32


def test_write_report(tmp_path):
    rows = [{"sample": "0000", "mode": "text", "metric": "CSD Score", "value": 0.5}]
    csv_path, json_path = metrics.write_report(tmp_path, rows, {"text": {"CSD Score": 0.5}})
    assert csv_path.read_text().splitlines()[0] == "sample,mode,metric,value"
    assert json.loads(json_path.read_text())["summary"]["text"]["CSD Score"] == 0.5


DESCRIPTOR_PIN = [0.095618428, -0.092966129, -0.043284949]
PATCH_SUM = 30.45937799922107
