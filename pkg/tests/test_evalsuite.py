import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hctransformer.config import AblationFlags, ModelConfig
from hctransformer.evalsuite import (MetricsReport, accuracy, attribution_maps, binarize, confusion_matrix,
                                     davies_bouldin, dump_maps, human_ratio, saliency)
from hctransformer.model import init_model, prepare_split
from hctransformer.synthbench import BenchSpec, generate_split


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 0, 0, 0], [0, 1, 2, 3]) == 0.25
    rng = np.random.default_rng(0)
    assert accuracy(rng.integers(0, 4, 10_000), rng.integers(0, 4, 10_000)) == pytest.approx(0.25, abs=0.02)
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1], [0, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]


def test_linear_score_with_one_active_position():
    # score = sum_n w . x_n, so grad is w everywhere and only the active position lights up
    w = np.array([1.0, -2.0, 0.5])
    x = np.zeros((1, 4, 3))
    x[0, 2] = [2.0, -1.0, 0.0]
    grad = np.broadcast_to(w, x.shape)
    s = saliency(grad, x)
    assert s.tolist() == [[0.0, 0.0, 1.0, 0.0]]


def test_saliency_rectifies_negative_evidence():
    s = saliency(np.ones((1, 2, 1)), np.array([[[-1.0], [3.0]]]))
    assert s.tolist() == [[0.0, 1.0]]


@pytest.fixture(scope="module")
def backbone_setup():
    spec = BenchSpec(n_source=4, n_target=1)
    split = generate_split(spec, 0)
    cfg = ModelConfig(ablation=AblationFlags.parse("no_hm_encoder,no_ctx_encoder,no_decoder"))
    state = init_model(cfg, spec.n_cls, seed=0)
    return spec, split, state, prepare_split(split, cfg)


def test_attribution_ignores_a_constant_logit_shift(backbone_setup):
    spec, _, state, prep = backbone_setup
    base = attribution_maps(state, prep, [0, 1], [2, 3], (spec.H, spec.W))
    state.params["bb.cls.b"] = state.params["bb.cls.b"] + 7.0
    try:
        shifted = attribution_maps(state, prep, [0, 1], [2, 3], (spec.H, spec.W))
    finally:
        state.params["bb.cls.b"] = state.params["bb.cls.b"] - 7.0
    for a, b in zip(base, shifted):
        np.testing.assert_array_equal(a.maps, b.maps)
        assert a.maps.shape == (spec.M, spec.H, spec.W)
        assert a.maps.min() >= 0 and a.maps.max() <= 1


def test_human_ratio_examples():
    mask = np.zeros((2, 2))
    mask[0] = 1
    inside = np.array([[1.0, 0.9], [0.0, 0.1]])
    outside = inside[::-1]
    half = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert human_ratio([inside], [mask]).ratio == 100.0
    assert human_ratio([outside], [mask]).ratio == 0.0
    assert human_ratio([half], [mask]).ratio == 50.0
    assert human_ratio([inside, outside], [mask, mask]).ratio == 50.0


def test_empty_attribution_keyframes_are_skipped():
    r = human_ratio([np.zeros((2, 2)), np.eye(2)], [np.eye(2), np.eye(2)])
    assert (r.used, r.skipped, r.ratio) == (1, 1, 100.0)


def test_denominator_choices():
    m = np.array([[1.0, 0.0], [0.0, 0.0]])
    h = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert human_ratio([m], [h], denominator="attribution").ratio == 100.0
    assert human_ratio([m], [h], denominator="mask").ratio == 50.0
    assert human_ratio([m], [h], denominator="union").ratio == 50.0
    with pytest.raises(ValueError):
        human_ratio([m], [h], denominator="area")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_human_ratio_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    maps = rng.random((3, 4, 4))
    masks = (rng.random((3, 4, 4)) < 0.4).astype(float)
    base = human_ratio(maps, masks)
    scaled = human_ratio(maps * c, masks)
    assert base.ratio == pytest.approx(scaled.ratio, abs=1e-9)
    assert binarize(maps).tolist() == binarize(maps * c).tolist()


def test_davies_bouldin_examples():
    tight = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]])
    labels = [0, 0, 1, 1]
    assert davies_bouldin(tight, labels) == 0.0
    spread = np.array([[0.0, 1.0], [0.0, -1.0], [10.0, 1.0], [10.0, -1.0]])
    assert davies_bouldin(spread, labels) == pytest.approx(0.2, abs=1e-12)
    halved = spread * [1.0, 0.5]
    assert davies_bouldin(halved, labels) == pytest.approx(0.1, abs=1e-12)
    assert davies_bouldin(spread + [3.0, -7.0], labels) == pytest.approx(0.2, abs=1e-12)


def test_davies_bouldin_coincident_centroids_is_infinite():
    x = np.array([[1.0], [-1.0], [2.0], [-2.0]])
    assert math.isinf(davies_bouldin(x, [0, 0, 1, 1]))
    with pytest.raises(ValueError):
        davies_bouldin(x, [0, 0, 0, 0])


def test_report_and_map_files(tmp_path, backbone_setup):
    spec, _, state, prep = backbone_setup
    rep = MetricsReport("backbone", 1.0, 0.5, 12.5, 0, 3.0)
    rep.to_json(tmp_path / "m.json")
    rep.to_csv(tmp_path / "m.csv")
    assert '"target_accuracy": 0.5' in (tmp_path / "m.json").read_text()
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith("variant,")
    maps = attribution_maps(state, prep, [0], [1], (spec.H, spec.W))
    dump_maps(tmp_path / "maps", maps, [0])
    raw = np.frombuffer((tmp_path / "maps" / "video_00000.f64").read_bytes(), "<f8")
    np.testing.assert_array_equal(raw.reshape(maps[0].maps.shape), maps[0].maps)
