import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hctransformer import diffcore as dc
from hctransformer.config import AblationFlags, ModelConfig, StageConfig, TrainConfig
from hctransformer.layers import bind
from hctransformer.model import count_discriminators, forward, init_model, is_stage1, make_batch, prepare_split
from hctransformer.synthbench import BenchSpec, generate_dataset
from hctransformer.training import (checkpoint_bytes, grl_coefficient, learning_rate,
                                    load_checkpoint_bytes, loss_and_grads, paired_batches, predict_split,
                                    two_stage_train, write_trace)

TINY_BENCH = BenchSpec(n_cls=3, M=3, H=2, W=2, D=12, n_source=24, n_target=20, human_region=[1, 2], seed=5)
TINY_MODEL = dict(M=3, D=12, D_v=8, L_e=1, L_d=1, K=4)


def tiny_train(epochs=1, seed=0):
    return TrainConfig(stage1=StageConfig(epochs=epochs),
                       stage2=StageConfig(optimizer="adam", lr0=1e-3, weight_decay=0.0, epochs=epochs),
                       batch_pairs=8, seed=seed)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TINY_BENCH)


def tiny_state(data, ablation="", seed=0):
    src, tgt, _ = data
    cfg = ModelConfig(**TINY_MODEL, ablation=AblationFlags.parse(ablation))
    state = init_model(cfg, 3, tiny_train(seed=seed), seed=seed)
    state.banks = np.random.default_rng(seed).normal(size=(2, 4, 12))
    ps, pt = prepare_split(src, cfg), prepare_split(tgt, cfg)
    return state, make_batch([(ps, np.arange(4)), (pt, np.arange(3))])


def test_grl_coefficient_endpoints_and_monotonicity():
    assert grl_coefficient(0.0) == 0.0
    assert grl_coefficient(1.0) == pytest.approx(0.999909, abs=1e-6)
    ps = np.linspace(0, 1, 101)
    assert (np.diff([grl_coefficient(p) for p in ps]) > 0).all()
    with pytest.raises(ValueError):
        grl_coefficient(1.5)


def test_learning_rate_schedule():
    assert learning_rate(0.01, 0.0) == 0.01
    assert learning_rate(0.01, 1.0) == pytest.approx(0.01 / 11 ** 0.75, rel=1e-15)
    with pytest.raises(ValueError):
        learning_rate(0.01, -0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 8))
def test_epoch_covers_larger_split_and_cycles_smaller(n_s, n_t, per):
    pairs = list(paired_batches(n_s, n_t, per, np.random.default_rng(0)))
    src = np.concatenate([s for s, _ in pairs])
    tgt = np.concatenate([t for _, t in pairs])
    assert len(pairs) == math.ceil(max(n_s, n_t) / per)
    assert set(src) == set(range(n_s)) and set(tgt) == set(range(n_t))


def test_video_loss_of_uniform_logits_is_ln_ncls():
    assert float(dc.cross_entropy(dc.constant(np.zeros((1, 6))), [2]).data) == pytest.approx(math.log(6))


def test_total_is_the_sum_of_its_terms(tiny_data):
    state, batch = tiny_state(tiny_data)
    with dc.Tape():
        out = forward(state, bind(state.params, lambda _: False), batch, grl_coeff=0.5,
                      rng=np.random.default_rng(0))
        b = out.breakdown()
    assert abs(b["total"] - (b["L_hm"] + b["L_ctx"] + b["L_hc"] + b["L_video"])) <= 1e-12


def test_zero_weights_leave_only_classification(tiny_data):
    state, batch = tiny_state(tiny_data)
    zero = {"hm": 0.0, "ctx": 0.0, "hc": 0.0, "H": 0.0}
    P = bind(state.params, lambda _: False)
    out = forward(state, P, batch, rng=np.random.default_rng(0), lambdas=zero)
    b = out.breakdown()
    assert b["L_ctx"] == 0.0 and b["L_hc"] == 0.0
    assert b["L_hm"] == pytest.approx(out.inter["parts"]["cls"], abs=1e-12)
    assert b["L_video"] == pytest.approx(out.inter["parts"]["video_cls"], abs=1e-12)


def test_term_by_term_weights(tiny_data):
    state, batch = tiny_state(tiny_data)
    P = bind(state.params, lambda _: False)
    subsets = {1: np.array([[0, 1], [0, 2], [1, 2]]), 2: np.array([[0, 1, 2]])}
    out = forward(state, P, batch, subsets=subsets)
    parts, lam = out.inter["parts"], state.train
    assert out.breakdown()["L_ctx"] == pytest.approx(lam.lambda_ctx * parts["ctx"][0], abs=1e-12)
    assert out.breakdown()["L_hc"] == pytest.approx(lam.lambda_hc / 2 * sum(parts["hc"]), abs=1e-12)
    assert out.breakdown()["L_video"] == pytest.approx(parts["video_cls"] + lam.lambda_H * parts["video_adv"],
                                                       abs=1e-12)


def test_default_discriminator_count():
    state = init_model(ModelConfig(), 6)
    assert count_discriminators(state) == 2 * 4 + 2 + 4 * 2 + 1


def test_stage2_leaves_the_human_branch_untouched(tiny_data):
    src, tgt, _ = tiny_data
    cfg = ModelConfig(**TINY_MODEL)
    tc = tiny_train()
    tc.stage2.epochs = 0
    after1, _ = two_stage_train(src, tgt, cfg, tc, 3)
    tc.stage2.epochs = 2
    after2, _ = two_stage_train(src, tgt, cfg, tc, 3)
    for n, v in after1.params.items():
        if is_stage1(n):
            assert v.tobytes() == after2.params[n].tobytes(), n
    assert any(not np.array_equal(v, after2.params[n]) for n, v in after1.params.items() if not is_stage1(n))


def test_stage2_gradients_cover_only_trainable_params(tiny_data):
    state, batch = tiny_state(tiny_data)
    res = loss_and_grads(state, batch, lambda n: not is_stage1(n), 0.5, np.random.default_rng(0))
    assert res.grads and not any(is_stage1(n) for n in res.grads)


def test_two_parameter_reversal_toy():
    # feature weight a, discriminator weight b: loss = CE(b * a * x)
    x, p = 0.7, 0.37
    coeff = grl_coefficient(p)

    def grads(reverse):
        with dc.Tape():
            a, b = dc.leaf([[1.3]]), dc.leaf([[0.0, -0.8]])
            f = dc.matmul(dc.constant([[x]]), a)
            h = dc.grad_reverse(f, coeff) if reverse else f
            loss = dc.cross_entropy(dc.matmul(h, b), [0])
            g = dc.backward(loss)
        return dc.grad_of(g, a)[0, 0], dc.grad_of(g, b)

    ga_rev, gb_rev = grads(True)
    ga, gb = grads(False)
    assert abs(ga_rev - (-coeff * ga)) <= 1e-10
    np.testing.assert_array_equal(gb_rev, gb)


def test_non_finite_loss_aborts(tiny_data):
    state, batch = tiny_state(tiny_data)
    state.params["cls.W"] = np.full_like(state.params["cls.W"], np.nan)
    with pytest.raises(FloatingPointError):
        loss_and_grads(state, batch, lambda n: True, 0.5, np.random.default_rng(0))


def test_training_is_deterministic_and_checkpoints_round_trip(tiny_data, tmp_path):
    src, tgt, _ = tiny_data
    cfg = ModelConfig(**TINY_MODEL)
    a, trace_a = two_stage_train(src, tgt, cfg, tiny_train(), 3)
    b, trace_b = two_stage_train(src, tgt, cfg, tiny_train(), 3)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert trace_a == trace_b
    restored = load_checkpoint_bytes(checkpoint_bytes(a))
    assert checkpoint_bytes(restored) == checkpoint_bytes(a)
    np.testing.assert_array_equal(predict_split(restored, tgt).scores, predict_split(a, tgt).scores)
    write_trace(tmp_path / "trace.csv", trace_a)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,L_hm,L_ctx,L_hc,L_video,total,lr,grl_coef"
    assert len(lines) == len(trace_a) + 1
    assert all(math.isfinite(r["total"]) for r in trace_a)


def test_different_seed_changes_the_model(tiny_data):
    src, tgt, _ = tiny_data
    cfg = ModelConfig(**TINY_MODEL)
    a, _ = two_stage_train(src, tgt, cfg, tiny_train(seed=0), 3)
    b, _ = two_stage_train(src, tgt, cfg, tiny_train(seed=1), 3)
    assert checkpoint_bytes(a) != checkpoint_bytes(b)


def test_target_labels_rejected(tiny_data):
    src, tgt, labels = tiny_data
    leaked = type(tgt)(tgt.features, tgt.masks, labels, tgt.domain)
    with pytest.raises(ValueError, match="withheld"):
        two_stage_train(src, leaked, ModelConfig(**TINY_MODEL), tiny_train(), 3)


@pytest.mark.parametrize("ablation", ["no_hm_encoder,no_ctx_encoder,no_decoder", "no_ctx_encoder,no_decoder",
                                      "no_hm_encoder,no_decoder", "no_decoder", "no_prototypes", "no_masking"])
def test_every_variant_trains_and_predicts(tiny_data, ablation):
    src, tgt, _ = tiny_data
    state, trace = two_stage_train(src, tgt, ModelConfig(**TINY_MODEL, ablation=AblationFlags.parse(ablation)),
                                   tiny_train(), 3)
    pred = predict_split(state, tgt)
    assert pred.labels.shape == (len(tgt),)
    np.testing.assert_allclose(pred.scores.sum(1), 1.0, atol=1e-12)
    assert trace and all(math.isfinite(r["total"]) for r in trace)


def test_stage2_starts_from_the_human_solution(tiny_data):
    src, tgt, _ = tiny_data
    tc = tiny_train()
    tc.stage2.epochs = 0
    full, _ = two_stage_train(src, tgt, ModelConfig(**TINY_MODEL), tc, 3)
    hm_cfg = ModelConfig(**TINY_MODEL, ablation=AblationFlags.parse("no_ctx_encoder,no_decoder"))
    hm, _ = two_stage_train(src, tgt, hm_cfg, tc, 3)
    np.testing.assert_allclose(predict_split(full, tgt).scores, predict_split(hm, tgt).scores, atol=1e-12)
