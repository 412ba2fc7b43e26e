import math

import numpy as np
import pytest

from hctransformer import diffcore as dc
from hctransformer import hc_decoder as hd
from hctransformer.layers import ParamStore, bind, discriminator_names


def make(M=5, D_v=6, L_d=2, seed=0, self_attn=False):
    store = ParamStore(np.random.default_rng(seed))
    hd.init_params(store, M, D_v, L_d, self_attn)
    return store.arrays


def frozen(a):
    return bind(a, lambda _: False)


def rows(B=2, M=5, D_v=6, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, M - 1, D_v)), rng.normal(size=(B, M, D_v))


@pytest.mark.parametrize("M,L_d", [(3, 1), (3, 2), (5, 1), (5, 2)])
def test_output_shapes(M, L_d):
    Z_hm, Z_ctx = rows(M=M)
    out = hd.hc_decode(frozen(make(M=M, L_d=L_d)), dc.constant(Z_hm), dc.constant(Z_ctx), L_d)
    assert len(out.per_layer) == L_d
    assert all(z.shape == (2, M - 1, 6) for z in out.per_layer)


def test_zero_value_and_ffn_output_is_identity():
    a = make()
    for n in list(a):
        if ".cross.v." in n or ".ffn.fc2." in n:
            a[n] = np.zeros_like(a[n])
    Z_hm, Z_ctx = rows()
    out = hd.hc_decode(frozen(a), dc.constant(Z_hm), dc.constant(Z_ctx), 2)
    np.testing.assert_array_equal(out.final.data, Z_hm)


def test_discriminator_count_for_default_size():
    assert len(discriminator_names(make(M=5, L_d=2))) == 8


def test_uniform_discriminators_give_lambda_ln2():
    a = make()
    for n in a:
        if n.startswith("disc.") and ".fc2." in n:
            a[n] = np.zeros_like(a[n])
    Z_hm, Z_ctx = rows()
    P = frozen(a)
    feats = hd.hc_decode(P, dc.constant(Z_hm), dc.constant(Z_ctx), 2)
    got = float(hd.hc_alignment_loss(P, feats, [0, 1], 0.25, 1.0).data)
    assert got == pytest.approx(0.25 * math.log(2), abs=1e-12)


def test_infinite_temperature_reads_the_mean_context():
    a = make(L_d=1)
    Z_hm, Z_ctx = rows()
    weights: list = []
    hd.hc_decode(frozen(a), dc.constant(Z_hm), dc.constant(Z_ctx), 1, temperature=math.inf, weights_out=weights)
    np.testing.assert_allclose(weights[0], np.full((2, 4, 5), 0.2), atol=1e-15)


def test_cross_attention_rows_sum_to_one():
    Z_hm, Z_ctx = rows()
    weights: list = []
    hd.hc_decode(frozen(make()), dc.constant(Z_hm), dc.constant(Z_ctx), 2, weights_out=weights)
    for w in weights:
        assert np.abs(w.sum(-1) - 1).max() < 1e-9


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="feature dims"):
        hd.hc_decode(frozen(make()), dc.constant(np.zeros((1, 4, 6))), dc.constant(np.zeros((1, 5, 5))), 2)


@pytest.mark.parametrize("self_attn", [False, True])
def test_decoder_gradient_matches_finite_differences(self_attn):
    a = make(M=3, D_v=4, L_d=2, self_attn=self_attn)
    Z_hm0, Z_ctx = rows(M=3, D_v=4)
    P = frozen(a)

    def fn(z):
        feats = hd.hc_decode(P, z, dc.constant(Z_ctx), 2)
        # coefficient -1 turns the reversal adjoint into the identity
        return hd.hc_alignment_loss(P, feats, [0, 1], 0.25, -1.0) + dc.sum_all(dc.mul(feats.final, feats.final))

    assert dc.grad_check(fn, Z_hm0) < 1e-5
