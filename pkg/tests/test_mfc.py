import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmtf.exceptions import ContractViolation
from xmtf.mfc import (MfcModel, fuse, inner_eval, inner_loss_batch, inner_outputs,
                      inner_total_loss, mono_loss_inner, outer_eval, rank_top_n,
                      sample_pairs, transfer_loss)

from .helpers import fd_param_grads, norm_rel_err, wired_cell


def wired_model(K, d, slopes):
    return MfcModel([wired_cell(d, s) for s in slopes])


def test_inner_cell_linear_example():
    m = wired_model(1, 3, [2.0])
    assert inner_eval(m, 0, 0.3, np.zeros(3)) == pytest.approx(0.6)


def test_inner_eval_rejects_bad_inputs():
    m = wired_model(2, 3, [1.0, 1.0])
    with pytest.raises(ContractViolation):
        inner_eval(m, 2, 0.3, np.zeros(3))
    with pytest.raises(ContractViolation):
        inner_eval(m, 0, 1.2, np.zeros(3))
    with pytest.raises(ContractViolation):
        inner_eval(m, 0, 0.3, np.zeros(4))


def test_outer_stage_examples():
    assert outer_eval(2.0, 0.5) == pytest.approx(4.0)
    assert outer_eval(0.7, 0.0) == pytest.approx(0.7)
    assert outer_eval(0.5, -1.0) == pytest.approx(0.25)


def test_fuse_identity_sum():
    m = MfcModel.identity(2, 3)
    out = fuse(m, np.zeros(2), np.zeros(3), [[0.2, 0.3]])
    assert out.z_inner[0] == pytest.approx(0.5)
    assert out.z_full[0] == pytest.approx(0.5)


def test_fuse_outer_reweights():
    m = MfcModel.identity(2, 3)
    out = fuse(m, np.array([1.0, -1.0]), np.zeros(3), [[0.2, 0.3]])
    assert out.z_full[0] == pytest.approx(0.2 * 1.2 + 0.3 * 0.7)


def test_fuse_validates_shapes():
    m = MfcModel.identity(2, 3)
    with pytest.raises(ContractViolation):
        fuse(m, np.zeros(3), np.zeros(3), [[0.2, 0.3]])
    with pytest.raises(ContractViolation):
        fuse(m, np.zeros(2), np.zeros(3), [[0.2, 0.3, 0.1]])
    with pytest.raises(ContractViolation):
        fuse(m, np.zeros(2), np.zeros(3), [[0.2, np.nan]])


def test_stacked_cells_match_per_cell_networks():
    from xmtf.nn import forward
    rng = np.random.default_rng(0)
    m = MfcModel.init(3, 4, (5, 4), rng, o_scale=[2.0, 3.0, 4.0])
    S, O = rng.normal(size=(2, 4)), rng.random((2, 7, 3))
    Q = inner_outputs(m, S, O)
    for b in range(2):
        for n in range(7):
            for k in range(3):
                x = np.r_[O[b, n, k] * m.o_scale[k], S[b]]
                assert Q[b, n, k] == pytest.approx(forward(m.inner_nets[k], x)[0], abs=1e-14)


def test_cell_views_track_optimizer_updates():
    m = MfcModel.init(2, 3, (4,), np.random.default_rng(1))
    for p in m.params():
        p += 0.5
    np.testing.assert_array_equal(m.inner_nets[1].layers[0].weight, m.weights[0][1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fuse_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = MfcModel.init(3, 2, (4,), rng)
    O = rng.random((6, 3))
    a, s = rng.uniform(-1, 1, 3), rng.normal(size=2)
    perm = rng.permutation(6)
    base = fuse(m, a, s, O).z_full
    np.testing.assert_allclose(fuse(m, a, s, O[perm]).z_full, base[perm], atol=1e-12)


def test_rank_top_n():
    assert rank_top_n([0.1, 0.9, 0.5], 2) == [1, 2]
    assert rank_top_n([1.0, 1.0, 0.0], 1) == [0]
    with pytest.raises(ContractViolation):
        rank_top_n([0.1, 0.2], 3)
    with pytest.raises(ContractViolation):
        rank_top_n([0.1, 0.2], 0)


def test_mono_loss_decreasing_cell():
    m = wired_model(1, 2, [-1.0])
    assert mono_loss_inner(m, np.zeros(2), [[0.2], [0.8]], 0) == pytest.approx(0.6)


def test_mono_loss_zero_for_increasing_cell():
    m = wired_model(2, 2, [1.0, 3.0])
    O = np.random.default_rng(0).random((10, 2))
    for k in range(2):
        assert mono_loss_inner(m, np.zeros(2), O, k) == 0.0


def test_mono_loss_ignores_ties():
    m = wired_model(1, 2, [-1.0])
    assert mono_loss_inner(m, np.zeros(2), [[0.4], [0.4]], 0) == 0.0


def test_transfer_loss_examples():
    assert transfer_loss([0.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2))
    # correctly ordered pairs with margins 10, 10 and 20
    assert transfer_loss([0.0, 10.0, 20.0], [1.0, 2.0, 3.0]) == pytest.approx(
        2 * math.log1p(math.exp(-10)) + math.log1p(math.exp(-20)), rel=1e-12)
    assert transfer_loss([0.0, 10.0], [1.0, 2.0]) == pytest.approx(4.54e-5, rel=1e-3)
    assert transfer_loss([1.0, 2.0], [5.0, 5.0]) == 0.0
    with pytest.raises(ContractViolation):
        transfer_loss([1.0], [1.0])


def test_lambda_weighting():
    m = wired_model(1, 2, [-1.0])
    s, O = np.zeros(2), np.array([[0.2], [0.8]])
    # q = [-0.2, -0.8]; mono = 0.6
    zf = np.array([0.0, 1.0])
    transfer = math.log1p(math.exp(0.6))  # inner ranks the pair the wrong way by 0.6
    assert inner_total_loss(m, s, O, zf, 1.0)[0] == pytest.approx(0.6)
    assert inner_total_loss(m, s, O, zf, 0.0)[0] == pytest.approx(transfer)
    assert inner_total_loss(m, s, O, zf, 0.4)[0] == pytest.approx(0.4 * 0.6 + 0.6 * transfer)


def test_lambda_arithmetic_example():
    m = wired_model(1, 2, [-1.0])
    s, O = np.zeros(2), np.array([[0.0], [1.0]])
    zf = np.array([1.0, 0.0])  # label agrees with the inner order, transfer = log(1 + e^-1)
    t = math.log1p(math.exp(-1.0))
    assert inner_total_loss(m, s, O, zf, 0.4)[0] == pytest.approx(0.4 * 1.0 + 0.6 * t)


def test_lambda_out_of_range():
    m = wired_model(1, 2, [1.0])
    with pytest.raises(ContractViolation):
        inner_total_loss(m, np.zeros(2), [[0.1], [0.2]], [0.0, 1.0], 1.5)


def test_pair_sampling_cap_and_distinct():
    rng = np.random.default_rng(0)
    I, J = sample_pairs(3, 50, 256, rng)
    assert I.shape == (3, 256)
    assert np.all(I < J)
    for b in range(3):
        assert len(set(zip(I[b], J[b]))) == 256
    I, J = sample_pairs(1, 5, 256)
    assert I.shape == (1, 10)


def test_inner_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    m = MfcModel.init(3, 2, (5, 3), rng, o_scale=[1.0, 4.0, 20.0])
    for b in m.biases:
        b += rng.normal(0, 0.1, b.shape)
    S, O = rng.normal(size=(3, 2)), rng.random((3, 6, 3))
    Zf = rng.normal(size=(3, 6))
    for lam in (0.0, 0.4, 1.0):
        _, g, _ = inner_loss_batch(m, S, O, Zf, lam)
        fd = fd_param_grads(lambda: inner_loss_batch(m, S, O, Zf, lam, need_grads=False)[0],
                            m.params(), 1e-6)
        assert norm_rel_err(g, fd) < 1e-4


def test_labels_from_actions_are_detached():
    rng = np.random.default_rng(3)
    m = MfcModel.init(2, 2, (4,), rng)
    S, O, A = rng.normal(size=(2, 2)), rng.random((2, 5, 2)), rng.uniform(-1, 1, (2, 2))
    Zf = outer_eval(inner_outputs(m, S, O), A[:, None, :]).sum(axis=2)
    l1, g1, _ = inner_loss_batch(m, S, O, Zf, 0.3)
    l2, g2, _ = inner_loss_batch(m, S, O, None, 0.3, actions=A)
    assert l1 == pytest.approx(l2, abs=1e-12)
    assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(g1, g2))


def test_model_json_roundtrip():
    m = MfcModel.init(2, 3, (4, 2), np.random.default_rng(5), o_scale=[1.0, 7.0])
    m2 = MfcModel.from_dict(json.loads(json.dumps(m.to_dict())))
    S, O = np.ones((1, 3)), np.full((1, 4, 2), 0.3)
    np.testing.assert_array_equal(inner_outputs(m, S, O), inner_outputs(m2, S, O))
