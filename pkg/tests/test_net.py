import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrecover import gradcheck, net

WORKED_RAW = [0.0006, 0.55, 0.06, 0.0003, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.00005, 0.008]
WORKED_KEPT = [0.0, 0.55, 0.06, 0.0, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.0, 0.008]


def lv_params(seed=0):
    return net.init_params(2, 1, 16, 6, q=1, seed=seed)


def test_lv_output_width():
    p = lv_params()
    assert p.out_width == 13
    assert p.weights["W2"].shape == (13, 16)


def test_init_seeded():
    a, b, c = lv_params(0), lv_params(0), lv_params(1)
    assert all(np.array_equal(a[k], b[k]) for k in net.TRAINABLE)
    assert not np.array_equal(a.flat(), c.flat())


def test_zero_weights_zero_hidden(rng):
    p = lv_params()
    for k in p.weights:
        p.weights[k][:] = 0.0
    h, tape = net.gru_forward(p, rng.normal(size=(3, 3, 7)))
    assert np.all(h == 0.0)
    assert np.all(tape.z == 0.5)
    assert np.all(tape.hc == 0.0)
    raw, sh, _ = net.dense_forward(p, h)
    assert np.all(raw == 0.0) and np.all(sh == 0.0)


def test_single_step_range():
    h, _ = net.gru_forward(lv_params(3), np.zeros((2, 3, 1)))
    assert np.all(np.isfinite(h)) and np.all(np.abs(h) < 1.0)


def test_forward_deterministic(rng):
    x = rng.normal(size=(4, 3, 10))
    a = net.forward(lv_params(), x)
    b = net.forward(lv_params(), x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_bad_batch_shape():
    with pytest.raises(net.NetShapeError):
        net.gru_forward(lv_params(), np.zeros((2, 4, 5)))


def test_hand_set_head_hits_target():
    p = net.init_params(1, 0, 2, 3, seed=0)
    target = np.array([0.5, -1.25, 2.0])
    p.weights["W1"][:] = np.eye(2)
    p.weights["b1"][:] = [1.0, 0.0]
    p.weights["W2"][:] = 0.0
    p.weights["W2"][:, 0] = target
    raw, _, _ = net.dense_forward(p, np.zeros((1, 2)))
    assert np.array_equal(raw[0], target)


def test_dropout_worked_example():
    out = net.threshold_dropout(WORKED_RAW, 0.001)
    assert out.tolist() == WORKED_KEPT


def test_dropout_identity_and_zero(rng):
    v = rng.normal(size=50)
    assert np.array_equal(net.threshold_dropout(v, 0.0), v)
    assert np.all(net.threshold_dropout(np.zeros(7), 0.3) == 0.0)
    with pytest.raises(ValueError):
        net.threshold_dropout(v, -1.0)


vectors = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=1, max_size=20)
taus = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=1000, deadline=None)
@given(vectors, taus, taus)
def test_dropout_idempotent_and_monotone(v, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    once = net.threshold_dropout(v, lo)
    assert np.array_equal(net.threshold_dropout(once, lo), once)
    assert np.all((net.threshold_dropout(v, hi) != 0) <= (once != 0))


def test_top_p():
    out = net.top_p_dropout(WORKED_RAW, 3)
    assert np.flatnonzero(out).tolist() == [1, 6, 8]


def test_serialization_round_trip():
    p = lv_params(5)
    p.coef_scale = np.linspace(0.1, 2.0, p.n_coef)
    q = net.RecoveryNetParams.from_bytes(p.to_bytes())
    assert q.checksum() == p.checksum()
    assert q.header() == p.header()
    with pytest.raises(ValueError):
        net.RecoveryNetParams.from_bytes(b"XXXX" + p.to_bytes()[4:])


def test_zero_upstream_zero_grads(rng):
    p = lv_params()
    _, _, tape = net.forward(p, rng.normal(size=(2, 3, 5)))
    grads = net.net_backward(p, tape, np.zeros((2, p.n_coef)), np.zeros((2, 1)))
    assert all(np.all(g == 0.0) for g in grads.values())


def test_stale_tape_rejected(rng):
    p = lv_params()
    _, _, tape = net.forward(p, rng.normal(size=(2, 3, 5)))
    p.weights["b2"][0] += 1.0
    with pytest.raises(net.NetShapeError):
        net.net_backward(p, tape, np.zeros((2, p.n_coef)))


def test_gru_gradcheck_single_step():
    res = gradcheck.gru_gradcheck(hidden=2, k=1)
    assert res.max_rel_error <= 1e-5, res.line()


def test_dense_gradcheck():
    res = gradcheck.dense_gradcheck(hidden=4)
    assert res.max_rel_error <= 1e-6, res.line()


def test_zero_loss_case():
    res = gradcheck.zero_loss_check()
    assert res.loss == 0.0 and res.max_rel_error == 0.0
