import numpy as np
import pytest

from seqgrad import cells
from seqgrad.cells import CellState
from seqgrad.diagnostics import finite_diff_grad, random_instance, relative_error
from seqgrad.linalg import Rng, ShapeError, sigmoid, softmax
from seqgrad.params import GATES, ParamSet
from seqgrad.sequence import Topology

M2O = Topology("many-to-one")


def params_for(arch, dims=(2, 3, 2), seed=0):
    return random_instance(arch, dims, 1, M2O, seed)[0]


def zero_params(arch, m=2, n=3, k=2):
    t = {}
    for wi, ws, b in GATES[arch].values():
        t[wi], t[ws], t[b] = np.zeros((n, m)), np.zeros((n, n)), np.zeros(n)
    t["w_out"], t["b_out"] = np.zeros((k, n)), np.zeros(k)
    return ParamSet(arch, t)


# -- forward ---------------------------------------------------------------------

def test_rnn_zero_params_give_zero_state():
    h, _ = cells.rnn_step(zero_params("rnn"), np.ones(2), np.ones(3))
    assert np.array_equal(h, np.zeros(3))


def test_rnn_identity_recurrence():
    p = zero_params("rnn")
    p["w_rec"] = np.eye(3)
    hp = np.array([0.3, -2.0, 5.0])
    h, _ = cells.rnn_step(p, np.ones(2), hp)
    assert np.array_equal(h, np.tanh(hp))


def test_rnn_matches_straight_line_oracle():
    p = params_for("rnn")
    rng = Rng(1)
    x, hp = rng.normal(0, 1, 2), rng.normal(0, 1, 3)
    h, _ = cells.rnn_step(p, x, hp)
    expect = [np.tanh(sum(p["w_in"][i, j] * x[j] for j in range(2))
                      + sum(p["w_rec"][i, j] * hp[j] for j in range(3)) + p["b"][i])
              for i in range(3)]
    assert np.allclose(h, expect, atol=1e-15)


def test_output_head():
    p = zero_params("rnn", k=4)
    assert np.allclose(cells.output_head(p, np.ones(3)), 0.25)
    q = params_for("rnn")
    h = Rng(2).normal(0, 1, 3)
    base = cells.output_head(q, h)
    assert np.allclose(base, softmax(q["w_out"] @ h + q["b_out"]), atol=1e-15)
    q["b_out"] = q["b_out"] + 7.5
    assert np.allclose(cells.output_head(q, h), base, atol=1e-14)
    assert base.sum() == pytest.approx(1.0, abs=1e-15)


def test_sigmoid_output_head_option():
    q = params_for("rnn")
    s = ParamSet("rnn", q.tensors, output="sigmoid")
    h = np.ones(3)
    assert np.allclose(cells.output_head(s, h), sigmoid(q["w_out"] @ h + q["b_out"]))


def test_lstm_zero_params_zero_state():
    h, c, _ = cells.lstm_step(zero_params("lstm"), np.ones(2), np.zeros(3), np.zeros(3))
    assert np.array_equal(h, np.zeros(3)) and np.array_equal(c, np.zeros(3))


def test_lstm_carousel_saturation():
    p = params_for("lstm")
    p["b_f"][:] = 20.0
    p["b_il"][:] = -20.0
    cp = np.array([0.5, -1.2, 2.0])
    _, c, _ = cells.lstm_step(p, np.array([0.1, -0.2]), np.array([0.05, 0.0, -0.1]), cp)
    assert np.allclose(c, cp, atol=1e-8)


def test_lstm_matches_straight_line_oracle():
    p = params_for("lstm", seed=3)
    rng = Rng(4)
    x, hp, cp = rng.normal(0, 1, 2), rng.normal(0, 1, 3), rng.normal(0, 1, 3)

    def aff(wi, ws, b):
        return p[wi] @ x + p[ws] @ hp + p[b]

    sig = lambda v: 1 / (1 + np.exp(-v))
    f = sig(aff("w_if", "w_sf", "b_f"))
    i = sig(aff("w_iil", "w_sil", "b_il"))
    g = np.tanh(aff("w_iif", "w_sif", "b_if"))
    o = sig(aff("w_io", "w_so", "b_o"))
    c_ref = f * cp + i * g
    h, c, _ = cells.lstm_step(p, x, hp, cp)
    assert np.allclose(c, c_ref, atol=1e-14)
    assert np.allclose(h, o * np.tanh(c_ref), atol=1e-14)


def test_gru_saturation_cases():
    p = params_for("gru")
    x, hp = np.array([0.3, -0.4]), np.array([0.2, -0.7, 0.9])
    p["b_z"][:] = 20.0
    h, _ = cells.gru_step(p, x, hp)
    assert np.allclose(h, hp, atol=1e-8)
    p["b_z"][:] = -20.0
    h, cache = cells.gru_step(p, x, hp)
    assert np.allclose(h, cache.act["c"], atol=1e-8)


def test_gru_matches_straight_line_oracle():
    p = params_for("gru", seed=5)
    rng = Rng(6)
    x, hp = rng.normal(0, 1, 2), rng.normal(0, 1, 3)
    sig = lambda v: 1 / (1 + np.exp(-v))
    z = sig(p["w_zs"] @ hp + p["w_zi"] @ x + p["b_z"])
    r = sig(p["w_rs"] @ hp + p["w_ri"] @ x + p["b_r"])
    hc = np.tanh(p["w_ci"] @ x + r * (p["w_si"] @ hp) + p["b_c"])
    h, _ = cells.gru_step(p, x, hp)
    assert np.allclose(h, z * hp + (1 - z) * hc, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_gru_state_is_convex_combination(seed):
    p = params_for("gru", seed=seed)
    rng = Rng(seed + 100)
    x, hp = rng.normal(0, 2, 2), rng.uniform(-1, 1, 3)
    h, cache = cells.gru_step(p, x, hp)
    lo = np.minimum(hp, cache.act["c"]) - 1e-15
    hi = np.maximum(hp, cache.act["c"]) + 1e-15
    assert np.all((lo <= h) & (h <= hi))


@pytest.mark.parametrize("arch", ["rnn", "lstm", "gru"])
def test_gate_ranges_and_determinism(arch):
    p = params_for(arch, seed=9)
    x, hp = Rng(1).normal(0, 3, 2), Rng(2).uniform(-1, 1, 3)
    st = CellState(hp, np.zeros(3) if arch == "lstm" else None)
    s1, c1 = cells.step(p, x, st)
    s2, _ = cells.step(p, x, st)
    assert np.array_equal(s1.h, s2.h)
    for name, a in c1.act.items():
        lo, hi = (-1, 1) if name in ("h", "if", "c") else (0, 1)
        assert np.all((a > lo) & (a < hi)), name


def test_shape_errors():
    p = params_for("rnn")
    with pytest.raises(ShapeError):
        cells.rnn_step(p, np.ones(5), np.ones(3))
    with pytest.raises(ShapeError):
        cells.rnn_step(params_for("gru"), np.ones(2), np.ones(3))
    with pytest.raises(ShapeError):
        cells.output_head(p, np.ones(4))


def test_batched_step_equals_rowwise():
    for arch in ("rnn", "lstm", "gru"):
        p = params_for(arch, seed=2)
        X, H = Rng(0).normal(0, 1, (4, 2)), Rng(1).normal(0, 1, (4, 3))
        C = Rng(3).normal(0, 1, (4, 3)) if arch == "lstm" else None
        sb, _ = cells.step(p, X, CellState(H, C))
        for r in range(4):
            sr, _ = cells.step(p, X[r], CellState(H[r], None if C is None else C[r]))
            assert np.allclose(sb.h[r], sr.h, atol=1e-15)


# -- backward ----------------------------------------------------------------------

def step_loss_fn(arch, x, hp, cp, wh, wc):
    """Scalar probe loss sum(wh * h) [+ sum(wc * c)] of one step."""
    def loss(p):
        st, _ = cells.step(p, x, CellState(hp, cp))
        out = np.sum(wh * st.h)
        if arch == "lstm":
            out = out + np.sum(wc * st.c)
        return out
    return loss


@pytest.mark.parametrize("arch", ["rnn", "lstm", "gru"])
@pytest.mark.parametrize("seed", range(20))
def test_step_backward_matches_finite_differences(arch, seed):
    rng = Rng(seed)
    m, n = [1, 2, 3, 5][seed % 4], [1, 2, 3, 5][(seed // 4) % 4]
    p = params_for(arch, (m, n, 2), seed)
    x, hp = rng.normal(0, 1, m), rng.normal(0, 0.5, n)
    cp = rng.normal(0, 1, n) if arch == "lstm" else None
    wh, wc = rng.normal(0, 1, n), rng.normal(0, 1, n)
    st, cache = cells.step(p, x, CellState(hp, cp))
    grads, dh_prev, dc_prev, dx = cells.step_backward(cache, p, wh, wc if arch == "lstm" else None)
    cell_only = ParamSet(arch, {k: v for k, v in p.items() if k not in ("w_out", "b_out")})
    num = finite_diff_grad(step_loss_fn(arch, x, hp, cp, wh, wc), cell_only, dtype=np.longdouble)
    for name in cell_only:
        assert relative_error(grads[name], num[name]).max() < 1e-6, name
    # input and state gradients through the same oracle
    def wrt(vec_name):
        def f(q):
            v = {"x": x, "h": hp, "c": cp}
            v[vec_name] = q["v"]
            return step_loss_fn(arch, v["x"], v["h"], v["c"], wh, wc)(p)
        return f
    checks = [("x", x, dx), ("h", hp, dh_prev)] + ([("c", cp, dc_prev)] if arch == "lstm" else [])
    for nm, val, analytic in checks:
        num_v = finite_diff_grad(wrt(nm), ParamSet(arch, {"v": val.copy()}), dtype=np.longdouble)
        assert relative_error(analytic, num_v["v"]).max() < 1e-6, nm


@pytest.mark.parametrize("arch", ["rnn", "lstm", "gru"])
def test_zero_upstream_gives_zero_gradients(arch):
    p = params_for(arch)
    st, cache = cells.step(p, np.ones(2), CellState(np.ones(3) * 0.1,
                                                    np.ones(3) if arch == "lstm" else None))
    grads, dh_prev, dc_prev, dx = cells.step_backward(cache, p, np.zeros(3),
                                                      np.zeros(3) if arch == "lstm" else None)
    assert all(not np.any(g) for g in grads.values())
    assert not np.any(dh_prev) and not np.any(dx)
    if arch == "lstm":
        assert not np.any(dc_prev)


def test_rnn_no_temporal_path_without_recurrence():
    p = params_for("rnn")
    p["w_rec"][:] = 0.0
    _, cache = cells.rnn_step(p, np.ones(2), np.ones(3))
    _, dh_prev, _ = cells.rnn_step_backward(cache, p, np.ones(3))
    assert np.array_equal(dh_prev, np.zeros(3))


def test_rnn_dh_prev_formula():
    p = params_for("rnn", seed=4)
    h, cache = cells.rnn_step(p, np.array([0.2, 0.1]), np.array([0.3, -0.3, 0.0]))
    dh = np.array([1.0, -2.0, 0.5])
    _, dh_prev, _ = cells.rnn_step_backward(cache, p, dh)
    assert np.allclose(dh_prev, p["w_rec"].T @ (dh * (1 - h * h)), atol=1e-15)


def test_lstm_carousel_backward_passthrough():
    p = params_for("lstm")
    for name in ("w_if", "w_sf", "w_iil", "w_sil"):
        p[name][:] = 0.0
    p["b_f"][:] = 40.0
    p["b_il"][:] = -40.0
    _, _, cache = cells.lstm_step(p, np.ones(2), np.zeros(3), np.array([0.1, 0.2, 0.3]))
    dc = np.array([1.0, -3.0, 2.0])
    _, _, dc_prev, _ = cells.lstm_step_backward(cache, p, np.zeros(3), dc)
    assert np.linalg.norm(dc_prev) == pytest.approx(np.linalg.norm(dc), rel=1e-15)


def test_gru_copy_path_when_update_saturated():
    p = params_for("gru")
    for name in ("w_zi", "w_zs"):
        p[name][:] = 0.0
    p["b_z"][:] = 40.0
    _, cache = cells.gru_step(p, np.ones(2), np.array([0.1, -0.2, 0.3]))
    dh = np.array([0.7, 1.0, -0.4])
    grads, dh_prev, _ = cells.gru_step_backward(cache, p, dh)
    assert np.allclose(dh_prev, dh, atol=1e-15)
    for name in ("w_ci", "w_si", "b_c", "w_ri", "w_rs", "b_r"):
        assert np.abs(grads[name]).max() < 1e-15


def test_backward_rejects_mismatched_cache():
    p = params_for("rnn")
    _, cache = cells.rnn_step(p, np.ones(2), np.ones(3))
    with pytest.raises(ShapeError):
        cells.gru_step_backward(cache, params_for("gru"), np.ones(3))
