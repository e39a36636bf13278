import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycdec import iue, mhsp
from cycdec import numcore as nc
from cycdec.numcore import Param


def test_patchify_examples():
    z = np.arange(8.0)[None]
    p = mhsp.patchify(z, 4, 2).data
    assert p.shape == (1, 3, 4)
    np.testing.assert_array_equal(p[0, :, 0], [0, 2, 4])
    np.testing.assert_array_equal(mhsp.patchify(z, 8, 5).data[:, 0], z)
    p = mhsp.patchify(np.arange(10.0)[None], 4, 3).data
    np.testing.assert_array_equal(p[0, :, 0], [0, 3, 6])
    assert p.shape[1] == 3  # a fourth patch would start at 9 and run past the end


def test_patchify_window_too_long():
    with pytest.raises(mhsp.ConfigError):
        mhsp.patchify(np.zeros((1, 8)), 9, 1)


@given(st.integers(1, 80), st.data())
def test_patch_count_matches_enumeration(length, data):
    w = data.draw(st.integers(1, length))
    s = data.draw(st.integers(1, w))
    starts = []
    t = 0
    while t + w <= length:
        starts.append(t)
        t += s
    idx = mhsp.patch_indices(length, w, s)
    assert mhsp.patch_count(length, w, s) == len(starts) == len(idx)
    np.testing.assert_array_equal(idx[:, 0], starts)


def test_adaptive_pool_examples():
    P = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(mhsp.adaptive_pool(P, 4).data, P)
    np.testing.assert_allclose(mhsp.adaptive_pool([[[1.0, 2, 3, 4]]], 2).data, [[[1.5, 3.5]]])
    np.testing.assert_allclose(mhsp.adaptive_pool([[[5.0, 5, 5]]], 2).data, [[[5, 5]]])


@given(st.integers(1, 40), st.integers(1, 40), st.floats(-100, 100))
def test_adaptive_pool_preserves_constants(w, d, c):
    out = mhsp.adaptive_pool(np.full((1, 2, w), c), d).data
    assert out.shape == (1, 2, d)
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-12)


def test_top_down_gate_examples():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(2, 3, 4))
    h = rng.normal(size=(2, 5))
    np.testing.assert_array_equal(mhsp.top_down_gate(p, None, None, None).data, p)
    np.testing.assert_array_equal(mhsp.top_down_gate(p, h, np.zeros((4, 5)), np.zeros(4)).data, p / 2)
    np.testing.assert_allclose(mhsp.top_down_gate(p, h, np.zeros((4, 5)), np.full(4, 50.0)).data, p,
                               atol=1e-12, rtol=0)


def test_gate_is_shared_across_patches():
    rng = np.random.default_rng(2)
    p = np.ones((1, 3, 4))
    out = mhsp.top_down_gate(p, rng.normal(size=(1, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])
    np.testing.assert_array_equal(out[0, 0], out[0, 2])


# ----------------------------------------------------------------- recurrent encoders

def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _oracle_step(x, h, P):
    """One gated step written out per sample with explicit loops over units."""
    d_h = len(h)
    z = np.empty(d_h)
    r = np.empty(d_h)
    for i in range(d_h):
        z[i] = _sig(sum(P["Wz"][i, j] * x[j] for j in range(len(x)))
                    + sum(P["Uz"][i, j] * h[j] for j in range(d_h)) + P["bz"][i])
        r[i] = _sig(sum(P["Wr"][i, j] * x[j] for j in range(len(x)))
                    + sum(P["Ur"][i, j] * h[j] for j in range(d_h)) + P["br"][i])
    out = np.empty(d_h)
    for i in range(d_h):
        cand = np.tanh(sum(P["Wh"][i, j] * x[j] for j in range(len(x)))
                       + sum(P["Uh"][i, j] * r[j] * h[j] for j in range(d_h)) + P["bh"][i])
        out[i] = (1 - z[i]) * h[i] + z[i] * cand
    return out


def _rand_gru(rng, prefix, d_in, d_h):
    params = mhsp.init_gru(prefix, d_in, d_h, rng)
    for p in params.values():
        p.data[...] = rng.normal(size=p.shape)
    return params


@pytest.mark.parametrize("n", [1, 2])
def test_lle_matches_hand_unrolled_recurrence(n):
    rng = np.random.default_rng(10 + n)
    d, d_h = 3, 4
    params = _rand_gru(rng, "lle", d, d_h)
    params["lle.gamma"] = Param(rng.normal(size=d_h), "lle.gamma")
    params["lle.beta"] = Param(rng.normal(size=d_h), "lle.beta")
    P = rng.normal(size=(2, n, d))
    raw = {k.split(".")[1]: v.data for k, v in params.items()}
    eps = 1e-5
    out = mhsp.lle_forward(P, params, eps).data
    for b in range(2):
        h = np.zeros(d_h)
        for t in range(n):
            h = _oracle_step(P[b, t], h, raw)
        rms = np.sqrt(sum(v * v for v in h) / d_h + eps)
        expect = raw["gamma"] * h / rms + raw["beta"]
        np.testing.assert_allclose(out[b], expect, atol=1e-12, rtol=0)


def test_lle_zero_parameters_give_zero_vector():
    params = {k: Param(np.zeros(p.shape), k) for k, p in mhsp.init_gru("lle", 3, 4, np.random.default_rng(0)).items()}
    params["lle.gamma"] = Param(np.ones(4), "lle.gamma")
    params["lle.beta"] = Param(np.zeros(4), "lle.beta")
    out = mhsp.lle_forward(np.random.default_rng(1).normal(size=(2, 5, 3)), params).data
    assert (out == 0.0).all()


def test_lle_beta_shift_is_exact():
    rng = np.random.default_rng(3)
    params = _rand_gru(rng, "lle", 3, 4)
    params["lle.gamma"] = Param(rng.normal(size=4), "lle.gamma")
    params["lle.beta"] = Param(np.zeros(4), "lle.beta")
    P = rng.normal(size=(2, 3, 3))
    base = mhsp.lle_forward(P, params).data
    params["lle.beta"].data[:] = 0.25
    np.testing.assert_array_equal(mhsp.lle_forward(P, params).data, base + 0.25)


def test_hle_examples():
    rng = np.random.default_rng(4)
    zero = {k: Param(np.zeros(p.shape), k) for k, p in mhsp.init_gru("hle", 3, 3, rng).items()}
    assert (mhsp.hle_forward(rng.normal(size=(2, 3)), np.zeros((2, 3)), zero).data == 0).all()
    params = _rand_gru(rng, "hle", 3, 3)
    params["hle.bz"].data[:] = -50.0
    carry = rng.normal(size=(2, 3))
    np.testing.assert_allclose(mhsp.hle_forward(rng.normal(size=(2, 3)), carry, params).data, carry,
                               atol=1e-12, rtol=0)


def test_hle_single_step_matches_oracle():
    rng = np.random.default_rng(5)
    params = _rand_gru(rng, "hle", 3, 3)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    raw = {k.split(".")[1]: v.data for k, v in params.items()}
    out = mhsp.hle_forward(x, h, params).data
    for b in range(2):
        np.testing.assert_allclose(out[b], _oracle_step(x[b], h[b], raw), atol=1e-12, rtol=0)


# ----------------------------------------------------------------- cycle loop

def _setup(L_max=3, windows=(6,), seed=0, B=2, length=24):
    cfg = mhsp.MHSPConfig(windows=windows, d=4, d_h=5, L_max=L_max)
    rng = np.random.default_rng(seed)
    params = mhsp.init_params(cfg, 4, rng)
    params.update(iue.init_params(5, 4, rng))
    z = rng.normal(size=(B, length))
    rel = lambda g, l: iue.reliability(g, l, params["iue.W"], params["iue.b"])  # noqa: E731
    return cfg, params, z, rel


@pytest.mark.parametrize("L_max", [1, 2, 4])
def test_run_cycles_exhausts_budget(L_max):
    cfg, params, z, rel = _setup(L_max)
    trace = mhsp.run_cycles(z, cfg, params, rel)
    assert trace.n_cycles == L_max
    assert [o.cycle_index for o in trace.outputs] == list(range(1, L_max + 1))
    assert len(trace.reliabilities) == L_max and not trace.halted_early


def test_halter_firing_at_two_stops_there():
    cfg, params, z, rel = _setup(4)
    calls = []

    def halter(trace, c):
        calls.append(c)
        return c >= 2

    trace = mhsp.run_cycles(z, cfg, params, rel, halter)
    assert trace.n_cycles == 2 and trace.halted_early
    assert calls == [1, 2]


def test_run_cycles_is_deterministic_and_batch_permutation_equivariant():
    cfg, params, z, rel = _setup(3, windows=(6, 4), B=4)
    a = mhsp.run_cycles(z, cfg, params, rel)
    b = mhsp.run_cycles(z, cfg, params, rel)
    for oa, ob in zip(a.outputs, b.outputs):
        np.testing.assert_array_equal(oa.logits.data, ob.logits.data)
    perm = np.array([2, 0, 3, 1])
    c = mhsp.run_cycles(z[perm], cfg, params, rel)
    for oa, oc in zip(a.outputs, c.outputs):
        np.testing.assert_allclose(oc.logits.data, oa.logits.data[perm], atol=1e-12)


def test_high_level_state_carries_across_cycles():
    cfg, params, z, rel = _setup(2)
    trace = mhsp.run_cycles(z, cfg, params, rel)
    assert not np.allclose(trace.outputs[0].state.data, trace.outputs[1].state.data)


def test_run_cycles_rejects_zero_budget():
    cfg, params, z, rel = _setup(2)
    with pytest.raises(mhsp.ConfigError):
        mhsp.run_cycles(z, cfg, params, rel, L_max=0)


def test_full_cycle_model_gradients():
    # B=2, n=3 patches, d=4, d_h=5, K=4, all cycles feeding the aggregated loss
    _, params, z, rel = _setup(3, windows=(6,), length=15)
    cfg = mhsp.MHSPConfig(windows=(6,), stride=4, d=4, d_h=5, L_max=3)
    assert mhsp.patch_count(15, 6, 4) == 3
    zt = Param(z, "z")
    y = np.array([0, 3])

    def loss():
        trace = mhsp.run_cycles(zt, cfg, params, rel)
        return nc.cross_entropy(iue.aggregate(trace, 2.0), y)

    rep = nc.grad_check(loss, [zt, *params.values()], h=1e-6)
    assert rep.passed, str(rep)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_cycle_outputs_finite(seed):
    cfg, params, z, rel = _setup(3, seed=seed)
    trace = mhsp.run_cycles(z * 100, cfg, params, rel)
    for o in trace.outputs:
        assert np.isfinite(o.logits.data).all()
    for r in trace.reliabilities:
        assert ((r.data >= 0) & (r.data <= 1)).all()
