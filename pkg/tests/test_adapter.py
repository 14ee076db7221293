import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotground import autodiff as ad
from slotground.adapter import (
    AdapterConfig,
    ConfigError,
    adapter_forward,
    down_project,
    init_adapter_params,
    reconstruct,
    run_slot_attention,
    slot_attention_step,
)
from slotground.autodiff import Tensor, numerical_grad, rel_error


def make(D=6, d=4, n_slots=2, iters=3, heads=2, recon_mode="cross_attention", seed=0):
    cfg = AdapterConfig(D=D, d=d, n_slots=n_slots, iters=iters, heads=heads, recon_mode=recon_mode)
    return cfg, init_adapter_params(cfg, np.random.default_rng(seed))


def randomize(params, rng, scale=0.5):
    """Give every parameter (including W_up) non-trivial values."""
    for t in params.values():
        t.data = rng.normal(0, scale, size=t.shape)
    return params


# ---------------------------------------------------------------- loop oracle


def _ln(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * g + b


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_step(S, Xd, P, cfg):
    """Plain loops over tokens, slots and heads for one frame."""
    N, K, d, H = Xd.shape[0], S.shape[0], cfg.d, cfg.heads
    dh = d // H
    xn = np.array([_ln(Xd[n], P["ln_in.g"], P["ln_in.b"]) for n in range(N)])
    sn = np.array([_ln(S[k], P["ln_slot.g"], P["ln_slot.b"]) for k in range(K)])
    Kp, Vp, Qp = xn @ P["W_K"], xn @ P["W_V"], sn @ P["W_Q"]
    A = np.zeros((H, N, K))
    Ah = np.zeros((H, N, K))
    Z = np.zeros((K, d))
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        for n in range(N):
            logits = [float(Kp[n, cols] @ Qp[k, cols]) / math.sqrt(dh) for k in range(K)]
            m = max(logits)
            e = [math.exp(v - m) for v in logits]
            for k in range(K):
                A[h, n, k] = e[k] / sum(e)
        for k in range(K):
            tot = sum(A[h, j, k] for j in range(N))
            for n in range(N):
                Ah[h, n, k] = A[h, n, k] / (tot + cfg.eps_token_norm)
            for n in range(N):
                Z[k, cols] += Ah[h, n, k] * Vp[n, cols]
    new = np.zeros_like(S)
    for k in range(K):
        z = _sigmoid(Z[k] @ P["gru.W_z"] + S[k] @ P["gru.U_z"] + P["gru.b_z"])
        r = _sigmoid(Z[k] @ P["gru.W_r"] + S[k] @ P["gru.U_r"] + P["gru.b_r"])
        c = np.tanh(Z[k] @ P["gru.W_h"] + (r * S[k]) @ P["gru.U_h"] + P["gru.b_h"])
        new[k] = (1 - z) * c + z * S[k]
    return new, A.mean(0), Ah.mean(0), Z


def numpy_params(params):
    return {k: v.data for k, v in params.items()}


# ---------------------------------------------------------------- config / init


def test_config_validation():
    with pytest.raises(ConfigError):
        AdapterConfig(d=10, heads=4)
    with pytest.raises(ConfigError):
        AdapterConfig(n_slots=0)
    with pytest.raises(ConfigError):
        AdapterConfig(iters=0)
    with pytest.raises(ConfigError):
        AdapterConfig(recon_mode="nope")


def test_defaults_follow_reported_hyperparameters():
    cfg = AdapterConfig()
    assert (cfg.d, cfg.n_slots, cfg.iters, cfg.heads, cfg.head_dim) == (512, 4, 3, 8, 64)


def test_w_up_zero_at_construction():
    _, p = make()
    assert not np.any(p["W_up"].data)
    assert all(np.isfinite(t.data).all() for t in p.values())


# ---------------------------------------------------------------- down projection


def test_down_project_identity_block():
    cfg, p = make(D=6, d=4)
    p["W_down"].data = np.hstack([np.eye(4), np.zeros((4, 0))]).T if False else np.vstack([np.eye(4), np.zeros((2, 4))])
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(size=(2, 3, 4)), np.zeros((2, 3, 2))], axis=-1)
    out = down_project(Tensor(X), p).data
    assert np.array_equal(out, X[..., :4])
    assert not np.any(down_project(Tensor(np.zeros((2, 3, 6))), p).data)


def test_down_project_dim_mismatch():
    _, p = make(D=6)
    with pytest.raises(ad.DimensionError):
        down_project(Tensor(np.zeros((1, 3, 5))), p)


def test_down_project_gradient():
    cfg, p = make()
    rng = np.random.default_rng(2)
    X = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4))

    def loss():
        return ad.sum_axis(down_project(X, p) * w)

    loss().backward()
    for t in (X, p["W_down"]):
        assert rel_error(t.grad, numerical_grad(loss, t), floor=1e-6) <= 1e-6


# ---------------------------------------------------------------- slot attention


def test_single_slot_step():
    cfg, p = make(n_slots=1, heads=1)
    rng = np.random.default_rng(3)
    Xd = rng.normal(size=(1, 5, 4))
    S = rng.normal(size=(1, 1, 4))
    _, A, Ah = slot_attention_step(Tensor(S), Tensor(Xd), p, cfg)
    assert np.array_equal(A.data, np.ones((1, 5, 1)))
    assert np.allclose(Ah.data, 1 / 5, rtol=1e-7)
    _, _, _, Z = reference_step(S[0], Xd[0], numpy_params(p), cfg)
    xn = np.array([_ln(x, 1.0, 0.0) for x in Xd[0]])
    assert np.allclose(Z[0], (xn @ p["W_V"].data).mean(0), atol=1e-7)


def test_identical_slots_split_evenly():
    cfg, p = make(n_slots=3, heads=2)
    rng = np.random.default_rng(4)
    S = np.repeat(rng.normal(size=(1, 1, 4)), 3, axis=1)
    _, A, _ = slot_attention_step(Tensor(S), Tensor(rng.normal(size=(1, 6, 4))), p, cfg)
    assert np.allclose(A.data, 1 / 3, atol=1e-15)


def test_step_matches_loop_oracle():
    cfg, p = make(D=3, d=2, n_slots=2, heads=1)
    rng = np.random.default_rng(5)
    randomize(p, rng)
    S = rng.normal(size=(1, 2, 2))
    Xd = rng.normal(size=(1, 4, 2))
    new, A, Ah = slot_attention_step(Tensor(S), Tensor(Xd), p, cfg)
    ref_new, ref_A, ref_Ah, _ = reference_step(S[0], Xd[0], numpy_params(p), cfg)
    assert np.allclose(new.data[0], ref_new, atol=1e-12)
    assert np.allclose(A.data[0], ref_A, atol=1e-12)
    assert np.allclose(Ah.data[0], ref_Ah, atol=1e-12)


def test_multi_head_step_matches_loop_oracle():
    cfg, p = make(D=5, d=4, n_slots=3, heads=2)
    rng = np.random.default_rng(6)
    randomize(p, rng)
    S = rng.normal(size=(3, 4))
    Xd = rng.normal(size=(7, 4))
    new, A, Ah = slot_attention_step(Tensor(S[None]), Tensor(Xd[None]), p, cfg)
    ref_new, ref_A, ref_Ah, _ = reference_step(S, Xd, numpy_params(p), cfg)
    assert np.allclose(new.data[0], ref_new, atol=1e-12)
    assert np.allclose(A.data[0], ref_A, atol=1e-12)
    assert np.allclose(Ah.data[0], ref_Ah, atol=1e-12)


def test_one_iteration_is_one_step():
    cfg, p = make(iters=1)
    rng = np.random.default_rng(7)
    Xd = Tensor(rng.normal(size=(3, 5, 4)))
    out = run_slot_attention(Xd, p, cfg)
    S0 = np.broadcast_to(p["S0"].data, (3, 2, 4)).copy()
    new, A, Ah = slot_attention_step(Tensor(S0), Xd, p, cfg)
    assert np.array_equal(out.slots.data, new.data)
    assert np.array_equal(out.attn.data, A.data)
    assert np.array_equal(out.attn_hat.data, Ah.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 9))
def test_normalization_invariants(seed, n_slots, N):
    cfg, p = make(n_slots=n_slots, seed=seed)
    rng = np.random.default_rng(seed)
    out = run_slot_attention(Tensor(rng.normal(0, 3, size=(2, N, 4))), p, cfg)
    assert np.all(np.abs(out.attn.data.sum(-1) - 1) <= 1e-6)
    assert np.all(np.abs(out.attn_hat.data.sum(-2) - 1) <= 1e-6)


def test_slot_permutation_equivariance():
    cfg, p = make(n_slots=4, heads=2)
    rng = np.random.default_rng(8)
    randomize(p, rng)
    p["S0"].data = rng.normal(size=(4, 4))
    Xd = Tensor(rng.normal(size=(2, 6, 4)))
    base = run_slot_attention(Xd, p, cfg)
    perm = np.array([2, 0, 3, 1])
    p["S0"].data = p["S0"].data[perm]
    permuted = run_slot_attention(Xd, p, cfg)
    assert np.allclose(permuted.attn.data, base.attn.data[..., perm], atol=1e-12)
    x1 = reconstruct(Xd, base.slots, p, cfg).data
    x2 = reconstruct(Xd, permuted.slots, p, cfg).data
    assert np.max(np.abs(x1 - x2)) <= 1e-9


def test_per_frame_locality():
    cfg, p = make()
    rng = np.random.default_rng(9)
    X = rng.normal(size=(3, 5, 4))
    a1 = run_slot_attention(Tensor(X), p, cfg).attn.data
    X[2] = 0.0
    a2 = run_slot_attention(Tensor(X), p, cfg).attn.data
    assert np.array_equal(a1[:2], a2[:2])


# ---------------------------------------------------------------- reconstruction


def test_single_slot_reconstruction_rows_identical():
    cfg, p = make(n_slots=1, heads=1)
    rng = np.random.default_rng(10)
    xh = reconstruct(Tensor(rng.normal(size=(1, 5, 4))), Tensor(rng.normal(size=(1, 1, 4))), p, cfg).data
    assert np.allclose(xh[0], xh[0, :1], atol=0)


def test_identical_slots_give_uniform_weights():
    cfg, p = make(n_slots=3)
    rng = np.random.default_rng(11)
    slot = rng.normal(size=(1, 1, 4))
    S = np.repeat(slot, 3, axis=1)
    xh = reconstruct(Tensor(rng.normal(size=(1, 5, 4))), Tensor(S), p, cfg).data
    v = slot[0, 0] @ p["recon.W_v"].data
    assert np.allclose(xh[0], v, atol=1e-12)


def test_cross_attention_matches_loop():
    cfg, p = make(n_slots=3)
    rng = np.random.default_rng(12)
    randomize(p, rng)
    Xd = rng.normal(size=(4, 4))
    S = rng.normal(size=(3, 4))
    xh = reconstruct(Tensor(Xd[None]), Tensor(S[None]), p, cfg).data[0]
    P = numpy_params(p)
    for n in range(4):
        q = _ln(Xd[n], P["ln_in.g"], P["ln_in.b"]) @ P["recon.W_q"]
        logits = np.array([q @ (S[k] @ P["recon.W_k"]) / math.sqrt(4) for k in range(3)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        expect = sum(w[k] * (S[k] @ P["recon.W_v"]) for k in range(3))
        assert np.allclose(xh[n], expect, atol=1e-12)


def test_repeat_project():
    cfg, p = make(n_slots=2, recon_mode="repeat_project")
    rng = np.random.default_rng(13)
    S = rng.normal(size=(1, 2, 4))
    xh = reconstruct(Tensor(rng.normal(size=(1, 6, 4))), Tensor(S), p, cfg).data[0]
    W = p["recon.W_proj"].data
    expect = np.vstack([np.repeat(S[0, :1], 3, 0), np.repeat(S[0, 1:], 3, 0)]) @ W
    assert np.allclose(xh, expect, atol=1e-14)
    with pytest.raises(ConfigError):
        reconstruct(Tensor(rng.normal(size=(1, 5, 4))), Tensor(S), p, cfg)


# ---------------------------------------------------------------- full adapter


@pytest.mark.parametrize("mode", ["cross_attention", "repeat_project"])
def test_identity_at_init(mode):
    cfg, p = make(recon_mode=mode)
    X = np.random.default_rng(14).normal(size=(3, 4, 6))
    out, _ = adapter_forward(Tensor(X), p, cfg)
    assert np.max(np.abs(out.data - X)) == 0.0


def test_zero_reconstruction_leaves_input():
    cfg, p = make()
    rng = np.random.default_rng(15)
    p["W_up"].data = rng.normal(size=p["W_up"].shape)
    p["recon.W_v"].data[:] = 0.0
    X = rng.normal(size=(2, 4, 6))
    out, _ = adapter_forward(Tensor(X), p, cfg)
    assert np.array_equal(out.data, X)


@pytest.mark.parametrize("mode", ["cross_attention", "repeat_project"])
def test_adapter_gradients_match_finite_differences(mode):
    cfg, p = make(D=5, d=4, n_slots=2, heads=2, recon_mode=mode)
    rng = np.random.default_rng(16)
    randomize(p, rng, scale=0.4)
    X = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    w = rng.normal(size=(2, 4, 5))

    def loss():
        out, sa = adapter_forward(X, p, cfg)
        return ad.sum_axis(out * w) + ad.sum_axis(sa.attn * sa.attn)

    p.zero_grad()
    X.zero_grad()
    loss().backward()
    for name, t in list(p.items()) + [("X", X)]:
        num = numerical_grad(loss, t)
        err = rel_error(t.grad, num, floor=1e-6)
        assert err <= 1e-4, f"{name}: {err}"
