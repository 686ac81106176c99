import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtal.errors import ConfigError, NumericError
from emtal.linalg import Rng, layer_norm
from emtal.moefy import DenseFFN, ExpertPartition, ffn_forward, partition_ffn
from emtal.mole import (LoraFactors, Router, build_mole, effective_expert, fading_alpha, mole_backward,
                        mole_forward, reparameterize, router_weights, tunable_count)


def _phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def scalar_mole(x, layer):
    """Loop-by-loop evaluation of one MoLE layer for one sample (pure Python floats)."""
    D = len(x)
    mu = sum(x) / D
    var = sum((v - mu) ** 2 for v in x) / D
    xn = [(x[j] - mu) / math.sqrt(var + 1e-6) * layer.ln_gamma[j] + layer.ln_beta[j] for j in range(D)]
    K = layer.K
    s = [sum(xn[j] * layer.router.W_r[j, i] for j in range(D)) / layer.router.tau for i in range(K)]
    z = sum(math.exp(v) for v in s)
    a = layer.router.alpha
    omega = [a * K * math.exp(v) / z + (1 - a) for v in s]
    out = [float(b) for b in layer.b_down]
    for i, e in enumerate(layer.experts):
        A_u, B_u, A_d, B_d = (layer.lora.A_up[i], layer.lora.B_up[i], layer.lora.A_down[i], layer.lora.B_down[i])
        hk = e.E_b.size
        r = A_u.shape[1]
        for c in range(hk):
            w = [e.E_up[j, c] + sum(A_u[j, q] * B_u[q, c] for q in range(r)) for j in range(D)]
            u = omega[i] * (sum(xn[j] * w[j] for j in range(D)) + e.E_b[c])
            h = u * _phi(u)
            for j in range(D):
                out[j] += h * (e.E_down[c, j] + sum(A_d[c, q] * B_d[q, j] for q in range(r)))
    return out


def random_layer(D=2, H=2, K=2, rank=1, seed=0, alpha=0.6, dtype=np.float64, zero=False):
    r = Rng(seed, "layer")
    ffn = DenseFFN(r.normal((D, H)), r.normal(H), r.normal((H, D)), r.normal(D))
    part = partition_ffn(ffn, K, "balanced", seed=seed)
    layer = build_mole(ffn.astype(dtype), 1 + r.normal(D, 0.1, dtype), r.normal(D, 0.1, dtype), part, rank, r,
                       tau=2.0, alpha=alpha)
    if not zero:
        for arr in layer.trainable().values():
            arr[...] = r.normal(arr.shape, 0.5, dtype)
    return ffn, layer


def test_forward_matches_scalar_oracle():
    _, layer = random_layer()
    x = Rng(9).normal((3, 2))
    out = mole_forward(x, layer)
    for n in range(3):
        np.testing.assert_allclose(out[n], scalar_mole(list(x[n]), layer), atol=1e-12)


def test_forward_matches_scalar_oracle_larger():
    _, layer = random_layer(D=3, H=6, K=3, rank=2, seed=4)
    x = Rng(1).normal((2, 3))
    out = mole_forward(x, layer)
    for n in range(2):
        np.testing.assert_allclose(out[n], scalar_mole(list(x[n]), layer), atol=1e-12)


def test_router_examples():
    xn = Rng(0).normal((5, 3))
    for alpha in (0.0, 0.4, 1.0):
        omega, _ = router_weights(xn, Router(np.zeros((3, 4)), 5.0, alpha))
        np.testing.assert_allclose(omega, 1.0)
    omega, _ = router_weights(xn, Router(Rng(1).normal((3, 4), 4.0), 5.0, 0.0))
    assert np.all(omega == 1.0)
    # logits [ln 3, 0] before the temperature: xn W_r / tau = [ln 3, 0]
    omega, _ = router_weights(np.array([[1.0]]), Router(np.array([[5 * math.log(3), 0.0]]), 5.0, 1.0))
    np.testing.assert_allclose(omega, [[1.5, 0.5]], atol=1e-12)
    with pytest.raises(ConfigError):
        Router(np.zeros((3, 2)), tau=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(1, 8))
def test_router_row_sums(seed, alpha, K):
    xn = Rng(seed).normal((50, 4), 3.0)
    omega, _ = router_weights(xn, Router(Rng(seed, "w").normal((4, K), 2.0), 5.0, alpha))
    np.testing.assert_allclose(omega.sum(axis=1), K, atol=1e-9)
    assert np.all(omega >= 0)


def test_fading_schedule():
    assert fading_alpha(50, 50, 100) == 1.0
    assert fading_alpha(10, 50, 100) == 1.0
    assert fading_alpha(75, 50, 100) == 0.5
    assert fading_alpha(100, 50, 100) == 0.0
    assert fading_alpha(130, 50, 100) == 0.0
    with pytest.raises(ConfigError):
        fading_alpha(0, 5, 5)


def test_effective_expert():
    _, layer = random_layer(D=3, H=6, K=3, rank=2, zero=True)
    up, down = effective_expert(0, layer.experts, layer.lora)
    assert up.tobytes() == layer.experts[0].E_up.tobytes()
    assert down.tobytes() == layer.experts[0].E_down.tobytes()
    # full-rank factors fitted to a target delta
    D, hk = layer.experts[1].E_up.shape
    M = Rng(2).normal((D, hk))
    Q, R = np.linalg.qr(M)
    layer.lora.A_up[1][...] = Q
    layer.lora.B_up[1][...] = R
    up, _ = effective_expert(1, layer.experts, layer.lora)
    np.testing.assert_allclose(up, layer.experts[1].E_up + M, atol=1e-12)


def test_fresh_layer_equals_dense():
    ffn, layer = random_layer(D=4, H=8, K=4, rank=2, zero=True, alpha=1.0)
    x = Rng(3).normal((10, 4))
    xn = layer_norm(x, layer.ln_gamma, layer.ln_beta)
    np.testing.assert_allclose(mole_forward(x, layer), ffn_forward(xn, ffn), rtol=1e-12, atol=1e-12)


def test_backward_zero_upstream():
    _, layer = random_layer(D=4, H=8, K=2, rank=2)
    x = Rng(0).normal((3, 4))
    grads, dx = mole_backward(x, layer, np.zeros((3, 4)))
    assert set(grads) == set(layer.trainable())
    assert all(not g.any() for g in grads.values()) and not dx.any()


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_backward_finite_differences(alpha):
    _, layer = random_layer(D=4, H=8, K=4, rank=2, seed=1, alpha=alpha)
    x = Rng(5).normal((6, 4))
    up = Rng(6).normal((6, 4))
    grads, dx = mole_backward(x, layer, up)

    def f():
        return float(np.sum(mole_forward(x, layer) * up))

    params = dict(layer.trainable(), x=x)
    grads = dict(grads, x=dx)
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + 1e-5
            fp = f()
            arr[i] = old - 1e-5
            fm = f()
            arr[i] = old
            num[i] = (fp - fm) / 2e-5
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(grads[name]) + np.linalg.norm(num), 1e-30)
        if alpha == 0.0 and name == "router.W_r":
            assert not grads[name].any() and np.abs(num).max() < 1e-8
        else:
            assert err < 1e-6, name


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(8, 2, 1), (8, 4, 2), (12, 3, 3), (16, 16, 1)]))
def test_reparameterize_matches_alpha_zero(seed, dims):
    H, K, rank = dims
    _, layer = random_layer(D=4, H=H, K=K, rank=rank, seed=seed, alpha=0.0)
    x = Rng(seed, "x").normal((100, 4))
    dense = reparameterize(layer)
    ref = ffn_forward(layer_norm(x, layer.ln_gamma, layer.ln_beta), dense)
    np.testing.assert_allclose(mole_forward(x, layer), ref, atol=1e-12)
    # order restoration does not change the function
    unordered = reparameterize(layer, restore_order=False)
    np.testing.assert_allclose(ffn_forward(layer_norm(x, layer.ln_gamma, layer.ln_beta), unordered), ref, atol=1e-12)


def test_reparameterize_zero_lora_bit_identical_and_idempotent():
    ffn, layer = random_layer(D=4, H=8, K=4, rank=2, zero=True)
    back = reparameterize(layer)
    for name in ("W_up", "b_up", "W_down", "b_down"):
        assert getattr(back, name).tobytes() == getattr(ffn, name).tobytes()
    _, trained = random_layer(D=4, H=8, K=4, rank=2, seed=3)
    first = reparameterize(trained)
    rebuilt = build_mole(first, trained.ln_gamma, trained.ln_beta, trained.partition, 2, Rng(0))
    second = reparameterize(rebuilt)
    for name in ("W_up", "b_up", "W_down", "b_down"):
        assert getattr(second, name).tobytes() == getattr(first, name).tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_names_layer():
    _, layer = random_layer(D=4, H=8, K=2, rank=1)
    layer.experts[0].E_up[0, 0] = np.inf
    with pytest.raises(NumericError, match="layer 3"):
        mole_forward(np.ones((1, 4)) * np.arange(4), layer, layer_index=3)


def test_lora_init():
    lora = LoraFactors.init(4, 8, 4, 2, Rng(0), np.float64)
    assert all(not b.any() for b in lora.B_up + lora.B_down)
    a = np.concatenate([m.ravel() for m in lora.A_up + lora.A_down])
    assert 0.015 < a.std() < 0.025
    with pytest.raises(ConfigError):
        LoraFactors.init(4, 8, 4, 5, Rng(0))


def test_tunable_count_enumerated():
    for seed in range(20):
        r = Rng(seed, "dims")
        K = int(r.integers(1, 5))
        D, hk = int(r.integers(2, 9)), int(r.integers(2, 6))
        rank = int(r.integers(1, min(D, hk) + 1))
        ffn = DenseFFN(np.zeros((D, K * hk)), np.zeros(K * hk), np.zeros((K * hk, D)), np.zeros(D))
        part = ExpertPartition.from_assignment(np.repeat(np.arange(K), hk), K)
        layer = build_mole(ffn, np.ones(D), np.zeros(D), part, rank, r)
        assert sum(a.size for a in layer.trainable().values()) == tunable_count(D, K * hk, K, rank)
    assert tunable_count(1, 1, 1, 1) == 5
