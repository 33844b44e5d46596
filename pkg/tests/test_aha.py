import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cliffmag.aha import (
    AHADims,
    AHAParams,
    apply_gate,
    backward,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    consensus_profile,
    energy_gate,
    forward,
    fuse,
    grade_energy,
    init_params,
    interaction_layout,
    resonance_scores,
)
from cliffmag.algebra import build_blade_table
from cliffmag.errors import ArgumentError, ContractViolation, FormatError

LAYOUT = interaction_layout(2, (2, 2))


def random_params(rng, dims: AHADims, scale=0.5) -> AHAParams:
    p = init_params(int(rng.integers(1 << 30)), dims)
    return AHAParams(*(v + scale * rng.standard_normal(v.shape) for _, v in p.items()))


def random_states(rng, N=5, L=2, d=4, n=4):
    return rng.standard_normal((N, L + 1, d, n))


# ---------------------------------------------------------------- naive oracle


def naive_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def naive_forward(H, p, layout):
    """Per-node loops with a plain-exp softmax; independent of the vectorised code."""
    N, L1, d, n = H.shape
    out = []
    for u in range(N):
        Ht = []
        for l in range(L1):
            state = H[u, l].copy()
            E = np.array([np.sum(state[m > 0] ** 2) for m in layout.masks])
            En = E / (E.sum() + 1e-12)
            alpha = naive_sigmoid(p.W_G @ En + p.b_G)
            for c, m in enumerate(layout.masks):
                for i in range(d):
                    for k in range(n):
                        if m[i, k]:
                            state[i, k] *= alpha[c]
            Ht.append(state)
        S = np.zeros((d, n))
        for l in range(L1):
            for i in range(d):
                S[i, :] += p.W_tau[l, i] * Ht[l][i, :] + p.b_tau[l, i]
        ctx = S / np.sqrt(np.sum(S**2))
        scores = np.array([p.a_S @ np.tanh(p.W_S @ np.concatenate([ctx.ravel(), Ht[l].ravel()])) for l in range(L1)])
        beta = np.exp(scores) / np.exp(scores).sum()
        agg = sum(beta[l] * Ht[l] for l in range(L1))
        out.append(p.W_out @ agg.ravel() + p.b_out)
    return np.array(out)


# ---------------------------------------------------------------- layout / energy


def test_layout_masks_partition_even_grades():
    t = build_blade_table(2)
    m = LAYOUT.masks
    assert m.shape == (4, 4, 4)
    assert LAYOUT.names == ("g0_b1", "g0_b2", "g2_b1", "g2_b2")
    assert np.all(m.sum(axis=0) <= 1)
    covered = m.sum(axis=0) > 0
    assert np.all(covered[:, t.grade_mask(0)]) and np.all(covered[:, t.grade_mask(2)])
    assert not np.any(covered[:, t.grade_mask(1)])


def test_k3_layout_has_nine_channels():
    lay = interaction_layout(3, (1, 2, 3))
    assert lay.n_gates == 9 and lay.masks.shape == (9, 6, 8)
    assert np.all(lay.masks.sum(axis=0) <= 1)
    with pytest.raises(ArgumentError):
        interaction_layout(3, (1, 2))


def test_pure_vector_state_has_zero_energy():
    H = np.zeros((4, 4))
    H[:, 1:3] = np.arange(8.0).reshape(4, 2)
    assert np.array_equal(grade_energy(H, LAYOUT), np.zeros(4))


def test_block_one_scalar_energy():
    H = np.zeros((4, 4))
    H[0, 0] = 3.0
    assert grade_energy(H, LAYOUT).tolist() == [9.0, 0.0, 0.0, 0.0]


def test_energy_sum_equals_even_grade_mass():
    t = build_blade_table(2)
    H = np.random.default_rng(0).standard_normal((4, 4))
    even = np.sum(H[:, t.grade_mask(0)] ** 2) + np.sum(H[:, t.grade_mask(2)] ** 2)
    assert np.isclose(grade_energy(H, LAYOUT).sum(), even)


@given(st.integers(0, 3), st.floats(1.01, 10.0), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_scaling_a_channel_increases_its_energy(c, factor, seed):
    H = np.random.default_rng(seed).standard_normal((4, 4))
    scaled = np.where(LAYOUT.masks[c] > 0, H * factor, H)
    assert grade_energy(scaled, LAYOUT)[c] > grade_energy(H, LAYOUT)[c]


# ---------------------------------------------------------------- gate


def test_zero_gate_halves_even_grades():
    H = np.random.default_rng(1).standard_normal((4, 4))
    alpha = energy_gate(grade_energy(H, LAYOUT), np.zeros((4, 4)), np.zeros(4))
    assert np.allclose(alpha, 0.5)
    out = apply_gate(H, alpha, LAYOUT)
    assert np.allclose(out[:, [0, 3]], H[:, [0, 3]] / 2)
    assert np.array_equal(out[:, 1:3], H[:, 1:3])


def test_zero_energy_gate_is_logistic_of_bias():
    b = np.array([-1.0, 0.0, 2.0, 0.5])
    alpha = energy_gate(np.zeros(4), np.ones((4, 4)), b)
    assert np.allclose(alpha, naive_sigmoid(b))


def test_apply_gate_matches_loop():
    rng = np.random.default_rng(2)
    H = rng.standard_normal((4, 4))
    alpha = rng.uniform(size=4)
    want = H.copy()
    for c in range(4):
        for i in range(4):
            for k in range(4):
                if LAYOUT.masks[c, i, k]:
                    want[i, k] = H[i, k] * alpha[c]
    assert np.allclose(apply_gate(H, alpha, LAYOUT), want, atol=0)


def test_gate_stays_in_open_interval():
    rng = np.random.default_rng(3)
    alpha = energy_gate(rng.uniform(size=(100, 4)), rng.standard_normal((4, 4)) * 5, rng.standard_normal(4))
    assert np.all((alpha > 0) & (alpha < 1))


# ---------------------------------------------------------------- consensus / scores / fuse


def test_consensus_single_layer():
    Ht = np.random.default_rng(4).standard_normal((3, 1, 4, 4))
    ctx = consensus_profile(Ht, np.ones((1, 4)), np.zeros((1, 4)))
    want = Ht[:, 0] / np.linalg.norm(Ht[:, 0].reshape(3, -1), axis=1)[:, None, None]
    assert np.allclose(ctx, want)


def test_consensus_identical_layers_same_direction():
    layer = np.random.default_rng(5).standard_normal((2, 1, 4, 4))
    Ht = np.repeat(layer, 3, axis=1)
    ctx = consensus_profile(Ht, np.ones((3, 4)), np.zeros((3, 4)))
    single = consensus_profile(layer, np.ones((1, 4)), np.zeros((1, 4)))
    assert np.allclose(ctx, single)


def test_consensus_unit_norm_and_zero_guard():
    rng = np.random.default_rng(6)
    Ht = rng.standard_normal((10, 3, 4, 4))
    ctx = consensus_profile(Ht, rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    assert np.allclose(np.linalg.norm(ctx.reshape(10, -1), axis=1), 1.0, atol=1e-12)
    zero = consensus_profile(np.zeros((1, 2, 4, 4)), np.ones((2, 4)), np.zeros((2, 4)))
    assert np.array_equal(zero, np.zeros((1, 4, 4)))


def test_zero_attention_vector_gives_uniform_beta():
    rng = np.random.default_rng(7)
    Ht = rng.standard_normal((3, 4, 4, 4))
    beta = resonance_scores(Ht[:, 0], Ht, rng.standard_normal((8, 32)), np.zeros(8))
    assert np.allclose(beta, 0.25)


def test_saturated_softmax():
    # one hidden unit, scores +10 / -10 from tanh saturation
    Ht = np.zeros((1, 2, 1, 4))
    Ht[0, 0, 0, 0], Ht[0, 1, 0, 0] = 100.0, -100.0
    W_S = np.zeros((1, 8))
    W_S[0, 4] = 1.0
    beta = resonance_scores(np.zeros((1, 1, 4)), Ht, W_S, np.array([10.0]))
    e = np.exp(-20.0)
    assert np.allclose(beta[0], [1 / (1 + e), e / (1 + e)], atol=1e-8)
    assert abs(beta[0, 0] - 1.0) < 1e-8


def test_scores_match_oracle():
    rng = np.random.default_rng(8)
    N, L1, D = 4, 3, 16
    Ht = rng.standard_normal((N, L1, 4, 4))
    ctx = rng.standard_normal((N, 4, 4))
    W_S, a_S = rng.standard_normal((5, 2 * D)), rng.standard_normal(5)
    beta = resonance_scores(ctx, Ht, W_S, a_S)
    for u in range(N):
        s = [a_S @ np.tanh(W_S @ np.concatenate([ctx[u].ravel(), Ht[u, l].ravel()])) for l in range(L1)]
        want = np.exp(s) / np.sum(np.exp(s))
        assert np.allclose(beta[u], want, atol=1e-13)
    assert np.allclose(beta.sum(axis=1), 1.0, atol=1e-12)


def test_fuse_cases():
    rng = np.random.default_rng(9)
    Ht = rng.standard_normal((3, 3, 4, 4))
    W, b = rng.standard_normal((5, 16)), rng.standard_normal(5)
    onehot = np.zeros((3, 3))
    onehot[:, 1] = 1.0
    assert np.allclose(fuse(Ht, onehot, W, b), Ht[:, 1].reshape(3, -1) @ W.T + b)
    assert np.array_equal(fuse(Ht, onehot, np.zeros((5, 16)), b), np.tile(b, (3, 1)))
    beta = rng.dirichlet(np.ones(3), size=3)
    for u in range(3):
        agg = sum(beta[u, l] * Ht[u, l] for l in range(3)).ravel()
        want = [sum(W[i, j] * agg[j] for j in range(16)) + b[i] for i in range(5)]
        assert np.allclose(fuse(Ht, beta, W, b)[u], want)


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_end_to_end_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = AHADims(K=2, d=4, L=2, d_f=3, h=6)
    p = random_params(rng, dims)
    H = random_states(rng)
    Z, tape = forward(H, p, LAYOUT)
    assert np.allclose(Z, naive_forward(H, p, LAYOUT), atol=1e-12)
    assert np.allclose(tape.beta.sum(axis=1), 1.0, atol=1e-12) and np.all(tape.beta >= 0)
    assert tape.alpha.shape == (5, 3, 4) and tape.Ht.shape == H.shape


def test_forward_rejects_shape_mismatch():
    p = init_params(0, AHADims(K=2, d=4, L=1, d_f=3, h=6))
    with pytest.raises(ArgumentError):
        forward(random_states(np.random.default_rng(0), L=2), p, LAYOUT)
    with pytest.raises(ArgumentError):
        forward(random_states(np.random.default_rng(0), L=1), p, LAYOUT, ablation={"bogus"})


def test_no_energy_ablation_equals_ungated_model():
    rng = np.random.default_rng(10)
    dims = AHADims(K=2, d=4, L=2, d_f=3, h=6)
    p = random_params(rng, dims)
    H = random_states(rng)
    Z, _ = forward(H, p, LAYOUT, ablation={"energy"})
    ctx = consensus_profile(H, p.W_tau, p.b_tau)
    beta = resonance_scores(ctx, H, p.W_S, p.a_S)
    assert np.array_equal(Z, np.einsum("nl,nldk->ndk", beta, H).reshape(5, -1) @ p.W_out.T + p.b_out)


def test_no_scale_ablation_equals_mean_fusion():
    rng = np.random.default_rng(11)
    dims = AHADims(K=2, d=4, L=3, d_f=3, h=6)
    p = random_params(rng, dims)
    H = random_states(rng, L=3)
    Z, tape = forward(H, p, LAYOUT, ablation={"scale"})
    alpha = energy_gate(grade_energy(H, LAYOUT), p.W_G, p.b_G)
    Ht = apply_gate(H, alpha, LAYOUT)
    assert np.array_equal(Z, Ht.mean(axis=1).reshape(5, -1) @ p.W_out.T + p.b_out)
    assert np.allclose(tape.beta, 0.25)


def test_initial_model_is_near_uniform():
    dims = AHADims(K=2, d=4, L=2, d_f=3, h=6)
    _, tape = forward(random_states(np.random.default_rng(12)), init_params(3, dims), LAYOUT)
    assert np.allclose(tape.beta, 1 / 3)
    assert np.all(np.abs(tape.alpha - 0.5) < 0.25)


# ---------------------------------------------------------------- backward


def objective(H, p, C, ablation=frozenset(), layout=LAYOUT):
    Z, _ = forward(H, p, layout, ablation)
    return float(np.sum(C * Z))


def numeric_grad(H, p, C, name, ablation, layout, h=1e-5):
    base = getattr(p, name)
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        old = base[idx]
        base[idx] = old + h
        fp = objective(H, p, C, ablation, layout)
        base[idx] = old - h
        fm = objective(H, p, C, ablation, layout)
        base[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize(
    "ablation", [frozenset(), frozenset({"energy"}), frozenset({"scale"}), frozenset({"consensus"})]
)
def test_gradients_match_finite_differences(ablation):
    rng = np.random.default_rng(13)
    dims = AHADims(K=2, d=2, L=2, d_f=3, h=4)
    lay = interaction_layout(2, (1, 1))
    p = random_params(rng, dims)
    H = rng.standard_normal((4, 3, 2, 4))
    C = rng.standard_normal((4, 3))
    _, tape = forward(H, p, lay, ablation)
    g = backward(tape, p, lay, C)
    for name in AHAParams.names():
        num = numeric_grad(H, p, C, name, ablation, lay)
        ana = getattr(g, name)
        scale = max(np.abs(num).max(), 1e-8)
        assert np.abs(ana - num).max() / scale < 1e-4, name


def test_state_gradient_matches_finite_differences():
    rng = np.random.default_rng(14)
    dims = AHADims(K=2, d=4, L=1, d_f=2, h=3)
    p = random_params(rng, dims)
    H = random_states(rng, N=2, L=1)
    C = rng.standard_normal((2, 2))
    _, tape = forward(H, p, LAYOUT)
    _, dH = backward(tape, p, LAYOUT, C, state_grad=True)
    num = np.zeros_like(H)
    for idx in np.ndindex(H.shape):
        Hp, Hm = H.copy(), H.copy()
        Hp[idx] += 1e-5
        Hm[idx] -= 1e-5
        num[idx] = (objective(Hp, p, C) - objective(Hm, p, C)) / 2e-5
    assert np.abs(dH - num).max() / np.abs(num).max() < 1e-4


def test_single_w_out_entry_absolute():
    rng = np.random.default_rng(15)
    dims = AHADims(K=2, d=4, L=1, d_f=2, h=3)
    p = random_params(rng, dims)
    H = random_states(rng, N=1, L=1)
    C = np.array([[1.0, -2.0]])
    _, tape = forward(H, p, LAYOUT)
    g = backward(tape, p, LAYOUT, C)
    h = 1e-5
    p.W_out[1, 3] += h
    fp = objective(H, p, C)
    p.W_out[1, 3] -= 2 * h
    fm = objective(H, p, C)
    assert abs(g.W_out[1, 3] - (fp - fm) / (2 * h)) < 1e-6


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(16)
    p = random_params(rng, AHADims(K=2, d=4, L=2, d_f=3, h=6))
    _, tape = forward(random_states(rng), p, LAYOUT)
    g = backward(tape, p, LAYOUT, np.zeros((5, 3)))
    assert all(not np.any(v) for _, v in g.items())


def test_gate_bias_step_reduces_loss():
    rng = np.random.default_rng(17)
    p = random_params(rng, AHADims(K=2, d=4, L=1, d_f=2, h=3))
    H = random_states(rng, N=1, L=1)
    C = rng.standard_normal((1, 2))
    _, tape = forward(H, p, LAYOUT)
    g = backward(tape, p, LAYOUT, C)
    before = objective(H, p, C)
    p.b_G -= 1e-3 * g.b_G
    assert objective(H, p, C) < before


def test_stale_tape_raises():
    rng = np.random.default_rng(18)
    p = random_params(rng, AHADims(K=2, d=4, L=1, d_f=2, h=3))
    _, tape = forward(random_states(rng, L=1), p, LAYOUT)
    p.W_out[0, 0] += 1.0
    with pytest.raises(ContractViolation):
        backward(tape, p, LAYOUT, np.ones((5, 2)))


# ---------------------------------------------------------------- init / checkpoint


def test_init_is_deterministic_and_bounded():
    dims = AHADims(K=2, d=8, L=3, d_f=16, h=12)
    a, b = init_params(5, dims), init_params(5, dims)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.items(), b.items()))
    assert np.abs(a.W_out).max() <= np.sqrt(6 / (32 + 16))
    assert np.abs(a.W_S).max() <= np.sqrt(6 / (64 + 12))
    assert np.all(a.W_tau == 1) and not np.any(a.b_tau) and not np.any(a.a_S)
    assert a.dims() == dims


def test_checkpoint_round_trip():
    p = init_params(1, AHADims(K=2, d=4, L=2, d_f=3, h=6))
    head = {"head.W": np.arange(6.0).reshape(2, 3), "head.b": np.ones(2)}
    back, extra, meta = checkpoint_from_bytes(checkpoint_to_bytes(p, head, {"task": "classification"}))
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(p.items(), back.items()))
    assert np.array_equal(extra["head.W"], head["head.W"]) and meta == {"task": "classification"}


def test_checkpoint_errors():
    raw = checkpoint_to_bytes(init_params(1, AHADims(K=2, d=4, L=2, d_f=3, h=6)))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"NOPE" + raw[4:])
    for cut in (6, 40, len(raw) - 3):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(raw[:cut])
