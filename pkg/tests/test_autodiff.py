"""Tape correctness: hand oracles, finite differences, KL/MC cross-checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacmarl import autodiff as ad


# ---------------------------------------------------------------------------
# Independent oracles (kept free of any pacmarl gradient code).
# ---------------------------------------------------------------------------

def finite_diff(value_fn, params, eps=1e-3):
    """Central-difference gradients of scalar value_fn(list_of_arrays)."""
    grads = []
    for k, p in enumerate(params):
        p = p.astype(np.float64)
        params = [q.astype(np.float64) for q in params]
        g = np.zeros_like(p)
        flat_p = params[k].reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = value_fn(params)
            flat_p[i] = orig - eps
            lo = value_fn(params)
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, n):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    n = np.asarray(n, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def mc_kl_diag_gaussian(mu_p, logvar_p, mu_q, logvar_q, n_samples, seed):
    """Monte-Carlo KL(P||Q) between diagonal Gaussians, float64."""
    rng = np.random.default_rng(seed)
    std_p = np.exp(0.5 * logvar_p)
    x = rng.standard_normal((n_samples, mu_p.size)) * std_p + mu_p

    def logpdf(x, mu, logvar):
        return -0.5 * np.sum((x - mu) ** 2 / np.exp(logvar) + logvar + np.log(2 * np.pi), axis=-1)

    return float(np.mean(logpdf(x, mu_p, logvar_p) - logpdf(x, mu_q, logvar_q)))


def analytic_kl(mu_p, logvar_p, mu_q, logvar_q):
    """Closed-form diagonal-Gaussian KL, float64, independent of the tape."""
    return 0.5 * np.sum(
        np.exp(logvar_p - logvar_q)
        + (mu_q - mu_p) ** 2 / np.exp(logvar_q)
        - 1.0
        + logvar_q
        - logvar_p,
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Hand-computed forward values.
# ---------------------------------------------------------------------------

class TestForwardHandValues:
    def test_matmul(self):
        t = ad.Tape()
        a = t.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = t.leaf(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_softmax_uniform(self):
        t = ad.Tape()
        x = t.leaf(np.zeros(3))
        np.testing.assert_allclose(ad.softmax(x).data, np.full(3, 1.0 / 3.0), rtol=1e-6)

    def test_relu(self):
        t = ad.Tape()
        x = t.leaf(np.array([-2.0, 0.0, 3.5]))
        np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.5])

    def test_log_softmax_matches_log_of_softmax(self):
        t = ad.Tape()
        x = t.leaf(np.array([0.3, -1.2, 2.0]))
        np.testing.assert_allclose(
            ad.log_softmax(x).data, np.log(ad.softmax(x).data), rtol=1e-6
        )

    def test_sigmoid_composition(self):
        t = ad.Tape(dtype=np.float64)
        x = t.leaf(np.linspace(-4, 4, 9))
        np.testing.assert_allclose(ad.sigmoid(x).data, 1 / (1 + np.exp(-x.data)), rtol=1e-12)

    def test_elu_composition(self):
        t = ad.Tape(dtype=np.float64)
        x = t.leaf(np.linspace(-3, 3, 13))
        expect = np.where(x.data > 0, x.data, np.exp(x.data) - 1)
        np.testing.assert_allclose(ad.elu(x).data, expect, rtol=1e-12, atol=1e-12)

    def test_gather_index(self):
        t = ad.Tape()
        x = t.leaf(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        out = ad.gather_index(x, np.array([2, 0]))
        np.testing.assert_array_equal(out.data, [3.0, 4.0])


class TestBackwardHandValues:
    def test_sum_of_squares(self):
        t = ad.Tape()
        x = t.leaf(np.array([1.0, 2.0, 3.0]))
        loss = ad.sum_(ad.mul(x, x))
        t.backward(loss)
        np.testing.assert_allclose(t.grad(x), [2.0, 4.0, 6.0], rtol=1e-6)

    def test_log_softmax_nll_gradient_is_p_minus_onehot(self):
        # d/dz of -log_softmax(z)[k] = softmax(z) - onehot(k)
        t = ad.Tape(dtype=np.float64)
        z = t.leaf(np.array([0.5, -0.5]))
        lp = ad.log_softmax(z)
        loss = ad.scalar_mul(ad.gather_index(lp, np.array(0)), -1.0)
        t.backward(loss)
        p = np.exp(lp.data)
        np.testing.assert_allclose(t.grad(z), p - np.array([1.0, 0.0]), rtol=1e-9)

    def test_unreached_leaf_gets_zero_gradient(self):
        t = ad.Tape()
        x = t.leaf(np.ones(4))
        y = t.leaf(np.ones(4))
        loss = ad.sum_(x)
        t.backward(loss)
        np.testing.assert_array_equal(t.grad(y), np.zeros(4))

    def test_stop_grad_blocks(self):
        t = ad.Tape()
        x = t.leaf(np.array([2.0]))
        loss = ad.sum_(ad.mul(ad.stop_grad(x), x))  # d/dx (c*x) = c, not 2x
        t.backward(loss)
        np.testing.assert_allclose(t.grad(x), [2.0])


# ---------------------------------------------------------------------------
# Finite-difference oracle over each primitive and a composed network.
# ---------------------------------------------------------------------------

RNG = np.random.default_rng(20260815)


def tape_grads(build_fn, params):
    t = ad.Tape(dtype=np.float64)
    leaves = [t.leaf(p) for p in params]
    loss = build_fn(t, leaves)
    t.backward(loss)
    return [t.grad(leaf) for leaf in leaves]


def check_against_fd(build_fn, params, tol=1e-5):
    analytic = tape_grads(build_fn, params)

    def value(ps):
        t = ad.Tape(dtype=np.float64, recording=False)
        leaves = [t.leaf(p) for p in ps]
        return float(build_fn(t, leaves).data)

    numeric = finite_diff(value, params)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol, f"max rel err {rel_err(a, n)}"


class TestFiniteDifferenceOracle:
    def test_matmul(self):
        a, b = RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))
        check_against_fd(lambda t, ls: ad.sum_(ad.mul(ad.matmul(ls[0], ls[1]), ls[2])),
                         [a, b, RNG.standard_normal((3, 2))])

    def test_add_sub_mul_broadcast(self):
        x = RNG.standard_normal((3, 4))
        y = RNG.standard_normal((1, 4))
        z = RNG.standard_normal((3, 1))
        check_against_fd(
            lambda t, ls: ad.sum_(ad.mul(ad.sub(ad.add(ls[0], ls[1]), ls[2]), ls[0])),
            [x, y, z],
        )

    def test_elementwise_chain(self):
        x = RNG.standard_normal((5,)) * 0.5 + 2.0  # keep log in-domain
        check_against_fd(
            lambda t, ls: ad.sum_(ad.log(ad.add(ad.exp(ad.tanh(ls[0])), t.constant(np.ones(5))))),
            [x],
        )

    def test_abs_away_from_zero(self):
        x = RNG.standard_normal((6,))
        x[np.abs(x) < 0.2] = 0.5
        check_against_fd(lambda t, ls: ad.sum_(ad.abs_(ls[0])), [x])

    def test_relu_away_from_zero(self):
        x = RNG.standard_normal((6,))
        x[np.abs(x) < 0.2] = -0.5
        check_against_fd(lambda t, ls: ad.sum_(ad.mul(ad.relu(ls[0]), ls[0])), [x])

    def test_reductions(self):
        x = RNG.standard_normal((4, 3))
        check_against_fd(
            lambda t, ls: ad.sum_(ad.mul(ad.mean(ls[0], axis=0), ad.sum_(ls[0], axis=0, keepdims=False).__mul__(1.0))),
            [x],
        )

    def test_concat_and_gather(self):
        a = RNG.standard_normal((2, 3))
        b = RNG.standard_normal((2, 2))
        idx = np.array([4, 0])

        def build(t, ls):
            joined = ad.concat([ls[0], ls[1]], axis=1)
            return ad.sum_(ad.mul(ad.gather_index(joined, idx), ad.gather_index(joined, idx)))

        check_against_fd(build, [a, b])

    def test_softmax_and_log_softmax(self):
        x = RNG.standard_normal((3, 4))
        w = RNG.standard_normal((3, 4))
        check_against_fd(
            lambda t, ls: ad.sum_(ad.mul(ad.softmax(ls[0], axis=-1), t.constant(w))), [x]
        )
        check_against_fd(
            lambda t, ls: ad.sum_(ad.mul(ad.log_softmax(ls[0], axis=-1), t.constant(w))), [x]
        )

    def test_broadcast_to_and_reshape(self):
        x = RNG.standard_normal((3, 1))
        check_against_fd(
            lambda t, ls: ad.sum_(ad.mul(ad.broadcast_to(ls[0], (3, 4)),
                                         ad.reshape(t.constant(np.arange(12.0)), (3, 4)))),
            [x],
        )

    def test_three_layer_network(self):
        # Random 3-layer net: tanh -> relu -> linear, scalar loss.
        w1 = RNG.standard_normal((5, 8)) * 0.5
        w2 = RNG.standard_normal((8, 6)) * 0.5
        w3 = RNG.standard_normal((6, 1)) * 0.5
        x = RNG.standard_normal((4, 5))

        def build(t, ls):
            h1 = ad.tanh(ad.matmul(t.constant(x), ls[0]))
            h2 = ad.relu(ad.matmul(h1, ls[1]))
            out = ad.matmul(h2, ls[2])
            return ad.mean(ad.mul(out, out))

        check_against_fd(build, [w1, w2, w3])

    def test_grad_check_linear_layer_under_1e4(self):
        w = RNG.standard_normal((4, 3)) * 0.3
        b = RNG.standard_normal((1, 3)) * 0.3
        x = RNG.standard_normal((5, 4))

        def fn(t, wl, bl):
            return ad.sum_(ad.mul(ad.add(ad.matmul(t.constant(x), wl), bl), t.constant(np.ones((5, 3)))))

        assert ad.grad_check(fn, [w, b]) < 1e-4


# ---------------------------------------------------------------------------
# KL and reparameterized sampling.
# ---------------------------------------------------------------------------

class TestKL:
    def test_matches_monte_carlo_within_one_percent(self):
        rng = np.random.default_rng(7)
        d = 6
        mu_p = rng.standard_normal(d)
        lv_p = rng.uniform(-0.5, 0.5, d)
        mu_q = mu_p + rng.uniform(-1.0, 1.0, d)
        lv_q = rng.uniform(-0.5, 0.5, d)
        kl_mc = mc_kl_diag_gaussian(mu_p, lv_p, mu_q, lv_q, n_samples=1_000_000, seed=11)
        t = ad.Tape(dtype=np.float64)
        kl = ad.kl_diag_gaussian(t.leaf(mu_p), t.leaf(lv_p), t.leaf(mu_q), t.leaf(lv_q))
        assert abs(float(kl.data) - kl_mc) <= 0.01 * abs(kl_mc)

    def test_matches_independent_closed_form(self):
        rng = np.random.default_rng(3)
        mu_p, lv_p = rng.standard_normal((2, 5)), rng.uniform(-1, 1, (2, 5))
        mu_q, lv_q = rng.standard_normal((2, 5)), rng.uniform(-1, 1, (2, 5))
        t = ad.Tape(dtype=np.float64)
        kl = ad.kl_diag_gaussian(t.leaf(mu_p), t.leaf(lv_p), t.leaf(mu_q), t.leaf(lv_q))
        np.testing.assert_allclose(kl.data, analytic_kl(mu_p, lv_p, mu_q, lv_q), rtol=1e-10)

    def test_self_kl_is_zero(self):
        t = ad.Tape(dtype=np.float64)
        mu = t.leaf(np.array([0.3, -1.0]))
        lv = t.leaf(np.array([0.1, -0.2]))
        kl = ad.kl_diag_gaussian(mu, lv, ad.stop_grad(mu), ad.stop_grad(lv))
        assert abs(float(kl.data)) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        t = ad.Tape(dtype=np.float64)
        kl = ad.kl_diag_gaussian(
            t.leaf(rng.uniform(-3, 3, 4)), t.leaf(rng.uniform(-2, 2, 4)),
            t.leaf(rng.uniform(-3, 3, 4)), t.leaf(rng.uniform(-2, 2, 4)),
        )
        assert float(kl.data) >= -1e-9

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        params = [rng.standard_normal(4), rng.uniform(-1, 1, 4),
                  rng.standard_normal(4), rng.uniform(-1, 1, 4)]
        check_against_fd(
            lambda t, ls: ad.kl_diag_gaussian(ls[0], ls[1], ls[2], ls[3]), params, tol=1e-6
        )


class TestReparamSample:
    def test_deterministic_given_seed(self):
        for _ in range(2):
            t = ad.Tape()
            mu = t.leaf(np.zeros((3, 2), dtype=np.float32))
            s1 = ad.gaussian_reparam_sample(mu, np.random.default_rng(42)).data
            s2 = ad.gaussian_reparam_sample(mu, np.random.default_rng(42)).data
            np.testing.assert_array_equal(s1, s2)

    def test_gradient_flows_only_to_mu(self):
        t = ad.Tape()
        mu = t.leaf(np.array([[1.0, 2.0]], dtype=np.float32))
        s = ad.gaussian_reparam_sample(mu, np.random.default_rng(0))
        t.backward(ad.sum_(s))
        np.testing.assert_array_equal(t.grad(mu), np.ones((1, 2), dtype=np.float32))

    def test_sample_mean_approaches_mu(self):
        t = ad.Tape()
        mu = t.leaf(np.full((200_000, 1), 1.5, dtype=np.float32))
        s = ad.gaussian_reparam_sample(mu, np.random.default_rng(9))
        assert abs(float(s.data.mean()) - 1.5) < 0.01


# ---------------------------------------------------------------------------
# Errors, determinism, optimizer.
# ---------------------------------------------------------------------------

class TestErrors:
    def test_matmul_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))

    def test_log_domain(self):
        t = ad.Tape()
        with pytest.raises(ad.DomainError):
            ad.log(t.leaf(np.array([1.0, -1.0])))

    def test_backward_requires_scalar(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3))
        with pytest.raises(ad.ShapeMismatch):
            t.backward(ad.mul(x, x))

    def test_cross_tape_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        with pytest.raises(ad.AutodiffError):
            ad.add(t1.leaf(np.ones(2)), t2.leaf(np.ones(2)))

    def test_gather_index_out_of_range(self):
        t = ad.Tape()
        with pytest.raises(ad.DomainError):
            ad.gather_index(t.leaf(np.ones((2, 3))), np.array([0, 3]))

    def test_concat_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeMismatch):
            ad.concat([t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 3)))], axis=1)


class TestDeterminism:
    def test_same_seed_same_bits(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            t = ad.Tape()
            x = t.leaf(rng.standard_normal((8, 8)).astype(np.float32))
            w = t.leaf(rng.standard_normal((8, 8)).astype(np.float32))
            y = ad.softmax(ad.matmul(ad.tanh(x), w), axis=-1)
            loss = ad.mean(ad.mul(y, y))
            t.backward(loss)
            return loss.data.copy(), t.grad(w).copy()

        l1, g1 = run(123)
        l2, g2 = run(123)
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_float32_by_default(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3, dtype=np.float64))
        assert x.data.dtype == np.float32
        assert ad.exp(x).data.dtype == np.float32


class TestAdam:
    def test_single_step_matches_hand_formula(self):
        p = ad.Parameter("w", np.array([1.0, -2.0], dtype=np.float32))
        opt = ad.Adam([p], lr=0.01)
        g = np.array([0.5, -1.0], dtype=np.float32)
        opt.step({"w": g})
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expect = np.array([1.0, -2.0], dtype=np.float32) - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-5)
        np.testing.assert_allclose(p.data, expect, rtol=1e-6)

    def test_state_roundtrip(self):
        p = ad.Parameter("w", np.ones(3, dtype=np.float32))
        opt = ad.Adam([p], lr=0.1)
        for i in range(3):
            opt.step({"w": np.full(3, 0.1 * (i + 1), dtype=np.float32)})
        state = {k: v.copy() for k, v in opt.state_tensors("opt").items()}
        p2 = ad.Parameter("w", np.ones(3, dtype=np.float32))
        opt2 = ad.Adam([p2], lr=0.1)
        opt2.load_state_tensors("opt", state)
        assert opt2.t == opt.t
        np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])
        np.testing.assert_array_equal(opt2.v["w"], opt.v["w"])

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0], dtype=np.float32), "b": np.array([4.0], dtype=np.float32)}
        clipped, norm = ad.clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert ad.global_norm(clipped.values()) == pytest.approx(1.0, rel=1e-5)
        same, norm2 = ad.clip_global_norm(clipped, 10.0)
        assert norm2 == pytest.approx(1.0, rel=1e-5)
        np.testing.assert_array_equal(same["a"], clipped["a"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    t = ad.Tape()
    x = t.leaf(rng.uniform(-30, 30, (3, 5)).astype(np.float32))
    s = ad.softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(3), atol=1e-5)
    assert np.all(s >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_cross_entropy_at_least_entropy(seed):
    # E_p[-log q] >= E_p[-log p] for any distributions p, q.
    rng = np.random.default_rng(seed)
    t = ad.Tape(dtype=np.float64)
    p = ad.softmax(t.leaf(rng.uniform(-3, 3, 6)), axis=-1).data
    logq = ad.log_softmax(t.leaf(rng.uniform(-3, 3, 6)), axis=-1).data
    ce = -np.sum(p * logq)
    ent = -np.sum(p * np.log(p))
    assert ce >= ent - 1e-9
