"""End-to-end acceptance checks: exactly one test per release criterion.

The run-backed criteria (1, 2, 7, 8, 9, and the determinism half of 10)
consume finished training runs from ``runs/acceptance/<key>/``.  Populate
that cache first with ``python3 scripts/run_acceptance.py`` (resumable;
each grid-world run takes roughly half an hour on one core).  A missing
run is trained on demand so the suite stays self-contained, but expect
multi-hour wall time that way.

The remaining criteria (3, 4, 5, 6) are self-contained and finish in
seconds; they reuse the oracle helpers of the per-module test files.
"""

from __future__ import annotations

import importlib.util
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from pacmarl import autodiff as ad
from pacmarl.config import build_config, parse_config_text
from pacmarl.gradcheck import run_gradcheck
from pacmarl.nets import MonotonicMixer, NetsConfig, grad_ctx
from pacmarl.pac import counterfactual_predict, lambda_targets, loss_lp
from pacmarl.trainer import (
    epsilon_at,
    evaluate,
    load_checkpoint,
    read_metrics,
    resolve_eval_action_source,
    rollout_episode,
    rollout_rng,
)
from pacmarl import trainer

from test_autodiff import mc_kl_diag_gaussian
from test_pac import brute_counterfactual, dyadic, dyadic_central, log_softmax_np, ref_lambda
from test_trainer import batches_equal, fresh_learner, strip_wall_clock, tiny_matrix

ROOT = Path(__file__).resolve().parents[1]
RUNS_DIR = ROOT / "runs" / "acceptance"
SEEDS = (1, 2, 3)

MATRIX_BUDGET_S = 15 * 60
HUNT_BUDGET_S = 4 * 3600


# ---------------------------------------------------------------------------
# Run cache
# ---------------------------------------------------------------------------

_runner_mod = None


def runner():
    """The experiment-grid script, loaded as a module (it is not a package)."""
    global _runner_mod
    if _runner_mod is None:
        path = ROOT / "scripts" / "run_acceptance.py"
        spec = importlib.util.spec_from_file_location("_acceptance_runner", path)
        _runner_mod = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(_runner_mod)
    return _runner_mod


def ensure_run(key: str) -> Path:
    """Directory of a finished acceptance run, training it on demand.

    If the grid script is mid-run on this key (its metrics file is being
    appended to), wait for the completion marker instead of starting a
    second writer on the same directory.
    """
    out = RUNS_DIR / key
    marker = out / "done.json"
    metrics = out / "metrics.csv"
    deadline = time.time() + 6 * 3600
    while not marker.exists():
        active = metrics.exists() and time.time() - metrics.stat().st_mtime < 300
        if not active:
            break
        if time.time() > deadline:
            raise TimeoutError(f"gave up waiting for in-progress run {key}")
        time.sleep(15)
    if not marker.exists():
        jobs = dict(runner().manifest())
        RUNS_DIR.mkdir(parents=True, exist_ok=True)
        runner().run_one(key, jobs[key])
    return out


def done(key: str) -> dict:
    return json.loads((ensure_run(key) / "done.json").read_text())


def report(key: str) -> dict:
    """Machine-readable block of a matrix-game report."""
    lines = (ensure_run(key) / "report.txt").read_text().splitlines()
    return parse_config_text("\n".join(l for l in lines if not l.startswith("#")))


def final_return(key: str) -> float:
    return done(key)["evaluation"]["return_mean"]


def optimum_cell(payoff: np.ndarray) -> tuple:
    return np.unravel_index(int(np.argmax(payoff)), payoff.shape)


# ---------------------------------------------------------------------------
# Criterion 1: matrix-game optimum recovery
# ---------------------------------------------------------------------------

def test_criterion_01_matrix_game_pac_recovers_both_optima():
    # Greedy joint action reaches payoff 4 in BOTH states for every seed,
    # mean evaluation return >= 3.9, and the unrestricted critic puts the
    # two optimal cells within +/-0.5 of 4.0.  <= 15 min per seed.
    returns = []
    for seed in SEEDS:
        key = f"matrix_pac_s{seed}"
        info, rep = done(key), report(key)
        assert info["seconds"] <= MATRIX_BUDGET_S, key
        returns.append(info["evaluation"]["return_mean"])
        for s in (1, 2):
            assert rep[f"s{s}.greedy_payoff"] == 4.0, (key, s)
            payoff = np.array(rep[f"s{s}.payoff"])
            qstar = np.array(rep[f"s{s}.qstar"])
            assert abs(qstar[optimum_cell(payoff)] - 4.0) <= 0.5, (key, s)
    assert float(np.mean(returns)) >= 3.9, returns


# ---------------------------------------------------------------------------
# Criterion 2: monotonic-baseline failure patterns
# ---------------------------------------------------------------------------

def test_criterion_02_matrix_game_baseline_failure_patterns():
    # Plain monotonic mixing solves at most one state per seed (mean return
    # <= 2.1); the optimistically weighted variant recovers the s1 optimum
    # in its unrestricted critic yet its greedy action misses the s2
    # payoff-4 cell in >= 2 of 3 seeds.
    qmix_returns = []
    for seed in SEEDS:
        key = f"matrix_qmix_s{seed}"
        info, rep = done(key), report(key)
        assert info["seconds"] <= MATRIX_BUDGET_S, key
        # Expected greedy return under the uniform initial-state draw: the
        # state-average of the greedy payoffs. The 0.1 slack over the
        # one-state-solved value (2.0) rules out a sampled estimate, whose
        # initial-state draw alone varies by several times that.
        qmix_returns.append(np.mean([rep[f"s{s}.greedy_payoff"] for s in (1, 2)]))
        solved = sum(rep[f"s{s}.greedy_payoff"] == 4.0 for s in (1, 2))
        assert solved <= 1, (key, solved)
    assert float(np.mean(qmix_returns)) <= 2.1, qmix_returns

    s2_misses = 0
    locks = {}
    for seed in SEEDS:
        key = f"matrix_ow_qmix_s{seed}"
        info, rep = done(key), report(key)
        assert info["seconds"] <= MATRIX_BUDGET_S, key
        payoff = np.array(rep["s1.payoff"])
        qstar = np.array(rep["s1.qstar"])
        assert abs(qstar[optimum_cell(payoff)] - 4.0) <= 0.5, key
        locks[seed] = {s: (rep[f"s{s}.greedy"], rep[f"s{s}.greedy_payoff"])
                       for s in (1, 2)}
        if rep["s2.greedy_payoff"] != 4.0:
            s2_misses += 1
    # Which state a monotonic learner locks onto is symmetric seed luck
    # (the game is invariant under swapping the states along with agent 1's
    # first two actions); this asserts the documented direction as stated.
    assert s2_misses >= 2, f"s2 missed in {s2_misses}/3 seeds; greedy per seed: {locks}"


# ---------------------------------------------------------------------------
# Criterion 3: counterfactual oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_03_counterfactual_matches_exhaustive_sweep_200_instances():
    # 200 random instances with 2-3 agents and 2-5 actions: the vectorized
    # per-agent sweep equals the brute-force oracle exactly (dyadic inputs
    # keep every critic evaluation representable in float32).
    rng = np.random.default_rng(42)
    for case in range(200):
        n = int(rng.integers(2, 4))
        A = int(rng.integers(2, 6))
        S = int(rng.integers(1, 5))
        central = dyadic_central(rng, n, S)
        state = dyadic(rng, (1, 1, S), 1.0)
        q = dyadic(rng, (1, 1, n, A), 1.0)
        taken = rng.integers(0, A, (1, 1, n))
        avail = (rng.uniform(size=(1, 1, n, A)) > 0.3).astype(np.float32)
        avail[..., 0] = np.maximum(avail[..., 0], 1.0 - avail.max(axis=-1))
        pred = counterfactual_predict(central, state, q, taken, avail)
        b_ustar, b_rows = brute_counterfactual(central, state, q, taken, avail)
        np.testing.assert_array_equal(pred.qstar_row, b_rows)
        np.testing.assert_array_equal(pred.ustar, b_ustar)


# ---------------------------------------------------------------------------
# Criterion 4: gradient suite, KL accuracy, mixer monotonicity
# ---------------------------------------------------------------------------

def test_criterion_04_gradients_kl_and_monotonicity():
    # Finite-difference check over every architecture and the composed
    # losses, all below 1e-3 relative error.
    results = run_gradcheck()
    names = [name for name, _ in results]
    assert len(names) == 8 and len(set(names)) == 8
    for name, err in results:
        assert err < 1e-3, (name, err)

    # Closed-form Gaussian KL within 1% of a 10^6-sample Monte Carlo.
    rng = np.random.default_rng(7)
    d = 6
    mu_p = rng.standard_normal(d)
    lv_p = rng.uniform(-0.5, 0.5, d)
    mu_q = mu_p + rng.uniform(-1.0, 1.0, d)
    lv_q = rng.uniform(-0.5, 0.5, d)
    kl_mc = mc_kl_diag_gaussian(mu_p, lv_p, mu_q, lv_q, n_samples=1_000_000, seed=11)
    t = ad.Tape(dtype=np.float64)
    kl = float(ad.kl_diag_gaussian(t.leaf(mu_p), t.leaf(lv_p),
                                   t.leaf(mu_q), t.leaf(lv_q)).data)
    assert abs(kl - kl_mc) <= 0.01 * abs(kl_mc)

    # Mixer output is non-decreasing in every utility: gradients >= 0 on
    # 1000 random draws with zero violations.
    mixer = MonotonicMixer(np.random.default_rng(5), "mixer", 4, 6, NetsConfig())
    r = np.random.default_rng(6)
    ctx = grad_ctx()
    q = ctx.tape.leaf(r.standard_normal((1000, 4)).astype(np.float32))
    out = mixer.forward(ctx, ctx.const(r.standard_normal((1000, 6)).astype(np.float32)), q)
    ctx.tape.backward(ad.sum_(out))
    grads = ctx.tape.grad(q)
    assert grads.shape == (1000, 4)
    assert int((grads < 0).sum()) == 0


# ---------------------------------------------------------------------------
# Criterion 5: single-layer-mixer policy-loss identity
# ---------------------------------------------------------------------------

def test_criterion_05_single_layer_mixer_policy_loss_identity():
    # With a one-layer activation-free mixer the policy loss reduces to
    # -E_pi[Q_tot] + sum_i k_i(s) * alpha * E_pi[log pi_i], within 1e-4 on
    # 100 random fixtures.
    rng = np.random.default_rng(30)
    for draw in range(100):
        T, B, n, A, S = 1, 4, 3, 4, 5
        mixer = MonotonicMixer(rng, "mixer", n, S, NetsConfig(mixer_layers=1))
        state = rng.standard_normal((T + 1, B, S)).astype(np.float32)
        q = rng.standard_normal((T, B, n, A)).astype(np.float32)
        logp = log_softmax_np(rng.standard_normal((T, B, n, A)))
        alpha = float(rng.uniform(0.1, 2.0))
        mask = np.ones((T, B), np.float32)
        ctx = grad_ctx()
        out = float(loss_lp(ctx, mixer, state, ctx.const(logp), ctx.const(q),
                            alpha, mask).data)
        pi = np.exp(logp)
        k = mixer.agent_coefficients(state[0])  # (B, n)
        bias = state[0] @ mixer.hyper_b.W.data + mixer.hyper_b.b.data  # (B, 1)
        e_q = (pi * q).sum(axis=-1)[0]
        e_logp = (pi * logp).sum(axis=-1)[0]
        expected = (-((k * e_q).sum(-1) + bias[:, 0]).mean()
                    + (k * alpha * e_logp).sum(-1).mean())
        assert out == pytest.approx(float(expected), abs=1e-4), draw


# ---------------------------------------------------------------------------
# Criterion 6: TD(lambda) limit checks
# ---------------------------------------------------------------------------

def test_criterion_06_lambda_target_limits_and_hand_recursion():
    rng = np.random.default_rng(1)
    T, B = 10, 5
    reward = rng.standard_normal((T, B)).astype(np.float32)
    v_next = rng.standard_normal((T, B)).astype(np.float32)
    terminated = np.zeros((T, B), np.float32)
    terminated[-1] = 1.0
    filled = np.ones((T, B), np.float32)

    # lambda = 0 is exactly the one-step bootstrapped target.
    y0 = lambda_targets(reward, terminated, filled, v_next, 0.99, 0.0)
    one_step = ((reward.astype(np.float64)
                 + 0.99 * (1.0 - terminated) * v_next.astype(np.float64))
                * filled).astype(np.float32)
    np.testing.assert_array_equal(y0, one_step)

    # lambda = 1 is exactly the Monte-Carlo return.
    y1 = lambda_targets(reward, terminated, filled, v_next, 0.97, 1.0)
    g = np.zeros(B, dtype=np.float64)
    mc = np.zeros((T, B), dtype=np.float64)
    nf = np.zeros(B)
    for t in range(T - 1, -1, -1):
        cont = np.where(nf > 0, g, v_next[t].astype(np.float64))
        mc[t] = reward[t] + 0.97 * (1.0 - terminated[t]) * cont
        g = mc[t]
        nf = filled[t]
    np.testing.assert_array_equal(y1, mc.astype(np.float32))

    # lambda = 0.6 on the 3-step fixture matches the hand recursion.
    y = lambda_targets(np.ones((3, 1), np.float32),
                       np.array([[0.0], [0.0], [1.0]], np.float32),
                       np.ones((3, 1), np.float32),
                       np.array([[2.0], [2.0], [0.0]], np.float32),
                       gamma=0.9, td_lambda=0.6)
    np.testing.assert_allclose(y[:, 0], [2.9404, 2.26, 1.0], atol=1e-6)

    # And the general case agrees with the explicit n-step mixture.
    rng = np.random.default_rng(0)
    lengths = rng.integers(1, T + 1, B)
    filled = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float32)
    terminated = np.zeros((T, B), np.float32)
    for b in range(B):
        if rng.uniform() < 0.5:
            terminated[lengths[b] - 1, b] = 1.0
    y = lambda_targets(reward, terminated, filled, v_next, 0.93, 0.6)
    np.testing.assert_allclose(
        y, ref_lambda(reward, terminated, filled, v_next, 0.93, 0.6), atol=2e-5)


# ---------------------------------------------------------------------------
# Criterion 7: grid-world hunt ordering across penalty settings
# ---------------------------------------------------------------------------

def test_criterion_07_hunt_ordering_across_penalty_settings():
    # Both clauses are evaluated before asserting so a failure reports the
    # complete grid outcome, not just the first violated bound.
    p0_finals = {}
    for algo in ("pac", "qmix"):
        vals = []
        for seed in SEEDS:
            key = f"desk_p0_{algo}_s{seed}"
            info = done(key)
            assert info["seconds"] <= HUNT_BUDGET_S, key
            vals.append(info["evaluation"]["return_mean"])
        p0_finals[algo] = vals

    pm15 = {}
    for algo in ("pac", "ow_qmix", "qmix"):
        vals = []
        for seed in SEEDS:
            key = f"desk_pm15_{algo}_s{seed}"
            info = done(key)
            assert info["seconds"] <= HUNT_BUDGET_S, key
            vals.append(info["evaluation"]["return_mean"])
        pm15[algo] = vals

    # No miscapture penalty: both value-factorization families solve the
    # task, each family's mean final return within 70% of the best run.
    best = max(v for vals in p0_finals.values() for v in vals)
    p0_ok = {algo: float(np.mean(vals)) >= 0.7 * best
             for algo, vals in p0_finals.items()}

    # Miscapture penalty -1.5: the prediction-assisted learner and the
    # optimistically weighted baseline stay profitable while plain
    # monotonic mixing does not, in >= 2 of 3 seeds.
    ordered = sum(1 for k in range(len(SEEDS))
                  if pm15["pac"][k] > 0 and pm15["ow_qmix"][k] > 0
                  and pm15["qmix"][k] <= 0)

    report = (f"p0 finals {p0_finals} (best {best}, need mean >= {0.7 * best:.2f}), "
              f"pm15 finals {pm15} (ordered seeds {ordered}, need >= 2)")
    assert all(p0_ok.values()) and ordered >= 2, report


# ---------------------------------------------------------------------------
# Criterion 8: ablation direction on the penalised hunt
# ---------------------------------------------------------------------------

def test_criterion_08_ablations_underperform_full_learner():
    full = [final_return(f"desk_pm15_pac_s{s}") for s in SEEDS]
    for variant in ("disabled", "no_qstar"):
        ablated = [final_return(f"desk_pm15_{variant}_s{s}") for s in SEEDS]
        wins = sum(1 for k in range(len(SEEDS)) if full[k] > ablated[k])
        assert wins >= 2, (variant, full, ablated)


# ---------------------------------------------------------------------------
# Criterion 9: entropy temperature decreases over training
# ---------------------------------------------------------------------------

def test_criterion_09_temperature_decreases_late_in_training():
    # For every soft-policy run in the grid, mean alpha over the last
    # decile of logged updates is <= mean alpha over the fifth decile.
    keys = [key for key, overrides in runner().manifest()
            if overrides.get("algo") == "pac"]
    assert keys
    for key in keys:
        rows = read_metrics(ensure_run(key) / "metrics.csv")
        series = np.array([r["alpha"] for r in rows if r["alpha"] is not None])
        assert series.size >= 10, key
        deciles = np.array_split(series, 10)
        assert deciles[-1].mean() <= deciles[4].mean(), \
            (key, deciles[4].mean(), deciles[-1].mean())


# ---------------------------------------------------------------------------
# Criterion 10: determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_10_determinism_and_persistence():
    # Identical configs and seeds give bit-identical metrics, modulo the
    # wall-clock column (timing is environmental, everything computed from
    # data must match exactly).
    a, b = ensure_run("det_a"), ensure_run("det_b")
    assert strip_wall_clock(a / "metrics.csv") == strip_wall_clock(b / "metrics.csv")

    # Checkpoint round-trip: reloading final.ckpt reproduces the recorded
    # final evaluation exactly.
    info = json.loads((a / "done.json").read_text())
    cfg = build_config(parse_config_text((a / "config.resolved").read_text()))
    ck = load_checkpoint(a / "final.ckpt")
    env = cfg.make_env_instance()
    replayed = evaluate(env, ck.bundle, cfg.eval_episodes, cfg.seed,
                        action_source=resolve_eval_action_source(cfg))
    assert replayed == info["evaluation"]

    # One-worker streaming equals the inline rollout loop bit for bit.
    cfg = tiny_matrix(workers=1)
    lrn = fresh_learner(cfg)
    stream = trainer._episode_stream(cfg, lrn, threading.Lock(), lambda: 0,
                                     threading.Event())
    from_stream = [next(stream) for _ in range(3)]
    stream.close()
    env = cfg.make_env_instance()
    rng = rollout_rng(cfg.seed, 0)
    inline = [rollout_episode(env, lrn.bundle, epsilon_at(cfg, 0), rng,
                              training=True, action_source="policy")
              for _ in range(3)]
    for (batch_s, stats_s), (batch_i, stats_i) in zip(from_stream, inline):
        assert batches_equal(batch_s, batch_i)
        assert stats_s == stats_i
