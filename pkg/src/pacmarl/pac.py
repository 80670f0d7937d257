"""Counterfactual-prediction-assisted learner.

The learner trains a factorized maximum-entropy policy alongside two critics:
a monotonically mixed Q_tot over message-conditioned utilities, and an
unrestricted central critic Q* over its own per-agent utilities. Per-agent
counterfactually optimal actions u*_i — argmax over agent i's action with the
others held at their taken actions under Q* — serve as stop-gradient labels
for the policy-assistance and message-decoder losses.

Shapes follow the EpisodeBatch convention: step arrays are (T, B, ...) and
observation-like arrays (T+1, B, ...). Flattened (episode, agent) rows use
row = b * n_agents + i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, clip_global_norm
from .buffer import EpisodeBatch
from .config import TrainConfig
from .envs import EnvInfo
from .nets import (
    Bundle,
    CentralMixer,
    Ctx,
    aggregate_messages,
    eval_ctx,
    grad_ctx,
    make_bundle,
    make_target,
    one_hot,
    policy_forward,
    sync_targets,
    utility_forward,
)

CA_FORMS = ("literal", "directed", "ce")


# ---------------------------------------------------------------------------
# Small numpy helpers
# ---------------------------------------------------------------------------


def masked_argmax(values: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Argmax over the last axis restricted to avail > 0 (0 if none avail)."""
    masked = np.where(avail > 0, values, -np.inf)
    return masked.argmax(axis=-1).astype(np.int64)


def pad_safe_avail(avail: np.ndarray) -> np.ndarray:
    """Replace all-masked rows (zero-padded steps) with all-available rows."""
    dead = avail.sum(axis=-1, keepdims=True) <= 0
    return np.where(dead, np.float32(1.0), avail).astype(np.float32)


def agent_id_rows(batch_size: int, n_agents: int) -> np.ndarray:
    return np.tile(np.eye(n_agents, dtype=np.float32), (batch_size, 1))


def masked_mean(ctx: Ctx, x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over entries where mask is 1 (mask broadcasts against x)."""
    full = np.broadcast_to(np.asarray(mask, dtype=np.float32), x.data.shape)
    count = max(float(full.sum()), 1.0)
    return ad.scalar_mul(ad.sum_(ad.mul(x, ctx.const(full))), 1.0 / count)


def stack_time(steps: list[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(t, (1,) + t.data.shape) for t in steps], axis=0)


def entropy_of(log_probs: np.ndarray, mask: np.ndarray) -> float:
    """Mean policy entropy over unmasked agent-steps; log_probs (T,B,n,A)."""
    p = np.exp(log_probs)
    ent = -(p * np.where(p > 0, log_probs, 0.0)).sum(axis=-1)  # (T,B,n)
    full = np.broadcast_to(mask[:, :, None], ent.shape)
    count = max(float(full.sum()), 1.0)
    return float((ent * full).sum() / count)


# ---------------------------------------------------------------------------
# Counterfactual prediction
# ---------------------------------------------------------------------------


@dataclass
class CounterfactualPrediction:
    """Per-agent optimal actions under the central critic, others held fixed.

    qstar_row[t, b, i, a] = Q*(s_tb, (taken with agent i's action set to a));
    ustar[t, b, i] = availability-masked argmax of that row. Both are plain
    arrays: labels carry no gradient.
    """

    ustar: np.ndarray  # (T, B, n) int64
    qstar_row: np.ndarray  # (T, B, n, A) float32


def counterfactual_predict(central: CentralMixer, state: np.ndarray, qstar_values: np.ndarray,
                           taken_actions: np.ndarray, avail: np.ndarray) -> CounterfactualPrediction:
    """Sweep each agent's action through the central critic: n * A evaluations
    per timestep, with every other agent pinned to its taken action."""
    T, B, n, A = qstar_values.shape
    S = state.shape[-1]
    chosen = np.take_along_axis(qstar_values, taken_actions[..., None], axis=-1)[..., 0]  # (T,B,n)
    rows_q = np.broadcast_to(chosen[:, :, None, None, :], (T, B, n, A, n)).copy()
    ii = np.arange(n)
    rows_q[:, :, ii, :, ii] = qstar_values.transpose(2, 0, 1, 3)
    rows_s = np.broadcast_to(state[:, :, None, None, :], (T, B, n, A, S))
    flat = central.forward_raw(rows_s.reshape(-1, S), rows_q.reshape(-1, n))
    qstar_row = flat.reshape(T, B, n, A).astype(np.float32)
    return CounterfactualPrediction(ustar=masked_argmax(qstar_row, avail), qstar_row=qstar_row)


# ---------------------------------------------------------------------------
# TD(lambda) targets
# ---------------------------------------------------------------------------


def lambda_targets(reward: np.ndarray, terminated: np.ndarray, filled: np.ndarray,
                   v_next: np.ndarray, gamma: float, td_lambda: float) -> np.ndarray:
    """Backward lambda-return recursion over padded episode batches.

    v_next[t] is the bootstrap value for step t+1. Termination zeroes the
    continuation; truncation (episode runs out of steps without terminating)
    bootstraps from v_next. Padded steps yield 0.
    """
    T, B = reward.shape
    lam = float(td_lambda)
    g = np.zeros(B, dtype=np.float64)
    next_filled = np.zeros(B, dtype=np.float64)
    y = np.zeros((T, B), dtype=np.float64)
    r64 = reward.astype(np.float64)
    v64 = v_next.astype(np.float64)
    for t in range(T - 1, -1, -1):
        blend = np.where(next_filled > 0, (1.0 - lam) * v64[t] + lam * g, v64[t])
        y[t] = r64[t] + gamma * (1.0 - terminated[t]) * blend
        g = y[t]
        next_filled = filled[t]
    return (y * filled).astype(np.float32)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def loss_ca(ctx: Ctx, log_probs: Tensor, q_values: np.ndarray,
            prediction: CounterfactualPrediction, taken_actions: np.ndarray,
            mask: np.ndarray, form: str = "directed") -> Tensor:
    """Counterfactual assistance loss; gradient flows only through log-probs.

    literal:  mean_t sum_i log pi(taken_i) * A_i,
              A_i = q(u*_i) - sum_{u != u*_i} pi(u) q(u)
    directed: mean_t sum_i -log pi(u*_i) * A_i,
              A_i = q(u*_i) - sum_u pi(u) q(u)
    ce:       mean_t sum_i -log pi(u*_i)        (plain label cross-entropy)
    """
    if form not in CA_FORMS:
        raise ValueError(f"unknown ca form '{form}' (expected one of {CA_FORMS})")
    ustar = prediction.ustar
    probs = np.exp(log_probs.data)
    q = np.asarray(q_values, dtype=np.float32)
    q_at_star = np.take_along_axis(q, ustar[..., None], axis=-1)[..., 0]
    if form == "ce":
        per_step = ad.sum_(ad.scalar_mul(ad.gather_index(log_probs, ustar), -1.0), axis=2)
        return masked_mean(ctx, per_step, mask)
    expect_all = (probs * q).sum(axis=-1)
    if form == "literal":
        p_at_star = np.take_along_axis(probs, ustar[..., None], axis=-1)[..., 0]
        advantage = q_at_star - (expect_all - p_at_star * q_at_star)
        weighted = ad.mul(ad.gather_index(log_probs, taken_actions), ctx.const(advantage))
    else:
        advantage = q_at_star - expect_all
        weighted = ad.mul(ad.scalar_mul(ad.gather_index(log_probs, ustar), -1.0),
                          ctx.const(advantage))
    return masked_mean(ctx, ad.sum_(weighted, axis=2), mask)


def loss_ib(ctx: Ctx, decoder, prior, obs: np.ndarray, agg_messages: Tensor, mu: Tensor,
            labels: np.ndarray, mask: np.ndarray, beta: float) -> Tensor:
    """Message-channel information loss: decode u* labels from received
    aggregates, plus beta-weighted KL of each sender's N(mu, I) to the
    learned prior."""
    T, B, n, M = mu.data.shape
    rows = T * B * n
    dec_in = ad.concat(
        [ctx.const(obs[:T].reshape(rows, -1)), ad.reshape(agg_messages, (rows, M))], axis=1)
    logits = decoder.forward(ctx, dec_in)
    logp = ad.log_softmax(logits, axis=-1)
    nll = ad.scalar_mul(ad.gather_index(logp, labels.reshape(rows)), -1.0)
    ce_term = masked_mean(ctx, ad.reshape(nll, (T, B, n)), mask[:, :, None])
    kl = ad.kl_diag_gaussian(mu, ctx.const(np.zeros(M, dtype=np.float32)),
                             ctx.p(prior.mu), ctx.p(prior.logvar))
    kl_term = masked_mean(ctx, kl, mask[:, :, None])
    return ad.add(ce_term, ad.scalar_mul(kl_term, float(beta)))


def loss_lp(ctx: Ctx, mixer, state: np.ndarray, log_probs: Tensor, q_values: Tensor,
            alpha: float, mask: np.ndarray) -> Tensor:
    """Factorized soft policy improvement: mix per-agent soft values
    v_i = E_pi[q_i - alpha log pi_i] monotonically and ascend the result.
    Critic values, alpha, and the mixer's generated weights are constants."""
    pi = ad.exp(log_probs)
    inner = ad.sub(ad.stop_grad(q_values), ad.scalar_mul(log_probs, float(alpha)))
    v = ad.sum_(ad.mul(pi, inner), axis=3)  # (T, B, n)
    T, B, n = v.data.shape
    mixed = mixer.forward(ctx, ctx.const(state[:T].reshape(T * B, -1)),
                          ad.reshape(v, (T * B, n)), detach_hyper=True)
    return ad.scalar_mul(masked_mean(ctx, ad.reshape(mixed, (T, B)), mask), -1.0)


def loss_alpha(ctx: Ctx, logalpha_tensor: Tensor, logp_taken: np.ndarray,
               entropy_target: float, mask: np.ndarray) -> Tensor:
    """Temperature objective mean[-alpha log pi(taken) - alpha H0] with the
    log-probs as constants; only log-alpha receives gradient."""
    full = np.broadcast_to(mask[:, :, None], logp_taken.shape)
    count = max(float(full.sum()), 1.0)
    coeff = float((((-logp_taken) - entropy_target) * full).sum() / count)
    return ad.sum_(ad.scalar_mul(ad.exp(logalpha_tensor), coeff))


def loss_qstar(ctx: Ctx, qstar_at: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    d = ad.sub(qstar_at, ctx.const(targets))
    return masked_mean(ctx, ad.mul(d, d), mask)


def loss_qtot(ctx: Ctx, qtot: Tensor, targets: np.ndarray, mask: np.ndarray,
              w_const: float) -> Tensor:
    """Weighted squared TD: weight 1 where Q_tot underestimates the target
    (negative residual), w_const elsewhere. Weights are constants."""
    residual = qtot.data - targets
    w = np.where(residual < 0, np.float32(1.0), np.float32(w_const))
    d = ad.sub(qtot, ctx.const(targets))
    return masked_mean(ctx, ad.mul(ad.mul(d, d), ctx.const(w)), mask)


# ---------------------------------------------------------------------------
# Batched recurrent unrolls
# ---------------------------------------------------------------------------


def last_action_onehot(actions: np.ndarray, n_actions: int, t: int) -> np.ndarray:
    """One-hot of the previous step's actions, zeros at t=0; (B*n, A) rows."""
    if t == 0:
        B, n = actions.shape[1], actions.shape[2]
        return np.zeros((B * n, n_actions), dtype=np.float32)
    return one_hot(actions[t - 1].reshape(-1), n_actions)


def unroll_utilities(net, ctx: Ctx, obs: np.ndarray, actions: np.ndarray, n_actions: int,
                     steps: int, messages: list[Tensor] | None = None) -> Tensor:
    """Run the recurrent utility net over `steps` timesteps -> (steps,B,n,A)."""
    _, B, n, _ = obs.shape
    ids = agent_id_rows(B, n)
    h = ctx.const(net.init_hidden(B * n))
    outs = []
    for t in range(steps):
        msg = messages[t] if messages is not None else None
        q, h = utility_forward(net, ctx, obs[t].reshape(B * n, -1),
                               last_action_onehot(actions, n_actions, t), ids, msg, h)
        outs.append(ad.reshape(q, (1, B, n, n_actions)))
    return ad.concat(outs, axis=0)


def unroll_policy(net, ctx: Ctx, obs: np.ndarray, actions: np.ndarray, avail: np.ndarray,
                  n_actions: int, steps: int) -> Tensor:
    """Recurrent policy log-probs over `steps` timesteps -> (steps,B,n,A)."""
    _, B, n, _ = obs.shape
    ids = agent_id_rows(B, n)
    safe = pad_safe_avail(avail)
    h = ctx.const(net.init_hidden(B * n))
    outs = []
    for t in range(steps):
        logp, h = policy_forward(net, ctx, obs[t].reshape(B * n, -1),
                                 last_action_onehot(actions, n_actions, t), ids, h,
                                 safe[t].reshape(B * n, n_actions))
        outs.append(ad.reshape(logp, (1, B, n, n_actions)))
    return ad.concat(outs, axis=0)


def encode_messages(encoder, ctx: Ctx, obs: np.ndarray, steps: int,
                    noise_rng: np.random.Generator | None):
    """Per-step sender means and received aggregates.

    Returns (mu_stack (steps,B,n,M), agg_steps list of (B*n,M), agg_stack).
    With a noise generator, messages are single reparameterized samples;
    without one, the means are sent (target nets and evaluation).
    """
    _, B, n, _ = obs.shape
    mus, aggs_flat, aggs = [], [], []
    for t in range(steps):
        mu = encoder.forward(ctx, ctx.const(obs[t].reshape(B * n, -1)))
        sent = ad.gaussian_reparam_sample(mu, noise_rng) if noise_rng is not None else mu
        m3 = ad.reshape(sent, (B, n, mu.data.shape[-1]))
        agg3 = aggregate_messages(m3)
        mus.append(ad.reshape(mu, (1, B, n, mu.data.shape[-1])))
        aggs_flat.append(ad.reshape(agg3, (B * n, mu.data.shape[-1])))
        aggs.append(ad.reshape(agg3, (1, B, n, mu.data.shape[-1])))
    return ad.concat(mus, axis=0), aggs_flat, ad.concat(aggs, axis=0)


def mix_per_step(mixer, ctx: Ctx, state: np.ndarray, q_chosen: Tensor) -> Tensor:
    """Apply a mixer across a (T,B,n) tensor of chosen utilities -> (T,B)."""
    T, B, n = q_chosen.data.shape
    out = mixer.forward(ctx, ctx.const(state[:T].reshape(T * B, -1)),
                        ad.reshape(q_chosen, (T * B, n)))
    return ad.reshape(out, (T, B))


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------


class PACLearner:
    """Owns the parameter bundle, targets, and optimizers; one update per call."""

    def __init__(self, cfg: TrainConfig, env_info: EnvInfo, init_rng: np.random.Generator,
                 noise_rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.info = env_info
        self.noise_rng = noise_rng
        initial_logalpha = (math.log(cfg.fixed_alpha) if cfg.fixed_alpha is not None
                            else cfg.initial_logalpha)
        self.bundle = make_bundle("pac", env_info, cfg.nets, init_rng,
                                  no_qstar=cfg.no_qstar, initial_logalpha=initial_logalpha)
        self.target = make_target(self.bundle)
        self.opt = Adam(self.bundle.network_parameters(), lr=cfg.lr)
        self.alpha_opt = (None if cfg.fixed_alpha is not None
                          else Adam([self.bundle.logalpha], lr=cfg.lr_alpha))
        self.entropy_target = cfg.h0_ratio * math.log(env_info.n_actions)

    # -- target plumbing ---------------------------------------------------
    def sync(self) -> None:
        sync_targets(self.bundle, self.target)

    def _needs_prediction(self) -> bool:
        return not self.cfg.disabled

    # -- bootstrap values under the target networks ------------------------
    def _target_values(self, batch: EpisodeBatch) -> np.ndarray:
        """v[t] = bootstrap value of state_{t+1}, t = 0..T-1."""
        tctx = eval_ctx()
        steps = batch.T + 1
        A = batch.n_actions
        _, _, agg_stack = encode_messages(self.target["encoder"], tctx, batch.obs, steps, None)
        agg_steps = [tctx.const(agg_stack.data[t].reshape(batch.B * batch.n_agents, -1))
                     for t in range(steps)]
        tq = unroll_utilities(self.target["util"], tctx, batch.obs, batch.actions, A, steps,
                              agg_steps).data
        greedy = masked_argmax(tq, pad_safe_avail(batch.avail))  # (T+1,B,n)
        if self.cfg.no_qstar:
            chosen = np.take_along_axis(tq, greedy[..., None], axis=-1)[..., 0]
            v = mix_per_step(self.target["mixer"], tctx, batch.state,
                             tctx.const(chosen.astype(np.float32))).data
        else:
            tqs = unroll_utilities(self.target["qstar_util"], tctx, batch.obs, batch.actions,
                                   A, steps).data
            chosen = np.take_along_axis(tqs, greedy[..., None], axis=-1)[..., 0]
            S = batch.state.shape[-1]
            v = self.target["central"].forward_raw(
                batch.state.reshape(steps * batch.B, S),
                chosen.reshape(steps * batch.B, batch.n_agents)).reshape(steps, batch.B)
        return v[1:]

    # -- one optimizer step --------------------------------------------------
    def update(self, batch: EpisodeBatch) -> dict:
        cfg = self.cfg
        T, B, n, A = batch.T, batch.B, batch.n_agents, batch.n_actions
        mask = batch.filled
        ctx = grad_ctx()

        mu_stack, agg_steps, agg_stack = encode_messages(
            self.bundle["encoder"], ctx, batch.obs, T, self.noise_rng)
        q_msg = unroll_utilities(self.bundle["util"], ctx, batch.obs, batch.actions, A, T,
                                 agg_steps)
        q_taken = ad.gather_index(q_msg, batch.actions)
        qtot = mix_per_step(self.bundle["mixer"], ctx, batch.state, q_taken)
        log_probs = unroll_policy(self.bundle["policy"], ctx, batch.obs, batch.actions,
                                  batch.avail[:T], A, T)

        prediction = None
        qs = None
        if not cfg.no_qstar:
            qs = unroll_utilities(self.bundle["qstar_util"], ctx, batch.obs, batch.actions, A, T)
            if self._needs_prediction():
                prediction = counterfactual_predict(self.bundle["central"], batch.state[:T],
                                                    qs.data, batch.actions, batch.avail[:T])

        y = lambda_targets(batch.reward, batch.terminated, batch.filled,
                           self._target_values(batch), cfg.gamma, cfg.td_lambda)

        alpha_value = self.bundle.alpha
        losses: dict[str, Tensor] = {}
        losses["lp"] = loss_lp(ctx, self.bundle["mixer"], batch.state, log_probs, q_msg,
                               alpha_value, mask)
        losses["qtot"] = loss_qtot(ctx, qtot, y, mask,
                                   1.0 if cfg.no_qstar else cfg.w_const)
        if qs is not None:
            if cfg.qstar_action_source == "taken":
                src = batch.actions
            else:
                src = masked_argmax(q_msg.data, pad_safe_avail(batch.avail[:T]))
            qstar_at = mix_per_step(self.bundle["central"], ctx, batch.state,
                                    ad.gather_index(qs, src))
            losses["qstar"] = loss_qstar(ctx, qstar_at, y, mask)
        if prediction is not None:
            form = "ce" if cfg.ce_loss else cfg.ca_form
            losses["ca"] = loss_ca(ctx, log_probs, q_msg.data, prediction, batch.actions,
                                   mask, form)
            if not cfg.no_info:
                losses["ib"] = loss_ib(ctx, self.bundle["decoder"], self.bundle["prior"],
                                       batch.obs, agg_stack, mu_stack, prediction.ustar,
                                       mask, cfg.beta)

        weights = {"lp": cfg.w_lp, "ca": cfg.w_ca, "ib": cfg.w_ib,
                   "qstar": cfg.w_qstar, "qtot": cfg.w_qtot}
        total = None
        for key, term in losses.items():
            piece = ad.scalar_mul(term, float(weights[key]))
            total = piece if total is None else ad.add(total, piece)
        ctx.tape.backward(total)
        net_params = self.bundle.network_parameters()
        grads, norm = clip_global_norm(ctx.param_grads(net_params), cfg.grad_norm_clip)

        logp_taken = np.take_along_axis(log_probs.data, batch.actions[..., None],
                                        axis=-1)[..., 0]
        l_alpha_value = None
        alpha_grads = None
        if self.alpha_opt is not None:
            l_alpha = loss_alpha(ctx, ctx.p(self.bundle.logalpha), logp_taken,
                                 self.entropy_target, mask)
            ctx.tape.backward(l_alpha)
            alpha_grads = ctx.param_grads([self.bundle.logalpha])
            l_alpha_value = float(l_alpha.data)

        self.opt.step(grads)
        if alpha_grads is not None:
            self.alpha_opt.step(alpha_grads)

        out = {f"loss_{k}": float(t.data) for k, t in losses.items()}
        out["loss_alpha"] = l_alpha_value
        out["alpha"] = float(self.bundle.alpha)
        out["policy_entropy"] = entropy_of(log_probs.data, mask)
        out["grad_norm"] = norm
        return out
