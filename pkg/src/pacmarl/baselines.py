"""Reference value-factorization learners: VDN, QMIX, and OW-QMIX.

All three share the episode pipeline, recurrent utility nets, TD(lambda)
targets, and optimizer plumbing with the main learner; they differ only in
the mixer (sum vs monotonic), the presence of the central critic, and the
TD weighting. Action selection is epsilon-greedy over per-agent utilities.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, clip_global_norm
from .buffer import EpisodeBatch
from .config import TrainConfig
from .envs import EnvInfo
from .nets import eval_ctx, grad_ctx, make_bundle, make_target, sync_targets
from .pac import (
    lambda_targets,
    loss_qstar,
    loss_qtot,
    masked_argmax,
    mix_per_step,
    pad_safe_avail,
    unroll_utilities,
)


class QLearner:
    """TD learner over factorized utilities; kind in {vdn, qmix, ow_qmix}."""

    def __init__(self, cfg: TrainConfig, env_info: EnvInfo, init_rng: np.random.Generator,
                 noise_rng: np.random.Generator | None = None):
        cfg.validate()
        if cfg.algo not in ("vdn", "qmix", "ow_qmix"):
            raise ValueError(f"QLearner does not handle algo '{cfg.algo}'")
        self.cfg = cfg
        self.info = env_info
        self.bundle = make_bundle(cfg.algo, env_info, cfg.nets, init_rng)
        self.target = make_target(self.bundle)
        self.opt = Adam(self.bundle.network_parameters(), lr=cfg.lr)

    def sync(self) -> None:
        sync_targets(self.bundle, self.target)

    def _target_values(self, batch: EpisodeBatch) -> np.ndarray:
        tctx = eval_ctx()
        steps = batch.T + 1
        tq = unroll_utilities(self.target["util"], tctx, batch.obs, batch.actions,
                              batch.n_actions, steps).data
        greedy = masked_argmax(tq, pad_safe_avail(batch.avail))
        if "central" in self.bundle:
            tqs = unroll_utilities(self.target["qstar_util"], tctx, batch.obs, batch.actions,
                                   batch.n_actions, steps).data
            chosen = np.take_along_axis(tqs, greedy[..., None], axis=-1)[..., 0]
            S = batch.state.shape[-1]
            v = self.target["central"].forward_raw(
                batch.state.reshape(steps * batch.B, S),
                chosen.reshape(steps * batch.B, batch.n_agents)).reshape(steps, batch.B)
        else:
            chosen = np.take_along_axis(tq, greedy[..., None], axis=-1)[..., 0]
            v = mix_per_step(self.target["mixer"], tctx, batch.state,
                             tctx.const(chosen.astype(np.float32))).data
        return v[1:]

    def update(self, batch: EpisodeBatch) -> dict:
        cfg = self.cfg
        T, A = batch.T, batch.n_actions
        mask = batch.filled
        ctx = grad_ctx()

        q = unroll_utilities(self.bundle["util"], ctx, batch.obs, batch.actions, A, T)
        qtot = mix_per_step(self.bundle["mixer"], ctx, batch.state,
                            ad.gather_index(q, batch.actions))
        y = lambda_targets(batch.reward, batch.terminated, batch.filled,
                           self._target_values(batch), cfg.gamma, cfg.td_lambda)

        weighted = "central" in self.bundle
        losses = {"qtot": loss_qtot(ctx, qtot, y, mask, cfg.w_const if weighted else 1.0)}
        if weighted:
            if cfg.qstar_action_source == "taken":
                src = batch.actions
            else:
                src = masked_argmax(q.data, pad_safe_avail(batch.avail[:T]))
            qs = unroll_utilities(self.bundle["qstar_util"], ctx, batch.obs, batch.actions, A, T)
            qstar_at = mix_per_step(self.bundle["central"], ctx, batch.state,
                                    ad.gather_index(qs, src))
            losses["qstar"] = loss_qstar(ctx, qstar_at, y, mask)

        total = None
        weights = {"qtot": cfg.w_qtot, "qstar": cfg.w_qstar}
        for key, term in losses.items():
            piece = ad.scalar_mul(term, float(weights[key]))
            total = piece if total is None else ad.add(total, piece)
        ctx.tape.backward(total)
        grads, norm = clip_global_norm(ctx.param_grads(self.bundle.network_parameters()),
                                       cfg.grad_norm_clip)
        self.opt.step(grads)

        out = {f"loss_{k}": float(t.data) for k, t in losses.items()}
        out["grad_norm"] = norm
        return out
