"""Finite-difference verification of every architecture's gradients.

Each check rebuilds a scalar objective on a float64 tape and compares
backpropagated gradients against central differences for every parameter
element, returning the worst relative error. Composed objectives respect the
intentional stop-gradient boundaries: quantities the losses treat as constants
(critic values inside the policy objective, TD targets) enter as fixed arrays,
so the numeric derivative measures exactly the paths the analytic gradient is
supposed to track. The counterfactual-assistance term runs in its plain
cross-entropy form here, because its advantage-weighted forms hold
policy-dependent coefficients constant by design and central differences
cannot honor that; the advantage forms' gradients are covered analytically in
the unit tests.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .envs import EnvInfo
from .nets import (
    CentralMixer,
    Ctx,
    MonotonicMixer,
    NetsConfig,
    SumMixer,
    aggregate_messages,
    make_bundle,
    one_hot,
    policy_forward,
    utility_forward,
)
from .pac import (
    CounterfactualPrediction,
    agent_id_rows,
    encode_messages,
    loss_ca,
    loss_ib,
    loss_lp,
    loss_qstar,
    loss_qtot,
    mix_per_step,
    unroll_policy,
    unroll_utilities,
)

THRESHOLD = 1e-3

# Central-difference step. Large enough that float64 roundoff stays ~1e-7
# after cancellation, small enough that the perturbation does not cross ReLU
# kinks: composed objectives route gradients through rectifier layers whose
# pre-activations sit near zero at initialization (messages and utilities are
# tiny), and a 1e-3 step straddles those kinks, inflating the numeric
# derivative by a few percent.
FD_EPS = 1e-4

_INFO = EnvInfo(n_agents=2, n_actions=3, obs_dim=3, state_dim=3, episode_limit=4,
                has_win_condition=False)
_CFG = NetsConfig(recurrent_hidden=6, message_dim=2, encoder_hidden=5, decoder_hidden=5,
                  mixing_embed=4, hypernet_hidden=4, central_hidden=6)


def _check(params, forward, eps: float = FD_EPS) -> float:
    """Max relative FD error of `forward(ctx)` over the given parameters."""

    def fn(tape, *leaves):
        ctx = Ctx(tape)
        for p, leaf in zip(params, leaves):
            ctx._bound[id(p)] = leaf
        return forward(ctx)

    return ad.grad_check(fn, [p.data for p in params], eps)


def _bundle(seed: int):
    return make_bundle("pac", _INFO, _CFG, np.random.default_rng(seed))


def check_utility() -> float:
    b = _bundle(11)
    r = np.random.default_rng(12)
    obs = r.standard_normal((2, 3)).astype(np.float32)
    msg = r.standard_normal((2, 2)).astype(np.float32)
    w = r.standard_normal((2, 3))
    net = b["util"]

    def forward(ctx):
        h = ctx.const(net.init_hidden(2))
        q, h = utility_forward(net, ctx, obs, one_hot(np.array([0, 1]), 3),
                               agent_id_rows(1, 2), ctx.const(msg), h)
        q2, _ = utility_forward(net, ctx, obs, one_hot(np.array([2, 0]), 3),
                                agent_id_rows(1, 2), ctx.const(msg), h)
        return ad.sum_(ad.mul(ad.add(q, q2), ctx.const(w)))

    return _check(net.parameters(), forward)


def check_policy() -> float:
    b = _bundle(13)
    r = np.random.default_rng(14)
    obs = r.standard_normal((2, 3)).astype(np.float32)
    avail = np.array([[1, 1, 0], [1, 1, 1]], dtype=np.float32)
    w = r.standard_normal((2, 3)) * avail  # masked slots carry no weight
    net = b["policy"]

    def forward(ctx):
        h = ctx.const(net.init_hidden(2))
        logp, h = policy_forward(net, ctx, obs, one_hot(np.array([1, 2]), 3),
                                 agent_id_rows(1, 2), h, avail)
        logp2, _ = policy_forward(net, ctx, obs, one_hot(np.array([0, 0]), 3),
                                  agent_id_rows(1, 2), h, avail)
        return ad.sum_(ad.mul(ad.add(logp, logp2), ctx.const(w)))

    return _check(net.parameters(), forward)


def check_encoder() -> float:
    b = _bundle(15)
    r = np.random.default_rng(16)
    obs = r.standard_normal((4, 3)).astype(np.float32)  # two batch rows x two agents
    w = r.standard_normal((2, 2, 2))
    net = b["encoder"]

    def forward(ctx):
        mu = net.forward(ctx, ctx.const(obs))
        agg = aggregate_messages(ad.reshape(mu, (2, 2, 2)))
        return ad.sum_(ad.mul(agg, ctx.const(w)))

    return _check(net.parameters(), forward)


def check_decoder() -> float:
    b = _bundle(17)
    r = np.random.default_rng(18)
    x = r.standard_normal((3, _INFO.obs_dim + _CFG.message_dim)).astype(np.float32)
    labels = np.array([0, 2, 1])
    net = b["decoder"]

    def forward(ctx):
        logp = ad.log_softmax(net.forward(ctx, ctx.const(x)), axis=-1)
        return ad.scalar_mul(ad.sum_(ad.gather_index(logp, labels)), -1.0)

    return _check(net.parameters(), forward)


def check_monotonic_mixer() -> float:
    m = MonotonicMixer(np.random.default_rng(19), "mixer", 2, 3, _CFG)
    r = np.random.default_rng(20)
    state = r.standard_normal((3, 3)).astype(np.float32)
    q = r.standard_normal((3, 2)).astype(np.float32)
    w = r.standard_normal(3)

    def forward(ctx):
        out = m.forward(ctx, ctx.const(state), ctx.const(q))
        return ad.sum_(ad.mul(out, ctx.const(w)))

    return _check(m.parameters(), forward)


def check_central_mixer() -> float:
    m = CentralMixer(np.random.default_rng(21), "central", 2, 3, _CFG.central_hidden)
    r = np.random.default_rng(22)
    state = r.standard_normal((3, 3)).astype(np.float32)
    q = r.standard_normal((3, 2)).astype(np.float32)
    w = r.standard_normal(3)

    def forward(ctx):
        out = m.forward(ctx, ctx.const(state), ctx.const(q))
        return ad.sum_(ad.mul(out, ctx.const(w)))

    return _check(m.parameters(), forward)


def _fixture_batch(seed: int):
    r = np.random.default_rng(seed)
    T, B, n, A = 2, 2, 2, 3
    obs = r.standard_normal((T + 1, B, n, _INFO.obs_dim)).astype(np.float32)
    state = r.standard_normal((T + 1, B, _INFO.state_dim)).astype(np.float32)
    avail = np.ones((T, B, n, A), np.float32)
    actions = r.integers(0, A, (T, B, n))
    mask = np.ones((T, B), np.float32)
    y = r.standard_normal((T, B)).astype(np.float32)
    return obs, state, avail, actions, mask, y


def check_composed_policy_losses() -> float:
    """Soft-improvement + assistance + message losses sharing one tape."""
    b = _bundle(23)
    obs, state, avail, actions, mask, _ = _fixture_batch(24)
    r = np.random.default_rng(25)
    T, B, n, A = 2, 2, 2, 3
    q_fixed = r.standard_normal((T, B, n, A)).astype(np.float32)
    ustar = r.integers(0, A, (T, B, n))
    pred = CounterfactualPrediction(ustar=ustar, qstar_row=q_fixed.copy())
    sum_mixer = SumMixer("mixer")  # parameter-free, so hypernet detachment is moot
    params = (b["policy"].parameters() + b["encoder"].parameters()
              + b["decoder"].parameters() + b["prior"].parameters())

    def forward(ctx):
        logp = unroll_policy(b["policy"], ctx, obs, actions, avail, A, T)
        lp = loss_lp(ctx, sum_mixer, state, logp, ctx.const(q_fixed), 0.3, mask)
        ca = loss_ca(ctx, logp, q_fixed, pred, actions, mask, form="ce")
        mu_stack, _, agg_stack = encode_messages(b["encoder"], ctx, obs, T, None)
        ib = loss_ib(ctx, b["decoder"], b["prior"], obs, agg_stack, mu_stack, ustar,
                     mask, beta=0.1)
        return ad.add(ad.add(lp, ca), ib)

    return _check(params, forward)


def check_composed_value_losses() -> float:
    """Mixed TD + central-critic regression sharing one tape.

    The weighted TD loss recomputes residual-sign weights per evaluation; the
    fixture keeps residuals far from zero so no weight flips under the
    finite-difference perturbation.
    """
    b = _bundle(26)
    obs, state, avail, actions, mask, y = _fixture_batch(27)
    T, B, n, A = 2, 2, 2, 3
    params = (b["util"].parameters() + b["qstar_util"].parameters()
              + b["central"].parameters() + b["mixer"].parameters()
              + b["encoder"].parameters())

    def forward(ctx):
        _, agg_steps, _ = encode_messages(b["encoder"], ctx, obs, T, None)
        q_msg = unroll_utilities(b["util"], ctx, obs, actions, A, T, agg_steps)
        qtot = mix_per_step(b["mixer"], ctx, state, ad.gather_index(q_msg, actions))
        l_qtot = loss_qtot(ctx, qtot, y, mask, w_const=0.5)
        qs = unroll_utilities(b["qstar_util"], ctx, obs, actions, A, T)
        qstar_at = mix_per_step(b["central"], ctx, state, ad.gather_index(qs, actions))
        return ad.add(l_qtot, loss_qstar(ctx, qstar_at, y, mask))

    return _check(params, forward)


CHECKS = [
    ("utility", check_utility),
    ("policy", check_policy),
    ("encoder", check_encoder),
    ("decoder", check_decoder),
    ("monotonic_mixer", check_monotonic_mixer),
    ("central_mixer", check_central_mixer),
    ("composed_policy_losses", check_composed_policy_losses),
    ("composed_value_losses", check_composed_value_losses),
]


def run_gradcheck() -> list[tuple[str, float]]:
    """Run every architecture check; returns (name, max relative error) pairs."""
    return [(name, fn()) for name, fn in CHECKS]
