"""Function approximators: recurrent agent nets, mixers, message nets.

Every module owns named :class:`~pacmarl.autodiff.Parameter` objects and
exposes forwards that run on a caller-provided :class:`Ctx` (a tape binding),
so the same code serves gradient updates (recording tape), target/rollout
evaluation (non-recording tape), and float64 gradient checks.

Architecture notes:

* utility/policy trunks: Linear -> ReLU -> GRU cell -> linear head; agents
  share weights and are distinguished by an id one-hot in the input.
* monotonic mixer: state-conditioned hypernetworks generate per-agent mixing
  weights whose absolute value enforces dQ_tot/dq_i >= 0; ELU between the two
  mixing layers. A single-layer activation-free variant (Q = sum |w_i(s)| q_i
  + b(s)) is available for analysis.
* central mixer: unconstrained feed-forward (state + utilities) -> scalar.
* message nets: 2-layer MLP encoder obs -> mean (identity covariance), 2-layer
  MLP decoder (obs + aggregated messages) -> action logits, learned global
  diagonal-Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .envs import EnvInfo

MASK_LOGIT = -1e9  # additive mask sentinel: exp(-1e9) underflows to exactly 0


class NetsError(ValueError):
    """Invalid network configuration or forward-pass misuse."""


@dataclass
class NetsConfig:
    recurrent_hidden: int = 64
    message_dim: int = 8
    encoder_hidden: int = 64
    decoder_hidden: int = 64
    mixing_embed: int = 32
    hypernet_hidden: int = 64
    mixer_layers: int = 2  # 1 => single linear layer without activation
    central_hidden: int = 128

    def validate(self) -> None:
        for field_name in (
            "recurrent_hidden", "message_dim", "encoder_hidden", "decoder_hidden",
            "mixing_embed", "hypernet_hidden", "central_hidden",
        ):
            if getattr(self, field_name) < 1:
                raise NetsError(f"{field_name} must be positive")
        if self.mixer_layers not in (1, 2):
            raise NetsError(f"mixer_layers must be 1 or 2, got {self.mixer_layers}")


class Ctx:
    """Binds parameters to leaf tensors on one tape (one leaf per parameter)."""

    def __init__(self, tape: ad.Tape):
        self.tape = tape
        self._bound: dict[int, Tensor] = {}

    def p(self, param: Parameter) -> Tensor:
        t = self._bound.get(id(param))
        if t is None:
            t = self.tape.leaf(param.data)
            self._bound[id(param)] = t
        return t

    def const(self, arr) -> Tensor:
        return self.tape.constant(arr)

    def grads(self) -> dict[int, np.ndarray]:
        """Per-parameter gradients keyed by id(param); call after backward."""
        return {pid: self.tape.grad(t) for pid, t in self._bound.items()}

    def param_grads(self, params: "list[Parameter]") -> dict[str, np.ndarray]:
        """Name-keyed gradients for an optimizer; zeros for unused parameters."""
        out = {}
        for p in params:
            t = self._bound.get(id(p))
            out[p.name] = self.tape.grad(t) if t is not None else np.zeros_like(p.data)
        return out


def grad_ctx() -> Ctx:
    return Ctx(ad.Tape(dtype=np.float32, recording=True))


def eval_ctx() -> Ctx:
    return Ctx(ad.Tape(dtype=np.float32, recording=False))


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros(indices.shape + (depth,), dtype=np.float32)
    np.put_along_axis(out, np.asarray(indices)[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    def __init__(self, name: str):
        self.name = name
        self._params: list[Parameter] = []
        self._children: list[Module] = []

    def _param(self, suffix: str, data: np.ndarray) -> Parameter:
        p = Parameter(f"{self.name}.{suffix}", data)
        self._params.append(p)
        return p

    def _child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for child in self._children:
            out.extend(child.parameters())
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, name: str, in_dim: int, out_dim: int):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = self._param("W", _uniform(rng, in_dim, (in_dim, out_dim)))
        self.b = self._param("b", _uniform(rng, in_dim, (out_dim,)))

    def forward(self, ctx: Ctx, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise NetsError(f"{self.name}: expected input dim {self.in_dim}, got {x.shape}")
        return ad.add(ad.matmul(x, ctx.p(self.W)), ctx.p(self.b))


class GRUCell(Module):
    """Standard gated recurrent cell: r/z gates + candidate state."""

    def __init__(self, rng, name: str, in_dim: int, hidden: int):
        super().__init__(name)
        self.in_dim, self.hidden = in_dim, hidden
        h = hidden
        self.W_xr = self._param("W_xr", _uniform(rng, h, (in_dim, h)))
        self.W_hr = self._param("W_hr", _uniform(rng, h, (h, h)))
        self.b_r = self._param("b_r", _uniform(rng, h, (h,)))
        self.W_xz = self._param("W_xz", _uniform(rng, h, (in_dim, h)))
        self.W_hz = self._param("W_hz", _uniform(rng, h, (h, h)))
        self.b_z = self._param("b_z", _uniform(rng, h, (h,)))
        self.W_xn = self._param("W_xn", _uniform(rng, h, (in_dim, h)))
        self.b_xn = self._param("b_xn", _uniform(rng, h, (h,)))
        self.W_hn = self._param("W_hn", _uniform(rng, h, (h, h)))
        self.b_hn = self._param("b_hn", _uniform(rng, h, (h,)))

    def step(self, ctx: Ctx, x: Tensor, h: Tensor) -> Tensor:
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, ctx.p(self.W_xr)), ad.matmul(h, ctx.p(self.W_hr))), ctx.p(self.b_r)))
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, ctx.p(self.W_xz)), ad.matmul(h, ctx.p(self.W_hz))), ctx.p(self.b_z)))
        n_in = ad.add(ad.matmul(x, ctx.p(self.W_xn)), ctx.p(self.b_xn))
        n_h = ad.add(ad.matmul(h, ctx.p(self.W_hn)), ctx.p(self.b_hn))
        n = ad.tanh(ad.add(n_in, ad.mul(r, n_h)))
        # h' = (1 - z) * n + z * h
        return ad.add(ad.mul(ad.sub(ctx.const(np.float32(1.0)), z), n), ad.mul(z, h))


class RecurrentQNet(Module):
    """Linear -> ReLU -> GRU -> linear head; one step per call."""

    def __init__(self, rng, name: str, in_dim: int, hidden: int, out_dim: int):
        super().__init__(name)
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.fc_in = self._child(Linear(rng, f"{name}.fc_in", in_dim, hidden))
        self.gru = self._child(GRUCell(rng, f"{name}.gru", hidden, hidden))
        self.head = self._child(Linear(rng, f"{name}.head", hidden, out_dim))

    def init_hidden(self, rows: int) -> np.ndarray:
        return np.zeros((rows, self.hidden), dtype=np.float32)

    def step(self, ctx: Ctx, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        z = ad.relu(self.fc_in.forward(ctx, x))
        h_next = self.gru.step(ctx, z, h)
        return self.head.forward(ctx, h_next), h_next


class MLP(Module):
    """Two-layer perceptron with ReLU."""

    def __init__(self, rng, name: str, in_dim: int, hidden: int, out_dim: int):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.fc1 = self._child(Linear(rng, f"{name}.fc1", in_dim, hidden))
        self.fc2 = self._child(Linear(rng, f"{name}.fc2", hidden, out_dim))

    def forward(self, ctx: Ctx, x: Tensor) -> Tensor:
        return self.fc2.forward(ctx, ad.relu(self.fc1.forward(ctx, x)))


class GaussianPrior(Module):
    """Learned global diagonal Gaussian (mean + log-variance)."""

    def __init__(self, name: str, dim: int):
        super().__init__(name)
        self.dim = dim
        self.mu = self._param("mu", np.zeros(dim, dtype=np.float32))
        self.logvar = self._param("logvar", np.zeros(dim, dtype=np.float32))


class SumMixer(Module):
    """Parameter-free additive mixer: Q_tot = sum_i q_i."""

    def __init__(self, name: str = "mixer"):
        super().__init__(name)

    def forward(self, ctx: Ctx, state, q: Tensor, detach_hyper: bool = False) -> Tensor:
        return ad.sum_(q, axis=1)


class MonotonicMixer(Module):
    """State-hypernetwork mixing with |weights| enforcing monotonicity."""

    def __init__(self, rng, name: str, n_agents: int, state_dim: int, cfg: NetsConfig):
        super().__init__(name)
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.layers = cfg.mixer_layers
        if self.layers == 1:
            self.hyper_w = self._child(Linear(rng, f"{name}.hyper_w", state_dim, n_agents))
            self.hyper_b = self._child(Linear(rng, f"{name}.hyper_b", state_dim, 1))
        else:
            embed = cfg.mixing_embed
            self.embed = embed
            self.hyper_w1 = self._child(Linear(rng, f"{name}.hyper_w1", state_dim, n_agents * embed))
            self.hyper_b1 = self._child(Linear(rng, f"{name}.hyper_b1", state_dim, embed))
            self.hyper_w2 = self._child(Linear(rng, f"{name}.hyper_w2", state_dim, embed))
            self.hyper_b2a = self._child(Linear(rng, f"{name}.hyper_b2a", state_dim, cfg.hypernet_hidden))
            self.hyper_b2b = self._child(Linear(rng, f"{name}.hyper_b2b", cfg.hypernet_hidden, 1))

    def forward(self, ctx: Ctx, state: Tensor, q: Tensor, detach_hyper: bool = False) -> Tensor:
        """state (B, state_dim), q (B, n_agents) -> Q_tot (B,).

        ``detach_hyper`` treats the generated weights/biases as constants so
        gradients reach only whatever feeds ``q``.
        """
        batch = q.shape[0]
        maybe = ad.stop_grad if detach_hyper else (lambda t: t)
        if self.layers == 1:
            w = maybe(ad.abs_(self.hyper_w.forward(ctx, state)))  # (B, n)
            b = maybe(self.hyper_b.forward(ctx, state))  # (B, 1)
            out = ad.add(ad.sum_(ad.mul(q, w), axis=1, keepdims=True), b)
            return ad.reshape(out, (batch,))
        w1 = maybe(ad.abs_(self.hyper_w1.forward(ctx, state)))  # (B, n*E)
        w1 = ad.reshape(w1, (batch, self.n_agents, self.embed))
        b1 = maybe(self.hyper_b1.forward(ctx, state))  # (B, E)
        q3 = ad.reshape(q, (batch, self.n_agents, 1))
        hidden = ad.elu(ad.add(ad.sum_(ad.mul(q3, w1), axis=1), b1))  # (B, E)
        w2 = maybe(ad.abs_(self.hyper_w2.forward(ctx, state)))  # (B, E)
        b2 = maybe(self.hyper_b2b.forward(ctx, ad.relu(self.hyper_b2a.forward(ctx, state))))  # (B, 1)
        out = ad.add(ad.sum_(ad.mul(hidden, w2), axis=1, keepdims=True), b2)
        return ad.reshape(out, (batch,))

    def agent_coefficients(self, state: np.ndarray) -> np.ndarray:
        """|w_i(s)| of the single-layer variant (the per-agent slopes)."""
        if self.layers != 1:
            raise NetsError("agent_coefficients is defined for the single-layer mixer")
        ctx = eval_ctx()
        return ad.abs_(self.hyper_w.forward(ctx, ctx.const(state))).data


class CentralMixer(Module):
    """Unrestricted feed-forward (state + chosen utilities) -> scalar."""

    def __init__(self, rng, name: str, n_agents: int, state_dim: int, hidden: int):
        super().__init__(name)
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.fc1 = self._child(Linear(rng, f"{name}.fc1", state_dim + n_agents, hidden))
        self.fc2 = self._child(Linear(rng, f"{name}.fc2", hidden, hidden))
        self.fc3 = self._child(Linear(rng, f"{name}.fc3", hidden, 1))

    def forward(self, ctx: Ctx, state: Tensor, q: Tensor) -> Tensor:
        x = ad.concat([state, q], axis=1)
        h = ad.relu(self.fc1.forward(ctx, x))
        h = ad.relu(self.fc2.forward(ctx, h))
        return ad.reshape(self.fc3.forward(ctx, h), (q.shape[0],))

    def forward_raw(self, state: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Tape-free evaluation for label computation (counterfactual sweeps)."""
        x = np.concatenate([state, q], axis=1)
        h = np.maximum(x @ self.fc1.W.data + self.fc1.b.data, 0.0)
        h = np.maximum(h @ self.fc2.W.data + self.fc2.b.data, 0.0)
        return (h @ self.fc3.W.data + self.fc3.b.data)[:, 0]


# ---------------------------------------------------------------------------
# Spec-level forward helpers
# ---------------------------------------------------------------------------


def utility_forward(net: RecurrentQNet, ctx: Ctx, obs, last_action, agent_id, message_in, hidden):
    """One recurrent utility step; rows may batch many (episode, agent) pairs."""
    parts = [obs, last_action, agent_id]
    if message_in is not None:
        parts.append(message_in)
    x = ad.concat([p if isinstance(p, Tensor) else ctx.const(p) for p in parts], axis=-1)
    return net.step(ctx, x, hidden)


def policy_forward(net: RecurrentQNet, ctx: Ctx, obs, last_action, agent_id, hidden, avail_mask):
    """One recurrent policy step -> (masked log-probs, hidden')."""
    avail = avail_mask.data if isinstance(avail_mask, Tensor) else np.asarray(avail_mask)
    if np.any(avail.sum(axis=-1) < 1):
        raise NetsError("policy_forward: some row has no available action")
    parts = [obs, last_action, agent_id]
    x = ad.concat([p if isinstance(p, Tensor) else ctx.const(p) for p in parts], axis=-1)
    logits, h_next = net.step(ctx, x, hidden)
    mask = ((1.0 - avail) * MASK_LOGIT).astype(np.float32)
    log_probs = ad.log_softmax(ad.add(logits, ctx.const(mask)), axis=-1)
    return log_probs, h_next


def aggregate_messages(messages: np.ndarray | Tensor, ctx: Ctx | None = None):
    """Mean over senders j != i: (B, n, M) -> (B, n, M) of incoming aggregates."""
    if isinstance(messages, Tensor):
        b, n, m = messages.shape
        if n < 2:
            raise NetsError("aggregate_messages needs at least 2 agents")
        total = ad.sum_(messages, axis=1, keepdims=True)  # (B, 1, M)
        others = ad.sub(ad.broadcast_to(total, (b, n, m)), messages)
        return ad.scalar_mul(others, 1.0 / (n - 1))
    messages = np.asarray(messages)
    n = messages.shape[-2]
    if n < 2:
        raise NetsError("aggregate_messages needs at least 2 agents")
    total = messages.sum(axis=-2, keepdims=True)
    return ((total - messages) / np.float32(n - 1)).astype(messages.dtype)


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------

ALGO_PAC = "pac"
ALGO_QMIX = "qmix"
ALGO_OW_QMIX = "ow_qmix"
ALGO_VDN = "vdn"
ALGOS = (ALGO_PAC, ALGO_QMIX, ALGO_OW_QMIX, ALGO_VDN)

# Module slots copied into the target bundle (the value side).
VALUE_SIDE = ("util", "mixer", "qstar_util", "central", "encoder")


class Bundle:
    """All trainable modules of one learner plus the log-temperature scalar."""

    def __init__(self, algo: str, env_info: EnvInfo, cfg: NetsConfig, rng: np.random.Generator,
                 with_qstar: bool, with_messages: bool, with_policy: bool, initial_logalpha: float):
        cfg.validate()
        self.algo = algo
        self.env_info = env_info
        self.cfg = cfg
        self.with_qstar = with_qstar
        self.with_messages = with_messages
        self.with_policy = with_policy
        n, a, o, s = env_info.n_agents, env_info.n_actions, env_info.obs_dim, env_info.state_dim
        base_in = o + a + n
        self.modules: dict[str, Module] = {}

        util_in = base_in + (cfg.message_dim if with_messages else 0)
        self.modules["util"] = RecurrentQNet(rng, "util", util_in, cfg.recurrent_hidden, a)
        if algo == ALGO_VDN:
            self.modules["mixer"] = SumMixer("mixer")
        else:
            self.modules["mixer"] = MonotonicMixer(rng, "mixer", n, s, cfg)
        if with_qstar:
            self.modules["qstar_util"] = RecurrentQNet(rng, "qstar_util", base_in, cfg.recurrent_hidden, a)
            self.modules["central"] = CentralMixer(rng, "central", n, s, cfg.central_hidden)
        if with_messages:
            self.modules["encoder"] = MLP(rng, "encoder", o, cfg.encoder_hidden, cfg.message_dim)
            self.modules["decoder"] = MLP(rng, "decoder", o + cfg.message_dim, cfg.decoder_hidden, a)
            self.modules["prior"] = GaussianPrior("prior", cfg.message_dim)
        if with_policy:
            self.modules["policy"] = RecurrentQNet(rng, "policy", base_in, cfg.recurrent_hidden, a)
            self.logalpha = Parameter("logalpha", np.array([initial_logalpha], dtype=np.float32))
        else:
            self.logalpha = None

    # -- access ---------------------------------------------------------------

    def __getitem__(self, slot: str) -> Module:
        return self.modules[slot]

    def __contains__(self, slot: str) -> bool:
        return slot in self.modules

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for slot in sorted(self.modules):
            out.extend(self.modules[slot].parameters())
        if self.logalpha is not None:
            out.append(self.logalpha)
        return out

    def network_parameters(self) -> list[Parameter]:
        """Everything optimized by the main loss (logalpha trains separately)."""
        return [p for p in self.parameters() if p.name != "logalpha"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_arrays(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for p in self.parameters():
            src = tensors[prefix + p.name]
            if src.shape != p.data.shape:
                raise NetsError(f"shape mismatch for {p.name}: have {p.data.shape}, file {src.shape}")
            p.data[...] = src

    @property
    def alpha(self) -> float:
        if self.logalpha is None:
            return 0.0
        return float(np.exp(self.logalpha.data[0]))


def make_bundle(algo: str, env_info: EnvInfo, cfg: NetsConfig, rng: np.random.Generator,
                no_qstar: bool = False, initial_logalpha: float = -0.07) -> Bundle:
    """Instantiate the module set an algorithm trains."""
    if algo not in ALGOS:
        raise NetsError(f"unknown algo '{algo}' (expected one of {', '.join(ALGOS)})")
    if algo == ALGO_PAC:
        return Bundle(algo, env_info, cfg, rng, with_qstar=not no_qstar,
                      with_messages=True, with_policy=True, initial_logalpha=initial_logalpha)
    if algo == ALGO_OW_QMIX:
        return Bundle(algo, env_info, cfg, rng, with_qstar=True,
                      with_messages=False, with_policy=False, initial_logalpha=initial_logalpha)
    return Bundle(algo, env_info, cfg, rng, with_qstar=False,
                  with_messages=False, with_policy=False, initial_logalpha=initial_logalpha)


def make_target(bundle: Bundle) -> Bundle:
    """A value-side copy (utilities, mixers, encoder) used for bootstrapping."""
    target = Bundle.__new__(Bundle)
    target.algo = bundle.algo
    target.env_info = bundle.env_info
    target.cfg = bundle.cfg
    target.with_qstar = bundle.with_qstar
    target.with_messages = bundle.with_messages
    target.with_policy = False
    target.logalpha = None
    rng = np.random.default_rng(0)  # shapes only; weights copied below
    target.modules = {}
    for slot in VALUE_SIDE:
        if slot not in bundle.modules:
            continue
        src = bundle.modules[slot]
        if isinstance(src, SumMixer):
            target.modules[slot] = SumMixer(src.name)
        elif isinstance(src, MonotonicMixer):
            target.modules[slot] = MonotonicMixer(rng, src.name, src.n_agents, src.state_dim, bundle.cfg)
        elif isinstance(src, CentralMixer):
            target.modules[slot] = CentralMixer(rng, src.name, src.n_agents, src.state_dim, bundle.cfg.central_hidden)
        elif isinstance(src, MLP):
            target.modules[slot] = MLP(rng, src.name, src.in_dim, bundle.cfg.encoder_hidden, src.out_dim)
        elif isinstance(src, RecurrentQNet):
            target.modules[slot] = RecurrentQNet(rng, src.name, src.in_dim, src.hidden, src.out_dim)
        else:  # pragma: no cover - exhaustive over module kinds
            raise NetsError(f"cannot mirror module {src.name}")
    sync_targets(bundle, target)
    return target


def sync_targets(online: Bundle, target: Bundle) -> None:
    """Exact copy of the value-side parameters into the target bundle."""
    for slot, module in target.modules.items():
        for src, dst in zip(online.modules[slot].parameters(), module.parameters()):
            dst.data[...] = src.data
