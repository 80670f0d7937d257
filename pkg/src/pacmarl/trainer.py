"""Training outer loop: rollouts, episodic replay, schedules, evaluation,
metrics logging, checkpointing, and the matrix-game analysis report.

One trainer thread owns the parameters and optimizer state. Rollouts come
either from an inline loop (``workers == 1``, the reproducibility baseline)
or from worker threads, each holding a private environment, an independent
RNG stream, and a parameter snapshot refreshed between episodes. Episode
collection overlaps evaluation and bookkeeping; optimizer steps hold the
parameter lock so snapshots never observe half-written arrays.
"""

from __future__ import annotations

import json
import queue
import struct
import threading
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .baselines import QLearner
from .buffer import EpisodeBatch, ReplayBuffer
from .config import ALGOS, TrainConfig, config_to_text
from .envs import EnvInfo
from .nets import (
    Bundle,
    NetsConfig,
    aggregate_messages,
    eval_ctx,
    make_bundle,
    make_target,
    policy_forward,
    utility_forward,
)
from .pac import PACLearner, agent_id_rows, masked_argmax

# Named RNG streams, all derived from the run seed. Rollout streams are keyed
# by worker id so worker sets draw independently.
STREAM_INIT, STREAM_NOISE, STREAM_SAMPLE, STREAM_EVAL, STREAM_ROLLOUT = range(5)


def stream_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def rollout_rng(seed: int, worker_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed ^ worker_id, STREAM_ROLLOUT]))


def epsilon_at(cfg: TrainConfig, env_steps: int) -> float:
    """Piecewise-linear anneal from epsilon_start to epsilon_end, then flat."""
    frac = min(1.0, env_steps / cfg.epsilon_anneal_steps)
    return cfg.epsilon_start - (cfg.epsilon_start - cfg.epsilon_end) * frac


def make_learner(cfg: TrainConfig, info: EnvInfo, init_rng: np.random.Generator,
                 noise_rng: np.random.Generator):
    if cfg.algo == "pac":
        return PACLearner(cfg, info, init_rng, noise_rng)
    return QLearner(cfg, info, init_rng, noise_rng)


def resolve_eval_action_source(cfg: TrainConfig) -> str:
    """How evaluation episodes pick actions.

    Utility-only learners act greedily on their utilities. The policy learner
    defaults to value-greedy action selection on the one-step matrix game
    (its message-conditioned utilities can exploit state knowledge that the
    decentralized policies cannot represent) and to the learned policy on
    sequential environments.
    """
    if cfg.algo != "pac":
        return "utility"
    if cfg.eval_action_source != "auto":
        return cfg.eval_action_source
    return "value" if cfg.env_name() == "matrix_game" else "policy"


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


def rollout_episode(env, bundle: Bundle, epsilon: float, rng: np.random.Generator,
                    training: bool = True, action_source: str | None = None):
    """Collect one episode; returns (EpisodeBatch with B=1, stats dict).

    Action selection by source:
      policy   epsilon-mix of uniform-over-available and sampling from pi
               (training) or the policy argmax (evaluation);
      value    greedy on the message-conditioned utilities (messages are the
               encoder means, so evaluation is deterministic given weights);
      utility  epsilon-greedy on the utilities (TD baselines).
    """
    info = env.info
    n, A = info.n_agents, info.n_actions
    if action_source is None:
        action_source = "policy" if bundle.with_policy else "utility"
    if action_source == "policy" and not bundle.with_policy:
        raise ValueError("bundle has no policy head; use utility-based action selection")

    ctx = eval_ctx()
    ids = agent_id_rows(1, n)
    state, obs, avail = env.reset(seed=rng)
    states, obs_steps, avails = [state], [obs], [avail]
    actions, rewards, terms = [], [], []
    acting_net = bundle["policy"] if action_source == "policy" else bundle["util"]
    hidden = ctx.const(acting_net.init_hidden(n))
    last_action = np.zeros((n, A), dtype=np.float32)
    ep_return, won, captures = 0.0, False, 0

    for _ in range(info.episode_limit):
        if action_source == "policy":
            log_probs, hidden = policy_forward(bundle["policy"], ctx, obs, last_action,
                                               ids, hidden, avail)
            probs = np.exp(log_probs.data.astype(np.float64)) * avail
            probs /= probs.sum(axis=-1, keepdims=True)
            if training:
                acts = np.empty(n, dtype=np.int64)
                for i in range(n):
                    if rng.uniform() < epsilon:
                        acts[i] = rng.choice(np.flatnonzero(avail[i] > 0))
                    else:
                        acts[i] = rng.choice(A, p=probs[i])
            else:
                acts = masked_argmax(log_probs.data, avail)
        else:
            message = None
            if action_source == "value":
                mu = bundle["encoder"].forward(ctx, ctx.const(obs))
                message = aggregate_messages(mu.data[None])[0]
            q, hidden = utility_forward(bundle["util"], ctx, obs, last_action, ids,
                                        message, hidden)
            greedy = masked_argmax(q.data, avail)
            if training and epsilon > 0.0:
                acts = np.empty(n, dtype=np.int64)
                for i in range(n):
                    if rng.uniform() < epsilon:
                        acts[i] = rng.choice(np.flatnonzero(avail[i] > 0))
                    else:
                        acts[i] = greedy[i]
            else:
                acts = greedy

        result = env.step([int(a) for a in acts])
        actions.append(np.asarray(acts, dtype=np.int64))
        rewards.append(result.reward)
        terms.append(1.0 if result.terminated else 0.0)
        states.append(result.state)
        obs_steps.append(result.obs)
        avails.append(result.avail)
        ep_return += result.reward
        won = bool(result.info.get("won", False))
        captures = int(result.info.get("captures", 0))
        obs, avail = result.obs, result.avail
        last_action = np.zeros((n, A), dtype=np.float32)
        last_action[np.arange(n), acts] = 1.0
        if result.terminated or result.truncated:
            break

    T = len(actions)
    batch = EpisodeBatch(
        obs=np.asarray(obs_steps, dtype=np.float32)[:, None],
        state=np.asarray(states, dtype=np.float32)[:, None],
        avail=np.asarray(avails, dtype=np.float32)[:, None],
        actions=np.asarray(actions, dtype=np.int64)[:, None],
        reward=np.asarray(rewards, dtype=np.float32)[:, None],
        terminated=np.asarray(terms, dtype=np.float32)[:, None],
        filled=np.ones((T, 1), dtype=np.float32),
    )
    stats = {"return": float(ep_return), "length": T, "won": won, "captures": captures}
    return batch, stats


def evaluate(env, bundle: Bundle, n_episodes: int, seed: int,
             action_source: str | None = None) -> dict:
    """Greedy-mode rollouts; mean/std return plus win rate where defined."""
    returns, wins, caps = [], [], []
    for k in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_EVAL, k]))
        _, stats = rollout_episode(env, bundle, 0.0, rng, training=False,
                                   action_source=action_source)
        returns.append(stats["return"])
        wins.append(1.0 if stats["won"] else 0.0)
        caps.append(stats["captures"])
    if not returns:
        return {"episodes": 0, "return_mean": None, "return_std": None,
                "win_rate": None, "captures_mean": None}
    return {
        "episodes": n_episodes,
        "return_mean": float(np.mean(returns)),
        "return_std": float(np.std(returns)),
        "win_rate": float(np.mean(wins)) if env.info.has_win_condition else None,
        "captures_mean": float(np.mean(caps)) if env.info.has_win_condition else None,
    }


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

METRIC_COLUMNS = (
    "env_steps", "episodes", "test_return_mean", "test_return_std", "test_win_rate",
    "capture_count", "loss_lp", "loss_ca", "loss_ib", "loss_qstar", "loss_qtot",
    "loss_alpha", "alpha", "policy_entropy", "epsilon", "wall_clock_s",
)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


class MetricsWriter:
    """Append-only CSV with a fixed column set; unavailable cells stay empty."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text(",".join(METRIC_COLUMNS) + "\n")

    def row(self, **values) -> None:
        unknown = set(values) - set(METRIC_COLUMNS)
        if unknown:
            raise ValueError(f"unknown metric columns: {sorted(unknown)}")
        line = ",".join(_format_cell(values.get(col)) for col in METRIC_COLUMNS)
        with open(self.path, "a") as f:
            f.write(line + "\n")


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into row dicts (floats; empty cells -> None)."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append({k: (None if c == "" else float(c)) for k, c in zip(header, cells)})
    return rows


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PACCKPT1"


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or structurally invalid checkpoint file."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """magic | u32 count | per tensor: u16 name len, name, u8 rank, u32 dims, f32 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            # note: order="C" (not ascontiguousarray, which promotes 0-d to 1-d)
            arr = np.asarray(tensors[name], dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"tensor rank {arr.ndim} out of range for '{name}'")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, count: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise CheckpointError(f"truncated checkpoint: wanted {count} bytes, got {len(data)}")
    return data


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = _read_exact(f, 4 * size)
            out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after the last tensor")
    return out


_META_INFO_FIELDS = ("n_agents", "n_actions", "obs_dim", "state_dim", "episode_limit",
                     "has_win_condition")


@dataclass
class Checkpoint:
    algo: str
    info: EnvInfo
    bundle: Bundle
    target: Bundle
    opt_tensors: dict


def checkpoint_tensors(learner) -> dict[str, np.ndarray]:
    cfg, info = learner.cfg, learner.info
    out = {}
    for name, arr in learner.bundle.state_arrays().items():
        out[name] = arr
    for name, arr in learner.target.state_arrays().items():
        out["target/" + name] = arr
    out.update(learner.opt.state_tensors("opt"))
    if getattr(learner, "alpha_opt", None) is not None:
        out.update(learner.alpha_opt.state_tensors("opt_alpha"))
    out["meta/algo"] = np.array([ALGOS.index(cfg.algo)], dtype=np.float32)
    out["meta/no_qstar"] = np.array([float(cfg.no_qstar)], dtype=np.float32)
    for name in _META_INFO_FIELDS:
        out[f"meta/info/{name}"] = np.array([float(getattr(info, name))], dtype=np.float32)
    for f in fields(NetsConfig):
        out[f"meta/nets/{f.name}"] = np.array([float(getattr(cfg.nets, f.name))],
                                              dtype=np.float32)
    return out


def save_checkpoint(path, learner) -> None:
    save_tensors(path, checkpoint_tensors(learner))


def load_checkpoint(path) -> Checkpoint:
    tensors = load_tensors(path)

    def meta(name):
        key = f"meta/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing metadata entry '{key}'")
        return float(tensors[key][0])

    algo = ALGOS[int(meta("algo"))]
    info = EnvInfo(
        n_agents=int(meta("info/n_agents")),
        n_actions=int(meta("info/n_actions")),
        obs_dim=int(meta("info/obs_dim")),
        state_dim=int(meta("info/state_dim")),
        episode_limit=int(meta("info/episode_limit")),
        has_win_condition=bool(meta("info/has_win_condition")),
    )
    nets = NetsConfig(**{f.name: int(meta(f"nets/{f.name}")) for f in fields(NetsConfig)})
    bundle = make_bundle(algo, info, nets, np.random.default_rng(0),
                         no_qstar=bool(meta("no_qstar")))
    try:
        bundle.load_state_arrays(tensors)
        target = make_target(bundle)
        target.load_state_arrays(tensors, prefix="target/")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from exc
    opt_tensors = {k: v for k, v in tensors.items()
                   if k.startswith("opt/") or k.startswith("opt_alpha/")}
    return Checkpoint(algo=algo, info=info, bundle=bundle, target=target,
                      opt_tensors=opt_tensors)


def clone_bundle(bundle: Bundle) -> Bundle:
    """Structural copy with the same parameter values (worker snapshots)."""
    no_qstar = bundle.algo == "pac" and not bundle.with_qstar
    out = make_bundle(bundle.algo, bundle.env_info, bundle.cfg, np.random.default_rng(0),
                      no_qstar=no_qstar)
    out.load_state_arrays(bundle.state_arrays())
    return out


# ---------------------------------------------------------------------------
# Matrix-game report
# ---------------------------------------------------------------------------


def _grid_lines(title: str, grid: np.ndarray, margins: np.ndarray | None) -> list[str]:
    A = grid.shape[1]
    head = "        " + "".join(f"   u2={j}  " for j in range(A))
    if margins is not None:
        head += " |   q1"
    lines = [f"# {title}", "#" + head[1:]]
    for i in range(grid.shape[0]):
        row = f"#   u1={i}" + "".join(f" {grid[i, j]:8.3f}" for j in range(A))
        if margins is not None:
            row += f" | {margins[0, i]:6.3f}"
        lines.append(row)
    if margins is not None:
        lines.append("#   q2  " + "".join(f" {margins[1, j]:8.3f}" for j in range(A)))
    return lines


def matrix_game_report(bundle: Bundle, env) -> str:
    """Per state: the joint-value grids, per-agent utilities, and greedy action.

    Human-readable tables are comment lines; bare lines form a machine block of
    ``key = value`` pairs with JSON values (same syntax as config files).
    """
    info = env.info
    n, A = info.n_agents, info.n_actions
    payoffs = env.config.payoffs()
    ctx = eval_ctx()
    ids = agent_id_rows(1, n)
    last = np.zeros((n, A), dtype=np.float32)
    human = ["# matrix game report", f"# algo = {bundle.algo}"]
    machine = [f"algo = {json.dumps(bundle.algo)}", f"states = {payoffs.shape[0]}",
               f"n_actions = {A}"]

    for s_idx in range(payoffs.shape[0]):
        state = np.zeros((1, info.state_dim), dtype=np.float32)
        state[0, s_idx] = 1.0
        obs = np.zeros((n, info.obs_dim), dtype=np.float32)
        obs[0, 0] = 1.0  # agent 1 cannot see the state
        obs[1, s_idx] = 1.0
        message = None
        if bundle.with_messages:
            mu = bundle["encoder"].forward(ctx, ctx.const(obs))
            message = aggregate_messages(mu.data[None])[0]
        q, _ = utility_forward(bundle["util"], ctx, obs, last, ids, message,
                               ctx.const(bundle["util"].init_hidden(n)))
        q = q.data  # (n, A)

        joint = np.array([[q[0, u1], q[1, u2]] for u1 in range(A) for u2 in range(A)],
                         dtype=np.float32)
        state_rows = np.repeat(state, A * A, axis=0)
        qtot = bundle["mixer"].forward(ctx, ctx.const(state_rows),
                                       ctx.const(joint)).data.reshape(A, A)
        greedy = (int(q[0].argmax()), int(q[1].argmax()))
        payoff_at = float(payoffs[s_idx, greedy[0], greedy[1]])

        tag = f"s{s_idx + 1}"
        human.append("#")
        human += _grid_lines(f"{tag}: Q_tot(s, u1, u2) with per-agent utilities", qtot, q)
        human.append(f"#   greedy joint action: (u1={greedy[0]}, u2={greedy[1]})"
                     f" -> payoff {payoff_at:g}")
        machine.append(f"{tag}.qtot = {json.dumps([[round(float(v), 6) for v in r] for r in qtot])}")
        machine.append(f"{tag}.util = {json.dumps([[round(float(v), 6) for v in r] for r in q])}")
        machine.append(f"{tag}.greedy = {json.dumps(list(greedy))}")
        machine.append(f"{tag}.greedy_payoff = {json.dumps(payoff_at)}")
        machine.append(f"{tag}.payoff = {json.dumps([[float(v) for v in r] for r in payoffs[s_idx]])}")

        if "central" in bundle:
            qs, _ = utility_forward(bundle["qstar_util"], ctx, obs, last, ids, None,
                                    ctx.const(bundle["qstar_util"].init_hidden(n)))
            qs = qs.data
            joint_s = np.array([[qs[0, u1], qs[1, u2]] for u1 in range(A) for u2 in range(A)],
                               dtype=np.float32)
            qstar = bundle["central"].forward_raw(state_rows, joint_s).reshape(A, A)
            human.append("#")
            human += _grid_lines(f"{tag}: Qhat*(s, u1, u2)", qstar, None)
            machine.append(
                f"{tag}.qstar = {json.dumps([[round(float(v), 6) for v in r] for r in qstar])}")

    return "\n".join(human) + "\n\n" + "\n".join(machine) + "\n"


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _episode_stream(cfg: TrainConfig, learner, param_lock: threading.Lock,
                    steps_done, stop: threading.Event):
    """Yield (EpisodeBatch, stats) forever; inline for one worker, threaded
    with private envs and parameter snapshots otherwise."""
    source = "policy" if cfg.algo == "pac" else "utility"
    if cfg.workers == 1:
        env = cfg.make_env_instance()
        rng = rollout_rng(cfg.seed, 0)
        while True:
            yield rollout_episode(env, learner.bundle, epsilon_at(cfg, steps_done()),
                                  rng, training=True, action_source=source)
        return

    out: queue.Queue = queue.Queue(maxsize=2 * cfg.workers)

    def work(worker_id: int) -> None:
        env = cfg.make_env_instance()
        rng = rollout_rng(cfg.seed, worker_id)
        snapshot = clone_bundle(learner.bundle)
        while not stop.is_set():
            with param_lock:
                snapshot.load_state_arrays(learner.bundle.state_arrays())
            item = rollout_episode(env, snapshot, epsilon_at(cfg, steps_done()), rng,
                                   training=True, action_source=source)
            while not stop.is_set():
                try:
                    out.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    threads = [threading.Thread(target=work, args=(w,), daemon=True)
               for w in range(cfg.workers)]
    for t in threads:
        t.start()
    try:
        while True:
            yield out.get()
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5.0)


def train(cfg: TrainConfig, out_dir=None) -> dict:
    """Run one experiment to completion; returns a summary of the final state."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config_to_text(cfg))

    env = cfg.make_env_instance()
    info = env.info
    learner = make_learner(cfg, info, stream_rng(cfg.seed, STREAM_INIT),
                           stream_rng(cfg.seed, STREAM_NOISE))
    learner.sync()
    sample_rng = stream_rng(cfg.seed, STREAM_SAMPLE)
    buffer = ReplayBuffer(cfg.buffer_capacity, info.episode_limit, info.n_agents,
                          info.n_actions, info.obs_dim, info.state_dim)
    writer = MetricsWriter(out / "metrics.csv")
    eval_source = resolve_eval_action_source(cfg)

    env_steps = 0
    episodes = 0
    last_update: dict = {}
    started = time.perf_counter()
    param_lock = threading.Lock()
    stop = threading.Event()

    def shared_cells():
        base = {
            "env_steps": env_steps, "episodes": episodes,
            "epsilon": epsilon_at(cfg, env_steps),
            "wall_clock_s": time.perf_counter() - started,
        }
        for key in ("loss_lp", "loss_ca", "loss_ib", "loss_qstar", "loss_qtot",
                    "loss_alpha", "alpha", "policy_entropy"):
            if key in last_update and last_update[key] is not None:
                base[key] = last_update[key]
        return base

    last_eval_at = -1
    last_eval: dict = {}

    def run_eval():
        nonlocal last_eval_at, last_eval
        last_eval = evaluate(env, learner.bundle, cfg.eval_episodes, cfg.seed,
                             action_source=eval_source)
        last_eval_at = env_steps
        writer.row(test_return_mean=last_eval["return_mean"],
                   test_return_std=last_eval["return_std"],
                   test_win_rate=last_eval["win_rate"],
                   capture_count=last_eval["captures_mean"],
                   **shared_cells())

    next_eval = 0
    next_ckpt = cfg.checkpoint_interval if cfg.checkpoint_interval > 0 else None
    stream = _episode_stream(cfg, learner, param_lock, lambda: env_steps, stop)
    try:
        while env_steps < cfg.total_train_steps:
            if env_steps >= next_eval:
                run_eval()
                next_eval = (env_steps // cfg.eval_interval + 1) * cfg.eval_interval
            episode, stats = next(stream)
            buffer.add(episode)
            env_steps += stats["length"]
            episodes += 1
            if buffer.can_sample(cfg.batch_size):
                for _ in range(cfg.updates_per_episode):
                    batch = buffer.sample(cfg.batch_size, sample_rng)
                    with param_lock:
                        last_update = learner.update(batch)
            if episodes % cfg.target_update_interval == 0:
                with param_lock:
                    learner.sync()
            if episodes % cfg.log_interval == 0:
                writer.row(**shared_cells())
            if next_ckpt is not None and env_steps >= next_ckpt:
                save_checkpoint(out / f"step_{env_steps}.ckpt", learner)
                next_ckpt += cfg.checkpoint_interval
    finally:
        stop.set()
        stream.close()

    if last_eval_at != env_steps:
        run_eval()
    save_checkpoint(out / "final.ckpt", learner)
    if cfg.env_name() == "matrix_game":
        (out / "report.txt").write_text(matrix_game_report(learner.bundle, env))
    return {
        "out": str(out),
        "env_steps": env_steps,
        "episodes": episodes,
        "evaluation": last_eval,
        "metrics_path": str(out / "metrics.csv"),
        "checkpoint_path": str(out / "final.ckpt"),
    }
