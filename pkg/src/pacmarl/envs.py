"""Cooperative multi-agent environments behind one shared-episode contract.

Two tasks:

* ``MatrixGame`` — a two-state, two-agent, one-step cooperative game whose
  payoff optimum sits at a different joint action in each state while agent 1
  cannot observe the state. Monotonic per-agent factorizations provably lock
  onto a single state's optimum here, which is what the framework's
  counterfactual machinery is meant to fix.
* ``PredatorPrey`` — a grid capture task: predators move/catch, two adjacent
  catchers remove a prey for +capture_reward, lone catch attempts add the
  miscapture penalty, prey drift uniformly at random.

Both expose: ``info`` (extents), ``reset(seed) -> (state, obs, avail)`` and
``step(actions) -> StepResult``. All randomness comes from the generator
passed at reset, so identical seeds replay identical episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EnvConfigError(ValueError):
    """Environment construction parameters are invalid."""


class UnavailableActionError(ValueError):
    """An agent stepped an action its availability mask forbids."""

    def __init__(self, agent: int, action: int):
        super().__init__(f"agent {agent} chose unavailable action {action}")
        self.agent = agent
        self.action = action


@dataclass(frozen=True)
class EnvInfo:
    """Fixed extents of an environment instance."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    has_win_condition: bool


@dataclass
class StepResult:
    """Outcome of one joint step; reward is shared by every agent."""

    reward: float
    terminated: bool
    truncated: bool
    state: np.ndarray
    obs: np.ndarray  # (n_agents, obs_dim)
    avail: np.ndarray  # (n_agents, n_actions) in {0, 1}
    info: dict = field(default_factory=dict)


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


# ---------------------------------------------------------------------------
# Matrix game
# ---------------------------------------------------------------------------

PAYOFF_S1 = np.array([[4, -2, -2], [-2, 0, 0], [-2, 0, 0]], dtype=np.float32)
PAYOFF_S2 = np.array([[-2, 0, 0], [4, -2, -2], [-2, 0, 0]], dtype=np.float32)


@dataclass
class MatrixGameConfig:
    payoff_s1: tuple = tuple(map(tuple, PAYOFF_S1.tolist()))
    payoff_s2: tuple = tuple(map(tuple, PAYOFF_S2.tolist()))
    episode_limit: int = 1

    def payoffs(self) -> np.ndarray:
        arr = np.stack(
            [np.asarray(self.payoff_s1, dtype=np.float32), np.asarray(self.payoff_s2, dtype=np.float32)]
        )
        if arr.shape != (2, 3, 3) or not np.all(np.isfinite(arr)):
            raise EnvConfigError(f"matrix game payoffs must be finite 3x3 grids, got shape {arr.shape}")
        return arr


class MatrixGame:
    """Two-state cooperative matrix game; agent 1 is state-blind.

    State is a one-hot over {s1, s2}, drawn uniformly at reset (and after each
    intermediate step in multi-step variants). Agent 1 observes the constant
    [1, 0]; agent 2 observes the state one-hot. Episodes terminate at
    episode_limit (default: one step).
    """

    N_AGENTS = 2
    N_ACTIONS = 3

    def __init__(self, config: MatrixGameConfig | None = None):
        self.config = config or MatrixGameConfig()
        if self.config.episode_limit < 1:
            raise EnvConfigError("episode_limit must be >= 1")
        self._payoffs = self.config.payoffs()
        self.info = EnvInfo(
            n_agents=self.N_AGENTS,
            n_actions=self.N_ACTIONS,
            obs_dim=2,
            state_dim=2,
            episode_limit=self.config.episode_limit,
            has_win_condition=False,
        )
        self._state_idx = 0
        self._t = 0
        self._rng = np.random.default_rng(0)

    # -- episode API --------------------------------------------------------

    def reset(self, seed=0):
        self._rng = _as_generator(seed)
        self._t = 0
        self._state_idx = int(self._rng.integers(0, 2))
        return self.get_state(), self.get_obs(), self.get_avail()

    def get_state(self) -> np.ndarray:
        state = np.zeros(2, dtype=np.float32)
        state[self._state_idx] = 1.0
        return state

    def get_obs(self) -> np.ndarray:
        obs = np.zeros((2, 2), dtype=np.float32)
        obs[0, 0] = 1.0  # agent 1: constant view, identical in both states
        obs[1, self._state_idx] = 1.0
        return obs

    def get_avail(self) -> np.ndarray:
        return np.ones((self.N_AGENTS, self.N_ACTIONS), dtype=np.float32)

    def step(self, actions: Sequence[int]) -> StepResult:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.N_AGENTS,):
            raise UnavailableActionError(int(actions.size > 0), -1)
        for i, a in enumerate(actions):
            if not 0 <= a < self.N_ACTIONS:
                raise UnavailableActionError(i, int(a))
        reward = float(self._payoffs[self._state_idx, actions[0], actions[1]])
        self._t += 1
        terminated = self._t >= self.config.episode_limit
        if not terminated:
            self._state_idx = int(self._rng.integers(0, 2))
        return StepResult(
            reward=reward,
            terminated=terminated,
            truncated=False,
            state=self.get_state(),
            obs=self.get_obs(),
            avail=self.get_avail(),
        )


# ---------------------------------------------------------------------------
# Predator-prey
# ---------------------------------------------------------------------------

# Action order: stay, N, S, W, E, catch.
STAY, NORTH, SOUTH, WEST, EAST, CATCH = range(6)
_MOVE_DELTAS = {NORTH: (-1, 0), SOUTH: (1, 0), WEST: (0, -1), EAST: (0, 1)}
_ADJACENT = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class PredatorPreyConfig:
    width: int = 10
    height: int = 10
    n_predators: int = 8
    n_prey: int = 8
    obs_window: int = 5
    capture_reward: float = 10.0
    miscapture_penalty: float = 0.0
    episode_limit: int = 200

    def validate(self) -> None:
        if self.obs_window % 2 != 1 or self.obs_window < 1:
            raise EnvConfigError(f"obs_window must be odd and positive, got {self.obs_window}")
        if self.n_predators < 2 or self.n_prey < 1:
            raise EnvConfigError("need at least 2 predators and 1 prey")
        if self.n_predators + self.n_prey > self.width * self.height:
            raise EnvConfigError(
                f"{self.n_predators}+{self.n_prey} agents cannot fit a {self.width}x{self.height} grid"
            )
        if self.episode_limit < 1:
            raise EnvConfigError("episode_limit must be >= 1")


class PredatorPrey:
    """Grid pursuit with paired captures.

    Per step, in order: predators move (random permutation; moving into a cell
    that became occupied fails silently), captures resolve on pre-removal
    adjacency (a prey with >= 2 adjacent catchers is captured together with its
    two lowest-indexed adjacent catchers, +capture_reward), every unconsumed
    catcher adjacent only to non-captured prey adds the miscapture penalty
    once, then live prey move uniformly over {stay} + free adjacent cells in
    index order. The episode terminates when every predator has been removed
    (a "win": captures == n_predators // 2) and truncates at episode_limit.

    Observation: 2 channels x window x window floats centered on the agent
    (channel 0 = predators, channel 1 = prey; out-of-grid -1, occupied 1,
    empty 0); removed agents observe all zeros and may only stay. State:
    both channels over the full grid, flattened.
    """

    N_ACTIONS = 6

    def __init__(self, config: PredatorPreyConfig | None = None):
        self.config = config or PredatorPreyConfig()
        self.config.validate()
        c = self.config
        self.info = EnvInfo(
            n_agents=c.n_predators,
            n_actions=self.N_ACTIONS,
            obs_dim=2 * c.obs_window * c.obs_window,
            state_dim=2 * c.width * c.height,
            episode_limit=c.episode_limit,
            has_win_condition=True,
        )
        self._rng = np.random.default_rng(0)
        self._t = 0
        self.predator_pos = np.zeros((c.n_predators, 2), dtype=np.int64)
        self.prey_pos = np.zeros((c.n_prey, 2), dtype=np.int64)
        self.predator_alive = np.zeros(c.n_predators, dtype=bool)
        self.prey_alive = np.zeros(c.n_prey, dtype=bool)
        self.captures = 0

    # -- episode API --------------------------------------------------------

    def reset(self, seed=0):
        c = self.config
        self._rng = _as_generator(seed)
        self._t = 0
        self.captures = 0
        cells = self._rng.choice(c.width * c.height, size=c.n_predators + c.n_prey, replace=False)
        rows, cols = cells // c.width, cells % c.width
        self.predator_pos = np.stack([rows[: c.n_predators], cols[: c.n_predators]], axis=1)
        self.prey_pos = np.stack([rows[c.n_predators:], cols[c.n_predators:]], axis=1)
        self.predator_alive = np.ones(c.n_predators, dtype=bool)
        self.prey_alive = np.ones(c.n_prey, dtype=bool)
        return self.get_state(), self.get_obs(), self.get_avail()

    # -- helpers --------------------------------------------------------------

    def _occupancy(self) -> np.ndarray:
        """Grid of 0/1 occupancy over live predators and prey."""
        c = self.config
        grid = np.zeros((c.height, c.width), dtype=bool)
        live_pred = self.predator_pos[self.predator_alive]
        live_prey = self.prey_pos[self.prey_alive]
        grid[live_pred[:, 0], live_pred[:, 1]] = True
        grid[live_prey[:, 0], live_prey[:, 1]] = True
        return grid

    def _in_grid(self, r: int, q: int) -> bool:
        return 0 <= r < self.config.height and 0 <= q < self.config.width

    def _adjacent_prey(self, r: int, q: int) -> list[int]:
        out = []
        for j in range(self.config.n_prey):
            if not self.prey_alive[j]:
                continue
            pr, pq = self.prey_pos[j]
            if abs(pr - r) + abs(pq - q) == 1:
                out.append(j)
        return out

    def get_avail(self) -> np.ndarray:
        c = self.config
        avail = np.zeros((c.n_predators, self.N_ACTIONS), dtype=np.float32)
        avail[:, STAY] = 1.0
        occ = self._occupancy()
        for i in range(c.n_predators):
            if not self.predator_alive[i]:
                continue
            r, q = self.predator_pos[i]
            for action, (dr, dq) in _MOVE_DELTAS.items():
                nr, nq = r + dr, q + dq
                if self._in_grid(nr, nq) and not occ[nr, nq]:
                    avail[i, action] = 1.0
            if self._adjacent_prey(r, q):
                avail[i, CATCH] = 1.0
        return avail

    def get_state(self) -> np.ndarray:
        c = self.config
        grid = np.zeros((2, c.height, c.width), dtype=np.float32)
        live_pred = self.predator_pos[self.predator_alive]
        live_prey = self.prey_pos[self.prey_alive]
        grid[0, live_pred[:, 0], live_pred[:, 1]] = 1.0
        grid[1, live_prey[:, 0], live_prey[:, 1]] = 1.0
        return grid.reshape(-1)

    def get_obs(self) -> np.ndarray:
        c = self.config
        half = c.obs_window // 2
        full = np.full((2, c.height + 2 * half, c.width + 2 * half), -1.0, dtype=np.float32)
        state = np.zeros((2, c.height, c.width), dtype=np.float32)
        live_pred = self.predator_pos[self.predator_alive]
        live_prey = self.prey_pos[self.prey_alive]
        state[0, live_pred[:, 0], live_pred[:, 1]] = 1.0
        state[1, live_prey[:, 0], live_prey[:, 1]] = 1.0
        full[:, half : half + c.height, half : half + c.width] = state
        obs = np.zeros((c.n_predators, self.info.obs_dim), dtype=np.float32)
        for i in range(c.n_predators):
            if not self.predator_alive[i]:
                continue
            r, q = self.predator_pos[i]
            window = full[:, r : r + c.obs_window, q : q + c.obs_window]
            obs[i] = window.reshape(-1)
        return obs

    # -- dynamics ---------------------------------------------------------------

    def step(self, actions: Sequence[int]) -> StepResult:
        c = self.config
        actions = np.asarray(actions, dtype=np.int64)
        avail = self.get_avail()
        for i in range(c.n_predators):
            a = int(actions[i])
            if not 0 <= a < self.N_ACTIONS or avail[i, a] == 0.0:
                raise UnavailableActionError(i, a)

        reward = 0.0

        # 1. Predators move in a random permutation; blocked moves fail silently.
        occ = self._occupancy()
        for i in self._rng.permutation(c.n_predators):
            if not self.predator_alive[i] or int(actions[i]) not in _MOVE_DELTAS:
                continue
            dr, dq = _MOVE_DELTAS[int(actions[i])]
            r, q = self.predator_pos[i]
            nr, nq = r + dr, q + dq
            if self._in_grid(nr, nq) and not occ[nr, nq]:
                occ[r, q] = False
                occ[nr, nq] = True
                self.predator_pos[i] = (nr, nq)

        # 2. Captures on pre-removal adjacency.
        catchers = [
            i for i in range(c.n_predators) if self.predator_alive[i] and int(actions[i]) == CATCH
        ]
        adjacency = {i: self._adjacent_prey(*self.predator_pos[i]) for i in catchers}
        consumed: set[int] = set()
        captured: set[int] = set()
        for j in range(c.n_prey):
            if not self.prey_alive[j]:
                continue
            adjacent = [i for i in catchers if i not in consumed and j in adjacency[i]]
            if len(adjacent) >= 2:
                captured.add(j)
                consumed.update(adjacent[:2])  # lowest-indexed pair goes out with the prey
                reward += c.capture_reward

        # 3. Miscapture penalties for unconsumed catchers near surviving prey only.
        for i in catchers:
            if i in consumed:
                continue
            adj = adjacency[i]
            if adj and all(j not in captured for j in adj):
                reward += c.miscapture_penalty

        for j in captured:
            self.prey_alive[j] = False
        for i in consumed:
            self.predator_alive[i] = False
        self.captures += len(captured)

        # 4. Prey move uniformly over stay + free adjacent cells, index order.
        occ = self._occupancy()
        for j in range(c.n_prey):
            if not self.prey_alive[j]:
                continue
            r, q = self.prey_pos[j]
            options = [(r, q)]
            for dr, dq in _ADJACENT:
                nr, nq = r + dr, q + dq
                if self._in_grid(nr, nq) and not occ[nr, nq]:
                    options.append((nr, nq))
            nr, nq = options[int(self._rng.integers(0, len(options)))]
            occ[r, q] = False
            occ[nr, nq] = True
            self.prey_pos[j] = (nr, nq)

        self._t += 1
        terminated = not bool(self.predator_alive.any())
        truncated = (not terminated) and self._t >= c.episode_limit
        return StepResult(
            reward=float(reward),
            terminated=terminated,
            truncated=truncated,
            state=self.get_state(),
            obs=self.get_obs(),
            avail=self.get_avail(),
            info={"captures": self.captures, "won": terminated},
        )


def make_env(name: str, config=None):
    """Construct an environment by registry name."""
    if name == "matrix_game":
        return MatrixGame(config)
    if name == "pred_prey":
        return PredatorPrey(config)
    raise EnvConfigError(f"unknown environment '{name}' (expected matrix_game or pred_prey)")
