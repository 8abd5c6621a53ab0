"""Local solvers for FedQ and the FedQ-SynQ algorithm."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .federation import (
    AugmentedLocalMdp,
    FedRunState,
    RegionPartition,
    check_partition,
    fedq_run,
    solve_local,
)
from .mdp_core import DEFAULT_MAX_ITERS, TabularMdp

# caps the (pairs x batch x S) comparison tensor built while sampling
_SAMPLE_CHUNK = 1 << 22


def agent_stream(seed: int, agent: int, round: int) -> np.random.Generator:
    """Independent counter-based stream keyed by (seed, agent, round)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(agent), int(round)))
    return np.random.Generator(np.random.Philox(ss))


class GenerativeModel:
    """Draws next states s' ~ P(.|s, a) for whole blocks of state-action pairs."""

    def __init__(self, mdp: TabularMdp, rng: np.random.Generator):
        self.mdp = mdp
        self.rng = rng
        self._cdf = mdp.transition_cdf

    def sample(self, states: np.ndarray, batch_size: int) -> np.ndarray:
        """Next states of shape (len(states), A, batch_size).

        Uniforms are consumed in (s, a, j) lexicographic order, one per draw,
        and inverted through the row CDF: the index is the number of the first
        S - 1 CDF entries that are <= u * total.
        """
        states = np.asarray(states, dtype=np.intp)
        cdf = self._cdf[states]  # (n, A, S)
        u = self.rng.random((states.size, self.mdp.n_actions, batch_size))
        x = u * cdf[:, :, -1:]
        # the last CDF entry is never compared, so the index stays below S
        cdf = cdf[:, :, :-1]
        out = np.empty(u.shape, dtype=np.intp)
        per_state = self.mdp.n_actions * batch_size * self.mdp.n_states
        step = max(1, _SAMPLE_CHUNK // per_state)
        for lo in range(0, states.size, step):
            hi = lo + step
            out[lo:hi] = (cdf[lo:hi, :, None, :] <= x[lo:hi, :, :, None]).sum(axis=-1)
        return out


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "exact"
    eta: float = 0.5
    batch_size: int = 5
    local_steps: int = 1
    tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("exact", "sync_q"):
            raise ValueError(f"oracle kind must be 'exact' or 'sync_q', got {self.kind!r}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps!r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol!r}")


@dataclass(frozen=True)
class SynQRunConfig:
    eta: float = 0.5
    local_steps: int = 1  # E
    rounds: int = 1  # R
    batch_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta!r}")
        for name in ("local_steps", "rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed!r}")

    @property
    def total_steps(self) -> int:
        return self.local_steps * self.rounds


def _restrict(local: AugmentedLocalMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-2] == local.base.n_states:
        return q[..., local.region, :]
    return q


def exact_oracle(local: AugmentedLocalMdp, q_init: np.ndarray | None = None, tol: float = 1e-10) -> tuple[np.ndarray, int]:
    """Solve the local MDP exactly (to ``tol``); uses no samples."""
    init = None if q_init is None else _restrict(local, q_init)
    return solve_local(local, init, tol), 0


@dataclass(frozen=True)
class ExactOracle:
    tol: float = 1e-10
    max_iters: int = DEFAULT_MAX_ITERS

    def __call__(self, local, q_init, *, agent=0, round=0):
        return solve_local(local, _restrict(local, q_init), self.tol, self.max_iters), 0


def sync_q_step(
    local: AugmentedLocalMdp,
    q: np.ndarray,
    gen: GenerativeModel,
    eta: float,
    batch_size: int,
) -> np.ndarray:
    """One synchronous Q-learning step on the local MDP.

    ``q`` is the agent's full (S, A) table. Rows in S_k are updated towards
    the batch-averaged empirical backup; exterior rows are returned
    untouched and exterior next states are valued with ``local.v_tilde``.
    """
    reg = local.region
    v = np.where(local.in_region, q.max(axis=1), local.v_tilde)
    nxt = gen.sample(reg, batch_size)
    target = local.base.rewards[reg] + local.gamma * (v[nxt].sum(axis=-1) / batch_size)
    out = q.copy()
    out[reg] = (1.0 - eta) * q[reg] + eta * target
    return out


@dataclass(frozen=True)
class SyncQOracle:
    """E synchronous Q-learning steps per round, drawing from the agent's own stream."""

    eta: float = 0.5
    batch_size: int = 5
    local_steps: int = 1
    seed: int = 0

    def __call__(self, local, q_init, *, agent=0, round=0):
        q = np.array(q_init, dtype=np.float64)
        if q.shape != local.base.shape:
            raise ValueError("SyncQOracle needs the full global Q-table as q_init")
        gen = GenerativeModel(local.base, agent_stream(self.seed, agent, round))
        for _ in range(self.local_steps):
            q = sync_q_step(local, q, gen, self.eta, self.batch_size)
        used = self.local_steps * local.n_local * local.base.n_actions * self.batch_size
        return q[local.region], used


def make_oracle(cfg: OracleConfig, seed: int = 0):
    if cfg.kind == "exact":
        return ExactOracle(tol=cfg.tol)
    return SyncQOracle(eta=cfg.eta, batch_size=cfg.batch_size, local_steps=cfg.local_steps, seed=seed)


def fedq_synq(
    mdp: TabularMdp,
    partition: RegionPartition,
    cfg: SynQRunConfig,
    q0: np.ndarray | None = None,
    q_star: np.ndarray | None = None,
    target_error: float | None = None,
    on_round=None,
) -> FedRunState:
    """FedQ with synchronous Q-learning as the local oracle.

    Every round each agent starts from the last aggregated table, runs E
    local steps with exterior values frozen at the last synchronization,
    and the server averages the results. History has one record per round.
    """
    check_partition(mdp, partition)
    oracle = SyncQOracle(eta=cfg.eta, batch_size=cfg.batch_size, local_steps=cfg.local_steps, seed=cfg.seed)
    return fedq_run(
        mdp, partition, oracle, q0=q0, rounds=cfg.rounds, q_star=q_star,
        target_error=target_error, on_round=on_round,
    )


def super_agent_baseline(
    mdp: TabularMdp,
    cfg: SynQRunConfig,
    q0: np.ndarray | None = None,
    q_star: np.ndarray | None = None,
    target_error: float | None = None,
    on_round=None,
) -> FedRunState:
    """Single-agent synchronous Q-learning on the whole state space.

    Runs T = E * R iterations, one history record per iteration, each using
    |S| |A| b samples. Identical (same seed) to FedQ-SynQ on the trivial
    partition with E = 1.
    """
    single = SynQRunConfig(eta=cfg.eta, local_steps=1, rounds=cfg.total_steps, batch_size=cfg.batch_size, seed=cfg.seed)
    return fedq_synq(
        mdp, RegionPartition.trivial(mdp.n_states), single, q0=q0, q_star=q_star,
        target_error=target_error, on_round=on_round,
    )


def synq_theory_parameters(
    eps: float,
    delta: float,
    n_min: int,
    gamma: float,
    n_states: int,
    n_actions: int,
    n_agents: int,
) -> dict:
    """Step count, step size and local steps that the FedQ-SynQ guarantee asks for.

    T solves T >= 1296 / (N_min eps^2 (1-g)^5) * log(10 / (eps (1-g)^2))^2 * log(6 S A T N / delta)
    by fixed-point iteration; eta and E are then the largest admissible values.
    """
    if not 0 < eps < 1.0 / (1.0 - gamma):
        raise ValueError("eps must lie in (0, 1/(1-gamma))")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    base = 1296.0 / (n_min * eps**2 * (1.0 - gamma) ** 5) * math.log(10.0 / (eps * (1.0 - gamma) ** 2)) ** 2
    t = 1.0
    for _ in range(200):
        t_next = base * math.log(6.0 * n_states * n_actions * t * n_agents / delta)
        if abs(t_next - t) <= 1e-9 * t_next:
            break
        t = t_next
    total = math.ceil(t_next)
    log_term = math.log(6.0 * n_states * n_actions * total * n_agents / delta)
    eta = n_min * eps**2 * (1.0 - gamma) ** 4 / 1296.0 / log_term
    local_steps = math.floor(1.0 + min((1.0 - gamma) / (4.0 * gamma), 1.0 / n_min) / (1.01 * eta))
    return {
        "T": total,
        "eta": eta,
        "E": local_steps,
        "R": math.ceil(total / local_steps),
    }


def print_synq_theory(**kwargs) -> dict:
    params = synq_theory_parameters(**kwargs)
    for key, value in params.items():
        print(f"{key} = {value:.6g}" if isinstance(value, float) else f"{key} = {value}")
    return params
