"""Region partitions, leakage analysis and the FedQ protocol.

Local Q-tables are stored compactly as arrays of shape ``(|S_k|, A)`` whose
rows follow ``partition.regions[k]`` (sorted state indices). Most operators
also accept a leading batch dimension so that many Q-tables can be pushed
through the federated operator at once.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .mdp_core import DEFAULT_MAX_ITERS, ConvergenceError, TabularMdp

log = logging.getLogger(__name__)

# leakage below this counts as exactly zero (kernel membership)
ZERO_LEAKAGE = 1e-15


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """N restricted regions covering the state space."""

    n_states: int
    regions: tuple
    membership: np.ndarray = field(init=False, repr=False)
    multiplicity: np.ndarray = field(init=False, repr=False)
    n_min: int = field(init=False)

    def __post_init__(self):
        if self.n_states < 1:
            raise PartitionError(f"n_states must be positive, got {self.n_states}")
        if len(self.regions) < 1:
            raise PartitionError("a partition needs at least one region")
        regions = []
        for k, reg in enumerate(self.regions):
            arr = np.asarray(reg)
            if arr.size == 0:
                raise PartitionError(f"region {k} is empty")
            if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
                raise PartitionError(f"region {k} must be a flat list of integer state indices")
            if arr.min() < 0 or arr.max() >= self.n_states:
                raise PartitionError(f"region {k} has a state index outside [0, {self.n_states})")
            uniq = np.unique(arr)
            if uniq.size != arr.size:
                raise PartitionError(f"region {k} lists a state twice")
            uniq = uniq.astype(np.intp)
            uniq.setflags(write=False)
            regions.append(uniq)
        membership = np.zeros((len(regions), self.n_states), dtype=bool)
        for k, reg in enumerate(regions):
            membership[k, reg] = True
        multiplicity = membership.sum(axis=0)
        if multiplicity.min() < 1:
            missing = np.flatnonzero(multiplicity == 0)
            raise PartitionError(f"regions do not cover the state space; uncovered states {missing[:10].tolist()}")
        membership.setflags(write=False)
        multiplicity.setflags(write=False)
        object.__setattr__(self, "regions", tuple(regions))
        object.__setattr__(self, "membership", membership)
        object.__setattr__(self, "multiplicity", multiplicity)
        object.__setattr__(self, "n_min", int(multiplicity.min()))

    @property
    def n_agents(self) -> int:
        return len(self.regions)

    @property
    def region_sizes(self) -> list[int]:
        return [int(r.size) for r in self.regions]

    @classmethod
    def trivial(cls, n_states: int, n_agents: int = 1) -> "RegionPartition":
        """Every agent sees the whole state space."""
        return cls(n_states, tuple(np.arange(n_states) for _ in range(n_agents)))

    @classmethod
    def contiguous(cls, n_states: int, n_agents: int) -> "RegionPartition":
        """Disjoint blocks of consecutive states; the last block takes the remainder."""
        if not 1 <= n_agents <= n_states:
            raise PartitionError(f"cannot split {n_states} states into {n_agents} blocks")
        size = n_states // n_agents
        bounds = [k * size for k in range(n_agents)] + [n_states]
        return cls(n_states, tuple(np.arange(bounds[k], bounds[k + 1]) for k in range(n_agents)))

    def to_dict(self) -> dict:
        return {"n_states": self.n_states, "regions": [r.tolist() for r in self.regions]}

    @classmethod
    def from_dict(cls, doc: dict) -> "RegionPartition":
        if not isinstance(doc, dict) or "n_states" not in doc or "regions" not in doc:
            raise PartitionError("partition document needs 'n_states' and 'regions'")
        regions = []
        for k, reg in enumerate(doc["regions"]):
            if not isinstance(reg, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in reg):
                raise PartitionError(f"regions[{k}] must be a list of integers")
            regions.append(np.asarray(reg, dtype=np.intp))
        return cls(int(doc["n_states"]), tuple(regions))


def save_partition(partition: RegionPartition, path) -> None:
    Path(path).write_text(json.dumps(partition.to_dict()) + "\n", encoding="utf-8")


def load_partition(path) -> RegionPartition:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PartitionError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RegionPartition.from_dict(doc)


def check_partition(mdp: TabularMdp, partition: RegionPartition) -> None:
    if partition.n_states != mdp.n_states:
        raise PartitionError(f"partition is over {partition.n_states} states but the MDP has {mdp.n_states}")


# ---------------------------------------------------------------------------
# leakage and contraction factors


def contraction_factor(gamma: float, p_max_k: float) -> float:
    """Contraction modulus of the exact local operator for leakage ``p_max_k``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")
    if not 0.0 <= p_max_k <= 1.0:
        raise ValueError(f"p_max_k must lie in [0, 1], got {p_max_k!r}")
    return gamma * p_max_k / (1.0 - gamma * (1.0 - p_max_k))


def n_step_contraction_factor(gamma: float, p_max_k: float, n: int | float) -> float:
    """Modulus after ``n`` one-step local backups seeded by the global table.

    Equals ``gamma`` at n = 1 and tends to ``contraction_factor`` as n grows;
    ``n = math.inf`` returns the limit directly.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")
    if not 0.0 <= p_max_k <= 1.0:
        raise ValueError(f"p_max_k must lie in [0, 1], got {p_max_k!r}")
    if n == math.inf:
        return contraction_factor(gamma, p_max_k)
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if n == 1:
        return float(gamma)
    inner = gamma * (1.0 - p_max_k)
    decay = inner ** (int(n) - 1)
    # limit + c * decay with c = gamma (1-gamma)(1-p) / (1-inner) >= 0, which keeps
    # the computed sequence monotone in floating point as decay shrinks
    excess = gamma * (1.0 - gamma) * (1.0 - p_max_k) / (1.0 - inner)
    return contraction_factor(gamma, p_max_k) + excess * decay


@dataclass(frozen=True, eq=False)
class LeakageProfile:
    gamma: float
    leakage: tuple  # per agent, (|S_k|, A)
    kernel: tuple  # per agent, bool mask (|S_k|, A)
    edge: tuple
    p_max: np.ndarray  # (N,)
    p_min: tuple  # per agent float, None when the edge set is empty
    gamma_fed_k: np.ndarray  # (N,)
    gamma_fed: float

    @property
    def n_agents(self) -> int:
        return len(self.leakage)


def compute_leakage(mdp: TabularMdp, partition: RegionPartition) -> LeakageProfile:
    check_partition(mdp, partition)
    leakage, kernel, edge, p_min = [], [], [], []
    p_max = np.zeros(partition.n_agents)
    for k, reg in enumerate(partition.regions):
        outside = ~partition.membership[k]
        # sum the exterior mass directly so closed rows give exact zeros
        lk = mdp.transitions[reg][:, :, outside].sum(axis=2)
        ker = lk < ZERO_LEAKAGE
        lk.setflags(write=False)
        ker.setflags(write=False)
        edg = ~ker
        edg.setflags(write=False)
        leakage.append(lk)
        kernel.append(ker)
        edge.append(edg)
        if edg.any():
            p_max[k] = float(lk[edg].max())
            p_min.append(float(lk[edg].min()))
        else:
            p_min.append(None)
    gamma_fed_k = np.array([contraction_factor(mdp.gamma, p) for p in p_max])
    p_max.setflags(write=False)
    gamma_fed_k.setflags(write=False)
    return LeakageProfile(
        gamma=mdp.gamma,
        leakage=tuple(leakage),
        kernel=tuple(kernel),
        edge=tuple(edge),
        p_max=p_max,
        p_min=tuple(p_min),
        gamma_fed_k=gamma_fed_k,
        gamma_fed=float(gamma_fed_k.max()),
    )


# ---------------------------------------------------------------------------
# augmented local MDPs


@dataclass(frozen=True, eq=False)
class AugmentedLocalMdp:
    """Local MDP of agent ``agent``: the base MDP on its region, with every
    exterior state turned into a terminal paying ``v_tilde(s)`` and then
    moving to the absorbing, zero-reward state ``s_null``.

    The augmented state space is ``S + {s_null}`` with ``s_null`` at index
    ``base.n_states``. ``v_tilde`` may carry leading batch dimensions.
    """

    base: TabularMdp
    region: np.ndarray
    in_region: np.ndarray
    v_tilde: np.ndarray
    agent: int = 0

    @property
    def null_state(self) -> int:
        return self.base.n_states

    @property
    def n_local(self) -> int:
        return int(self.region.size)

    @property
    def gamma(self) -> float:
        return self.base.gamma

    def reward(self, s: int, a: int) -> float:
        if s == self.null_state:
            return 0.0
        if self.in_region[s]:
            return float(self.base.rewards[s, a])
        return float(self.v_tilde[..., s])

    def transition_row(self, s: int, a: int) -> np.ndarray:
        """Next-state distribution over the augmented space.

        Interior rows are returned as read-only views into the base MDP over
        the original S states (mass on s_null is implicitly zero).
        """
        if s != self.null_state and self.in_region[s]:
            return self.base.transitions[s, a]
        row = np.zeros(self.base.n_states + 1)
        row[self.null_state] = 1.0
        return row

    def interior_transitions(self) -> np.ndarray:
        """P restricted to S_k x A x S_k."""
        return self.base.transitions[self.region][:, :, self.region]

    def exterior_term(self) -> np.ndarray:
        """R(s, a) + gamma * sum_{s' outside} P(s'|s, a) v_tilde(s') on S_k x A."""
        ext_v = np.where(self.in_region, 0.0, self.v_tilde)
        rows = self.base.transitions[self.region].reshape(-1, self.base.n_states)
        flow = (ext_v @ rows.T).reshape(ext_v.shape[:-1] + (self.n_local, self.base.n_actions))
        return self.base.rewards[self.region] + self.gamma * flow

    def to_tabular(self) -> TabularMdp:
        """Materialize the explicit (S+1)-state augmented MDP (unbatched only)."""
        if np.ndim(self.v_tilde) != 1:
            raise ValueError("to_tabular needs an unbatched v_tilde")
        n, m = self.base.n_states, self.base.n_actions
        rewards = np.zeros((n + 1, m))
        transitions = np.zeros((n + 1, m, n + 1))
        rewards[self.region] = self.base.rewards[self.region]
        transitions[self.region, :, :n] = self.base.transitions[self.region]
        outside = np.flatnonzero(~self.in_region)
        rewards[outside] = np.asarray(self.v_tilde)[outside, None]
        transitions[outside, :, n] = 1.0
        transitions[n, :, n] = 1.0
        return TabularMdp(rewards, transitions, self.gamma)


def build_local_mdp(
    mdp: TabularMdp, partition: RegionPartition, k: int, v_tilde: np.ndarray
) -> AugmentedLocalMdp:
    check_partition(mdp, partition)
    if not 0 <= k < partition.n_agents:
        raise IndexError(f"agent index {k} out of range for {partition.n_agents} agents")
    v_tilde = np.asarray(v_tilde, dtype=np.float64)
    if v_tilde.shape[-1:] != (mdp.n_states,):
        raise ValueError(f"dimension mismatch: v_tilde has shape {v_tilde.shape}, expected (..., {mdp.n_states})")
    return AugmentedLocalMdp(
        base=mdp,
        region=partition.regions[k],
        in_region=partition.membership[k],
        v_tilde=v_tilde,
        agent=k,
    )


def local_backup(local: AugmentedLocalMdp, q_local: np.ndarray) -> np.ndarray:
    """One-step optimistic backup of the local MDP restricted to S_k x A."""
    p_in_t = local.interior_transitions().reshape(-1, local.n_local).T
    flow = np.asarray(q_local).max(axis=-1) @ p_in_t
    flow = flow.reshape(flow.shape[:-1] + (local.n_local, local.base.n_actions))
    return local.exterior_term() + local.gamma * flow


def solve_local(
    local: AugmentedLocalMdp,
    q_init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> np.ndarray:
    """Value iteration on the local MDP until the residual on S_k x A is <= tol."""
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    exterior = local.exterior_term()
    p_in_t = local.interior_transitions().reshape(-1, local.n_local).T
    if q_init is None:
        q = np.zeros(exterior.shape)
    else:
        q_init = np.asarray(q_init, dtype=np.float64)
        q = np.broadcast_to(q_init, np.broadcast_shapes(exterior.shape, q_init.shape)).copy()
    shape = q.shape
    gamma = local.gamma
    best_res = np.inf
    for _ in range(max_iters + 1):
        tq = exterior + gamma * (q.max(axis=-1) @ p_in_t).reshape(shape)
        res = float(np.max(np.abs(tq - q)))
        if res <= tol:
            return q
        best_res = min(best_res, res)
        q = tq
    raise ConvergenceError(
        f"local value iteration for agent {local.agent} did not reach tol={tol:g}",
        best=q,
        residual=best_res,
        iters=max_iters,
    )


def local_bellman_exact(
    mdp: TabularMdp,
    partition: RegionPartition,
    k: int,
    v_tilde: np.ndarray,
    tol: float = 1e-10,
    q_init: np.ndarray | None = None,
) -> np.ndarray:
    """Optimal Q of agent k's local MDP on S_k x A, shape (|S_k|, A)."""
    return solve_local(build_local_mdp(mdp, partition, k, v_tilde), q_init, tol)


def local_operator(
    mdp: TabularMdp, partition: RegionPartition, k: int, q: np.ndarray, tol: float = 1e-10
) -> np.ndarray:
    """The local operator as a map on full Q-tables.

    Rows in S_k hold the local optimum given v_tilde = max_a q; rows outside
    hold v_tilde(s) for every action (the terminal payoff of the local MDP).
    """
    q = mdp.check_q(q)
    v = q.max(axis=-1)
    reg = partition.regions[k]
    out = np.repeat(v[..., None], mdp.n_actions, axis=-1)
    out[..., reg, :] = local_bellman_exact(mdp, partition, k, v, tol, q_init=q[..., reg, :])
    return out


def aggregate(per_agent_q: Sequence[np.ndarray], partition: RegionPartition) -> tuple[np.ndarray, np.ndarray]:
    """Average each state's Q-values over the agents covering it.

    Agent tables may be compact ``(..., |S_k|, A)`` or full ``(..., S, A)``.
    Contributions are sorted per entry before summation so the result is
    bit-identical under any reordering of the agents.
    """
    if len(per_agent_q) != partition.n_agents:
        raise PartitionError(f"got {len(per_agent_q)} agent tables for {partition.n_agents} agents")
    if partition.multiplicity.min() < 1:
        raise PartitionError("a state is not covered by any agent")
    tables = []
    for k, qk in enumerate(per_agent_q):
        qk = np.asarray(qk, dtype=np.float64)
        reg = partition.regions[k]
        if qk.shape[-2] == partition.n_states and reg.size != partition.n_states:
            qk = qk[..., reg, :]
        elif qk.shape[-2] != reg.size:
            raise ValueError(f"dimension mismatch: agent {k} table has {qk.shape[-2]} rows, region has {reg.size}")
        tables.append((reg, qk))
    lead = tables[0][1].shape[:-2]
    n_actions = tables[0][1].shape[-1]
    stack = np.full((partition.n_agents,) + lead + (partition.n_states, n_actions), np.nan)
    for k, (reg, qk) in enumerate(tables):
        stack[k][..., reg, :] = qk
    stack.sort(axis=0)  # NaNs (non-members) sort last
    np.nan_to_num(stack, copy=False, nan=0.0)
    q = stack.sum(axis=0) / partition.multiplicity[:, None]
    return q, q.max(axis=-1)


def federated_operator(
    mdp: TabularMdp,
    partition: RegionPartition,
    q: np.ndarray,
    tol: float = 1e-10,
    warm_start: bool = True,
) -> np.ndarray:
    """One exact FedQ round: solve every local MDP from v = max_a q, then aggregate.

    With ``warm_start`` the local solves start from q's own rows, otherwise
    from zeros.
    """
    q = mdp.check_q(q)
    v = q.max(axis=-1)
    locals_ = [
        local_bellman_exact(mdp, partition, k, v, tol, q_init=q[..., reg, :] if warm_start else None)
        for k, reg in enumerate(partition.regions)
    ]
    return aggregate(locals_, partition)[0]


# ---------------------------------------------------------------------------
# Algorithm 1 driver


class LocalOracle(Protocol):
    """Local solver plugged into FedQ.

    Called once per agent per round with the agent's local MDP and the
    current global Q-table (shape (S, A)); returns the agent's Q over
    S_k x A (shape (|S_k|, A)) and the number of generative samples used.
    """

    def __call__(self, local: AugmentedLocalMdp, q_init: np.ndarray, *, agent: int, round: int) -> tuple[np.ndarray, int]:
        ...


class OracleError(RuntimeError):
    def __init__(self, agent: int, round: int, cause: BaseException):
        super().__init__(f"oracle failed for agent {agent} in round {round}: {cause}")
        self.agent = agent
        self.round = round


@dataclass
class RoundRecord:
    round: int
    linf_error: float
    samples_per_agent: tuple
    wall_time_ms: float
    q_change: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "linf_error": self.linf_error,
            "samples_per_agent": list(self.samples_per_agent),
            "wall_time_ms": self.wall_time_ms,
        }


@dataclass
class FedRunState:
    round: int
    global_q: np.ndarray
    global_v: np.ndarray
    per_agent_q: list
    samples_per_agent: np.ndarray
    history: list = field(default_factory=list)
    stopped_early: bool = False
    stop_reason: str = "rounds"


def fedq_run(
    mdp: TabularMdp,
    partition: RegionPartition,
    oracle: LocalOracle,
    q0: np.ndarray | None = None,
    rounds: int = 1,
    q_star: np.ndarray | None = None,
    stop_tol: float | None = None,
    target_error: float | None = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> FedRunState:
    """Run FedQ with the given local oracle for up to ``rounds`` rounds.

    Stops early when successive global tables differ by at most
    ``stop_tol`` or, if ``q_star`` is given, when the error drops to
    ``target_error``.
    """
    check_partition(mdp, partition)
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if q0 is None:
        q = np.zeros(mdp.shape)
    else:
        q = mdp.check_q(q0).astype(np.float64, copy=True)
        hi = 1.0 / (1.0 - mdp.gamma)
        if q.min() < 0.0 or q.max() > hi:
            raise ValueError(f"q0 entries must lie in [0, {hi:g}]")
    if q_star is not None:
        q_star = mdp.check_q(q_star)
    state = FedRunState(
        round=0,
        global_q=q,
        global_v=q.max(axis=1),
        per_agent_q=[q[reg].copy() for reg in partition.regions],
        samples_per_agent=np.zeros(partition.n_agents, dtype=np.int64),
    )
    for r in range(rounds):
        t0 = time.perf_counter()
        local_qs = []
        for k in range(partition.n_agents):
            local = build_local_mdp(mdp, partition, k, state.global_v)
            try:
                qk, used = oracle(local, state.global_q, agent=k, round=r)
            except Exception as exc:
                raise OracleError(k, r, exc) from exc
            local_qs.append(np.asarray(qk, dtype=np.float64))
            state.samples_per_agent[k] += used
        q_next, v_next = aggregate(local_qs, partition)
        change = float(np.max(np.abs(q_next - state.global_q)))
        state.global_q, state.global_v, state.per_agent_q = q_next, v_next, local_qs
        state.round = r + 1
        err = float(np.max(np.abs(q_next - q_star))) if q_star is not None else math.nan
        rec = RoundRecord(
            round=state.round,
            linf_error=err,
            samples_per_agent=tuple(int(x) for x in state.samples_per_agent),
            wall_time_ms=(time.perf_counter() - t0) * 1e3,
            q_change=change,
        )
        state.history.append(rec)
        log.debug("round %d: linf_error=%.3e change=%.3e", rec.round, err, change)
        if on_round is not None:
            on_round(rec)
        if stop_tol is not None and change <= stop_tol:
            state.stopped_early, state.stop_reason = True, "stop_tol"
            break
        if target_error is not None and q_star is not None and err <= target_error:
            state.stopped_early, state.stop_reason = True, "target_error"
            break
    return state
