"""Dense tabular MDPs and exact Bellman machinery.

Tables are row-major numpy arrays: rewards ``R[s, a]``, transitions
``P[s, a, s']`` and Q-tables ``Q[s, a]``. Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

ROW_SUM_ATOL = 1e-12
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 200_000


class MdpFormatError(ValueError):
    """Raised when an MDP (or its serialized form) violates an invariant.

    ``field`` names the offending field so callers can report it.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ConvergenceError(RuntimeError):
    """Value iteration ran out of iterations before reaching ``tol``."""

    def __init__(self, message: str, best: np.ndarray, residual: float, iters: int):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iters = iters


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    rewards: np.ndarray
    transitions: np.ndarray
    gamma: float
    n_states: int = field(init=False)
    n_actions: int = field(init=False)

    def __post_init__(self):
        rewards = _frozen(self.rewards)
        transitions = _frozen(self.transitions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "transitions", transitions)
        object.__setattr__(self, "gamma", float(self.gamma))
        if rewards.ndim != 2 or rewards.shape[0] < 1 or rewards.shape[1] < 1:
            raise MdpFormatError("rewards", f"expected a non-empty (S, A) table, got shape {rewards.shape}")
        n_states, n_actions = rewards.shape
        object.__setattr__(self, "n_states", n_states)
        object.__setattr__(self, "n_actions", n_actions)
        if transitions.shape != (n_states, n_actions, n_states):
            raise MdpFormatError(
                "transitions",
                f"expected shape {(n_states, n_actions, n_states)}, got {transitions.shape}",
            )
        if not np.all(np.isfinite(rewards)):
            raise MdpFormatError("rewards", "entries must be finite")
        if not np.all(np.isfinite(transitions)):
            raise MdpFormatError("transitions", "entries must be finite")
        if transitions.min() < 0.0 or transitions.max() > 1.0:
            raise MdpFormatError("transitions", "probabilities must lie in [0, 1]")
        row_err = np.abs(transitions.sum(axis=2) - 1.0)
        if row_err.max() > ROW_SUM_ATOL:
            s, a = np.unravel_index(int(row_err.argmax()), row_err.shape)
            raise MdpFormatError(
                "transitions",
                f"row (s={s}, a={a}) sums to {transitions[s, a].sum()!r}, not 1",
            )
        if not 0.0 < self.gamma < 1.0:
            raise MdpFormatError("gamma", f"must lie strictly in (0, 1), got {self.gamma!r}")

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.transitions, axis=2)
        cdf.setflags(write=False)
        return cdf

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_states, self.n_actions)

    def check_q(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-2:] != self.shape:
            raise ValueError(f"dimension mismatch: Q has shape {q.shape}, MDP is {self.shape}")
        return q

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rewards": self.rewards.ravel().tolist(),
            "transitions": self.transitions.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        for key in ("n_states", "n_actions", "gamma", "rewards", "transitions"):
            if key not in doc:
                raise MdpFormatError(key, "missing field")
        n_states, n_actions = doc["n_states"], doc["n_actions"]
        for key, value in (("n_states", n_states), ("n_actions", n_actions)):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise MdpFormatError(key, f"must be a positive integer, got {value!r}")
        if not isinstance(doc["gamma"], (int, float)) or isinstance(doc["gamma"], bool):
            raise MdpFormatError("gamma", f"must be a number, got {doc['gamma']!r}")
        arrays = {}
        for key, size in (
            ("rewards", n_states * n_actions),
            ("transitions", n_states * n_actions * n_states),
        ):
            try:
                arr = np.asarray(doc[key], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise MdpFormatError(key, f"not a numeric array ({exc})") from None
            if arr.ndim != 1 or arr.size != size:
                raise MdpFormatError(key, f"expected a flat array of {size} numbers, got shape {arr.shape}")
            arrays[key] = arr
        return cls(
            rewards=arrays["rewards"].reshape(n_states, n_actions),
            transitions=arrays["transitions"].reshape(n_states, n_actions, n_states),
            gamma=doc["gamma"],
        )


def save_mdp(mdp: TabularMdp, path) -> None:
    # json writes floats with repr(), i.e. round-trippable double precision
    Path(path).write_text(json.dumps(mdp.to_dict()) + "\n", encoding="utf-8")


def load_mdp(path) -> TabularMdp:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MdpFormatError("document", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise MdpFormatError("document", "top level must be an object")
    return TabularMdp.from_dict(doc)


def state_values(q: np.ndarray) -> np.ndarray:
    """Row-max of a Q-table, V(s) = max_a Q(s, a)."""
    return np.asarray(q).max(axis=-1)


def bellman_backup(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """Optimistic Bellman operator T(Q) = R + gamma * P max_a' Q.

    Accepts a single table of shape (S, A) or a batch (..., S, A).
    """
    q = mdp.check_q(q)
    v = q.max(axis=-1)
    flat = mdp.transitions.reshape(-1, mdp.n_states)
    expected = (v @ flat.T).reshape(v.shape[:-1] + mdp.shape)
    return mdp.rewards + mdp.gamma * expected


def value_iteration(
    mdp: TabularMdp,
    q0: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> tuple[np.ndarray, int]:
    """Iterate the Bellman operator until the backup residual is at most ``tol``.

    The returned Q satisfies ||Q - T(Q)||_inf <= tol, hence
    ||Q - Q*||_inf <= tol / (1 - gamma). The iteration count is the number
    of backups applied.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    q = np.zeros(mdp.shape) if q0 is None else mdp.check_q(q0).astype(np.float64, copy=True)
    best, best_res = q, np.inf
    for it in range(max_iters + 1):
        tq = bellman_backup(mdp, q)
        res = float(np.max(np.abs(tq - q)))
        if res <= tol:
            return q, it
        if res < best_res:
            best, best_res = q, res
        q = tq
    raise ConvergenceError(
        f"value iteration did not reach tol={tol:g} in {max_iters} iterations (residual {best_res:.3e})",
        best=best,
        residual=best_res,
        iters=max_iters,
    )


def solve_optimal_q(mdp: TabularMdp, tol: float = DEFAULT_TOL) -> np.ndarray:
    return value_iteration(mdp, tol=tol)[0]


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Greedy action per state; ties go to the lowest action index."""
    # np.argmax returns the first maximal index
    return np.argmax(np.asarray(q), axis=-1)


def policy_evaluation(mdp: TabularMdp, policy: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Value of a deterministic policy, accurate to within ``tol``."""
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    policy = np.asarray(policy, dtype=np.intp)
    if policy.shape != (mdp.n_states,):
        raise ValueError(f"dimension mismatch: policy has shape {policy.shape}, expected ({mdp.n_states},)")
    if policy.min() < 0 or policy.max() >= mdp.n_actions:
        raise ValueError("policy action index out of range")
    states = np.arange(mdp.n_states)
    r_pi = mdp.rewards[states, policy]
    p_pi = mdp.transitions[states, policy]
    v = np.zeros(mdp.n_states)
    # ||V_t - V_pi|| <= gamma/(1-gamma) * ||V_t - V_{t-1}||
    stop = tol * (1.0 - mdp.gamma) / mdp.gamma
    while True:
        v_next = r_pi + mdp.gamma * (p_pi @ v)
        if np.max(np.abs(v_next - v)) <= stop:
            return v_next
        v = v_next
