"""Instance generators: RandomMDP and WindyCliff."""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .federation import RegionPartition, compute_leakage
from .mdp_core import TabularMdp

LAND_REWARD = -0.01
CLIFF_REWARD = -0.1
GOAL_REWARD = 1.0

UP, DOWN, RIGHT, LEFT = range(4)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), RIGHT: (0, 1), LEFT: (0, -1)}


class SpecError(ValueError):
    """Invalid environment spec; ``field`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RandomMdpSpec:
    n_agents: int
    exclusive_states: int  # K_S
    shared_states: int = 0  # E_S
    share_count: int = 1  # N_S
    p_max: Optional[float] = None
    n_actions: int = 4
    seed: int = 0
    gamma: float = 0.9

    def __post_init__(self):
        for name in ("n_agents", "n_actions", "share_count"):
            if getattr(self, name) < 1:
                raise SpecError(name, "must be a positive integer")
        for name in ("exclusive_states", "shared_states", "seed"):
            if getattr(self, name) < 0:
                raise SpecError(name, "must be non-negative")
        if self.share_count > self.n_agents:
            raise SpecError("share_count", "cannot exceed n_agents")
        if self.shared_states > 0 and self.share_count < 2:
            raise SpecError("share_count", "shared states need share_count >= 2")
        if (self.shared_states * self.n_agents * self.n_agents) % self.share_count:
            raise SpecError("shared_states", "shared_states * n_agents^2 / share_count must be an integer")
        if self.exclusive_states == 0 and self.shared_states == 0:
            raise SpecError("exclusive_states", "every agent needs at least one state")
        if not 0.0 < self.gamma < 1.0:
            raise SpecError("gamma", "must lie in (0, 1)")
        if self.p_max is not None:
            if not 0.0 < self.p_max < 1.0:
                raise SpecError("p_max", "must lie in (0, 1)")
            if self.shared_states != 0:
                raise SpecError("p_max", "a controlled p_max requires shared_states = 0")
            if self.n_agents < 2:
                raise SpecError("p_max", "a controlled p_max needs at least two agents")

    @property
    def n_shared(self) -> int:
        return self.shared_states * self.n_agents * self.n_agents // self.share_count

    @property
    def n_states(self) -> int:
        return self.exclusive_states * self.n_agents + self.n_shared


@dataclass(frozen=True)
class WindyCliffSpec:
    width: int = 6
    height: int = 6
    wind_power: float = 0.1
    split: str = "horizontal"
    n_agents: int = 3
    seed: int = 0
    gamma: float = 0.9
    goal_reward_on_stay: bool = True

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise SpecError("width" if self.width < 2 else "height", "grid must be at least 2 x 2")
        if not 0.0 <= self.wind_power <= 1.0:
            raise SpecError("wind_power", "must lie in [0, 1]")
        if self.split not in ("horizontal", "vertical"):
            raise SpecError("split", "must be 'horizontal' or 'vertical'")
        extent = self.height if self.split == "horizontal" else self.width
        if not 1 <= self.n_agents <= extent:
            raise SpecError("n_agents", f"must lie in [1, {extent}] for a {self.split} split")
        if not 0.0 < self.gamma < 1.0:
            raise SpecError("gamma", "must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.width * self.height


EnvSpec = Union[RandomMdpSpec, WindyCliffSpec]


def _exp_simplex(rng: np.random.Generator, shape) -> np.ndarray:
    w = rng.standard_exponential(shape)
    return w / w.sum(axis=-1, keepdims=True)


def generate_random_mdp(spec: RandomMdpSpec) -> tuple[TabularMdp, RegionPartition]:
    rng = np.random.default_rng(spec.seed)
    n, k_s, m = spec.n_agents, spec.exclusive_states, spec.n_actions
    n_states = spec.n_states
    members = [list(range(k * k_s, (k + 1) * k_s)) for k in range(n)]
    if spec.n_shared:
        agent_order = rng.permutation(n)
        shared = k_s * n + rng.permutation(spec.n_shared)
        # consecutive windows of share_count agents, wrapping: balanced and distinct
        for j, s in enumerate(shared):
            for i in range(spec.share_count):
                members[agent_order[(j * spec.share_count + i) % n]].append(int(s))
    partition = RegionPartition(n_states, tuple(np.array(sorted(mb), dtype=np.intp) for mb in members))

    rewards = rng.random((n_states, m))
    if spec.p_max is None:
        transitions = _exp_simplex(rng, (n_states, m, n_states))
    else:
        transitions = np.zeros((n_states, m, n_states))
        for k, reg in enumerate(partition.regions):
            out = np.flatnonzero(~partition.membership[k])
            p_in = _exp_simplex(rng, (reg.size, m, reg.size))
            p_out = _exp_simplex(rng, (reg.size, m, out.size))
            transitions[np.ix_(reg, np.arange(m), reg)] = (1.0 - spec.p_max) * p_in
            transitions[np.ix_(reg, np.arange(m), out)] = spec.p_max * p_out
    return TabularMdp(rewards, transitions, spec.gamma), partition


@dataclass(frozen=True, eq=False)
class WindyCliffLayout:
    width: int
    height: int
    start: int
    goal: int
    cliff: np.ndarray  # bool mask over states
    arrival_rewards: np.ndarray  # reward collected on entering each state

    def cell(self, s: int) -> tuple[int, int]:
        return divmod(s, self.width)

    def index(self, row: int, col: int) -> int:
        return row * self.width + col


def windy_cliff_layout(spec: WindyCliffSpec) -> WindyCliffLayout:
    """Classic cliff-walk geometry: start bottom-left, goal bottom-right,
    the cells between them on the bottom row are cliff."""
    w, h = spec.width, spec.height
    start, goal = (h - 1) * w, h * w - 1
    cliff = np.zeros(w * h, dtype=bool)
    cliff[start + 1 : goal] = True
    arrival = np.full(w * h, LAND_REWARD)
    arrival[cliff] = CLIFF_REWARD
    arrival[goal] = GOAL_REWARD
    cliff.setflags(write=False)
    arrival.setflags(write=False)
    return WindyCliffLayout(w, h, start, goal, cliff, arrival)


def generate_windy_cliff(spec: WindyCliffSpec) -> tuple[TabularMdp, RegionPartition]:
    """Grid navigation where wind replaces the chosen move by "down" with
    probability ``wind_power``. Rewards are expected arrival rewards."""
    lay = windy_cliff_layout(spec)
    w, h, p = spec.width, spec.height, spec.wind_power
    n = w * h
    transitions = np.zeros((n, 4, n))

    def move(s, a):
        r, c = lay.cell(s)
        dr, dc = _MOVES[a]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < h and 0 <= c2 < w:
            return lay.index(r2, c2)
        return s

    for s in range(n):
        for a in range(4):
            if s == lay.goal:
                transitions[s, a, s] = 1.0
            elif lay.cliff[s]:
                transitions[s, a, lay.start] = 1.0
            else:
                transitions[s, a, move(s, a)] += 1.0 - p
                transitions[s, a, move(s, DOWN)] += p
    rewards = transitions @ lay.arrival_rewards
    rewards[lay.goal] = GOAL_REWARD if spec.goal_reward_on_stay else 0.0

    extent = h if spec.split == "horizontal" else w
    band = extent // spec.n_agents
    rows, cols = np.divmod(np.arange(n), w)
    coord = rows if spec.split == "horizontal" else cols
    label = np.minimum(coord // band, spec.n_agents - 1)
    partition = RegionPartition(n, tuple(np.flatnonzero(label == k) for k in range(spec.n_agents)))
    return TabularMdp(rewards, transitions, spec.gamma), partition


def generate(spec: EnvSpec) -> tuple[TabularMdp, RegionPartition]:
    if isinstance(spec, RandomMdpSpec):
        return generate_random_mdp(spec)
    if isinstance(spec, WindyCliffSpec):
        return generate_windy_cliff(spec)
    raise TypeError(f"unknown environment spec {type(spec).__name__}")


def _type_ok(declared: str, value) -> bool:
    is_int = isinstance(value, int) and not isinstance(value, bool)
    if declared == "int":
        return is_int
    if declared == "float":
        return is_int or isinstance(value, float)
    if declared == "Optional[float]":
        return value is None or is_int or isinstance(value, float)
    if declared == "bool":
        return isinstance(value, bool)
    if declared == "str":
        return isinstance(value, str)
    return True


_KINDS = {"random_mdp": RandomMdpSpec, "windy_cliff": WindyCliffSpec}


def spec_from_dict(doc: dict) -> EnvSpec:
    """Build a spec from ``{"kind": "random_mdp" | "windy_cliff", ...fields}``."""
    if not isinstance(doc, dict):
        raise SpecError("environment", "must be an object")
    kind = doc.get("kind")
    if kind not in _KINDS:
        raise SpecError("kind", f"must be one of {sorted(_KINDS)}, got {kind!r}")
    cls = _KINDS[kind]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key == "kind":
            continue
        if key not in fields:
            raise SpecError(key, f"unknown field for {kind}")
        if not _type_ok(fields[key].type, value):
            raise SpecError(key, f"expected {fields[key].type}, got {value!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SpecError("environment", str(exc)) from None


def spec_to_dict(spec: EnvSpec) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(spec)]
    return {"kind": kind, **dataclasses.asdict(spec)}


def describe_partition(partition: RegionPartition, mdp: TabularMdp) -> dict:
    prof = compute_leakage(mdp, partition)
    hist = Counter(int(x) for x in partition.multiplicity)
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "n_agents": partition.n_agents,
        "region_sizes": partition.region_sizes,
        "multiplicity_histogram": {str(k): hist[k] for k in sorted(hist)},
        "n_min": partition.n_min,
        "kernel_sizes": [int(m.sum()) for m in prof.kernel],
        "edge_sizes": [int(m.sum()) for m in prof.edge],
        "p_max": [float(x) for x in prof.p_max],
        "gamma_fed_k": [float(x) for x in prof.gamma_fed_k],
        "gamma_fed": prof.gamma_fed,
    }


def format_report(report: dict) -> str:
    lines = [
        f"states={report['n_states']} actions={report['n_actions']} gamma={report['gamma']!r} "
        f"agents={report['n_agents']} n_min={report['n_min']}",
        "multiplicity histogram: " + ", ".join(f"N(s)={k}: {v}" for k, v in report["multiplicity_histogram"].items()),
    ]
    for k in range(report["n_agents"]):
        lines.append(
            f"  agent {k}: |S_k|={report['region_sizes'][k]} kernel={report['kernel_sizes'][k]} "
            f"edge={report['edge_sizes'][k]} p_max={report['p_max'][k]:.6g} gamma_fed_k={report['gamma_fed_k'][k]:.6g}"
        )
    lines.append(f"gamma_fed={report['gamma_fed']!r}")
    return "\n".join(lines)
