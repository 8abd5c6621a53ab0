"""Experiment runner: configs, runs, sweeps, CSV metrics and invariant checks."""
from __future__ import annotations

import copy
import dataclasses
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import environments as envs
from .federation import (
    RegionPartition,
    compute_leakage,
    aggregate,
    check_partition,
    contraction_factor,
    fedq_run,
    load_partition,
    local_bellman_exact,
    n_step_contraction_factor,
)
from .mdp_core import TabularMdp, bellman_backup, load_mdp, value_iteration
from .oracles import (
    ExactOracle,
    OracleConfig,
    SynQRunConfig,
    fedq_synq,
    super_agent_baseline,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fedq_exact", "fedq_synq", "super_agent")
METRIC_COLUMNS = (
    "run_id",
    "step",
    "linf_error",
    "samples_per_agent",
    "samples_total",
    "gamma_fed",
    "wall_ms",
)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def default_epsilon(gamma: float) -> float:
    """Default error threshold for rounds-to-epsilon style metrics."""
    return 0.01 / (1.0 - gamma)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    environment: Optional[envs.EnvSpec] = None
    mdp_path: Optional[str] = None
    partition_path: Optional[str] = None
    oracle: OracleConfig = field(default_factory=OracleConfig)
    rounds: int = 10
    master_seed: int = 0
    ground_truth_tol: float = 1e-10
    qstar_path: Optional[str] = None
    target_error: Optional[float] = None
    stop_tol: Optional[float] = None
    output: Optional[str] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if (self.environment is None) == (self.mdp_path is None):
            raise ConfigError("environment", "give exactly one of 'environment' or 'mdp'")
        if self.mdp_path is not None and self.partition_path is None and self.algorithm != "super_agent":
            raise ConfigError("partition", "an external MDP needs a partition file")
        for name in ("mdp_path", "partition_path", "qstar_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(name.replace("_path", ""), f"file not found: {path}")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if self.master_seed < 0:
            raise ConfigError("master_seed", "must be non-negative")
        if not self.ground_truth_tol > 0:
            raise ConfigError("ground_truth_tol", "must be positive")

    @property
    def run_id(self) -> str:
        o = self.oracle
        if self.algorithm == "fedq_exact":
            return f"fedq_exact:tol={o.tol!r}:seed={self.master_seed}"
        return f"{self.algorithm}:eta={o.eta!r}:E={o.local_steps}:b={o.batch_size}:seed={self.master_seed}"


def _resolve(base_dir: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base_dir / p)


def config_from_dict(doc: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Parse a run config document; relative paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    base_dir = Path(base_dir)
    known = {
        "algorithm", "environment", "mdp", "partition", "oracle", "rounds", "master_seed",
        "ground_truth_tol", "qstar", "target_error", "stop_tol", "output",
    }
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown config field")
    env = envs.spec_from_dict(doc["environment"]) if "environment" in doc else None
    odoc = doc.get("oracle", {})
    if not isinstance(odoc, dict):
        raise ConfigError("oracle", "must be an object")
    algorithm = doc.get("algorithm")
    kind = "exact" if algorithm == "fedq_exact" else "sync_q"
    ofields = {f.name for f in dataclasses.fields(OracleConfig)} - {"kind"}
    for key in odoc:
        if key not in ofields:
            raise ConfigError(f"oracle.{key}", "unknown oracle field")
    try:
        oracle = OracleConfig(kind=kind, **odoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError("oracle", str(exc)) from None
    return ExperimentConfig(
        algorithm=algorithm,
        environment=env,
        mdp_path=_resolve(base_dir, doc.get("mdp")),
        partition_path=_resolve(base_dir, doc.get("partition")),
        oracle=oracle,
        rounds=doc.get("rounds", 10),
        master_seed=doc.get("master_seed", 0),
        ground_truth_tol=doc.get("ground_truth_tol", 1e-10),
        qstar_path=_resolve(base_dir, doc.get("qstar")),
        target_error=doc.get("target_error"),
        stop_tol=doc.get("stop_tol"),
        output=_resolve(base_dir, doc.get("output")),
    )


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("document", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


# ---------------------------------------------------------------------------
# ground truth files


def save_qstar(path, q: np.ndarray, tol: float, iters: int) -> None:
    doc = {"n_states": q.shape[0], "n_actions": q.shape[1], "tol": tol, "iters": iters, "q": q.ravel().tolist()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_qstar(path, mdp: TabularMdp | None = None) -> tuple[np.ndarray, dict]:
    """Load a Q* file; with ``mdp`` given, re-verify its residual certificate."""
    doc = load_json(path)
    for key in ("n_states", "n_actions", "tol", "q"):
        if key not in doc:
            raise ConfigError(key, "missing field in Q* file")
    q = np.asarray(doc["q"], dtype=np.float64).reshape(doc["n_states"], doc["n_actions"])
    meta = {"tol": doc["tol"], "iters": doc.get("iters")}
    if mdp is not None:
        mdp.check_q(q)
        residual = float(np.max(np.abs(bellman_backup(mdp, q) - q)))
        meta["residual"] = residual
        if residual > doc["tol"]:
            raise ConfigError("q", f"residual {residual:.3e} exceeds the recorded tol {doc['tol']:g}")
    return q, meta


# ---------------------------------------------------------------------------
# runs


def build_instance(cfg: ExperimentConfig) -> tuple[TabularMdp, RegionPartition]:
    if cfg.environment is not None:
        return envs.generate(cfg.environment)
    mdp = load_mdp(cfg.mdp_path)
    partition = load_partition(cfg.partition_path) if cfg.partition_path else RegionPartition.trivial(mdp.n_states)
    check_partition(mdp, partition)
    return mdp, partition


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def format_row(row: dict) -> str:
    return ",".join(_fmt(row[c]) for c in METRIC_COLUMNS)


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list
    gamma_fed: float
    n_states: int
    region_sizes: list
    stopped_early: bool


def run_experiment(cfg: ExperimentConfig, timing: bool = False, sink=None) -> RunResult:
    """Execute one run; every metrics row is also passed to ``sink`` as it is produced.

    ``wall_ms`` is left blank unless ``timing`` is set, so that CSV bodies
    are a pure function of the config.
    """
    mdp, partition = build_instance(cfg)
    gamma_fed = compute_leakage(mdp, partition).gamma_fed
    if cfg.qstar_path:
        q_star, _ = load_qstar(cfg.qstar_path, mdp)
    else:
        q_star, _ = value_iteration(mdp, tol=cfg.ground_truth_tol)
    rows = []
    run_id = cfg.run_id

    def on_round(rec):
        row = {
            "run_id": run_id,
            "step": rec.round,
            "linf_error": rec.linf_error,
            "samples_per_agent": ";".join(str(x) for x in rec.samples_per_agent),
            "samples_total": int(sum(rec.samples_per_agent)),
            "gamma_fed": gamma_fed,
            "wall_ms": rec.wall_time_ms if timing else "",
        }
        rows.append(row)
        if sink is not None:
            sink(row)

    o = cfg.oracle
    common = dict(q_star=q_star, target_error=cfg.target_error, on_round=on_round)
    if cfg.algorithm == "fedq_exact":
        state = fedq_run(
            mdp, partition, ExactOracle(tol=o.tol), rounds=cfg.rounds, stop_tol=cfg.stop_tol, **common
        )
    else:
        synq = SynQRunConfig(
            eta=o.eta, local_steps=o.local_steps, rounds=cfg.rounds, batch_size=o.batch_size, seed=cfg.master_seed
        )
        if cfg.algorithm == "fedq_synq":
            state = fedq_synq(mdp, partition, synq, **common)
        else:
            state = super_agent_baseline(mdp, synq, **common)
    return RunResult(cfg, rows, gamma_fed, mdp.n_states, partition.region_sizes, state.stopped_early)


def write_run_csv(cfg: ExperimentConfig, path, timing: bool = False) -> RunResult:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")

        def sink(row):
            fh.write(format_row(row) + "\n")
            fh.flush()

        return run_experiment(cfg, timing=timing, sink=sink)


def first_reaching(rows: Iterable[dict], eps: float) -> Optional[dict]:
    """First metrics row whose error is at most ``eps`` (None if never)."""
    for row in rows:
        if row["linf_error"] <= eps:
            return row
    return None


# ---------------------------------------------------------------------------
# sweeps


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "grid path goes through a non-object field")
    node[keys[-1]] = value


@dataclass(frozen=True)
class SweepCell:
    index: int
    key: str
    params: tuple
    seed: int
    doc: dict = field(compare=False, hash=False)


def expand_sweep(doc: dict) -> list[SweepCell]:
    """Cartesian product of ``grid`` values times ``seeds`` over the ``base`` config.

    Each replicate seed becomes the run's master_seed and, for generated
    environments, the environment seed as well (unless the grid sets it).
    """
    if not isinstance(doc, dict) or "base" not in doc:
        raise ConfigError("sweep", "a sweep config needs a 'base' run config")
    grid = doc.get("grid", {})
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise ConfigError("grid", "must map dotted config paths to non-empty lists")
    seeds = doc.get("seeds", [doc["base"].get("master_seed", 0)])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a non-empty list of integers")
    names = list(grid)
    cells = []
    for combo in itertools.product(*(grid[n] for n in names)):
        params = tuple(zip(names, combo))
        for seed in seeds:
            cdoc = copy.deepcopy(doc["base"])
            cdoc.pop("output", None)
            cdoc["master_seed"] = seed
            if "environment" in cdoc and "environment.seed" not in grid:
                cdoc["environment"]["seed"] = seed
            for name, value in params:
                _set_path(cdoc, name, value)
            key = ",".join([f"{n}={json.dumps(v)}" for n, v in params] + [f"seed={seed}"])
            cells.append(SweepCell(len(cells), key, params, seed, cdoc))
    return cells


def _run_cell(cell: SweepCell, base_dir: str, timing: bool):
    try:
        cfg = config_from_dict(cell.doc, base_dir)
        res = run_experiment(cfg, timing=timing)
        return cell.index, "ok", res.rows
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return cell.index, f"error: {type(exc).__name__}: {exc}", []


SWEEP_COLUMNS = ("cell", "status") + METRIC_COLUMNS


def run_sweep(doc: dict, base_dir: Path | str = ".", jobs: int = 1, timing: bool = False) -> list[dict]:
    """Run every cell; rows come back ordered by cell, not by completion time."""
    cells = expand_sweep(doc)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells, itertools.repeat(str(base_dir)), itertools.repeat(timing)))
    else:
        results = [_run_cell(c, str(base_dir), timing) for c in cells]
    results.sort(key=lambda r: r[0])
    out = []
    for (index, status, rows), cell in zip(results, cells):
        if status != "ok":
            log.warning("sweep cell %s failed: %s", cell.key, status)
            out.append({"cell": cell.key, "status": status, **{c: "" for c in METRIC_COLUMNS}})
        for row in rows:
            out.append({"cell": cell.key, "status": status, **row})
    return out


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(SWEEP_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(_quote(_fmt(row[c])) for c in SWEEP_COLUMNS) + "\n")
    return buf.getvalue()


def _quote(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


# ---------------------------------------------------------------------------
# invariant checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    bound: float
    measured: float
    detail: str = ""
    witness: Optional[dict] = None

    @property
    def slack(self) -> float:
        return self.bound - self.measured

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        text = f"[{tag}] {self.name}: measured={self.measured:.6g} bound={self.bound:.6g} slack={self.slack:.3g}"
        return text + (f" ({self.detail})" if self.detail else "")


def random_q_pairs(mdp: TabularMdp, n_pairs: int, rng: np.random.Generator, min_gap: float = 0.1):
    """Pairs of Q-tables in [0, 1/(1-gamma)] whose sup-distance is at least ``min_gap``.

    Half the pairs are independent draws, the other half local perturbations
    at scales spread log-uniformly between ``min_gap`` and the table range.
    """
    hi = 1.0 / (1.0 - mdp.gamma)
    q1 = rng.uniform(0.0, hi, (n_pairs,) + mdp.shape)
    q2 = rng.uniform(0.0, hi, (n_pairs,) + mdp.shape)
    half = n_pairs // 2
    scale = np.exp(rng.uniform(np.log(min_gap), np.log(hi), half))
    q2[:half] = q1[:half] + scale[:, None, None] * rng.uniform(-1.0, 1.0, (half,) + mdp.shape)
    gap = np.abs(q1 - q2).max(axis=(1, 2))
    small = gap < min_gap
    q2[small, 0, 0] = q1[small, 0, 0] + min_gap
    return q1, q2


def local_tables(mdp, partition, q, tol, warm_start=True):
    """Exact local optima of every agent for a (batch of) Q-table(s)."""
    v = q.max(axis=-1)
    return [
        local_bellman_exact(mdp, partition, k, v, tol, q_init=q[..., reg, :] if warm_start else None)
        for k, reg in enumerate(partition.regions)
    ]


def verify_instance(
    mdp: TabularMdp,
    partition: RegionPartition,
    n_pairs: int = 1000,
    seed: int = 0,
    tol_local: float = 1e-10,
    n_step_max: int = 200,
) -> list[CheckResult]:
    """Run every operator-level check on one instance."""
    check_partition(mdp, partition)
    rng = np.random.default_rng(seed)
    prof = compute_leakage(mdp, partition)
    gamma = mdp.gamma
    results = []

    # kernel / edge classification
    worst = 0.0
    exact = True
    for k, reg in enumerate(partition.regions):
        inside = mdp.transitions[reg][:, :, partition.membership[k]].sum(axis=2)
        worst = max(worst, float(np.max(np.abs((1.0 - inside) - prof.leakage[k]))))
        exact &= bool(np.all(prof.kernel[k] ^ prof.edge[k]))
        exact &= bool(np.array_equal(prof.kernel[k], prof.leakage[k] < 1e-15))
        exact &= prof.p_max[k] == (prof.leakage[k][prof.edge[k]].max() if prof.edge[k].any() else 0.0)
    results.append(CheckResult("kernel/edge partition", exact and worst <= 1e-12, 1e-12, worst,
                               "K and E disjoint, cover S_k x A, K <=> zero leakage"))

    # contraction factor formulas
    factor_ok, worst_limit = True, 0.0
    for p in prof.p_max:
        g1 = n_step_contraction_factor(gamma, p, 1)
        seq = [n_step_contraction_factor(gamma, p, n) for n in range(1, n_step_max + 1)]
        lim = contraction_factor(gamma, p)
        worst_limit = max(worst_limit, abs(n_step_contraction_factor(gamma, p, 10**6) - lim))
        factor_ok &= g1 == gamma and all(b <= a for a, b in zip(seq, seq[1:]))
        factor_ok &= all(lim - 1e-15 <= x <= gamma for x in seq)
    results.append(CheckResult("n-step factor monotone, gamma at n=1, limit at n=1e6", factor_ok, 1e-9, worst_limit))

    q1, q2 = random_q_pairs(mdp, n_pairs, rng)
    gap = np.abs(q1 - q2).max(axis=(1, 2))
    loc1 = local_tables(mdp, partition, q1, tol_local)
    loc2 = local_tables(mdp, partition, q2, tol_local)

    # local contraction per agent
    worst_excess, witness = -np.inf, None
    for k in range(partition.n_agents):
        excess = np.abs(loc1[k] - loc2[k]).max(axis=(1, 2)) / gap - prof.gamma_fed_k[k]
        i = int(np.argmax(excess))
        if excess[i] > worst_excess:
            worst_excess = float(excess[i])
            witness = {"agent": k, "q1": q1[i].tolist(), "q2": q2[i].tolist(),
                       "gamma_fed_k": float(prof.gamma_fed_k[k])}
    passed = worst_excess <= 1e-6
    results.append(CheckResult("local contraction (max ratio - gamma_fed_k)", passed, 1e-6, worst_excess,
                               f"{n_pairs} pairs x {partition.n_agents} agents", None if passed else witness))

    # federated contraction
    t1 = aggregate(loc1, partition)[0]
    t2 = aggregate(loc2, partition)[0]
    ratio = np.abs(t1 - t2).max(axis=(1, 2)) / gap
    bound = prof.gamma_fed + 1e-6
    i = int(np.argmax(ratio))
    passed = bool(ratio[i] <= bound)
    detail = f"gamma_fed {prof.gamma_fed:.6g}"
    q_star, _ = value_iteration(mdp, tol=1e-10)
    if prof.gamma_fed == 0.0:
        one_round = float(np.abs(t1 - q_star).max())
        passed &= one_round <= 1e-8
        detail += f"; gamma_fed = 0 branch: one round reaches Q* (error {one_round:.2e})"
    results.append(CheckResult("federated contraction (max ratio)", passed, bound, float(ratio[i]),
                               detail, None if passed else {"q1": q1[i].tolist(), "q2": q2[i].tolist()}))

    # fixed point, from cold local starts
    tq = aggregate(local_tables(mdp, partition, q_star, tol_local, warm_start=False), partition)[0]
    fp = float(np.abs(tq - q_star).max())
    results.append(CheckResult("fixed point ||T_fed(Q*) - Q*||", fp <= 1e-8, 1e-8, fp))

    # idempotence with the same exterior values
    worst_idem = 0.0
    for k, reg in enumerate(partition.regions):
        v = q1.max(axis=-1)
        once = loc1[k]
        twice = local_bellman_exact(mdp, partition, k, v, tol_local, q_init=None)
        worst_idem = max(worst_idem, float(np.abs(twice - once).max()))
        # second application: feed the first output back in as the interior
        q_again = q1.copy()
        q_again[..., reg, :] = once
        again = local_bellman_exact(mdp, partition, k, q_again.max(axis=-1), tol_local, q_init=once)
        worst_idem = max(worst_idem, float(np.abs(again - once).max()))
    results.append(CheckResult("idempotence of local operator", worst_idem <= 1e-8, 1e-8, worst_idem))

    # n-step local operator contraction
    worst_n = -np.inf
    for n in (1, 2, 5, 20):
        for k, reg in enumerate(partition.regions):
            d = _n_step_local(mdp, partition, k, q1, n) - _n_step_local(mdp, partition, k, q2, n)
            r = np.abs(d).max(axis=(1, 2)) / gap
            worst_n = max(worst_n, float((r - n_step_contraction_factor(gamma, prof.p_max[k], n)).max()))
    results.append(CheckResult("n-step local contraction (ratio - gamma_fed-n)", worst_n <= 1e-9, 1e-9, worst_n))
    return results


def _n_step_local(mdp, partition, k, q, n):
    """n one-step local backups starting from q, exterior values max_a q."""
    from .federation import build_local_mdp, local_backup

    local = build_local_mdp(mdp, partition, k, q.max(axis=-1))
    qk = q[..., partition.regions[k], :]
    for _ in range(n):
        qk = local_backup(local, qk)
    return qk


# ---------------------------------------------------------------------------
# instance suites


def _sparse_random_mdp(rng, n_states, n_actions, support, gamma):
    transitions = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            idx = rng.choice(n_states, size=support, replace=False)
            w = rng.standard_exponential(support)
            transitions[s, a, idx] = w / w.sum()
    return TabularMdp(rng.random((n_states, n_actions)), transitions, gamma)


def _random_cover(rng, n_states, n_agents, overlap):
    labels = rng.integers(0, n_agents, n_states)
    labels[:n_agents] = np.arange(n_agents)
    regions = [set(np.flatnonzero(labels == k).tolist()) for k in range(n_agents)]
    for s in range(n_states):
        for k in range(n_agents):
            if rng.random() < overlap:
                regions[k].add(s)
    return RegionPartition(n_states, tuple(np.array(sorted(r), dtype=np.intp) for r in regions))


def verification_suite(count: int = 20, seed: int = 0, gamma: float = 0.9) -> list[tuple[str, TabularMdp, RegionPartition]]:
    """Small instances (|S| <= 30, |A| <= 4) mixing every generator family."""
    rng = np.random.default_rng(seed)
    out = []
    makers = ["random_mdp", "random_mdp_pmax", "sparse", "windy_h", "windy_v"]
    for i in range(count):
        kind = makers[i % len(makers)]
        s = int(rng.integers(0, 2**31))
        if kind == "random_mdp":
            n = int(rng.integers(2, 4))
            spec = envs.RandomMdpSpec(n, int(rng.integers(2, 6)), 2, 2, n_actions=int(rng.integers(2, 5)), seed=s, gamma=gamma)
            if spec.n_states > 30:
                spec = dataclasses.replace(spec, shared_states=0, share_count=1)
            mdp, part = envs.generate_random_mdp(spec)
        elif kind == "random_mdp_pmax":
            p = float(rng.choice([0.05, 0.2, 0.5, 0.9]))
            spec = envs.RandomMdpSpec(int(rng.integers(2, 5)), int(rng.integers(3, 7)), p_max=p,
                                      n_actions=int(rng.integers(2, 5)), seed=s, gamma=gamma)
            mdp, part = envs.generate_random_mdp(spec)
        elif kind == "sparse":
            n_states = int(rng.integers(8, 31))
            mdp = _sparse_random_mdp(rng, n_states, int(rng.integers(2, 5)), int(rng.integers(1, 4)), gamma)
            part = _random_cover(rng, n_states, int(rng.integers(2, 5)), overlap=0.15)
        else:
            split = "horizontal" if kind == "windy_h" else "vertical"
            w, h = int(rng.integers(3, 6)), int(rng.integers(3, 6))
            extent = h if split == "horizontal" else w
            spec = envs.WindyCliffSpec(w, h, float(rng.uniform(0, 1)), split, int(rng.integers(1, extent + 1)),
                                       seed=s, gamma=gamma)
            mdp, part = envs.generate_windy_cliff(spec)
        out.append((f"{kind}#{i}", mdp, part))
    return out
