"""Federated tabular Q-learning over partitioned state spaces."""
from .mdp_core import (
    ConvergenceError,
    MdpFormatError,
    TabularMdp,
    bellman_backup,
    greedy_policy,
    load_mdp,
    policy_evaluation,
    save_mdp,
    solve_optimal_q,
    state_values,
    value_iteration,
)
from .federation import (
    AugmentedLocalMdp,
    FedRunState,
    LeakageProfile,
    OracleError,
    PartitionError,
    RegionPartition,
    RoundRecord,
    aggregate,
    build_local_mdp,
    compute_leakage,
    contraction_factor,
    federated_operator,
    fedq_run,
    load_partition,
    local_backup,
    local_bellman_exact,
    local_operator,
    n_step_contraction_factor,
    save_partition,
)
from .oracles import (
    ExactOracle,
    GenerativeModel,
    OracleConfig,
    SyncQOracle,
    SynQRunConfig,
    agent_stream,
    fedq_synq,
    super_agent_baseline,
    sync_q_step,
    synq_theory_parameters,
)
from .environments import (
    RandomMdpSpec,
    WindyCliffSpec,
    describe_partition,
    generate_random_mdp,
    generate_windy_cliff,
)

__version__ = "0.1.0"
