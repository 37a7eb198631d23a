"""Discrete-event simulation of request-based serverless autoscaling with a
tabular Q-learning agent that tunes the per-pod concurrency limit."""

from kpasim.workload import (
    CalibrationConstants,
    ServiceDemand,
    WorkloadProfile,
    builtin_profiles,
    get_profile,
    service_demand,
)
from kpasim.simenv import (
    LoadTestReport,
    ResourceSnapshot,
    SimConfig,
    SimEnv,
    desired_pods,
    reset,
    resource_snapshot,
    run_load_test,
)
from kpasim.agent import (
    Action,
    AgentState,
    Hyperparams,
    QTable,
    RewardConfig,
    discretize,
    epsilon_at,
    load_qtable,
    q_update,
    reward,
    save_qtable,
    select_action,
    update_ref,
    valid_actions,
)
from kpasim.harness import (
    ExperimentConfig,
    SweepConfig,
    baseline_sweep,
    compare_default,
    export_report,
    fast_scale,
    pearson,
    train,
)

__version__ = "0.1.0"
