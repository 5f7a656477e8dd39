"""Federated methods and the local-training primitives they are built from."""

from pfsim.strategies.methods import (
    BASES,
    REGISTRY,
    ClientStrategyState,
    LocalContext,
    LocalResult,
    Strategy,
    StrategyConfig,
    build_strategy,
    register,
    slot_seed,
    unseen_inference_policy,
)
from pfsim.strategies.training import (
    choose_cluster,
    ditto_round,
    fedavg_aggregate,
    fedem_local,
    fedopt_server_step,
    finetune_before_eval,
    hypcluster_assign,
    interpolate_personal,
    local_train,
    pfedme_local,
    prox_solve,
    responsibilities,
)
