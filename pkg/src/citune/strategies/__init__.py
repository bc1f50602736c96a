from .config import DESK_PROFILE, PAPER_PROFILE, STRATEGIES, StrategyConfig, profile
from .expansion import GateDecision, init_key, pull_loss, pull_loss_from_embeddings, time_gate
from .importance import (
    ImportanceStore,
    SITrace,
    ewc_importance,
    fisher_diagonal,
    mas_importance,
    normalize_importance,
    output_sensitivity,
    penalty_coefficients,
    per_sample_grads,
    reg_loss,
    si_importance,
    tir_reg_loss,
    update_importance_store,
)
from .loop import StageLog, StrategyState, evaluate, load_checkpoint, retrieval_predictions, save_checkpoint, train_task
from .replay import ReplayBuffer, agem_project, buffer_size_for, buffer_update, er_merge
