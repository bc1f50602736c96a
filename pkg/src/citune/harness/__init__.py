from .config import (
    ExperimentConfig,
    default_benchmark,
    default_similarity,
    duplicate_benchmark,
    joint_stage_benchmark,
    paired_benchmark,
)
from .runner import PairwiseReport, direct_finetune, load_datasets, run_pairwise, run_stream, write_run
