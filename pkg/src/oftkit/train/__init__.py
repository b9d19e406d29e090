from .harness import (
    RunLog,
    TrainConfig,
    attach,
    fit,
    make_toy_task,
    matched_index,
    post_stage_magnitude_fit,
    run_energy_drift_experiment,
    run_fig2_experiment,
    run_finetune,
    step,
)
from .model import Layer, LowRankDelta, ToyModel
from .optim import SGD, Adam
