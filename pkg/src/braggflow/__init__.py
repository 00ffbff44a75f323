"""braggflow: active-learning training workflows for structure-finding models
on synthetic neutron time-of-flight Bragg profiles.

The package splits into:

- lattice      symmetry classes, unit cells, d-spacings, parameter sampling
- simulator    synthetic Bragg-profile forward model + batch worker pool
- nnet         multitask network, heteroscedastic loss, training loop
- alpolicy     uncertainty-weighted Gaussian-mixture sampling policy
- orchestrator baseline / serial / streaming workflow schedules + reports
- config, cli  run configuration and the command-line driver
"""

from .lattice import (
    CellParams,
    ParamBatch,
    ParamSpace,
    SymmetryClass,
    d_spacing,
    sample_uniform,
    sweep_grid,
)
from .simulator import BraggProfile, SimConfig, TofGrid, simulate_batch, simulate_profile
from .nnet import Dataset, ModelState, TrainConfig, evaluate, forward, loss, train
from .alpolicy import ALDensity, StudySet, UniformPrior, compute_weights, next_batch
from .config import RunConfig, load_config, preset_config
from .orchestrator import (
    RunReport,
    compare_runs,
    run_baseline,
    run_serial,
    run_streaming,
    run_workflow,
)

__version__ = "0.1.0"

__all__ = [
    "CellParams", "ParamBatch", "ParamSpace", "SymmetryClass",
    "d_spacing", "sample_uniform", "sweep_grid",
    "BraggProfile", "SimConfig", "TofGrid", "simulate_batch", "simulate_profile",
    "Dataset", "ModelState", "TrainConfig", "evaluate", "forward", "loss", "train",
    "ALDensity", "StudySet", "UniformPrior", "compute_weights", "next_batch",
    "RunConfig", "load_config", "preset_config",
    "RunReport", "compare_runs", "run_baseline", "run_serial", "run_streaming", "run_workflow",
    "__version__",
]
