"""Experiment orchestration: configs, studies and plot-data export."""

from .config import (
    EXTERIOR,
    INTERIOR_HOLE,
    ExperimentConfig,
    OodCase,
    config_from_dict,
    config_hash,
    config_to_dict,
    group_assignment,
    load_config,
    preset,
)
from .plotdata import cmd_export_plotdata
from .records import RunManifest, read_csv, write_csv
from .studies import (
    cmd_behavior_study,
    cmd_diversity_ablation,
    cmd_inference_study,
    cmd_noise_study,
    cmd_ood_study,
    cmd_train,
    default_checkpoint,
    planted_case,
)
