"""Synthetic task, warm-up, end-to-end pipeline, experiments, persistence and CLI."""

from .data import SyntheticSample, gen_synthetic_dataset
from .experiments import RunConfig, ablation, run_experiment, sweep_pruning_rates
from .pipeline import PipelineConfig, run_pipeline
from .pretrain import Models, PretrainConfig, build_models, pretrain_and_freeze

__all__ = ["Models", "PipelineConfig", "PretrainConfig", "RunConfig", "SyntheticSample",
           "ablation", "build_models", "gen_synthetic_dataset", "pretrain_and_freeze",
           "run_experiment", "run_pipeline", "sweep_pruning_rates"]
