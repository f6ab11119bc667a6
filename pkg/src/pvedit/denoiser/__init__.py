"""Interchangeable noise predictors: a toy transformer and an analytic mixture oracle."""

from .dit import (
    AttnControl,
    ToyDiT,
    ToyDiTConfig,
    load_checkpoint,
    predict_eps,
    predict_eps_paired,
    save_checkpoint,
)
from .gmm import GmmDenoiser, GmmOracle, analytic_eps, two_component
from .training import GradProbe, TrainConfig, grad_check, make_probe, train, train_step

__all__ = [
    "AttnControl", "ToyDiT", "ToyDiTConfig", "load_checkpoint", "predict_eps", "predict_eps_paired",
    "save_checkpoint", "GmmDenoiser", "GmmOracle", "analytic_eps", "two_component", "GradProbe",
    "TrainConfig", "grad_check", "make_probe", "train", "train_step",
]
