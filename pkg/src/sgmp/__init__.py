"""Scene graph inference by iterative message passing over primal and dual graphs."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .data import DatasetFile, SynthConfig, load_dataset, save_dataset, synth_generate
from .evaluation import EvalConfig, evaluate
from .graph import Box, SceneGraphSample, VocabMeta
from .model import ModelParams, forward
from .training import TrainConfig, fit

__all__ = [
    "Box", "DatasetFile", "EvalConfig", "ModelParams", "SceneGraphSample", "SynthConfig",
    "Tensor", "TrainConfig", "VocabMeta", "backward", "evaluate", "fit", "forward", "grad_check",
    "load_dataset", "no_grad", "save_dataset", "synth_generate",
]
