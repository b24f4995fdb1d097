"""Reusable experiment drivers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .autodiff import grad_check_report
from .evaluation import EvalConfig, EvalReport, evaluate
from .graph import Box, SceneGraphSample, all_pairs
from .model import POOLING_MODES, ModelParams, forward
from .training import FitResult, TrainConfig, compute_loss, encode_offsets, fit


def split_dataset(samples: Sequence[SceneGraphSample], holdout: float = 0.3):
    """First ``1 - holdout`` of the samples for training, the rest for testing."""
    cut = len(samples) - int(round(holdout * len(samples)))
    return list(samples[:cut]), list(samples[cut:])


def train_and_eval(train, test, cfg: TrainConfig, *, num_classes: int, num_predicates: int,
                   hidden: int = 32, tasks=("predcls",)) -> tuple[FitResult, dict[str, EvalReport]]:
    result = fit(train, cfg, num_classes=num_classes, num_predicates=num_predicates, hidden=hidden)
    reports = evaluate(test, result.params, EvalConfig(T=cfg.T, pooling_mode=cfg.pooling_mode, tasks=tasks))
    return result, reports


def ablation_grid(train, test, base: TrainConfig, *, num_classes: int, num_predicates: int,
                  hidden: int = 32, iters: Sequence[int] = (0, 1, 2, 4),
                  modes: Sequence[str] = POOLING_MODES, progress=None) -> list[dict]:
    rows = []
    for T in iters:
        for mode in modes:
            cfg = replace(base, T=T, pooling_mode=mode)
            _, reports = train_and_eval(train, test, cfg, num_classes=num_classes,
                                        num_predicates=num_predicates, hidden=hidden)
            rep = reports["predcls"]
            row = {"T": T, "pooling": mode, "r_at_50": rep.r_at_50, "r_at_100": rep.r_at_100}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = ["T\tpooling\tpredcls_r50\tpredcls_r100"]
    lines += [f"{r['T']}\t{r['pooling']}\t{r['r_at_50']:.6f}\t{r['r_at_100']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def gradcheck_sample(seed: int = 0, feature_dim: int = 8, num_classes: int = 6,
                     num_predicates: int = 5) -> SceneGraphSample:
    """Seeded 3-node sample with features on all 6 ordered pairs."""
    rng = np.random.Generator(np.random.PCG64([seed, 7]))
    gts = [Box(2.0, 3.0, 12.0, 15.0), Box(20.0, 4.0, 31.0, 18.0), Box(8.0, 22.0, 25.0, 30.0)]
    proposals = [Box(g.x1 + 0.7, g.y1 - 0.4, g.x2 + 1.1, g.y2 - 0.9) for g in gts]
    offsets = np.stack([encode_offsets(p, g) for p, g in zip(proposals, gts)])
    pairs = all_pairs(3)
    preds = {(0, 1): 1 % num_predicates, (1, 2): 2 % num_predicates, (2, 0): 0}
    return SceneGraphSample(
        image_id=f"gradcheck-{seed}",
        width=40.0,
        height=40.0,
        proposals=tuple(proposals),
        node_features=rng.normal(size=(3, feature_dim)),
        edge_features={p: rng.normal(size=feature_dim) for p in pairs},
        gt_classes=(1 % num_classes, 2 % num_classes, 0),
        gt_offsets=offsets,
        gt_predicates=preds,
    )


def run_gradcheck(T: int = 2, mode: str = "weighted", hidden: int = 8, feature_dim: int = 6,
                  num_classes: int = 6, num_predicates: int = 5, seed: int = 0,
                  eps: float = 1e-5) -> tuple[float, str, int]:
    """Finite-difference check of the full training loss through ``T`` rounds."""
    sample = gradcheck_sample(seed, feature_dim, num_classes, num_predicates)
    params = ModelParams.init(feature_dim, hidden, num_classes, num_predicates, seed)

    def objective(p):
        pred = forward(sample, p, T, mode)
        return compute_loss(pred, sample).tensor

    return grad_check_report(objective, params, eps)
