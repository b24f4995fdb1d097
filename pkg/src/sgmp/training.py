"""Losses, target encoding, minibatch sampling, optimizers and the epoch loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, GeometryError, NumericError, TrainingError
from .graph import Box, Pair, SceneGraphSample, build_edge_set
from .model import POOLING_MODES, ModelParams, Prediction, forward


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    T: int = 2
    pooling_mode: str = "weighted"
    max_boxes: int = 128
    max_edges: int = 128
    bbox_loss_weight: float = 1.0
    seed: int = 0
    optimizer: Literal["sgd", "adam"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("epochs", "T", "max_edges"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_boxes < 1:
            raise ConfigError("max_boxes must be at least 1")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")


@dataclass
class LossBreakdown:
    cls_loss: float
    pred_loss: float
    bbox_loss: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"cls_loss": self.cls_loss, "pred_loss": self.pred_loss,
                "bbox_loss": self.bbox_loss, "total": self.total}


# -- losses ------------------------------------------------------------------

def cross_entropy(x: Tensor, label, *, from_logits: bool = False) -> Tensor:
    """Negative log-likelihood of ``label``.

    ``x`` is a distribution (or logits with ``from_logits=True``) of shape
    ``(k,)``, or a batch ``(N, k)`` with ``label`` of length N, in which case
    the mean over rows is returned.
    """
    batch = x.ndim == 2
    rows = x if batch else ad.reshape(x, (1, x.shape[0]))
    labels = np.atleast_1d(np.asarray(label, dtype=np.intp))
    k = rows.shape[1]
    if labels.shape[0] != rows.shape[0]:
        raise IndexError(f"expected {rows.shape[0]} labels, got {labels.shape[0]}")
    if ((labels < 0) | (labels >= k)).any():
        raise IndexError(f"label out of range for {k} classes")
    idx = np.arange(rows.shape[0])
    if from_logits:
        picked = ad.pick(ad.log_softmax(rows), idx, labels)
    else:
        picked = ad.log(ad.pick(rows, idx, labels))
    return -ad.mean(picked) if batch else -ad.sum(picked)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Sum of absolute differences; zero subgradient where they are equal."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    return ad.sum(ad.abs(pred - target))


def encode_offsets(proposal: Box, gt: Box) -> np.ndarray:
    """Regression targets (dx, dy, log dw, log dh) of ``gt`` relative to ``proposal``."""
    pw, ph = proposal.width, proposal.height
    if not (pw > 0 and ph > 0):
        raise GeometryError(f"degenerate proposal {proposal.as_tuple()}")
    gw, gh = gt.width, gt.height
    if not (gw > 0 and gh > 0):
        raise GeometryError(f"degenerate target box {gt.as_tuple()}")
    px, py = proposal.x1 + 0.5 * pw, proposal.y1 + 0.5 * ph
    gx, gy = gt.x1 + 0.5 * gw, gt.y1 + 0.5 * gh
    return np.array([(gx - px) / pw, (gy - py) / ph, math.log(gw / pw), math.log(gh / ph)])


# -- sampling ------------------------------------------------------------------

@dataclass
class Minibatch:
    boxes: list[int]                 # indices into the original sample
    edges: list[Pair]                # pairs in the renumbered (subset) indexing
    edge_labels: list[int]


def sample_minibatch(s: SceneGraphSample, cfg: TrainConfig, rng: np.random.Generator) -> Minibatch:
    n = s.num_nodes
    if n <= cfg.max_boxes:
        boxes = list(range(n))
    else:
        boxes = sorted(rng.choice(n, size=cfg.max_boxes, replace=False).tolist())
    remap = {old: new for new, old in enumerate(boxes)}
    labeled = {(remap[i], remap[j]): p for (i, j), p in s.gt_predicates.items()
               if i in remap and j in remap}
    edges = build_edge_set(len(boxes), labeled, "train", quota=cfg.max_edges, rng=rng)
    return Minibatch(boxes, edges, [labeled.get(pair, 0) for pair in edges])


# -- loss assembly -----------------------------------------------------------

def compute_loss(pred: Prediction, s: SceneGraphSample, bbox_loss_weight: float = 1.0) -> LossBreakdown:
    """Mean class CE + mean predicate CE + weighted mean l1 box loss.

    ``s`` must be the sample the prediction was made on; edges not in
    ``gt_predicates`` count as "none".
    """
    n, C = pred.class_logits.shape
    classes = np.asarray(s.gt_classes, dtype=np.intp)
    cls = cross_entropy(pred.class_logits, classes, from_logits=True)
    if pred.edges:
        labels = [s.gt_predicates.get(pair, 0) for pair in pred.edges]
        pred_l = cross_entropy(pred.pred_logits, labels, from_logits=True)
    else:
        pred_l = Tensor(0.0)
    fg = np.flatnonzero(classes > 0)
    if fg.size:
        flat = ad.reshape(pred.bbox_offsets, (n, 4 * C))
        rows = np.repeat(fg, 4)
        cols = (4 * classes[fg])[:, None] + np.arange(4)
        chosen = ad.pick(flat, rows, cols.reshape(-1))
        target = np.asarray(s.gt_offsets, dtype=np.float64)[fg].reshape(-1)
        bbox = l1_loss(chosen, target) * (1.0 / fg.size)
    else:
        bbox = Tensor(0.0)
    total = cls + pred_l + bbox * bbox_loss_weight
    return LossBreakdown(cls.item(), pred_l.item(), bbox.item(), total.item(), tensor=total)


# -- optimizers ----------------------------------------------------------------

def _grad_of(name: str, t: Tensor) -> np.ndarray:
    g = np.zeros_like(t.data) if t.grad is None else t.grad
    if not np.isfinite(g).all():
        raise TrainingError(f"non-finite gradient for parameter {name}")
    return g


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams) -> None:
        grads = [(t, _grad_of(name, t)) for name, t in params.named_tensors()]
        for t, g in grads:
            t.data -= self.lr * g


class Adam:
    """Adam with bias correction; moment buffers keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        grads = [(name, t, _grad_of(name, t)) for name, t in params.named_tensors()]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t, g in grads:
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def optimizer_step(params: ModelParams, optimizer) -> None:
    optimizer.step(params)


# -- epoch loop ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    pred_loss: float
    bbox_loss: float
    total: float
    wall_ms: float
    metrics: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {k: v for k, v in asdict(self).items() if k != "metrics"}
        rec.update(self.metrics)
        return json.dumps(rec)


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochRecord]


def training_rng(seed: int) -> np.random.Generator:
    # separate stream from parameter initialisation, which uses PCG64(seed)
    return np.random.Generator(np.random.PCG64([seed, 1]))


def fit(
    samples: Sequence[SceneGraphSample],
    cfg: TrainConfig,
    *,
    num_classes: int,
    num_predicates: int,
    hidden: int = 32,
    init_params: ModelParams | None = None,
    eval_fn: Callable[[ModelParams], dict[str, float]] | None = None,
    eval_every: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Per-image SGD/Adam training of the full init -> iterate -> heads pipeline."""
    cfg.validate()
    if not samples:
        raise TrainingError("cannot train on an empty dataset")
    if init_params is None:
        params = ModelParams.init(samples[0].feature_dim, hidden, num_classes, num_predicates, cfg.seed)
    else:
        params = init_params
    opt = make_optimizer(cfg)
    rng = training_rng(cfg.seed)
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        sums = np.zeros(4)
        for idx in rng.permutation(len(samples)):
            s = samples[idx]
            mb = sample_minibatch(s, cfg, rng)
            sub = s if len(mb.boxes) == s.num_nodes else s.subset(mb.boxes)
            try:
                pred = forward(sub, params, cfg.T, cfg.pooling_mode, edges=mb.edges)
                loss = compute_loss(pred, sub, cfg.bbox_loss_weight)
                params.zero_grad()
                ad.backward(loss.tensor)
                opt.step(params)
            except (NumericError, TrainingError) as exc:
                raise TrainingError(f"epoch {epoch}, image {s.image_id}: {exc}") from exc
            sums += (loss.cls_loss, loss.pred_loss, loss.bbox_loss, loss.total)
        means = sums / len(samples)
        rec = EpochRecord(epoch, *map(float, means), wall_ms=(time.perf_counter() - start) * 1e3)
        if eval_fn is not None and eval_every and (epoch % eval_every == 0 or epoch == cfg.epochs):
            rec.metrics = eval_fn(params)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return FitResult(params, history)
