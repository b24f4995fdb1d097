"""Scene-graph data types: boxes, samples, vocabularies and message channels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .errors import DataError, ValidationError

Pair = tuple[int, int]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form; area is ``(x2-x1)*(y2-y1)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"box has non-finite coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"box corners out of order {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)


def union_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


@dataclass(frozen=True)
class VocabMeta:
    class_names: tuple[str, ...]
    predicate_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "predicate_names", tuple(self.predicate_names))
        for label, names in (("class_names", self.class_names), ("predicate_names", self.predicate_names)):
            if not names:
                raise ValidationError(f"{label} must be non-empty")
            if len(set(names)) != len(names):
                raise ValidationError(f"{label} contains duplicate names")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    @classmethod
    def default(cls, num_classes: int, num_predicates: int) -> "VocabMeta":
        return cls(
            ("background",) + tuple(f"class{k}" for k in range(1, num_classes)),
            ("none",) + tuple(f"pred{k}" for k in range(1, num_predicates)),
        )


@dataclass(frozen=True, eq=False)
class SceneGraphSample:
    """One image: proposals, visual features and (sparse) ground truth.

    ``gt_predicates`` holds labelled ordered pairs only; a pair mapped to 0 is
    labelled "none", while an absent pair is unlabelled.
    """

    image_id: str
    width: float
    height: float
    proposals: tuple[Box, ...]
    node_features: np.ndarray
    edge_features: dict[Pair, np.ndarray]
    gt_classes: tuple[int, ...]
    gt_offsets: np.ndarray
    gt_predicates: dict[Pair, int] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.proposals)

    @property
    def feature_dim(self) -> int:
        return int(self.node_features.shape[1])

    def proposal_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.proposals], dtype=np.float64).reshape(-1, 4)

    def edge_feature_matrix(self, edges: Iterable[Pair]) -> np.ndarray:
        rows = []
        for pair in edges:
            feat = self.edge_features.get(pair)
            if feat is None:
                raise DataError(f"{self.image_id}: missing edge feature for pair {pair}")
            rows.append(feat)
        if not rows:
            return np.zeros((0, self.feature_dim))
        return np.stack(rows)

    def gt_triplets(self) -> list[tuple[int, int, int]]:
        """Ground-truth (subject, predicate, object) triplets, ``predicate >= 1``, sorted by pair."""
        return [(i, p, j) for (i, j), p in sorted(self.gt_predicates.items()) if p >= 1]

    def subset(self, keep: list[int]) -> "SceneGraphSample":
        """Restrict to the given node indices (renumbered in the given order)."""
        remap = {old: new for new, old in enumerate(keep)}
        return SceneGraphSample(
            image_id=self.image_id,
            width=self.width,
            height=self.height,
            proposals=tuple(self.proposals[k] for k in keep),
            node_features=self.node_features[keep],
            edge_features={(remap[i], remap[j]): f for (i, j), f in self.edge_features.items()
                           if i in remap and j in remap},
            gt_classes=tuple(self.gt_classes[k] for k in keep),
            gt_offsets=self.gt_offsets[keep],
            gt_predicates={(remap[i], remap[j]): p for (i, j), p in self.gt_predicates.items()
                           if i in remap and j in remap},
        )


@dataclass(frozen=True)
class ChannelIndex:
    """Primal/dual channels: per-node lists of outbound and inbound edge indices."""

    edges: tuple[Pair, ...]
    outbound: tuple[tuple[int, ...], ...]
    inbound: tuple[tuple[int, ...], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.outbound)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def sources(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=np.intp)

    def targets(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=np.intp)


def _check_pair(pair: Pair, n: int) -> None:
    i, j = pair
    if i == j:
        raise ValidationError(f"self-pair ({i},{j}) is not a valid edge")
    if not (0 <= i < n and 0 <= j < n):
        raise ValidationError(f"pair ({i},{j}) out of range for {n} nodes")


def all_pairs(n: int) -> list[Pair]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def build_edge_set(
    n: int,
    labeled_pairs: Iterable[Pair],
    mode: Literal["train", "test"],
    quota: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[Pair]:
    """Edges to run inference on.

    Test mode gives every ordered pair.  Train mode gives the labelled pairs
    (sorted) followed by unlabelled pairs in ``rng``-shuffled order, capped at
    ``quota`` edges in total; if labelled pairs alone exceed the quota a seeded
    subset of them is kept.
    """
    labeled = sorted(set(labeled_pairs))
    for pair in labeled:
        _check_pair(pair, n)
    if mode == "test":
        return all_pairs(n)
    if mode != "train":
        raise ValidationError(f"unknown edge-set mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    quota = len(labeled) + n * (n - 1) if quota is None else quota
    if len(labeled) > quota:
        pick = sorted(rng.choice(len(labeled), size=quota, replace=False).tolist())
        return [labeled[k] for k in pick]
    labeled_set = set(labeled)
    unlabeled = [p for p in all_pairs(n) if p not in labeled_set]
    order = rng.permutation(len(unlabeled)) if unlabeled else []
    fill = [unlabeled[k] for k in order[: quota - len(labeled)]]
    return labeled + fill


def build_channel_index(edges: Iterable[Pair], n: int) -> ChannelIndex:
    edges = tuple((int(i), int(j)) for i, j in edges)
    if len(set(edges)) != len(edges):
        raise ValidationError("duplicate edge in edge list")
    outbound: list[list[int]] = [[] for _ in range(n)]
    inbound: list[list[int]] = [[] for _ in range(n)]
    for k, pair in enumerate(edges):
        _check_pair(pair, n)
        outbound[pair[0]].append(k)
        inbound[pair[1]].append(k)
    return ChannelIndex(edges, tuple(map(tuple, outbound)), tuple(map(tuple, inbound)))


def validate_sample(s: SceneGraphSample, v: VocabMeta) -> None:
    """Raise :class:`ValidationError` naming the first violated field and index."""
    where = f"sample {s.image_id!r}"
    n = len(s.proposals)
    if n < 1:
        raise ValidationError(f"{where}: proposals must be non-empty")
    if not (s.width > 0 and s.height > 0):
        raise ValidationError(f"{where}: width/height must be positive")
    for k, b in enumerate(s.proposals):
        if min(b.as_tuple()) < 0:
            raise ValidationError(f"{where}: proposals[{k}] has negative coordinates")
    nf = np.asarray(s.node_features)
    if nf.ndim != 2 or nf.shape[0] != n:
        raise ValidationError(f"{where}: node_features shape {nf.shape} does not match {n} proposals")
    if not np.isfinite(nf).all():
        raise ValidationError(f"{where}: node_features contain non-finite values")
    d = nf.shape[1]
    if len(s.gt_classes) != n:
        raise ValidationError(f"{where}: gt_classes has length {len(s.gt_classes)}, expected {n}")
    for k, c in enumerate(s.gt_classes):
        if not 0 <= c < v.num_classes:
            raise ValidationError(f"{where}: gt_classes[{k}]={c} index out of range for {v.num_classes} classes")
    off = np.asarray(s.gt_offsets)
    if off.shape != (n, 4) or not np.isfinite(off).all():
        raise ValidationError(f"{where}: gt_offsets must be a finite {n}x4 array, got shape {off.shape}")
    for (i, j), feat in s.edge_features.items():
        if i == j:
            raise ValidationError(f"{where}: edge_features has self-pair ({i},{j})")
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"{where}: edge_features pair ({i},{j}) index out of range")
        if np.shape(feat) != (d,) or not np.isfinite(feat).all():
            raise ValidationError(f"{where}: edge_features[({i},{j})] must be a finite vector of length {d}")
    for (i, j), p in s.gt_predicates.items():
        if i == j:
            raise ValidationError(f"{where}: gt_predicates has self-pair ({i},{j})")
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"{where}: gt_predicates pair ({i},{j}) index out of range")
        if not 0 <= p < v.num_predicates:
            raise ValidationError(
                f"{where}: gt_predicates[({i},{j})]={p} index out of range for {v.num_predicates} predicates")
        if s.edge_features and (i, j) not in s.edge_features:
            raise ValidationError(f"{where}: labelled pair ({i},{j}) has no edge_features entry")
