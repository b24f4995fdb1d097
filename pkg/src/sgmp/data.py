"""Dataset files, the context-ambiguous synthetic generator, and DOT export.

File layout (one JSON document per line)::

    {"format": "sgmp-dataset", "version": 1, "feature_dim": D, "class_names": [...],
     "predicate_names": [...], "provenance": {...}, "num_samples": N}
    {"image_id": ..., "width": ..., "height": ..., "proposals": [[x1,y1,x2,y2], ...],
     "node_features": [[...], ...], "edge_features": [[i, j, [...]], ...],
     "gt_classes": [...], "gt_offsets": [[...], ...], "gt_predicates": [[i, j, p], ...]}
    ...

Floats are written with 17 significant digits so a save/load round trip is
bit-exact; keys are always emitted in the order above.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .graph import Box, Pair, SceneGraphSample, VocabMeta, validate_sample
from .training import encode_offsets

FORMAT_NAME = "sgmp-dataset"
FORMAT_VERSION = 1
SPATIAL_RELATIONS = ("left-of", "above", "overlapping", "containing")


@dataclass
class DatasetFile:
    vocab: VocabMeta
    feature_dim: int
    samples: list[SceneGraphSample] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


# -- canonical text encoding ----------------------------------------------------

def _fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"cannot serialise non-finite value {x!r}")
    text = format(x, ".17g")
    # keep floats recognisable as floats after parsing
    if all(ch in "-0123456789" for ch in text):
        text += ".0"
    return text


def _dump(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _sample_record(s: SceneGraphSample) -> dict:
    return {
        "image_id": s.image_id,
        "width": float(s.width),
        "height": float(s.height),
        "proposals": [[float(c) for c in b.as_tuple()] for b in s.proposals],
        "node_features": np.asarray(s.node_features, dtype=np.float64),
        "edge_features": [[i, j, np.asarray(f, dtype=np.float64)] for (i, j), f in sorted(s.edge_features.items())],
        "gt_classes": [int(c) for c in s.gt_classes],
        "gt_offsets": np.asarray(s.gt_offsets, dtype=np.float64),
        "gt_predicates": [[i, j, int(p)] for (i, j), p in sorted(s.gt_predicates.items())],
    }


def _parse_sample(rec: dict, feature_dim: int) -> SceneGraphSample:
    n = len(rec["proposals"])
    nf = np.array(rec["node_features"], dtype=np.float64).reshape(n, feature_dim) if n else np.zeros((0, feature_dim))
    return SceneGraphSample(
        image_id=str(rec["image_id"]),
        width=float(rec["width"]),
        height=float(rec["height"]),
        proposals=tuple(Box(*map(float, b)) for b in rec["proposals"]),
        node_features=nf,
        edge_features={(int(i), int(j)): np.array(f, dtype=np.float64) for i, j, f in rec["edge_features"]},
        gt_classes=tuple(int(c) for c in rec["gt_classes"]),
        gt_offsets=np.array(rec["gt_offsets"], dtype=np.float64).reshape(n, 4),
        gt_predicates={(int(i), int(j)): int(p) for i, j, p in rec["gt_predicates"]},
    )


def save_dataset(d: DatasetFile, path: str | Path) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "feature_dim": int(d.feature_dim),
        "class_names": list(d.vocab.class_names),
        "predicate_names": list(d.vocab.predicate_names),
        "provenance": d.provenance,
        "num_samples": len(d.samples),
    }
    lines = [_dump(header)] + [_dump(_sample_record(s)) for s in d.samples]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path: str | Path) -> DatasetFile:
    """Parse and fully validate a dataset file."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise ParseError("missing header", line=1)
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed header: {exc.msg}", line=1) from exc
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise ParseError("not an sgmp-dataset version 1 file", line=1)
        try:
            vocab = VocabMeta(header["class_names"], header["predicate_names"])
            feature_dim = int(header["feature_dim"])
            expected = int(header["num_samples"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"header missing field {exc}", line=1) from exc
        samples = []
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                s = _parse_sample(rec, feature_dim)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                msg = exc.msg if isinstance(exc, json.JSONDecodeError) else str(exc)
                raise ParseError(f"malformed sample record: {msg}", line=lineno) from exc
            try:
                validate_sample(s, vocab)
                if s.feature_dim != feature_dim:
                    raise ValidationError(f"feature dim {s.feature_dim} != header {feature_dim}")
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            samples.append(s)
        if len(samples) != expected:
            raise ParseError(f"expected {expected} samples, found {len(samples)} (truncated file?)",
                             line=lineno + 1)
    return DatasetFile(vocab, feature_dim, samples, dict(header.get("provenance", {})))


# -- synthetic scenes -----------------------------------------------------------

@dataclass
class SynthConfig:
    num_images: int = 100
    min_objects: int = 3
    max_objects: int = 6
    num_classes: int = 6
    num_predicates: int = 5
    feature_dim: int = 16
    feature_noise_sigma: float = 0.1
    context_ambiguity: float = 0.5
    seed: int = 0
    world_seed: int | None = None
    canvas_width: float = 64.0
    canvas_height: float = 64.0
    min_box_side: float = 8.0
    max_box_side: float = 24.0
    max_pair_iou: float = 0.3
    proposal_jitter: float = 0.08
    none_fraction: float = 0.3

    def validate(self) -> None:
        if self.num_images < 0:
            raise ConfigError("num_images must be non-negative")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.num_classes < 2 or self.num_predicates < 2:
            raise ConfigError("need at least one real class and one real predicate")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.feature_noise_sigma < 0:
            raise ConfigError("feature_noise_sigma must be non-negative")
        if not 0.0 <= self.context_ambiguity <= 1.0:
            raise ConfigError("context_ambiguity must lie in [0, 1]")
        if not 0.0 <= self.none_fraction <= 1.0:
            raise ConfigError("none_fraction must lie in [0, 1]")
        if not 0 < self.min_box_side <= self.max_box_side <= min(self.canvas_width, self.canvas_height):
            raise ConfigError("need 0 < min_box_side <= max_box_side <= canvas size")
        capacity = int(self.canvas_width // self.min_box_side) * int(self.canvas_height // self.min_box_side)
        if self.min_objects > capacity:
            raise ConfigError(f"min_objects={self.min_objects} exceeds canvas capacity {capacity}")

    def config_hash(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def spatial_relation(subj: Box, obj: Box) -> str:
    """Coarse layout of an ordered pair.

    ``containing`` and ``overlapping`` take precedence; disjoint pairs are
    ``left-of`` when separated mostly horizontally (|dx| >= |dy| between
    centres) and ``above`` otherwise.
    """
    if subj.contains(obj):
        return "containing"
    iw = min(subj.x2, obj.x2) - max(subj.x1, obj.x1)
    ih = min(subj.y2, obj.y2) - max(subj.y1, obj.y1)
    if iw > 0 and ih > 0:
        return "overlapping"
    dx = (obj.x1 + obj.x2) - (subj.x1 + subj.x2)
    dy = (obj.y1 + obj.y2) - (subj.y1 + subj.y2)
    return "left-of" if abs(dx) >= abs(dy) else "above"


@dataclass
class World:
    """Latent generative tables shared by every image drawn from one world seed.

    Edge "cues" index ``cue_emb``: cue ``p < R`` is the local appearance of
    predicate ``p``; cue ``R`` is the single appearance shared by every
    ambiguous class pair, whatever its predicate.
    """

    num_classes: int
    num_predicates: int
    ambiguous: np.ndarray         # (C, C) bool, rows/cols 0 unused
    ambiguous_pred: np.ndarray    # (C, C) predicate for ambiguous pairs
    local_pred: np.ndarray        # (C, C, 4) predicate keyed by spatial relation
    class_emb: np.ndarray         # (C, D)
    cue_emb: np.ndarray           # (R + 1, D)
    node_geom: np.ndarray         # (D, 4)
    edge_geom: np.ndarray         # (D, 8)

    @property
    def ambiguous_cue(self) -> int:
        return self.num_predicates

    def rule(self, subj_class: int, obj_class: int, relation: str) -> tuple[int, int]:
        """(predicate, edge cue) for an ordered pair of real classes."""
        if self.ambiguous[subj_class, obj_class]:
            return int(self.ambiguous_pred[subj_class, obj_class]), self.ambiguous_cue
        p = int(self.local_pred[subj_class, obj_class, SPATIAL_RELATIONS.index(relation)])
        return p, p


def build_world(cfg: SynthConfig) -> World:
    seed = cfg.seed if cfg.world_seed is None else cfg.world_seed
    rng = np.random.Generator(np.random.PCG64([seed, 0]))
    C, R, D = cfg.num_classes, cfg.num_predicates, cfg.feature_dim
    real = [(a, b) for a in range(1, C) for b in range(1, C)]
    n_amb = int(round(cfg.context_ambiguity * len(real)))
    ambiguous = np.zeros((C, C), dtype=bool)
    for k in rng.permutation(len(real))[:n_amb]:
        ambiguous[real[k]] = True
    ambiguous_pred = np.zeros((C, C), dtype=np.int64)
    ambiguous_pred[1:, 1:] = rng.integers(1, R, size=(C - 1, C - 1))
    is_none = rng.random((C, C, len(SPATIAL_RELATIONS))) < cfg.none_fraction
    local_pred = np.where(is_none, 0, rng.integers(1, R, size=(C, C, len(SPATIAL_RELATIONS))))
    return World(
        num_classes=C,
        num_predicates=R,
        ambiguous=ambiguous,
        ambiguous_pred=ambiguous_pred,
        local_pred=local_pred,
        class_emb=rng.normal(size=(C, D)),
        cue_emb=rng.normal(size=(R + 1, D)),
        node_geom=rng.normal(scale=0.5, size=(D, 4)),
        edge_geom=rng.normal(scale=0.5, size=(D, 8)),
    )


def _place_boxes(n: int, cfg: SynthConfig, rng: np.random.Generator) -> list[Box] | None:
    from .evaluation import iou

    W, H = cfg.canvas_width, cfg.canvas_height
    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(200):
            w = rng.uniform(cfg.min_box_side, cfg.max_box_side)
            h = rng.uniform(cfg.min_box_side, cfg.max_box_side)
            x1 = rng.uniform(0.0, W - w)
            y1 = rng.uniform(0.0, H - h)
            cand = Box(x1, y1, x1 + w, y1 + h)
            if all(iou(cand, b) <= cfg.max_pair_iou for b in boxes):
                boxes.append(cand)
                break
        else:
            return None
    return boxes


def _jitter(gt: Box, cfg: SynthConfig, rng: np.random.Generator) -> Box:
    W, H = cfg.canvas_width, cfg.canvas_height
    for _ in range(20):
        d = rng.normal(scale=cfg.proposal_jitter, size=4) * (gt.width, gt.height, gt.width, gt.height)
        x1 = min(max(gt.x1 + d[0], 0.0), W)
        y1 = min(max(gt.y1 + d[1], 0.0), H)
        x2 = min(max(gt.x2 + d[2], 0.0), W)
        y2 = min(max(gt.y2 + d[3], 0.0), H)
        if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
            return Box(x1, y1, x2, y2)
    return gt


def _node_geometry(b: Box, W: float, H: float) -> np.ndarray:
    return np.array([(b.x1 + b.x2) / (2 * W) - 0.5, (b.y1 + b.y2) / (2 * H) - 0.5, b.width / W, b.height / H])


def _edge_geometry(s: Box, o: Box, W: float, H: float) -> np.ndarray:
    ux1, uy1 = min(s.x1, o.x1), min(s.y1, o.y1)
    ux2, uy2 = max(s.x2, o.x2), max(s.y2, o.y2)
    return np.array([
        ux1 / W - 0.5, uy1 / H - 0.5, ux2 / W - 0.5, uy2 / H - 0.5,
        ((o.x1 + o.x2) - (s.x1 + s.x2)) / (2 * W),
        ((o.y1 + o.y2) - (s.y1 + s.y2)) / (2 * H),
        math.log(s.width / o.width),
        math.log(s.height / o.height),
    ])


@dataclass
class SampleLatents:
    gt_boxes: list[Box]
    relations: dict[Pair, str]
    cues: dict[Pair, int]
    predicates: dict[Pair, int]   # includes "none" pairs


def synth_generate(cfg: SynthConfig, *, return_latents: bool = False):
    """Draw a dataset whose ambiguous class pairs look identical edge-locally.

    Node feature = class embedding + projected box geometry + noise.  Edge
    feature = cue embedding + projected union/relative geometry of the two
    proposals + noise.  Unambiguous class pairs expose their predicate through
    the cue; ambiguous pairs all share one cue, so their predicate is only
    recoverable from the classes at both ends.
    """
    cfg.validate()
    world = build_world(cfg)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    C, R, D = cfg.num_classes, cfg.num_predicates, cfg.feature_dim
    W, H = cfg.canvas_width, cfg.canvas_height
    sigma = cfg.feature_noise_sigma
    vocab = VocabMeta.default(C, R)
    samples, latents = [], []
    for idx in range(cfg.num_images):
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        for _ in range(50):
            gts = _place_boxes(n, cfg, rng)
            if gts is not None:
                break
        else:
            raise ConfigError(f"could not place {n} boxes with IoU <= {cfg.max_pair_iou} on the canvas")
        classes = [int(c) for c in rng.integers(1, C, size=n)]
        proposals = [_jitter(g, cfg, rng) for g in gts]
        offsets = np.stack([encode_offsets(p, g) for p, g in zip(proposals, gts)])
        node_f = np.stack([world.class_emb[c] + world.node_geom @ _node_geometry(p, W, H)
                           for c, p in zip(classes, proposals)])
        node_f = node_f + rng.normal(scale=sigma, size=node_f.shape) if sigma > 0 else node_f
        edge_f: dict[Pair, np.ndarray] = {}
        gt_pred: dict[Pair, int] = {}
        lat = SampleLatents(gts, {}, {}, {})
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                rel = spatial_relation(gts[i], gts[j])
                p, cue = world.rule(classes[i], classes[j], rel)
                f = world.cue_emb[cue] + world.edge_geom @ _edge_geometry(proposals[i], proposals[j], W, H)
                if sigma > 0:
                    f = f + rng.normal(scale=sigma, size=D)
                edge_f[(i, j)] = f
                if p >= 1:
                    gt_pred[(i, j)] = p
                lat.relations[(i, j)], lat.cues[(i, j)], lat.predicates[(i, j)] = rel, cue, p
        samples.append(SceneGraphSample(
            image_id=f"synth-{cfg.seed}-{idx:05d}",
            width=W,
            height=H,
            proposals=tuple(proposals),
            node_features=node_f,
            edge_features=edge_f,
            gt_classes=tuple(classes),
            gt_offsets=offsets,
            gt_predicates=gt_pred,
        ))
        latents.append(lat)
    provenance = {
        "generator": "sgmp.synth",
        "features": "synthetic-embeddings",
        "seed": cfg.seed,
        "world_seed": cfg.seed if cfg.world_seed is None else cfg.world_seed,
        "config_hash": cfg.config_hash(),
    }
    ds = DatasetFile(vocab, D, samples, provenance)
    return (ds, latents, world) if return_latents else ds


# -- visualisation ------------------------------------------------------------

def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(sample: SceneGraphSample, vocab: VocabMeta, prediction=None,
               triplets: Sequence | None = None) -> str:
    """Graphviz text: object nodes, predicate nodes, subject->predicate->object edges.

    Ground truth carries ``class="gt"``; predicted relations (argmax non-none
    per pair, or the given ``triplets``) carry ``class="pred"`` and are dashed.
    """
    lines = [f"digraph {_dot_quote(sample.image_id)} {{", "  rankdir=LR;"]
    for k, c in enumerate(sample.gt_classes):
        lines.append(f"  o{k} [label={_dot_quote(vocab.class_names[c])}, shape=box, "
                     f'color=blue, class="gt"];')
    for (i, j), p in sorted(sample.gt_predicates.items()):
        if p < 1:
            continue
        lines.append(f"  r{i}_{j} [label={_dot_quote(vocab.predicate_names[p])}, shape=ellipse, "
                     f'color=red, class="gt"];')
        lines.append(f"  o{i} -> r{i}_{j};")
        lines.append(f"  r{i}_{j} -> o{j};")
    if prediction is not None and triplets is None:
        from .evaluation import extract_triplets

        triplets = extract_triplets(prediction, sample.proposals, "predcls", gt_classes=sample.gt_classes)
    for t in triplets or ():
        node = f"p{t.subj}_{t.obj}"
        lines.append(f"  {node} [label={_dot_quote(vocab.predicate_names[t.pred])}, shape=ellipse, "
                     f'color=orange, style=dashed, class="pred", score="{t.score:.4f}"];')
        lines.append(f"  o{t.subj} -> {node} [style=dashed];")
        lines.append(f"  {node} -> o{t.obj} [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
