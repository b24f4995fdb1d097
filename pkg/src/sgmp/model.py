"""GRU state updates, primal/dual message pooling and prediction heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .graph import ChannelIndex, Pair, SceneGraphSample, all_pairs, build_channel_index

PoolingMode = Literal["weighted", "avg", "max"]
POOLING_MODES: tuple[str, ...] = ("weighted", "avg", "max")

_GRU_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass(frozen=True)
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


def param_layout(feature_dim: int, hidden: int, num_classes: int, num_predicates: int):
    """Ordered ``(name, shape, fan_in)`` for every learnable tensor."""
    D, H, C, R = feature_dim, hidden, num_classes, num_predicates
    layout = []
    for prefix in ("node_gru", "edge_gru"):
        for gate in ("z", "r", "h"):
            layout.append((f"{prefix}.W_{gate}", (H, H), H))
        for gate in ("z", "r", "h"):
            layout.append((f"{prefix}.U_{gate}", (H, H), H))
        for gate in ("z", "r", "h"):
            layout.append((f"{prefix}.b_{gate}", (H,), H))
    for name in ("v1", "v2", "w1", "w2"):
        layout.append((f"pool.{name}", (2 * H,), 2 * H))
    layout += [
        ("input_proj_node", (H, D), D),
        ("input_proj_edge", (H, D), D),
        ("cls_head.W", (C, H), H),
        ("cls_head.b", (C,), H),
        ("bbox_head.W", (4 * C, H), H),
        ("bbox_head.b", (4 * C,), H),
        ("pred_head.W", (R, H), H),
        ("pred_head.b", (R,), H),
    ]
    return layout


class ModelParams:
    """Named learnable tensors, in a fixed canonical order."""

    def __init__(self, tensors: dict[str, Tensor], feature_dim: int, hidden: int,
                 num_classes: int, num_predicates: int):
        layout = param_layout(feature_dim, hidden, num_classes, num_predicates)
        expected = [name for name, _, _ in layout]
        if list(tensors) != expected:
            raise ValidationError("parameter names/order do not match the model layout")
        for name, shape, _ in layout:
            if tensors[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = tensors
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.num_classes = num_classes
        self.num_predicates = num_predicates

    @classmethod
    def init(cls, feature_dim: int, hidden: int, num_classes: int, num_predicates: int,
             seed: int = 0) -> "ModelParams":
        """Uniform(-s, s) with ``s = 1/sqrt(fan_in)`` from a seeded PCG64 stream."""
        rng = np.random.Generator(np.random.PCG64(seed))
        tensors = {}
        for name, shape, fan_in in param_layout(feature_dim, hidden, num_classes, num_predicates):
            s = 1.0 / np.sqrt(fan_in)
            tensors[name] = Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)
        return cls(tensors, feature_dim, hidden, num_classes, num_predicates)

    @classmethod
    def zeros(cls, feature_dim: int, hidden: int, num_classes: int, num_predicates: int) -> "ModelParams":
        tensors = {name: Tensor(np.zeros(shape), requires_grad=True)
                   for name, shape, _ in param_layout(feature_dim, hidden, num_classes, num_predicates)}
        return cls(tensors, feature_dim, hidden, num_classes, num_predicates)

    @property
    def sizes(self) -> dict[str, int]:
        return {"feature_dim": self.feature_dim, "hidden": self.hidden,
                "num_classes": self.num_classes, "num_predicates": self.num_predicates}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()}
        return ModelParams(tensors, **self.sizes)

    def bitwise_equal(self, other: "ModelParams") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))

    def _gru(self, prefix: str) -> GruParams:
        return GruParams(**{f: self.tensors[f"{prefix}.{f}"] for f in _GRU_FIELDS})

    @property
    def node_gru(self) -> GruParams:
        return self._gru("node_gru")

    @property
    def edge_gru(self) -> GruParams:
        return self._gru("edge_gru")


@dataclass
class InferenceState:
    node_hidden: Tensor  # (n, H)
    edge_hidden: Tensor  # (|edges|, H)
    iteration: int = 0


@dataclass
class Prediction:
    """Per-variable output distributions; rows of ``pred_*`` follow ``edges``."""

    class_logits: Tensor
    class_probs: Tensor     # (n, C)
    bbox_offsets: Tensor    # (n, C, 4)
    pred_logits: Tensor
    pred_probs: Tensor      # (|edges|, R)
    edges: tuple[Pair, ...]

    def edge_row(self) -> dict[Pair, int]:
        return {pair: k for k, pair in enumerate(self.edges)}


def gru_step(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One GRU update for a vector or a batch of rows.

    z = sig(W_z x + U_z h + b_z), r = sig(W_r x + U_r h + b_r),
    c = tanh(W_h x + U_h (r*h) + b_h), h' = (1-z)*h + z*c.
    """
    if h.shape[-1] != p.hidden_size or x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"gru_step: input shape {x.shape} and hidden shape {h.shape} "
                             f"do not match hidden size {p.hidden_size}")
    z = ad.sigmoid(ad.linear(x, p.W_z, p.b_z) + ad.linear(h, p.U_z))
    r = ad.sigmoid(ad.linear(x, p.W_r, p.b_r) + ad.linear(h, p.U_r))
    cand = ad.tanh(ad.linear(x, p.W_h, p.b_h) + ad.linear(r * h, p.U_h))
    return (1.0 - z) * h + z * cand


def init_state(sample: SceneGraphSample, channels: ChannelIndex, params: ModelParams) -> InferenceState:
    H = params.hidden
    node_x = ad.linear(Tensor(sample.node_features), params["input_proj_node"])
    node_h = gru_step(node_x, Tensor(np.zeros((sample.num_nodes, H))), params.node_gru)
    edge_f = sample.edge_feature_matrix(channels.edges)
    edge_x = ad.linear(Tensor(edge_f.reshape(-1, params.feature_dim)), params["input_proj_edge"])
    edge_h = gru_step(edge_x, Tensor(np.zeros((channels.num_edges, H))), params.edge_gru)
    return InferenceState(node_h, edge_h, 0)


def _check_mode(mode: str) -> None:
    if mode not in POOLING_MODES:
        raise ValidationError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def _gate(h_self: Tensor, h_other: Tensor, vec: Tensor) -> Tensor:
    """sigmoid(vec . [h_self, h_other]) per row, shaped (E, 1)."""
    g = ad.sigmoid(ad.matmul(ad.concat_cols(h_self, h_other), vec))
    return ad.reshape(g, (g.shape[0], 1))


def node_messages(state: InferenceState, channels: ChannelIndex, params: ModelParams,
                  mode: PoolingMode = "weighted") -> Tensor:
    """Messages for every node from its outbound and inbound edges, shape (n, H)."""
    _check_mode(mode)
    n, E, H = channels.num_nodes, channels.num_edges, params.hidden
    if E == 0:
        return Tensor(np.zeros((n, H)))
    src, dst = channels.sources(), channels.targets()
    he = state.edge_hidden
    if mode == "weighted":
        hn = state.node_hidden
        out_w = _gate(ad.take(hn, src), he, params["pool.v1"])
        in_w = _gate(ad.take(hn, dst), he, params["pool.v2"])
        return ad.segment_sum(out_w * he, src, n) + ad.segment_sum(in_w * he, dst, n)
    if mode == "avg":
        deg = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0).reshape(n, 1)
        return (ad.segment_sum(he, src, n) + ad.segment_sum(he, dst, n)) * Tensor(inv)
    both = ad.take(he, np.concatenate([np.arange(E), np.arange(E)]))
    return ad.segment_max(both, np.concatenate([src, dst]), n)


def edge_messages(state: InferenceState, channels: ChannelIndex, params: ModelParams,
                  mode: PoolingMode = "weighted") -> Tensor:
    """Messages for every edge from its subject and object nodes, shape (|edges|, H)."""
    _check_mode(mode)
    E, H = channels.num_edges, params.hidden
    if E == 0:
        return Tensor(np.zeros((0, H)))
    hs = ad.take(state.node_hidden, channels.sources())
    ho = ad.take(state.node_hidden, channels.targets())
    if mode == "weighted":
        he = state.edge_hidden
        return _gate(hs, he, params["pool.w1"]) * hs + _gate(ho, he, params["pool.w2"]) * ho
    if mode == "avg":
        return (hs + ho) * 0.5
    return ad.maximum(hs, ho)


def _row(x: Tensor, k: int) -> Tensor:
    return ad.take(x, k)


def pool_node_messages(i: int, state: InferenceState, channels: ChannelIndex, params: ModelParams,
                       mode: PoolingMode = "weighted") -> Tensor:
    """Message for a single node, built edge by edge."""
    _check_mode(mode)
    if not 0 <= i < channels.num_nodes:
        raise IndexError(f"node index {i} out of range")
    H = params.hidden
    incident = [(k, "out") for k in channels.outbound[i]] + [(k, "in") for k in channels.inbound[i]]
    if not incident:
        return Tensor(np.zeros(H))
    h_i = _row(state.node_hidden, i)
    hiddens = [_row(state.edge_hidden, k) for k, _ in incident]
    if mode == "max":
        acc = hiddens[0]
        for h in hiddens[1:]:
            acc = ad.maximum(acc, h)
        return acc
    acc = None
    for (k, side), h_e in zip(incident, hiddens):
        if mode == "weighted":
            vec = params["pool.v1"] if side == "out" else params["pool.v2"]
            term = ad.sigmoid(ad.matvec(ad.reshape(vec, (1, 2 * H)), ad.concat(h_i, h_e))) * h_e
        else:
            term = h_e * (1.0 / len(incident))
        acc = term if acc is None else acc + term
    return acc


def pool_edge_messages(e: int, state: InferenceState, channels: ChannelIndex, params: ModelParams,
                       mode: PoolingMode = "weighted") -> Tensor:
    """Message for a single edge from its subject and object."""
    _check_mode(mode)
    if not 0 <= e < channels.num_edges:
        raise IndexError(f"edge index {e} out of range")
    H = params.hidden
    i, j = channels.edges[e]
    h_i, h_j = _row(state.node_hidden, i), _row(state.node_hidden, j)
    if mode == "avg":
        return (h_i + h_j) * 0.5
    if mode == "max":
        return ad.maximum(h_i, h_j)
    h_e = _row(state.edge_hidden, e)
    w1 = ad.reshape(params["pool.w1"], (1, 2 * H))
    w2 = ad.reshape(params["pool.w2"], (1, 2 * H))
    return (ad.sigmoid(ad.matvec(w1, ad.concat(h_i, h_e))) * h_i
            + ad.sigmoid(ad.matvec(w2, ad.concat(h_j, h_e))) * h_j)


def iterate(state: InferenceState, channels: ChannelIndex, params: ModelParams, T: int,
            mode: PoolingMode = "weighted") -> InferenceState:
    """T synchronous rounds: all messages from the current state, then all updates."""
    if T < 0:
        raise ValidationError("iteration count must be non-negative")
    _check_mode(mode)
    for _ in range(T):
        m_node = node_messages(state, channels, params, mode)
        m_edge = edge_messages(state, channels, params, mode)
        node_h = gru_step(m_node, state.node_hidden, params.node_gru)
        edge_h = gru_step(m_edge, state.edge_hidden, params.edge_gru)
        state = InferenceState(node_h, edge_h, state.iteration + 1)
    return state


def predict_heads(state: InferenceState, params: ModelParams, edges=()) -> Prediction:
    n = state.node_hidden.shape[0]
    C = params.num_classes
    cls_logits = ad.linear(state.node_hidden, params["cls_head.W"], params["cls_head.b"])
    bbox = ad.linear(state.node_hidden, params["bbox_head.W"], params["bbox_head.b"])
    pred_logits = ad.linear(state.edge_hidden, params["pred_head.W"], params["pred_head.b"])
    return Prediction(
        class_logits=cls_logits,
        class_probs=ad.softmax(cls_logits),
        bbox_offsets=ad.reshape(bbox, (n, C, 4)),
        pred_logits=pred_logits,
        pred_probs=ad.softmax(pred_logits),
        edges=tuple(edges),
    )


def forward(sample: SceneGraphSample, params: ModelParams, T: int, mode: PoolingMode = "weighted",
            edges: list[Pair] | None = None) -> Prediction:
    """Initialise from visual features, run ``T`` rounds, and apply the heads."""
    if edges is None:
        edges = all_pairs(sample.num_nodes)
    channels = build_channel_index(edges, sample.num_nodes)
    state = init_state(sample, channels, params)
    state = iterate(state, channels, params, T, mode)
    return predict_heads(state, params, channels.edges)
