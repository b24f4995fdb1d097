"""Small builders shared by the test modules."""

import numpy as np

from sgmp.graph import Box, SceneGraphSample, all_pairs


def random_boxes(rng, n, canvas=64.0):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, canvas - 10, size=2)
        w, h = rng.uniform(4, 10, size=2)
        out.append(Box(float(x1), float(y1), float(x1 + w), float(y1 + h)))
    return out


def random_sample(rng, n=3, feature_dim=4, num_classes=4, num_predicates=3, labelled=0.6, image_id="s"):
    pairs = all_pairs(n)
    preds = {p: int(rng.integers(0, num_predicates)) for p in pairs if rng.random() < labelled}
    return SceneGraphSample(
        image_id=image_id,
        width=64.0,
        height=64.0,
        proposals=tuple(random_boxes(rng, n)),
        node_features=rng.normal(size=(n, feature_dim)),
        edge_features={p: rng.normal(size=feature_dim) for p in pairs},
        gt_classes=tuple(int(c) for c in rng.integers(1, num_classes, size=n)),
        gt_offsets=rng.normal(scale=0.1, size=(n, 4)),
        gt_predicates=preds,
    )
