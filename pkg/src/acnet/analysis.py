"""Kernel-skeleton diagnostics on fused models.

* :func:`magnitude_matrix` averages, over all 3x3 layers, each layer's summed
  absolute kernel normalized by its own maximum.
* :func:`prune_by_location` zeroes random weights drawn only from chosen
  kernel positions until every 3x3 layer reaches a target sparsity.
* :func:`distortion_eval` scores a model on rotated and flipped inputs.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass

import numpy as np

from acnet import tensor as T
from acnet.blocks import FusedConv, Model
from acnet.data import Dataset

LOCATION_SETS = {
    "corner": ((0, 0), (0, 2), (2, 0), (2, 2)),
    "skeleton": ((0, 1), (1, 0), (1, 1), (1, 2), (2, 1)),
    "global": tuple((r, c) for r in range(3) for c in range(3)),
    "border": ((2, 0), (2, 1), (2, 2), (0, 2), (1, 2)),
    "tl2x2": ((0, 0), (0, 1), (1, 0), (1, 1)),
}
SPARSITY_SLACK = 5e-3


def location_mask(name: str) -> np.ndarray:
    if name not in LOCATION_SETS:
        raise KeyError(f"unknown location set {name!r}; choose from {sorted(LOCATION_SETS)}")
    mask = np.zeros((3, 3), dtype=bool)
    for r, c in LOCATION_SETS[name]:
        mask[r, c] = True
    return mask


def sparsity_cap(name: str) -> float:
    return len(LOCATION_SETS[name]) / 9


def _square_layers(model: Model) -> list[FusedConv]:
    if not model.is_fused:
        raise ValueError("expected a fused model; run fuse_model first")
    layers = [l for l in model.layers if isinstance(l, FusedConv) and l.weight.data.shape[2:] == (3, 3)]
    if not layers:
        raise ValueError("model has no 3x3 convolution layers")
    return layers


@dataclass(frozen=True, eq=False)
class MagnitudeMatrix:
    a: np.ndarray  # (3, 3)
    layer_count: int

    def mean_over(self, name: str) -> float:
        return float(self.a[location_mask(name)].mean())

    def as_row(self) -> list[float]:
        return [float(v) for v in self.a.reshape(-1)]


def magnitude_matrix(model: Model) -> MagnitudeMatrix:
    total = np.zeros((3, 3))
    layers = _square_layers(model)
    for idx, layer in enumerate(layers):
        s = np.abs(layer.weight.data.astype(np.float64)).sum(axis=(0, 1))
        if s.max() == 0:
            raise ValueError(f"3x3 layer {idx} has all-zero kernels")
        total += s / s.max()
    return MagnitudeMatrix(total / len(layers), len(layers))


def prune_by_location(model: Model, location: str, target_sparsity: float, seed: int = 0) -> Model:
    """Copy of ``model`` with randomly chosen weights at ``location`` zeroed.

    In every 3x3 layer, round(target * 9*c*d) weights are drawn uniformly
    without replacement from the positions in the set.
    """
    cap = sparsity_cap(location)
    if target_sparsity < 0 or target_sparsity > cap + SPARSITY_SLACK:
        raise ValueError(
            f"sparsity {target_sparsity:.4f} is infeasible for {location!r} (cap {cap:.4f})"
        )
    pruned = copy.deepcopy(model)
    if target_sparsity == 0:
        return pruned
    rng = np.random.default_rng(seed)
    mask = location_mask(location)
    for layer in _square_layers(pruned):
        w = layer.weight.data
        d, c = w.shape[:2]
        candidates = np.flatnonzero(np.broadcast_to(mask, w.shape).reshape(-1))
        k = min(int(round(target_sparsity * w.size)), candidates.size)
        chosen = rng.choice(candidates, size=k, replace=False)
        w.reshape(-1)[chosen] = 0
    return pruned


def default_grid(location: str, step: float = 0.05) -> list[float]:
    cap = sparsity_cap(location)
    return [round(i * step, 10) for i in range(int(cap / step + 1e-9) + 1)]


def sparsity_sweep(model: Model, sets, grid, seeds, eval_data: Dataset) -> list[dict]:
    """Mean and std (over ``seeds``) of eval accuracy for each (set, sparsity)."""
    base = model.accuracy(eval_data.images, eval_data.labels)
    rows = []
    for name in sets:
        points = default_grid(name) if grid is None else grid
        for sparsity in points:
            if sparsity == 0:
                accs = [base] * len(seeds)
            else:
                accs = [prune_by_location(model, name, sparsity, seed).accuracy(eval_data.images,
                                                                                 eval_data.labels)
                        for seed in seeds]
            rows.append({"set": name, "sparsity": sparsity,
                         "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs))})
    return rows


TRANSFORMS = {
    "identity": lambda x: x,
    "rot90": T.rot90,
    "rot180": T.rot180,
    "flip_ud": T.flip_ud,
}


def distortion_eval(model: Model, eval_data: Dataset) -> dict[str, float]:
    """Accuracy with every eval image rotated or flipped."""
    return {name: model.accuracy(fn(eval_data.images), eval_data.labels)
            for name, fn in TRANSFORMS.items()}


def write_csv(path, rows: list[dict], fields=None) -> None:
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
