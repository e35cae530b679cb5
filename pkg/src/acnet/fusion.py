"""Convert a trained ACNet into the plain architecture it was expanded from.

Each branch's inference-time BN is folded into its kernel and a bias, then
the asymmetric kernels are added onto the matching row and column of the
square kernel and the three biases are summed.  The result is one 3x3
convolution that produces the block's eval-mode output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from acnet import tensor as T
from acnet.autograd import BatchNormState, Param
from acnet.blocks import ACBlock, ConvBranch, FusedConv, Linear, Model


class FusionError(ValueError):
    pass


def fold_bn(bank: T.FilterBank, bn: BatchNormState) -> T.FilterBank:
    """Fold eval-mode ``bn`` into ``bank``: kernel * gamma/std, bias (b - mean) * gamma/std + beta."""
    var = bn.running_var.astype(np.float64) + bn.eps
    if np.any(var <= 0):
        raise FusionError(f"{bn.name}: running_var + eps must be positive")
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(var)
    bias = np.zeros(bank.d) if bank.bias is None else bank.bias.astype(np.float64)
    weights = bank.weights.astype(np.float64) * scale[:, None, None, None]
    bias = (bias - bn.running_mean) * scale + bn.beta.data
    return T.FilterBank(weights, bias)


def bn_fuse(branch: ConvBranch) -> T.FilterBank:
    """The conv-with-bias equivalent to ``branch`` in eval mode (float64)."""
    bank = branch.filter_bank()
    if branch.bn is None:
        return T.FilterBank(bank.weights.astype(np.float64), np.zeros(bank.d))
    return fold_bn(bank, branch.bn)


def branch_fuse(square: T.FilterBank, horizontal: T.FilterBank | None,
                vertical: T.FilterBank | None, offsets=(1, 1)) -> T.FilterBank:
    """Add the 1x3 kernel at row ``offsets[0]`` and the 3x1 kernel at column
    ``offsets[1]`` onto the 3x3 kernel; biases are summed."""
    if square.kernel_size != (3, 3):
        raise FusionError(f"square kernel must be 3x3, got {square.kernel_size}")
    row, col = offsets
    weights = square.weights
    bias = np.zeros(square.d) if square.bias is None else square.bias
    for bank, want, at in ((horizontal, (1, 3), (row, 0)), (vertical, (3, 1), (0, col))):
        if bank is None:
            continue
        if bank.kernel_size != want:
            raise FusionError(f"expected a {want[0]}x{want[1]} kernel, got {bank.kernel_size}")
        if (bank.d, bank.c) != (square.d, square.c):
            raise FusionError(
                f"branch bank ({bank.d}, {bank.c}) does not match square ({square.d}, {square.c})"
            )
        try:
            weights = T.kernel_add(weights, T.embed_kernel(bank.weights, 3, 3, *at))
        except T.ShapeError as exc:
            raise FusionError(str(exc)) from None
        if bank.bias is not None:
            bias = bias + bank.bias
    return T.FilterBank(weights, bias)


def fuse_block(block: ACBlock) -> T.FilterBank:
    if block.post_bn is None:
        banks = [None if b is None else bn_fuse(b) for b in (block.square, block.horizontal, block.vertical)]
        return branch_fuse(*banks, offsets=block.offsets)
    raw = [None if b is None else b.filter_bank() for b in (block.square, block.horizontal, block.vertical)]
    return fold_bn(branch_fuse(*raw, offsets=block.offsets), block.post_bn)


def fuse_layer(layer) -> T.FilterBank:
    if isinstance(layer, ACBlock):
        return fuse_block(layer)
    if isinstance(layer, ConvBranch):
        return bn_fuse(layer)
    raise FusionError(f"cannot fuse {type(layer).__name__}")


def fuse_model(acnet: Model) -> Model:
    """Return the deployed model: every conv-BN and ACB becomes one conv with bias."""
    if acnet.is_fused:
        raise FusionError("model is already fused")
    dtype = acnet.dtype
    layers = []
    for idx, layer in enumerate(acnet.layers):
        if isinstance(layer, (ACBlock, ConvBranch)):
            bank = fuse_layer(layer)
            geom = layer.square.geom if isinstance(layer, ACBlock) else layer.geom
            layers.append(FusedConv(Param(bank.weights.astype(dtype), f"layer{idx}.weight"),
                                    Param(bank.bias.astype(dtype), f"layer{idx}.bias"), geom))
        elif isinstance(layer, FusedConv):
            layers.append(FusedConv(Param(layer.weight.data.copy(), f"layer{idx}.weight"),
                                    Param(layer.bias.data.copy(), f"layer{idx}.bias"), layer.geom))
        elif isinstance(layer, Linear):
            layers.append(Linear(Param(layer.weight.data.copy(), f"layer{idx}.weight"),
                                 Param(layer.bias.data.copy(), f"layer{idx}.bias")))
        else:
            layers.append(layer)
    return Model(acnet.spec.with_blocks("fused"), layers, dtype)


@dataclass
class EquivalenceReport:
    max_abs: float
    max_rel: float
    tolerance: float
    passed: bool
    n_inputs: int
    precision: str

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_abs={self.max_abs:.3e} max_rel={self.max_rel:.3e} "
                f"tolerance={self.tolerance:.0e} inputs={self.n_inputs} precision={self.precision}")


DEFAULT_TOLERANCE = {"float32": 1e-4, "float64": 1e-9}


def relative_deviation(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-logit |a - b| scaled by the sample's largest logit magnitude plus ``floor``."""
    scale = np.maximum(np.abs(a), np.abs(b)).max(axis=1, keepdims=True)
    return np.abs(a - b) / (scale + floor)


def verify_equivalence(a: Model, b: Model, n_inputs: int = 200, seed: int = 0,
                       precision: str | None = None, tolerance: float | None = None) -> EquivalenceReport:
    """Compare eval-mode logits of ``a`` and ``b`` on random inputs.

    Inputs are standard normal, then the same batch scaled by 1e3 and 1e-3.
    ``precision`` defaults to the coarser of the two models' stored dtypes:
    weights already rounded to float32 cannot meet the float64 tolerance.
    """
    if tuple(a.spec.input) != tuple(b.spec.input):
        raise T.ShapeError(f"input dims differ: {a.spec.input} vs {b.spec.input}")
    if precision is None:
        coarse = min(np.dtype(a.dtype).itemsize, np.dtype(b.dtype).itemsize)
        precision = "float32" if coarse == 4 else "float64"
    if precision not in DEFAULT_TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(DEFAULT_TOLERANCE)}")
    dtype = T.DTYPES[precision]
    tol = DEFAULT_TOLERANCE[precision] if tolerance is None else tolerance
    ma, mb = a.astype(dtype), b.astype(dtype)

    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n_inputs, *a.spec.input))
    max_abs = max_rel = 0.0
    for scale in (1.0, 1e3, 1e-3):
        x = (base * scale).astype(dtype)
        ya = ma.predict(x).astype(np.float64)
        yb = mb.predict(x).astype(np.float64)
        if ya.shape != yb.shape:
            raise T.ShapeError(f"output shapes differ: {ya.shape} vs {yb.shape}")
        max_abs = max(max_abs, float(np.abs(ya - yb).max(initial=0.0)))
        max_rel = max(max_rel, float(relative_deviation(ya, yb).max(initial=0.0)))
    return EquivalenceReport(max_abs, max_rel, tol, max_rel <= tol, 3 * n_inputs, precision)


def fusion_report(acnet: Model, fused: Model, n_inputs: int = 16, seed: int = 0) -> list[dict]:
    """Per conv layer: max |deviation| between the original and fused layer.

    Both layers see the same input (the original model's activation at that
    depth), so each row isolates one layer's fusion error.
    """
    from acnet import autograd as ag

    rng = np.random.default_rng(seed)
    v = ag.constant(rng.standard_normal((n_inputs, *acnet.spec.input)).astype(acnet.dtype))
    rows = []
    with ag.no_grad():
        for idx, (orig, new) in enumerate(zip(acnet.layers, fused.layers)):
            out = orig(v, False)
            if isinstance(new, FusedConv):
                dev = float(np.abs(new(v, False).data - out.data).max())
                kind = type(orig).__name__
                branches = len(orig.branches) if isinstance(orig, ACBlock) else 1
                rows.append({"layer": idx, "kind": kind, "branches": branches,
                             "kernel": "x".join(map(str, new.weight.data.shape[2:])),
                             "max_abs_dev": dev})
            v = out
    return rows


def format_report(rows: list[dict]) -> str:
    lines = [f"layer {r['layer']:>2}  {r['kind']:<10} branches={r['branches']} "
             f"kernel={r['kernel']} max_abs_dev={r['max_abs_dev']:.3e}" for r in rows]
    lines += [" ".join(f"{k}={v}" for k, v in r.items()) for r in rows]
    return "\n".join(lines)
