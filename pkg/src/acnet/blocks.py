"""Model descriptions, conv-BN branches, asymmetric convolution blocks and models.

A :class:`ModelSpec` is a small line-oriented text format::

    input 1 16 16
    conv 16 k=3 s=1 p=1 block=acb
    relu
    maxpool k=2 s=2
    gap
    linear 4

``block`` is one of ``plain`` (conv + BN), ``acb`` (square, horizontal and
vertical conv-BN branches summed), ``acb-shifted`` (asymmetric branches read
the bottom row / right column of the square window) or ``fused`` (a single
conv with bias, the deployed form).
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from acnet import autograd as ag
from acnet import tensor as T
from acnet.autograd import BatchNormState, Param, Value

BLOCKS = ("plain", "acb", "acb-shifted", "fused")
ACB_OFFSETS = {"acb": (1, 1), "acb-shifted": (2, 2)}


class SpecError(ValueError):
    """Malformed model description or a layer that cannot take the requested form."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    block: str = "plain"

    def format(self) -> str:
        if self.kind == "conv":
            return f"conv {self.out} k={self.kernel} s={self.stride} p={self.padding} block={self.block}"
        if self.kind == "maxpool":
            return f"maxpool k={self.kernel} s={self.stride}"
        if self.kind == "linear":
            return f"linear {self.out}"
        return self.kind

    @property
    def acb_eligible(self) -> bool:
        return self.kind == "conv" and self.kernel == 3 and self.padding == 1


@dataclass(frozen=True)
class ModelSpec:
    input: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    @classmethod
    def parse(cls, text: str) -> ModelSpec:
        dims, layers = None, []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            words = line.split()
            head, pos, kw = words[0], [], {}
            for word in words[1:]:
                if "=" in word:
                    key, val = word.split("=", 1)
                    kw[key] = val
                else:
                    pos.append(word)
            try:
                if head == "input":
                    dims = tuple(int(v) for v in pos)
                    if len(dims) != 3:
                        raise SpecError("input needs c h w")
                    continue
                layers.append(_parse_layer(head, pos, kw))
            except (SpecError, ValueError) as exc:
                raise SpecError(f"line {lineno}: {exc}") from None
        if dims is None:
            raise SpecError("missing 'input c h w' line")
        spec = cls(dims, tuple(layers))
        spec.shapes()
        return spec

    def format(self) -> str:
        lines = ["input " + " ".join(str(v) for v in self.input)]
        lines += [layer.format() for layer in self.layers]
        return "\n".join(lines) + "\n"

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch); raises on a broken chain."""
        shape: tuple[int, ...] = self.input
        out = []
        for idx, layer in enumerate(self.layers):
            try:
                shape = _layer_out_shape(layer, shape)
            except (T.ShapeError, SpecError) as exc:
                raise SpecError(f"layer {idx} ({layer.format()}): {exc}") from None
            out.append(shape)
        return out

    def with_blocks(self, block: str) -> ModelSpec:
        """Switch every ACB-eligible conv (3x3, padding 1) to ``block``."""
        if block not in BLOCKS:
            raise SpecError(f"unknown block {block!r}")
        layers = tuple(
            dataclasses.replace(layer, block=block)
            if layer.acb_eligible or (layer.kind == "conv" and block in ("plain", "fused"))
            else layer
            for layer in self.layers
        )
        return ModelSpec(self.input, layers)

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv"]


def _parse_layer(head, pos, kw) -> LayerSpec:
    for key in ("dilation", "groups", "d", "g"):
        if key in kw:
            raise SpecError(f"{key} is not supported")
    if head == "conv":
        if len(pos) != 1:
            raise SpecError("conv needs a filter count")
        allowed = {"k", "s", "p", "block"}
        if set(kw) - allowed:
            raise SpecError(f"unknown conv options {sorted(set(kw) - allowed)}")
        block = kw.get("block", "plain")
        if block not in BLOCKS:
            raise SpecError(f"unknown block {block!r}")
        layer = LayerSpec("conv", int(pos[0]), int(kw.get("k", 3)), int(kw.get("s", 1)),
                          int(kw.get("p", 0)), block)
        if layer.out < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
            raise SpecError("conv sizes must be positive")
        if block in ACB_OFFSETS and not layer.acb_eligible:
            raise SpecError("ACB requires a 3x3 conv with padding 1")
        return layer
    if head == "maxpool":
        k = int(kw.get("k", pos[0] if pos else 2))
        return LayerSpec("maxpool", kernel=k, stride=int(kw.get("s", k)))
    if head == "linear":
        if len(pos) != 1:
            raise SpecError("linear needs a class count")
        return LayerSpec("linear", int(pos[0]))
    if head in ("relu", "gap"):
        return LayerSpec(head)
    raise SpecError(f"unknown layer {head!r}")


def _layer_out_shape(layer: LayerSpec, shape):
    if layer.kind == "conv":
        if len(shape) != 3:
            raise SpecError("conv needs a (c, h, w) input")
        g = T.ConvGeometry((layer.stride,) * 2, (layer.padding,) * 2)
        return (layer.out, *g.output_extent(shape[1], shape[2], layer.kernel, layer.kernel))
    if layer.kind == "maxpool":
        if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
            raise SpecError(f"max-pool window {layer.kernel} does not fit {shape}")
        return (shape[0], (shape[1] - layer.kernel) // layer.stride + 1,
                (shape[2] - layer.kernel) // layer.stride + 1)
    if layer.kind == "gap":
        if len(shape) != 3:
            raise SpecError("gap needs a (c, h, w) input")
        return (shape[0],)
    if layer.kind == "linear":
        return (layer.out,)
    return shape


@dataclass(frozen=True)
class Ablation:
    use_horizontal: bool = True
    use_vertical: bool = True
    bn_in_branch: bool = True


def he_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Zero-mean uniform weights with variance 2 / fan_in."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- layers ----------------------------------------------------------------


@dataclass(eq=False)
class ConvBranch:
    """One conv (no bias) optionally followed by BN.

    ``shift`` moves the input before convolving, so an asymmetric kernel can
    read any row/column of the square kernel's sliding window.
    """

    weight: Param
    bn: BatchNormState | None
    geom: T.ConvGeometry
    shift: tuple[int, int] = (0, 0)

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.data.shape[2], self.weight.data.shape[3]

    def filter_bank(self) -> T.FilterBank:
        return T.FilterBank(self.weight.data)

    def __call__(self, x: Value, train: bool) -> Value:
        if self.shift != (0, 0):
            x = ag.shift2d(x, *self.shift)
        y = ag.conv2d(x, self.weight, self.geom)
        return y if self.bn is None else ag.batch_norm(y, self.bn, train)

    def params(self) -> list[Param]:
        return [self.weight] + ([] if self.bn is None else self.bn.params())


@dataclass(eq=False)
class ACBlock:
    """Square, horizontal and vertical branches whose outputs are summed.

    ``offsets`` gives the (row of the horizontal, column of the vertical)
    kernel inside the 3x3 window; (1, 1) is the central crisscross.
    """

    square: ConvBranch
    horizontal: ConvBranch | None
    vertical: ConvBranch | None
    offsets: tuple[int, int] = (1, 1)
    post_bn: BatchNormState | None = None

    @property
    def branches(self) -> list[ConvBranch]:
        return [b for b in (self.square, self.horizontal, self.vertical) if b is not None]

    def __call__(self, x: Value, train: bool) -> Value:
        y = ag.add(*(b(x, train) for b in self.branches))
        return y if self.post_bn is None else ag.batch_norm(y, self.post_bn, train)

    def params(self) -> list[Param]:
        ps = [p for b in self.branches for p in b.params()]
        return ps + ([] if self.post_bn is None else self.post_bn.params())


@dataclass(eq=False)
class FusedConv:
    weight: Param
    bias: Param
    geom: T.ConvGeometry

    def filter_bank(self) -> T.FilterBank:
        return T.FilterBank(self.weight.data, self.bias.data)

    def __call__(self, x: Value, train: bool) -> Value:
        return ag.conv2d(x, self.weight, self.geom, self.bias)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


class ReLU:
    def __call__(self, x, train):
        return ag.relu(x)

    def params(self):
        return []


@dataclass
class MaxPool:
    k: int
    s: int

    def __call__(self, x, train):
        return ag.max_pool(x, self.k, self.s)

    def params(self):
        return []


class GlobalAvgPool:
    def __call__(self, x, train):
        return ag.global_avg_pool(x)

    def params(self):
        return []


@dataclass(eq=False)
class Linear:
    weight: Param
    bias: Param

    def __call__(self, x, train):
        if x.data.ndim > 2:
            x = ag.flatten(x)
        return ag.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    layers: list
    dtype: type = np.float64
    ablation: Ablation = field(default_factory=Ablation)

    def forward(self, x, train: bool = False) -> Value:
        v = x if isinstance(x, Value) else ag.constant(np.asarray(x, dtype=self.dtype))
        if v.data.shape[1:] != tuple(self.spec.input):
            raise T.ShapeError(f"model expects inputs of shape {self.spec.input}, got {v.data.shape[1:]}")
        for layer in self.layers:
            v = layer(v, train)
        return v

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits, computed in batches without recording a graph."""
        x = np.asarray(x, dtype=self.dtype)
        with ag.no_grad():
            outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes), self.dtype)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        """Percentage of ``images`` classified as ``labels``."""
        pred = self.predict(images).argmax(axis=1)
        return 100.0 * float(np.mean(pred == np.asarray(labels)))

    @property
    def num_classes(self) -> int:
        return self.spec.shapes()[-1][0]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def count_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def bn_states(self) -> list[BatchNormState]:
        out = []
        for layer in self.layers:
            if isinstance(layer, ConvBranch) and layer.bn is not None:
                out.append(layer.bn)
            elif isinstance(layer, ACBlock):
                out += [b.bn for b in layer.branches if b.bn is not None]
                if layer.post_bn is not None:
                    out.append(layer.post_bn)
        return out

    def astype(self, dtype) -> Model:
        """Deep copy with every stored array converted to ``dtype``."""
        dtype = np.dtype(dtype).type
        twin = copy.deepcopy(self)
        twin.dtype = dtype
        for p in twin.params():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
            p.id = next(ag._ids)
        for bn in twin.bn_states():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return twin

    @property
    def is_fused(self) -> bool:
        return all(not isinstance(layer, (ConvBranch, ACBlock)) for layer in self.layers)

    def conv_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, (ConvBranch, ACBlock, FusedConv))]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array, trainable or not, in declared layer order."""
        out = []

        def bn_arrays(prefix, bn):
            out.extend([(f"{prefix}.gamma", bn.gamma.data), (f"{prefix}.beta", bn.beta.data),
                        (f"{prefix}.running_mean", bn.running_mean),
                        (f"{prefix}.running_var", bn.running_var)])

        def branch_arrays(prefix, br):
            out.append((f"{prefix}.weight", br.weight.data))
            if br.bn is not None:
                bn_arrays(f"{prefix}.bn", br.bn)

        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvBranch):
                branch_arrays(f"{i}", layer)
            elif isinstance(layer, ACBlock):
                for name in ("square", "horizontal", "vertical"):
                    br = getattr(layer, name)
                    if br is not None:
                        branch_arrays(f"{i}.{name}", br)
                if layer.post_bn is not None:
                    bn_arrays(f"{i}.post_bn", layer.post_bn)
            elif isinstance(layer, (FusedConv, Linear)):
                out += [(f"{i}.weight", layer.weight.data), (f"{i}.bias", layer.bias.data)]
        return out


def _branch(rng, d, c, kh, kw, stride, padding, shift, dtype, with_bn, eps, name):
    weight = Param(he_uniform(rng, (d, c, kh, kw), dtype), f"{name}.weight")
    bn = BatchNormState.create(d, dtype, eps=eps, name=f"{name}.bn") if with_bn else None
    return ConvBranch(weight, bn, T.ConvGeometry((stride, stride), padding), shift)


def build_model(spec: ModelSpec, ablation: Ablation = Ablation(), seed: int = 0,
                dtype=np.float64, eps: float = 1e-5) -> Model:
    """Instantiate ``spec`` with freshly initialized weights."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype).type
    shapes = spec.shapes()
    in_shape = spec.input
    layers = []
    for idx, layer in enumerate(spec.layers):
        name = f"layer{idx}"
        if layer.kind == "conv":
            c, d, k, s, p = in_shape[0], layer.out, layer.kernel, layer.stride, layer.padding
            if layer.block in ACB_OFFSETS:
                if not layer.acb_eligible:
                    raise SpecError(f"layer {idx}: ACB requires a 3x3 conv with padding 1")
                row, col = ACB_OFFSETS[layer.block]
                in_branch = ablation.bn_in_branch
                square = _branch(rng, d, c, 3, 3, s, (1, 1), (0, 0), dtype, in_branch, eps,
                                 f"{name}.square")
                hor = ver = None
                if ablation.use_horizontal:
                    hor = _branch(rng, d, c, 1, 3, s, (0, 1), (row - 1, 0), dtype, in_branch, eps,
                                  f"{name}.horizontal")
                if ablation.use_vertical:
                    ver = _branch(rng, d, c, 3, 1, s, (1, 0), (0, col - 1), dtype, in_branch, eps,
                                  f"{name}.vertical")
                post = None if in_branch else BatchNormState.create(d, dtype, eps=eps,
                                                                    name=f"{name}.post_bn")
                layers.append(ACBlock(square, hor, ver, (row, col), post))
            elif layer.block == "fused":
                weight = Param(he_uniform(rng, (d, c, k, k), dtype), f"{name}.weight")
                bias = Param(np.zeros(d, dtype), f"{name}.bias")
                layers.append(FusedConv(weight, bias, T.ConvGeometry((s, s), (p, p))))
            else:
                layers.append(_branch(rng, d, c, k, k, s, (p, p), (0, 0), dtype, True, eps, name))
        elif layer.kind == "relu":
            layers.append(ReLU())
        elif layer.kind == "maxpool":
            layers.append(MaxPool(layer.kernel, layer.stride))
        elif layer.kind == "gap":
            layers.append(GlobalAvgPool())
        elif layer.kind == "linear":
            fan_in = int(np.prod(in_shape))
            weight = Param(he_uniform(rng, (layer.out, fan_in), dtype), f"{name}.weight")
            layers.append(Linear(weight, Param(np.zeros(layer.out, dtype), f"{name}.bias")))
        in_shape = shapes[idx]
    return Model(spec, layers, dtype, ablation)


def expand_to_acnet(spec: ModelSpec, ablation: Ablation = Ablation(), seed: int = 0,
                    dtype=np.float64, eps: float = 1e-5) -> Model:
    """Build ``spec`` with each ``acb``/``acb-shifted`` conv as an asymmetric block.

    Layers marked ``plain`` stay conv-BN.  Disabled branches are omitted; with
    ``bn_in_branch`` off the block carries a single BN after the summation.
    """
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "conv" and layer.block in ACB_OFFSETS and not layer.acb_eligible:
            raise SpecError(f"layer {idx}: ACB requires a 3x3 conv with padding 1")
    return build_model(spec, ablation, seed, dtype, eps)


def randomize_bn(model: Model, rng: np.random.Generator):
    """Give every BN non-trivial statistics and affine parameters, in place."""
    for bn in model.bn_states():
        n = bn.channels
        bn.gamma.data[:] = rng.uniform(0.2, 2.0, n)
        bn.beta.data[:] = rng.normal(0, 0.5, n)
        bn.running_mean[:] = rng.normal(0, 0.5, n)
        bn.running_var[:] = rng.uniform(0.3, 3.0, n)


TOY_SPEC = """\
input 1 16 16
conv 8 k=3 s=1 p=1 block=acb
relu
maxpool k=2 s=2
conv 16 k=3 s=1 p=1 block=acb
relu
maxpool k=2 s=2
conv 32 k=3 s=1 p=1 block=acb
relu
gap
linear 4
"""
