import numpy as np
import pytest

from acnet import autograd as ag
from acnet import tensor as T
from acnet.blocks import (TOY_SPEC, Ablation, LayerSpec, ModelSpec, SpecError, build_model, expand_to_acnet,
                          randomize_bn)

ONE_ACB = """\
input 3 8 8
conv 5 k=3 s=1 p=1 block=acb
relu
gap
linear 2
"""


def eval_branch(branch, x):
    """conv then eval-mode BN, written out directly from the branch arrays."""
    if branch.shift != (0, 0):
        x = T.shift2d(x, *branch.shift)
    y = T.conv2d(x, T.FilterBank(branch.weight.data), branch.geom)
    bn = branch.bn
    if bn is None:
        return y
    bc = (None, slice(None), None, None)
    return (y - bn.running_mean[bc]) / np.sqrt(bn.running_var[bc] + bn.eps) * bn.gamma.data[bc] + bn.beta.data[bc]


class TestModelSpec:
    def test_round_trip(self):
        spec = ModelSpec.parse(TOY_SPEC)
        assert ModelSpec.parse(spec.format()) == spec

    def test_shapes(self):
        assert ModelSpec.parse(TOY_SPEC).shapes() == [
            (8, 16, 16), (8, 16, 16), (8, 8, 8), (16, 8, 8), (16, 8, 8), (16, 4, 4),
            (32, 4, 4), (32, 4, 4), (32,), (4,)]

    def test_comments_and_blank_lines(self):
        spec = ModelSpec.parse("# toy\ninput 1 4 4\n\nconv 2 k=3 p=1  # same padding\ngap\nlinear 2\n")
        assert spec.layers[0] == LayerSpec("conv", 2, 3, 1, 1, "plain")

    @pytest.mark.parametrize("text,match", [
        ("conv 2 k=3\n", "missing 'input"),
        ("input 1 4 4\nconv 2 k=3 p=1 dilation=2\n", "line 2: dilation"),
        ("input 1 4 4\nconv 2 k=3 p=1 groups=2\n", "groups"),
        ("input 1 4 4\nconv 2 k=3 p=0 block=acb\n", "line 2: ACB requires"),
        ("input 1 4 4\nconv 2 k=5 p=2 block=acb\n", "ACB requires"),
        ("input 1 4 4\nsoftmax\n", "unknown layer"),
        ("input 1 2 2\nconv 2 k=3 p=0\n", "layer 0"),
        ("input 1 4 4\nconv 2 k=3 p=1 block=wide\n", "unknown block"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(SpecError, match=match):
            ModelSpec.parse(text)

    def test_with_blocks(self):
        spec = ModelSpec.parse("input 1 8 8\nconv 2 k=3 p=1\nconv 2 k=1 p=0\ngap\nlinear 2\n")
        acb = spec.with_blocks("acb")
        assert [l.block for l in acb.conv_layers] == ["acb", "plain"]
        assert [l.block for l in acb.with_blocks("fused").conv_layers] == ["fused", "fused"]


class TestExpansion:
    def test_no_acb_layers_equals_plain(self):
        spec = ModelSpec.parse(TOY_SPEC).with_blocks("plain")
        a, b = expand_to_acnet(spec, seed=3), build_model(spec, seed=3)
        assert [n for n, _ in a.state_arrays()] == [n for n, _ in b.state_arrays()]
        for (_, x), (_, y) in zip(a.state_arrays(), b.state_arrays()):
            np.testing.assert_array_equal(x, y)

    def test_parameter_count(self):
        spec = ModelSpec.parse(ONE_ACB)
        acb, plain = build_model(spec), build_model(spec.with_blocks("plain"))
        d, c = 5, 3
        # 6dc asymmetric weights; two extra BN states carry gamma and beta (trainable) each
        assert acb.count_params() == plain.count_params() + d * c * (3 + 3) + 2 * 2 * d
        assert len(acb.bn_states()) == len(plain.bn_states()) + 2

    def test_horizontal_only(self):
        model = build_model(ModelSpec.parse(ONE_ACB), Ablation(use_vertical=False))
        block = model.layers[0]
        assert block.vertical is None
        assert [b.kernel_size for b in block.branches] == [(3, 3), (1, 3)]

    def test_post_summation_bn(self):
        model = build_model(ModelSpec.parse(ONE_ACB), Ablation(bn_in_branch=False))
        block = model.layers[0]
        assert block.post_bn is not None
        assert all(b.bn is None for b in block.branches)

    def test_ineligible_layer_reports_index(self):
        spec = ModelSpec((1, 8, 8), (LayerSpec("conv", 2, 3, 1, 1, "plain"),
                                     LayerSpec("conv", 2, 3, 1, 0, "acb")))
        with pytest.raises(SpecError, match="layer 1"):
            expand_to_acnet(spec)

    def test_he_uniform_variance(self):
        model = build_model(ModelSpec.parse("input 64 4 4\nconv 256 k=3 p=1 block=acb\ngap\nlinear 2\n"))
        for branch in model.layers[0].branches:
            w = branch.weight.data
            fan_in = np.prod(w.shape[1:])
            assert w.var() == pytest.approx(2 / fan_in, rel=0.05)
            assert abs(w.mean()) < 0.05 * np.sqrt(2 / fan_in)


class TestACBForward:
    def make(self, stride=1, seed=0, spec=ONE_ACB):
        text = spec.replace("s=1", f"s={stride}")
        model = build_model(ModelSpec.parse(text), seed=seed)
        randomize_bn(model, np.random.default_rng(seed))
        return model, model.layers[0]

    def test_zero_asymmetric_weights_give_square(self):
        model, block = self.make()
        block.horizontal.weight.data[:] = 0
        block.vertical.weight.data[:] = 0
        for b in (block.horizontal.bn, block.vertical.bn):
            b.gamma.data[:], b.beta.data[:], b.running_mean[:], b.running_var[:] = 1, 0, 0, 1 - b.eps
        x = np.random.default_rng(1).standard_normal((4, 3, 8, 8))
        np.testing.assert_allclose(block(ag.constant(x), False).data, block.square(ag.constant(x), False).data,
                                   rtol=1e-12, atol=1e-12)

    def test_zero_square_constant_input(self):
        model, block = self.make()
        block.square.weight.data[:] = 0
        sq_bn = block.square.bn
        sq_bn.beta.data[:], sq_bn.running_mean[:] = 0, 0
        x = np.full((1, 3, 8, 8), 0.7)
        expected = eval_branch(block.horizontal, x) + eval_branch(block.vertical, x)
        np.testing.assert_allclose(block(ag.constant(x), False).data, expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_compositional_oracle(self, stride):
        model, block = self.make(stride, seed=stride)
        x = np.random.default_rng(2).standard_normal((3, 3, 8, 8))
        expected = sum(eval_branch(b, x) for b in block.branches)
        np.testing.assert_allclose(block(ag.constant(x), False).data, expected, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("size", [(7, 7), (8, 5), (9, 12)])
    def test_geometry_lemma(self, stride, size):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((1, 2, *size))
        shapes = {T.conv2d(x, T.FilterBank(rng.standard_normal((1, 2, kh, kw))),
                           T.ConvGeometry((stride, stride), pad)).shape
                  for (kh, kw), pad in (((3, 3), (1, 1)), ((1, 3), (0, 1)), ((3, 1), (1, 0)))}
        assert len(shapes) == 1

    @pytest.mark.parametrize("stride", [1, 2])
    def test_window_alignment(self, stride):
        model, block = self.make(stride)
        h = 8
        out_h = (h - 1) // stride + 1
        for r in range(h):
            x = np.zeros((1, 3, h, h))
            x[0, :, r, :] = 1.0
            # BN is a per-channel affine map, so dependence is decided by the conv alone
            resp = T.conv2d(x, block.horizontal.filter_bank(), block.horizontal.geom)
            touched = {i for i in range(out_h) if resp[0, :, i].any()}
            assert touched == ({r // stride} if r % stride == 0 else set())
            resp_v = T.conv2d(x.transpose(0, 1, 3, 2), block.vertical.filter_bank(), block.vertical.geom)
            touched_v = {j for j in range(out_h) if resp_v[0, :, :, j].any()}
            assert touched_v == ({r // stride} if r % stride == 0 else set())

    def test_disabled_branch_equals_identity_branch(self):
        spec = ModelSpec.parse(ONE_ACB)
        full = build_model(spec, seed=4)
        reduced = build_model(spec, Ablation(use_horizontal=False), seed=4)
        randomize_bn(full, np.random.default_rng(0))
        fb, rb = full.layers[0], reduced.layers[0]
        rb.square = fb.square
        rb.vertical = fb.vertical
        reduced.layers[3] = full.layers[3]
        fb.horizontal.weight.data[:] = 0
        hb = fb.horizontal.bn
        hb.gamma.data[:], hb.beta.data[:], hb.running_mean[:] = 1, 0, 0
        x = np.random.default_rng(3).standard_normal((5, 3, 8, 8))
        np.testing.assert_allclose(full.predict(x), reduced.predict(x), rtol=1e-12, atol=1e-12)
        expected = full.count_params() - fb.horizontal.weight.data.size - 2 * 5
        assert reduced.count_params() == expected


class TestModelForward:
    def test_linear_row_sum(self):
        model = build_model(ModelSpec.parse("input 1 1 3\nlinear 2\n"), seed=0)
        w, b = model.layers[0].weight.data, model.layers[0].bias.data
        b[:] = [0.25, -1.0]
        out = model.predict(np.ones((1, 1, 1, 3)))
        np.testing.assert_allclose(out[0], w.sum(axis=1) + b)

    def test_softmax_sums_to_one(self):
        model = build_model(ModelSpec.parse(TOY_SPEC), seed=1)
        probs = ag.softmax(model.predict(np.random.default_rng(0).standard_normal((6, 1, 16, 16))))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)

    def test_input_shape_checked(self):
        model = build_model(ModelSpec.parse(TOY_SPEC))
        with pytest.raises(T.ShapeError, match="expects inputs"):
            model.predict(np.zeros((1, 1, 8, 8)))

    def test_regression_snapshot(self):
        model = build_model(ModelSpec.parse(TOY_SPEC), seed=11)
        randomize_bn(model, np.random.default_rng(11))
        x = np.linspace(-1, 1, 2 * 256).reshape(2, 1, 16, 16)
        np.testing.assert_allclose(model.predict(x), SNAPSHOT, rtol=1e-10, atol=1e-12)

    def test_toy_parameter_counts(self):
        spec = ModelSpec.parse(TOY_SPEC)
        assert build_model(spec).count_params() == 10188
        assert build_model(spec.with_blocks("fused")).count_params() == 6020

    def test_astype(self):
        model = build_model(ModelSpec.parse(ONE_ACB))
        low = model.astype(np.float32)
        assert low.dtype is np.float32
        assert all(a.dtype == np.float32 for _, a in low.state_arrays())
        assert model.layers[0].square.weight.data.dtype == np.float64


# recorded at first build: seed 11 toy ACNet, randomized BN, linspace input
SNAPSHOT = np.array([
    [-3.1270297309677195, -3.8282251816927513, 0.09995588570357694, -1.3363572487702466],
    [-7.546154645663343, 3.2687950320779597, -5.795789750752995, -5.33257373470751],
])
