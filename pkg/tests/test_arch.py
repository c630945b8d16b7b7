import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupnet.arch.model import (
    build_model,
    group_forward_multi,
    group_forward_single,
    layerwise_forward,
    _Pass,
    model_forward,
    parameter_layout,
)
from groupnet.arch.spec import (
    SpecError,
    builtin_spec_path,
    iter_partitions,
    load_spec,
    partition_space_size,
    spec_from_dict,
)
from groupnet.quant import QuantSpec, activation_forward, binarize_weights
from groupnet.tensor import ConvGeometry, DimensionError, conv2d_ref

from oracles import contiguous_partitions
from toys import toy_source, toy_spec

Q = QuantSpec(2)


def _qconv(w, padding=1):
    """A quantized branch evaluated on the reference path."""
    wb = binarize_weights(w).dequantize()

    def f(x):
        return conv2d_ref(activation_forward(x, Q), wb, ConvGeometry.from_arrays(x, wb, 1, padding))

    return f


def _qblock(rng, c):
    f1 = _qconv(rng.standard_normal((c, c, 3, 3)))
    f2 = _qconv(rng.standard_normal((c, c, 3, 3)))
    return lambda x: f2(f1(x))


class TestLayerwiseForward:
    def test_single_branch(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 5))
        f = _qconv(rng.standard_normal((4, 3, 3, 3)))
        np.testing.assert_array_equal(layerwise_forward(x, [f], np.array([1.0])), f(x))

    def test_identical_branches(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 5))
        f = _qconv(rng.standard_normal((4, 3, 3, 3)))
        np.testing.assert_allclose(layerwise_forward(x, [f, f, f], np.ones(3)), 3 * f(x), rtol=1e-12)

    def test_two_random_branches(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 5))
        f1, f2 = _qconv(rng.standard_normal((4, 3, 3, 3))), _qconv(rng.standard_normal((4, 3, 3, 3)))
        lam = np.array([0.7, -0.2])
        np.testing.assert_allclose(layerwise_forward(x, [f1, f2], lam), 0.7 * f1(x) - 0.2 * f2(x), rtol=1e-12)

    def test_branch_geometry_mismatch(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 5, 5))
        f1 = _qconv(rng.standard_normal((4, 3, 3, 3)))
        f2 = _qconv(rng.standard_normal((5, 3, 3, 3)))
        with pytest.raises(DimensionError):
            layerwise_forward(x, [f1, f2], np.ones(2))
        with pytest.raises(SpecError):
            layerwise_forward(x, [f1], np.ones(2))


class TestGroupForwardSingle:
    def test_zero_theta_is_skip(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 5, 5))
        bases = [_qblock(rng, 4) for _ in range(3)]
        np.testing.assert_array_equal(group_forward_single(x, bases, np.zeros(3)), x)

    def test_one_base_is_residual_block(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 5, 5))
        phi = _qblock(rng, 4)
        np.testing.assert_array_equal(group_forward_single(x, [phi], np.ones(1)), phi(x) + x)

    def test_two_random_bases(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 4, 5, 5))
        p1, p2 = _qblock(rng, 4), _qblock(rng, 4)
        theta = np.array([0.3, 0.9])
        np.testing.assert_allclose(group_forward_single(x, [p1, p2], theta), 0.3 * p1(x) + 0.9 * p2(x) + x,
                                   rtol=1e-12)

    def test_skip_mismatch(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 4, 5, 5))
        phi = _qconv(rng.standard_normal((6, 4, 3, 3)))
        with pytest.raises(DimensionError):
            group_forward_single(x, [phi], np.ones(1))

    @settings(max_examples=25, deadline=None)
    @given(c=st.floats(-4, 4, allow_nan=False), seed=st.integers(0, 1000))
    def test_theta_linearity(self, c, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 4, 4, 4))
        bases = [_qblock(rng, 4) for _ in range(2)]
        theta = rng.standard_normal(2)
        base = group_forward_single(x, bases, theta) - x
        scaled = group_forward_single(x, bases, c * theta) - x
        np.testing.assert_allclose(scaled, c * base, rtol=1e-9, atol=1e-9)


class TestGroupForwardMulti:
    def test_single_unit_chain_reduces(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 5, 5))
        phis = [_qblock(rng, 4) for _ in range(2)]
        units = [[lambda h, p=p: p(h) + h] for p in phis]
        theta = np.array([0.5, 0.5])  # sums to 1 so the per-unit skips add up to one outer skip
        np.testing.assert_allclose(group_forward_multi(x, units, theta), group_forward_single(x, phis, theta),
                                   rtol=1e-12)

    def test_one_base_two_blocks(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 4, 5, 5))
        p1, p2 = _qblock(rng, 4), _qblock(rng, 4)
        u1, u2 = (lambda h: p1(h) + h), (lambda h: p2(h) + h)
        np.testing.assert_array_equal(group_forward_multi(x, [[u1, u2]], np.ones(1)), u2(u1(x)))

    def test_two_bases_two_blocks_with_quantization(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 5, 5))
        phis = [[_qblock(rng, 4), _qblock(rng, 4)] for _ in range(2)]
        chains = [[(lambda h, p=p: p(h) + h) for p in ch] for ch in phis]
        theta = np.array([0.4, 1.1])
        q = lambda h, m, pos: activation_forward(h, Q)  # noqa: E731
        got = group_forward_multi(x, chains, theta, q)
        want = 0
        for t, (a, b) in zip(theta, phis):
            h = a(x) + x
            h = activation_forward(h, Q)
            want = want + t * (b(h) + h)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_chain_length_mismatch(self):
        f = lambda h: h  # noqa: E731
        with pytest.raises(SpecError):
            group_forward_multi(np.zeros((1, 1, 1, 1)), [[f], [f, f]], np.ones(2))


class TestPartitions:
    @pytest.mark.parametrize("z,n", [(1, 1), (4, 8), (6, 32)])
    def test_size(self, z, n):
        assert partition_space_size(z) == n

    def test_zero_blocks(self):
        with pytest.raises(ValueError):
            partition_space_size(0)

    @pytest.mark.parametrize("z", [1, 2, 4, 7])
    def test_enumeration_matches_oracle(self, z):
        got = list(iter_partitions(z))
        assert len(got) == len(set(got)) == partition_space_size(z)
        assert set(got) == set(contiguous_partitions(z))


class TestSpec:
    @pytest.mark.parametrize("variant,groups", [("v1", 4), ("v2", 2), ("v3", 1), ("layerwise", 4)])
    def test_variants(self, variant, groups):
        spec = toy_spec(variant, z=4)
        assert len(spec.groups) == groups
        assert sum(len(g.blocks) for g in spec.groups) == 4

    def test_layerwise_uses_single_group_base(self):
        spec = toy_spec("layerwise", bases=3, z=4)
        assert spec.mode == "layerwise"
        assert all(g.bases == 1 for g in spec.groups)

    def test_custom_partition(self):
        spec = toy_spec("custom", z=4, partition=[1, 3])
        assert [g.blocks for g in spec.groups] == [(0,), (1, 2, 3)]
        with pytest.raises(SpecError):
            toy_spec("custom", z=4, partition=[2, 3])
        with pytest.raises(SpecError):
            toy_spec("custom", z=4)

    def test_unknown_block_kind(self):
        src = toy_source()
        src["blocks"][0]["kind"] = "inverted"
        with pytest.raises(SpecError):
            spec_from_dict(src)

    def test_unknown_key(self):
        with pytest.raises(SpecError):
            spec_from_dict(toy_source(colour="blue"))

    def test_projection_on_downsample(self):
        spec = toy_spec()
        assert not spec.blocks[0].downsample
        assert spec.blocks[1].downsample
        assert spec.blocks[1].projection.stride == 2

    def test_builtin_specs(self):
        z6 = load_spec(builtin_spec_path("resnet_z6_cifar10"))
        assert z6.num_blocks == 6 and z6.residual
        plain = load_spec(builtin_spec_path("plain4_mnist"))
        assert not plain.residual
        assert plain.quant == QuantSpec(2) and plain.bases == 3

    def test_digest_tracks_source(self):
        assert toy_spec().digest() == toy_spec().digest()
        assert toy_spec().digest() != toy_spec(bases=3).digest()


class TestBuildModel:
    def test_seed_determinism(self):
        a, b = build_model(toy_spec(), seed=3), build_model(toy_spec(), seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        c = build_model(toy_spec(), seed=4)
        assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)

    @pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
    def test_theta_initialised(self, variant):
        m = build_model(toy_spec(variant, bases=4), 0)
        thetas = [v for n, v in m.params.items() if n.endswith("theta")]
        assert thetas and all(np.all(t == 0.25) for t in thetas)

    def test_lambda_initialised(self):
        m = build_model(toy_spec("layerwise", bases=5), 0)
        lams = [v for n, v in m.params.items() if n.endswith(".lam")]
        assert lams and all(np.all(v == np.float32(0.2)) for v in lams)

    @pytest.mark.parametrize("variant", ["v1", "v2", "v3", "layerwise"])
    def test_structure(self, variant):
        spec = toy_spec(variant, bases=3)
        roles = {n: r for n, _, r in parameter_layout(spec)}
        assert not any("bias" in n for n in roles)
        for name, role in roles.items():
            if role == "binary":
                prefix = name.rsplit(".", 1)[0]
                assert f"{prefix}.bn.gamma" in roles
        assert roles["stem.w"] == "weight" and roles["fc.w"] == "weight"

    def test_bases_homogeneous(self):
        m = build_model(toy_spec("v2", bases=3), 0)
        shapes = [sorted((n.split(".", 2)[2], v.shape) for n, v in m.params.items() if n.startswith(f"g0.m{i}."))
                  for i in range(3)]
        assert shapes[0] == shapes[1] == shapes[2]


def _bn_eval(x, model, prefix):
    g, b = model.params[prefix + ".gamma"], model.params[prefix + ".beta"]
    mu, var = model.buffers[prefix + ".mean"], model.buffers[prefix + ".var"]
    r = lambda v: v.astype(np.float64)[None, :, None, None]  # noqa: E731
    return (x - r(mu)) / np.sqrt(r(var) + 1e-5) * r(g) + r(b)


def _parent_forward(model, x):
    """Plain float64 residual network written directly from the reference ops."""
    spec = model.spec
    relu = lambda v: np.maximum(v, 0)  # noqa: E731

    def conv(h, name, geom):
        return conv2d_ref(h, model.params[name].astype(np.float64), ConvGeometry(
            h.shape[1], geom.out_channels, geom.kernel_h, geom.kernel_w, h.shape[2], h.shape[3],
            geom.stride, geom.padding))

    h = relu(_bn_eval(conv(x, "stem.w", spec.stem.geom), model, "stem.bn"))
    for j, block in enumerate(spec.blocks):
        pre = f"g{j}.m0.b{j}"
        a = relu(_bn_eval(conv(h, pre + ".l0.w", block.layers[0].geom), model, pre + ".l0.bn"))
        out = _bn_eval(conv(a, pre + ".l1.w", block.layers[1].geom), model, pre + ".l1.bn")
        skip = h
        if block.downsample:
            skip = _bn_eval(conv(h, f"g{j}.proj.w", block.projection), model, f"g{j}.proj.bn")
        h = out + skip
        if j < len(spec.blocks) - 1:
            h = relu(h)
    return h.mean(axis=(2, 3)) @ model.params["fc.w"].astype(np.float64).T


class TestModelForward:
    def test_full_precision_matches_parent_network(self):
        spec = toy_spec("v1", k=32, bases=1)
        model = build_model(spec, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        for name in model.buffers:
            model.buffers[name] = (rng.uniform(0.5, 2.0, model.buffers[name].shape) if name.endswith("var")
                                   else rng.normal(0, 0.2, model.buffers[name].shape))
        x = rng.standard_normal((3, 2, 6, 6))
        logits, _ = model_forward(model, x, train=False)
        np.testing.assert_allclose(logits, _parent_forward(model, x), rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("variant", ["v1", "v2", "v3", "layerwise"])
    def test_repeatable(self, variant):
        model = build_model(toy_spec(variant, bases=3), 1)
        x = np.random.default_rng(1).standard_normal((4, 2, 6, 6)).astype(np.float32)
        a, _ = model_forward(model, x, train=False)
        b, _ = model_forward(model, x, train=False)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("k", [2, 4])
    @pytest.mark.parametrize("plain", [False, True])
    def test_packed_engine_agrees(self, k, plain):
        model = build_model(toy_spec("v2", k=k, bases=2, plain=plain), 2, np.float64)
        x = np.random.default_rng(2).standard_normal((4, 2, 6, 6))
        a, _ = model_forward(model, x, engine="float")
        b, _ = model_forward(model, x, engine="packed")
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("plain", [False, True])
    def test_packed_layers_agree_binary_activations(self, plain):
        # end to end, 1-bit nets amplify last-ulp differences at sign boundaries,
        # so the engines are compared one layer at a time on identical inputs
        model = build_model(toy_spec("v2", k=1, bases=2, plain=plain), 2, np.float64)
        x = np.random.default_rng(2).standard_normal((4, 2, 6, 6))
        _, run = model_forward(model, x, train=True)
        ref = _Pass(model, train=False, engine="float")
        fast = _Pass(model, train=False, engine="packed")
        checked = 0
        for block_idx, block in enumerate(model.spec.blocks):
            for i, ls in enumerate(block.layers):
                for name in model.binary_names:
                    if f".b{block_idx}.l{i}." not in name + ".":
                        continue
                    h = activation_forward(np.random.default_rng(i).standard_normal((3,) + ls.in_shape), QuantSpec(1))
                    np.testing.assert_allclose(fast.weighted(name, ls, h), ref.weighted(name, ls, h),
                                               rtol=1e-9, atol=1e-12)
                    checked += 1
        assert checked == len(model.binary_names)

    def test_input_shape_checked(self):
        model = build_model(toy_spec(), 0)
        with pytest.raises(DimensionError):
            model_forward(model, np.zeros((1, 3, 6, 6), np.float32))

    def test_zero_weights_give_bn_determined_logits(self):
        model = build_model(toy_spec("v1", k=2), 0, np.float64)
        for name, role in model.roles.items():
            if role in ("binary", "weight") and name != "fc.w":
                model.params[name][...] = 0
        x1 = np.random.default_rng(3).standard_normal((2, 2, 6, 6))
        x2 = np.random.default_rng(4).standard_normal((2, 2, 6, 6))
        a, _ = model_forward(model, x1)
        b, _ = model_forward(model, x2)
        np.testing.assert_array_equal(a, b)
