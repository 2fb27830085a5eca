"""
Tests for the model zoo: shape traces, parameter census, heads and presets.
"""

import numpy as np
import pytest


def _spatial_trace(rows):
    return [r.output_shape for r in rows]


class TestCustomCNN:
    def test_shape_trace_at_64(self):
        from mgcn.zoo import custom_cnn_blueprint

        bp = custom_cnn_blueprint(64)
        assert bp.input_shape == (64, 64, 1)
        assert _spatial_trace(bp.shape_trace()) == [
            (32, 64, 64), (32, 32, 32),
            (64, 32, 32), (64, 16, 16),
            (128, 16, 16), (128, 8, 8),
            (256, 8, 8), (256, 8, 8), (256, 4, 4),
            (4096,), (32,), (1,),
        ]

    def test_parameterized_layer_count(self):
        from mgcn.zoo import custom_cnn_blueprint, layer_census

        census = layer_census(custom_cnn_blueprint(64).layers)
        assert census["conv2d"] == 5
        assert census["dense"] == 2

    @pytest.mark.parametrize("size", [8, 15])
    def test_too_small(self, size):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import custom_cnn_blueprint

        with pytest.raises(ModelConfigError, match="too small"):
            custom_cnn_blueprint(size)

    def test_minimum_size_builds(self):
        from mgcn.zoo import build_custom_cnn

        net = build_custom_cnn(16)
        assert net.output_shape() == (1,)


class TestAlexNet:
    def test_shape_trace_at_227(self):
        from mgcn.zoo import alexnet_blueprint

        trace = alexnet_blueprint(227).shape_trace()
        assert trace[0].output_shape == (96, 55, 55)
        flat = [r for r in trace if r.kind == "flatten"][0]
        assert flat.output_shape == (9216,)
        pools = [r for r in alexnet_blueprint(227).layers if r.kind == "max_pool"]
        assert all(p.window == (3, 3) and p.stride == (2, 2) for p in pools)

    def test_too_small(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import alexnet_blueprint

        with pytest.raises(ModelConfigError):
            alexnet_blueprint(32)

    def test_smallest_valid_size(self):
        from mgcn.zoo import alexnet_blueprint

        assert alexnet_blueprint(67).shape_trace()[-1].output_shape == (1,)


class TestInception:
    def test_channel_trace(self):
        from mgcn.zoo import inception_v4_blueprint

        trace = inception_v4_blueprint(32).shape_trace()
        channels = [r.output_shape[0] for r in trace if len(r.output_shape) == 3]
        assert channels == [32, 32, 64, 256, 448, 448]
        flat = [r for r in trace if r.kind == "flatten"][0]
        assert flat.output_shape == (16 * 16 * 448,)

    def test_exactly_two_blocks(self):
        from mgcn.zoo import inception_v4_blueprint, layer_census

        assert layer_census(inception_v4_blueprint(16).layers)["branch"] == 2

    def test_block_channels_property(self):
        from mgcn.layers import output_shape
        from mgcn.zoo import blueprint, inception_block

        rng = np.random.default_rng(0)
        for _ in range(25):
            f = [int(v) for v in rng.integers(1, 9, size=7)]
            block = blueprint("probe", [inception_block(f)], 6, 3).layers[0]
            out = output_shape(block, (3, 6, 6))
            assert out == (f[0] + f[2] + f[5] + f[6], 6, 6)

    def test_block_needs_seven_filters(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import inception_block

        with pytest.raises(ModelConfigError):
            inception_block([1, 2, 3])

    def test_too_small(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import inception_v4_blueprint

        with pytest.raises(ModelConfigError):
            inception_v4_blueprint(4)


class TestDenseNet:
    def test_single_block_channels(self):
        from mgcn.zoo import densenet_mini_blueprint

        trace = densenet_mini_blueprint(16, blocks=1, layers_per_block=4, growth=12).shape_trace()
        assert trace[0].output_shape == (24, 16, 16)
        assert trace[4].output_shape == (72, 16, 16)

    def test_transition_halves_channels_and_spatial(self):
        from mgcn.zoo import densenet_mini_blueprint

        trace = densenet_mini_blueprint(16, blocks=2, layers_per_block=4, growth=12).shape_trace()
        # stem, 4 dense layers, BN, 1x1 conv, avg pool
        assert trace[6].output_shape == (36, 16, 16)
        assert trace[7].output_shape == (36, 8, 8)
        assert trace[11].output_shape == (36 + 48, 8, 8)

    def test_dense_block_channel_property(self):
        from mgcn.zoo import densenet_mini_blueprint

        rng = np.random.default_rng(1)
        for _ in range(10):
            layers, growth = int(rng.integers(1, 5)), int(rng.integers(1, 9))
            trace = densenet_mini_blueprint(8, 1, layers, growth, include_top=False).shape_trace()
            assert trace[-1].output_shape[0] == 2 * growth + layers * growth

    @pytest.mark.parametrize("kwargs", [{"layers_per_block": 0}, {"blocks": 0}, {"growth": 0}])
    def test_invalid_counts(self, kwargs):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import densenet_mini_blueprint

        with pytest.raises(ModelConfigError):
            densenet_mini_blueprint(16, **kwargs)

    def test_inner_layer_order(self):
        from mgcn.zoo import dense_layer

        identity, path = dense_layer(12).chains
        assert identity == ()
        assert [s.kind for s in path] == ["batch_norm", "activation", "conv2d"]


class TestVGG:
    def test_shape_trace(self):
        from mgcn.zoo import vgg_mini_blueprint

        trace = vgg_mini_blueprint(32, [64, 128], [256]).shape_trace()
        spatial = [r.output_shape for r in trace if r.kind == "max_pool"]
        assert spatial == [(64, 16, 16), (128, 8, 8)]
        assert [r for r in trace if r.kind == "flatten"][0].output_shape == (8 * 8 * 128,)

    def test_vgg19_head(self):
        from mgcn.zoo import vgg_mini_blueprint

        units = [s.units for s in vgg_mini_blueprint(16, [8], [4096, 4096]).layers if s.kind == "dense"]
        assert units == [4096, 4096, 1]

    def test_empty_stages(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import vgg_mini_blueprint

        with pytest.raises(ModelConfigError):
            vgg_mini_blueprint(32, [], [256])


class TestNetworks:
    @pytest.mark.parametrize(
        "name,size",
        [("cnn", 16), ("alexnet", 67), ("inception-v4", 8), ("densenet-mini", 8), ("vgg-mini", 8)],
    )
    def test_ends_in_sigmoid_unit_and_scores_in_open_interval(self, name, size):
        from mgcn.tensor import Tensor
        from mgcn.zoo import build_model

        kwargs = {"stage_filters": [4], "head_units": [8]} if name == "vgg-mini" else {}
        if name == "densenet-mini":
            kwargs = {"blocks": 1, "layers_per_block": 2, "growth": 4}
        net = build_model(name, size, seed=3, **kwargs)
        last = net.layers[-1]
        assert last.kind == "dense" and last.units == 1 and last.activation == "sigmoid"

        h, w, c = net.input_shape
        x = Tensor(np.random.default_rng(0).random((2, c, h, w)))
        scores = net.predict(x)
        assert scores.shape == (2,)
        assert np.all((scores > 0) & (scores < 1))

    @pytest.mark.parametrize(
        "name,sizes,kwargs",
        [
            ("cnn", (16, 24, 32), {}),
            ("alexnet", (67, 75, 83), {}),
            ("inception-v4", (8, 10, 12), {}),
            ("densenet-mini", (8, 16, 24), {"blocks": 2, "layers_per_block": 2, "growth": 4}),
            ("vgg-mini", (8, 16, 24), {"stage_filters": [4, 8], "head_units": [16]}),
        ],
    )
    def test_closed_form_count_matches_census(self, name, sizes, kwargs):
        from mgcn.zoo import allocate, model_blueprint

        for size in sizes:
            bp = model_blueprint(name, size, **kwargs)
            total, trainable = bp.count_params()
            net = allocate(bp)
            assert net.count_params() == total
            assert net.count_params(trainable_only=True) == trainable

    def test_same_seed_same_weights(self):
        from mgcn.zoo import build_custom_cnn

        a = build_custom_cnn(16, seed=4).named_tensors()
        b = build_custom_cnn(16, seed=4).named_tensors()
        assert [n for n, _ in a] == [n for n, _ in b]
        assert all(x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(a, b))

    def test_wrong_input_shape(self):
        from mgcn.errors import ShapeError
        from mgcn.tensor import Tensor
        from mgcn.zoo import build_custom_cnn

        net = build_custom_cnn(16)
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 3, 16, 16))))

    def test_layer_names_unique(self):
        from mgcn.zoo import build_inception_v4

        names = [n for n, _ in build_inception_v4(8).named_tensors()]
        assert len(names) == len(set(names))


class TestHeads:
    def test_attach_head_freezes_base(self):
        from mgcn.zoo import attach_head, build_densenet_mini

        base = build_densenet_mini(8, 1, 2, 4, include_top=False)
        n_base = len(base.layers)
        net = attach_head(base, "flatten", [32], 0.2, freeze_base=True)
        assert net.frozen_prefix == n_base
        assert [s.kind for s in net.layers[n_base:]] == ["flatten", "dense", "dropout", "dense"]
        assert all(not t.trainable for state in net.states[:n_base] for _, t in _named(state))
        assert net.count_params(trainable_only=True) == net.count_params() - base.count_params()

    def test_global_avg_head(self):
        from mgcn.zoo import attach_head, build_inception_v4

        net = attach_head(build_inception_v4(8, include_top=False), "global_avg", [128], freeze_base=True)
        head = net.layers[net.frozen_prefix:]
        assert [s.kind for s in head] == ["global_avg_pool", "dense", "dense"]
        assert head[1].units == 128

    def test_base_ending_in_dense_rejected(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import attach_head, build_custom_cnn

        with pytest.raises(ModelConfigError):
            attach_head(build_custom_cnn(16), "flatten", [32])

    def test_unknown_pool(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import attach_head, build_vgg_mini

        with pytest.raises(ModelConfigError):
            attach_head(build_vgg_mini(8, [4], include_top=False), "max", [8])

    def test_frozen_base_stays_in_eval_mode(self):
        from mgcn.zoo import model_blueprint, allocate

        net = allocate(model_blueprint("densenet-mini", 8, head="densenet121", blocks=1, layers_per_block=1, growth=4))
        net.set_mode("train")
        assert all(s.mode == "eval" for s in net.states[: net.frozen_prefix])
        assert all(s.mode == "train" for s in net.states[net.frozen_prefix:])

    def test_presets(self):
        from mgcn.zoo import model_blueprint

        bp = model_blueprint("vgg-mini", 16, head="vgg19", stage_filters=[4])
        assert bp.config["head"] == "vgg19"
        assert [s.units for s in bp.layers if s.kind == "dense"] == [4096, 4096, 1]
        total, trainable = bp.count_params()
        assert trainable < total

    def test_head_rejected_for_cnn(self):
        from mgcn.errors import ModelConfigError
        from mgcn.zoo import model_blueprint

        with pytest.raises(ModelConfigError):
            model_blueprint("cnn", 16, head="vgg16")

    def test_unknown_names(self):
        from mgcn.errors import UsageError
        from mgcn.zoo import model_blueprint

        with pytest.raises(UsageError, match="valid models"):
            model_blueprint("resnet", 16)
        with pytest.raises(UsageError, match="valid heads"):
            model_blueprint("vgg-mini", 16, head="resnet50")


def _named(state):
    from mgcn.layers import named_tensors

    return list(named_tensors(state))
