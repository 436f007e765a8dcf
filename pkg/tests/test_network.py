"""Graph construction, builders, accounting, serialization."""

import numpy as np
import pytest

from shiftpose import autodiff as ad
from shiftpose import network as net
from shiftpose.errors import ConfigError, DimensionError
from shiftpose.fsm import CA_SIGMOID, CA_SOFTPLUS
from shiftpose.gradcheck import finite_diff_gradcheck


class TestBottleneck:
    def test_zero_final_conv_identity_shortcut_is_relu(self):
        rng = np.random.default_rng(0)
        block = net.Bottleneck(4, 2, 4, norm="gn", rng=rng, dtype=np.float64)
        block.expand.weight.data[...] = 0.0
        x = ad.tensor(rng.standard_normal((2, 4, 5, 5)))
        out = block.forward(x, "train")
        np.testing.assert_allclose(out.data, np.maximum(x.data, 0.0), atol=1e-12)

    def test_stride_two_halves_spatial_dims(self):
        block = net.Bottleneck(4, 2, 8, stride=2, norm="gn")
        assert block.out_shape((4, 9, 12)) == (8, 5, 6)
        assert block.project is not None

    def test_projection_absent_when_shapes_match(self):
        assert net.Bottleneck(8, 2, 8, stride=1).project is None

    def test_gradcheck_tiny_block(self):
        from shiftpose.verify import _case_bottleneck, _is_smooth_case

        seed = 1
        while True:  # skip draws that sit on a relu kink, per the harness contract
            fn, inputs = _case_bottleneck(np.random.default_rng(seed))
            if _is_smooth_case(fn, inputs):
                break
            seed += 1
        report = finite_diff_gradcheck(fn, inputs)
        assert report.passed, str(report)

    def test_channel_mismatch(self):
        block = net.Bottleneck(4, 2, 4)
        with pytest.raises(DimensionError, match="channels"):
            block.out_shape((3, 5, 5))


class TestBuild3Block3Fsm:
    def test_paper_scale_output_shape_and_params(self):
        g = net.build_3block3fsm((256, 192), 256, 17)
        assert g.shape_of("head") == (17, 64, 48)
        params = net.count_params(g)
        assert abs(params - 0.8e6) / 0.8e6 < 0.05
        # regression baseline from this implementation's slot enumeration
        assert params == 775_650

    def test_k512_params(self):
        g = net.build_3block3fsm((256, 192), 512, 17)
        assert net.count_params(g) == 1_219_554
        assert abs(net.count_params(g) - 1.2e6) / 1.2e6 < 0.05

    def test_small_input_shape_only(self):
        g = net.build_3block3fsm((32, 32), 8, 1)
        assert g.shape_of("head") == (1, 8, 8)
        heads, _ = g.forward(np.zeros((1, 3, 32, 32), dtype=np.float32), "eval")
        assert heads["main"].shape == (1, 1, 8, 8)

    def test_indivisible_input_rejected(self):
        with pytest.raises(ConfigError, match="input_size"):
            net.build_3block3fsm((30, 32), 8, 1)

    def test_channel_progression_matches_structure_table(self):
        g = net.build_3block3fsm((256, 192), 256, 17)
        expected = [("stem", (64, 128, 96)), ("pool", (64, 64, 48)),
                    ("fsm1", (64, 64, 48)), ("block1", (256, 64, 48)),
                    ("fsm2", (256, 64, 48)), ("block2", (256, 64, 48)),
                    ("fsm3", (256, 64, 48)), ("block3", (256, 64, 48)),
                    ("neck", (256, 64, 48)), ("head", (17, 64, 48))]
        got = [(n.name, n.out_shape) for n in g.nodes]
        assert got == expected


class TestEsp:
    def _tiny(self):
        rng = np.random.default_rng(2)
        return net.build_toy_fsm_net((16, 16), 1, 3, 4, 8, fsm_active=True, rng=rng)

    def test_attach_to_final_layer_duplicates_main_shape(self):
        g = self._tiny()
        net.attach_esp(g, g.main_head, 3)
        esp = g.node(f"esp_{g.main_head}")
        assert esp.out_shape == g.node(g.main_head).out_shape

    def test_two_esps_produce_two_extra_heads(self):
        g = self._tiny()
        net.attach_esp(g, "stem", 3)
        net.attach_esp(g, "stem2", 3)
        heads, _ = g.forward(np.zeros((2, 1, 16, 16), dtype=np.float32), "eval")
        assert set(heads) == {"main", "esp_stem", "esp_stem2"}
        assert heads["esp_stem"].shape == (2, 3, 8, 8)
        assert heads["esp_stem2"].shape == (2, 3, 4, 4)

    def test_esp_raises_early_layer_gradient_norm(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        targets = {}

        def grad_norm(with_esp):
            g = self._tiny()
            if with_esp:
                net.attach_esp(g, "stem2", 3)
            heads, _ = g.forward(x, "train")
            loss = None
            for name, pred in heads.items():
                t = targets.setdefault(
                    (name, pred.shape),
                    rng.standard_normal(pred.shape).astype(np.float32))
                term = ad.mse_loss(pred, t)
                loss = term if loss is None else ad.add(loss, term)
            stem_w = dict(g.node("stem").layer.named_params())["weight"]
            stem_w.zero_grad()
            loss.backward()
            return float(np.linalg.norm(stem_w.grad))

        assert grad_norm(True) > grad_norm(False)

    def test_unknown_layer_rejected(self):
        with pytest.raises(ConfigError, match="layer"):
            net.attach_esp(self._tiny(), "nonexistent", 3)


class TestFlops:
    def test_single_conv_formula_instantiation(self):
        g = net.NetworkGraph((1, 2, 2))
        g.add("only", net.ConvBlock(1, 1, 1))
        assert net.count_flops(g).flops == 8

    def test_table5_figures_within_20_percent(self):
        for k, target in ((256, 2.5e9), (512, 3.9e9)):
            g = net.build_3block3fsm((256, 192), k, 17)
            macs = net.count_flops(g).macs
            assert abs(macs - target) / target < 0.20, (k, macs)

    def test_input_size_override(self):
        g = net.build_3block3fsm((256, 192), 256, 17)
        half = net.count_flops(g, input_size=(128, 96)).flops
        full = net.count_flops(g).flops
        assert 3.5 < full / half < 4.5


class TestSerialization:
    @pytest.mark.parametrize("build", [
        lambda: net.build_3block3fsm((32, 32), 8, 2, fsm_active=False),
        lambda: net.build_toy_fsm_net((16, 16), 1, 1, 4, 8),
        lambda: net.build_fpn_ssn((64, 64), 3, base_channels=4, shift_channels=4),
    ])
    def test_round_trip_preserves_structure(self, build):
        g = build()
        spec = g.spec()
        rebuilt = net.NetworkGraph.from_spec(spec)
        assert rebuilt.spec() == spec
        orig = g.named_parameters()
        new = rebuilt.named_parameters()
        assert [n for n, _ in orig] == [n for n, _ in new]
        assert [p.shape for _, p in orig] == [p.shape for _, p in new]

    def test_unknown_version_rejected(self):
        g = net.build_toy_fsm_net((16, 16), 1, 1, 4, 8)
        spec = g.spec()
        spec["version"] = 99
        with pytest.raises(ConfigError, match="version"):
            net.NetworkGraph.from_spec(spec)

    def test_unique_parameter_owners(self):
        g = net.build_3block3fsm((32, 32), 8, 2)
        names = [n for n, _ in g.named_parameters()]
        assert len(names) == len(set(names))


class TestShapeAudit:
    def test_declared_shapes_match_forward_for_random_configs(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            hw = int(rng.integers(2, 5)) * 4
            k = int(rng.integers(1, 6))
            m = int(rng.integers(1, 4))
            width = int(rng.integers(1, 4)) * 4
            if trial % 3 == 0:
                g = net.build_3block3fsm((hw, hw), k, m,
                                         fsm_active=bool(rng.integers(0, 2)))
                cin = 3
            else:
                g = net.build_toy_fsm_net((hw, hw), 1, m, k, width,
                                          fsm_active=bool(rng.integers(0, 2)))
                cin = 1
            x = rng.standard_normal((2, cin, hw, hw)).astype(np.float32)
            _, outputs = g.forward(x, "train")
            for node in g.nodes:
                assert outputs[node.name].shape[1:] == node.out_shape, node.name

    def test_fpn_structure(self):
        g = net.build_fpn_ssn((64, 64), keypoints=3, base_channels=4,
                              shift_channels=8)
        # 16 bottlenecks, 13 shifting modules (3, 3, 5, 2 per stage)
        kinds = [n.layer.kind for n in g.nodes]
        assert kinds.count("bottleneck") == 16
        assert kinds.count("fsm") == 13
        per_stage = [sum(1 for n in g.nodes if n.name.startswith(f"s{s}_fsm"))
                     for s in (1, 2, 3, 4)]
        assert per_stage == [3, 3, 5, 2]
        heads, _ = g.forward(np.zeros((1, 3, 64, 64), dtype=np.float32), "eval")
        assert heads["main"].shape == (1, 3, 16, 16)  # quarter-resolution merge
        assert len(heads) == 4
        net.validate_fsm_placement(g)

    def test_placement_validator(self):
        g = net.build_fpn_ssn((64, 64), 3, base_channels=4, shift_channels=4)
        assert net.validate_fsm_placement(g)
        # strict mode also forbids the stem-pool position used by the
        # lightweight table structure
        g2 = net.build_3block3fsm((32, 32), 4, 1)
        assert net.validate_fsm_placement(g2)
        with pytest.raises(ConfigError, match="fsm_placement"):
            net.validate_fsm_placement(g2, forbid_after_maxpool=True)

    def test_bad_input_shape_message(self):
        g = net.build_toy_fsm_net((16, 16), 1, 1, 4, 8)
        with pytest.raises(DimensionError, match="input"):
            g.forward(np.zeros((1, 2, 16, 16), dtype=np.float32))
