"""Model graph tests: config validation and serialization, forward shapes,
deterministic builds, trimming semantics, and the FLOPs/params accounting."""

import numpy as np
import pytest

from irdet.errors import ConfigError, InvalidArgumentError
from irdet.model import (
    ModelConfig,
    build_model,
    count_flops,
    count_params,
    format_model_config,
    parse_model_config,
    trim,
)

P2_ONLY = ModelConfig(active_heads=("P2",), pan_mode="identity")
BASELINE = ModelConfig(enable_p2_head=False, ca_blocks_on_p2=0, active_heads=("P3", "P4", "P5"))


class TestConfig:
    def test_default_is_valid(self):
        ModelConfig().validate()

    def test_variants_valid(self):
        P2_ONLY.validate()
        BASELINE.validate()
        ModelConfig(active_heads=("P2", "P3"), pan_mode="partial").validate()

    @pytest.mark.parametrize(
        "kw",
        [
            dict(stem_stride=3),
            dict(width_multiple=0.0),
            dict(stage_channels=(16, 32, 64)),
            dict(stage_channels=(4, 32, 64, 128, 256)),
            dict(ca_blocks_on_p2=-1),
            dict(num_classes=0),
            dict(active_heads=()),
            dict(active_heads=("P2", "P6")),
            dict(active_heads=("P2", "P2")),
            dict(pan_mode="loop"),
            dict(active_heads=("P3",), enable_p2_head=True),
            dict(active_heads=("P2", "P3"), pan_mode="identity"),
            dict(active_heads=("P2", "P3", "P4"), pan_mode="partial"),
            dict(enable_p2_head=False, active_heads=("P3",), pan_mode="partial"),
            dict(active_heads=("P2", "P4"), pan_mode="partial"),
            dict(active_heads=("P2",), pan_mode="full"),
            dict(active_heads=("P2",), pan_mode="partial"),
        ],
    )
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw).validate()

    def test_head_strides(self):
        assert ModelConfig().head_strides() == {"P2": 2, "P3": 4, "P4": 8, "P5": 16}
        assert ModelConfig(stem_stride=2).head_strides() == {"P2": 4, "P3": 8, "P4": 16, "P5": 32}

    def test_width_multiple_channels(self):
        assert ModelConfig(width_multiple=0.5).channels() == (8, 16, 32, 64, 128)
        assert ModelConfig(width_multiple=1.0).channels() == (16, 32, 64, 128, 256)

    def test_text_roundtrip(self):
        for cfg in (ModelConfig(), P2_ONLY, BASELINE, ModelConfig(stem_stride=2, num_classes=3)):
            assert parse_model_config(format_model_config(cfg)) == cfg

    def test_parse_accepts_comments_and_blanks(self):
        text = "# detector\nstem_stride = 2\n\nactive_heads = P2  # high-res only\npan_mode = identity\n"
        cfg = parse_model_config(text)
        assert cfg.stem_stride == 2
        assert cfg.active_heads == ("P2",)

    def test_parse_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_model_config("depth_multiple = 2\n")

    def test_parse_rejects_duplicate_and_garbage(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_model_config("stem_stride = 1\nstem_stride = 2\n")
        with pytest.raises(ConfigError):
            parse_model_config("stem_stride := 1\n")
        with pytest.raises(ConfigError):
            parse_model_config("stem_stride = maybe\n")
        with pytest.raises(ConfigError):
            parse_model_config("enable_p2_head = 1\n")


class TestForward:
    def test_output_shapes_full(self):
        m = build_model(ModelConfig(), seed=0)
        x = np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32)
        outs = m.forward(x)
        assert set(outs) == {"P2", "P3", "P4", "P5"}
        assert outs["P2"].shape == (2, 6, 32, 32)
        assert outs["P3"].shape == (2, 6, 16, 16)
        assert outs["P4"].shape == (2, 6, 8, 8)
        assert outs["P5"].shape == (2, 6, 4, 4)

    def test_output_shapes_stride2_and_classes(self):
        m = build_model(ModelConfig(stem_stride=2, num_classes=3), seed=0)
        outs = m.forward(np.zeros((1, 1, 64, 64), dtype=np.float32))
        assert outs["P2"].shape == (1, 8, 16, 16)

    def test_rejects_bad_inputs(self):
        m = build_model(P2_ONLY, seed=0)
        with pytest.raises(InvalidArgumentError, match="divisible"):
            m.forward(np.zeros((1, 1, 40, 64), dtype=np.float32))
        with pytest.raises(InvalidArgumentError, match="grayscale"):
            m.forward(np.zeros((1, 3, 64, 64), dtype=np.float32))

    def test_eval_forward_deterministic(self):
        m = build_model(P2_ONLY, seed=0)
        x = np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32)
        a = m.forward(x)["P2"].data
        b = m.forward(x)["P2"].data
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_params(self):
        a = build_model(ModelConfig(), seed=7)
        b = build_model(ModelConfig(), seed=7)
        for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_different_params(self):
        a = build_model(ModelConfig(), seed=0)
        b = build_model(ModelConfig(), seed=1)
        assert not np.array_equal(
            dict(a.named_params())["backbone.stem.weight"].data,
            dict(b.named_params())["backbone.stem.weight"].data,
        )

    def test_shared_records_init_identically_across_configs(self):
        # A P2-only build and a full build from one seed must agree on every
        # record they share; this is what makes trimming bitwise-safe.
        full = build_model(ModelConfig(), seed=3)
        small = build_model(P2_ONLY, seed=3)
        fp = dict(full.named_params())
        for name, t in small.named_params():
            np.testing.assert_array_equal(t.data, fp[name].data, err_msg=name)

    def test_p2_output_equal_between_full_and_p2_only_build(self):
        x = np.random.default_rng(5).random((1, 1, 32, 32), dtype=np.float32)
        full = build_model(ModelConfig(), seed=11)
        small = build_model(P2_ONLY, seed=11)
        np.testing.assert_array_equal(full.forward(x)["P2"].data, small.forward(x)["P2"].data)

    def test_obj_bias_prior(self):
        m = build_model(P2_ONLY, seed=0)
        bias = dict(m.named_params())["head.p2.pred_b"].data
        assert bias[4] == pytest.approx(np.log(0.01 / 0.99), rel=1e-6)
        assert np.all(bias[:4] == 0.0)

    def test_param_names_unique(self):
        m = build_model(ModelConfig(), seed=0)
        names = [n for n, _ in m.named_params()]
        assert len(names) == len(set(names))


class TestTrim:
    def test_trim_to_p2_structure(self):
        m = build_model(ModelConfig(), seed=0)
        t = trim(m, ("P2",), "identity")
        names = {r.name for r in t.records}
        assert not any(n.startswith("pan.") for n in names)
        assert "head.p2" in names and "head.p3" not in names
        assert t.config.pan_mode == "identity"
        assert t.config.active_heads == ("P2",)

    def test_trim_preserves_params_and_p2_output(self):
        m = build_model(ModelConfig(), seed=2)
        x = np.random.default_rng(0).random((1, 1, 32, 32), dtype=np.float32)
        before = m.forward(x)["P2"].data
        t = trim(m, ("P2",), "identity")
        np.testing.assert_array_equal(t.forward(x)["P2"].data, before)

    def test_trim_copies_parameters(self):
        m = build_model(ModelConfig(), seed=0)
        t = trim(m, ("P2",), "identity")
        src = dict(m.named_params())["backbone.stem.weight"]
        dst = dict(t.named_params())["backbone.stem.weight"]
        assert src is not dst
        dst.data[...] = 0.0
        assert not np.array_equal(src.data, dst.data)

    def test_trim_partial(self):
        m = build_model(ModelConfig(), seed=0)
        t = trim(m, ("P2", "P3"), "partial")
        names = {r.name for r in t.records}
        assert "pan.n3" in names and "pan.n4" not in names

    def test_trim_noop_full(self):
        m = build_model(ModelConfig(), seed=0)
        t = trim(m, ("P2", "P3", "P4", "P5"), "full")
        assert {r.name for r in t.records} == {r.name for r in m.records}

    def test_trim_rejects_missing_head(self):
        m = build_model(P2_ONLY, seed=0)
        with pytest.raises(ConfigError, match="P3"):
            trim(m, ("P2", "P3"), "partial")

    def test_trim_rejects_inconsistent_pan_mode(self):
        m = build_model(ModelConfig(), seed=0)
        with pytest.raises(ConfigError):
            trim(m, ("P2", "P3"), "identity")
        with pytest.raises(ConfigError):
            trim(m, ("P2",), "full")

    def test_trim_rejects_unreachable_rewiring(self):
        # Keeping only coarse heads would leave the P2 branch feeding the
        # bottom-up path, which the target structure cannot express.
        m = build_model(ModelConfig(), seed=0)
        with pytest.raises(ConfigError):
            trim(m, ("P3", "P4", "P5"), "full")


class TestAccounting:
    def test_param_count_matches_named_params(self):
        m = build_model(ModelConfig(), seed=0)
        total, rows = count_params(m)
        assert total == sum(t.data.size for _, t in m.named_params())
        assert total == sum(n for _, _, n in rows)

    def test_running_stats_not_counted(self):
        m = build_model(P2_ONLY, seed=0)
        total, _ = count_params(m)
        with_buffers = total + sum(b.size for _, b in m.named_buffers())
        assert with_buffers > total

    def test_stem_flops_hand_value(self):
        # 3x3 conv 1->16 at 512x512 stride 1: 2*1*16*9*512*512 MACs-as-flops
        # plus BN and activation at 2 each per output element.
        m = build_model(ModelConfig(), seed=0)
        _, rows = count_flops(m, (512, 512))
        name, kind, flops, shape = rows[0]
        assert name == "backbone.stem"
        assert shape == (1, 16, 512, 512)
        assert flops == 2 * 1 * 16 * 9 * 512 * 512 + 4 * 16 * 512 * 512

    def test_flops_scale_with_area(self):
        m = build_model(P2_ONLY, seed=0)
        f1, _ = count_flops(m, (128, 128))
        f2, _ = count_flops(m, (256, 256))
        assert f2 / f1 == pytest.approx(4.0, abs=0.05)

    def test_stride_ratio_near_four(self):
        f1, _ = count_flops(build_model(ModelConfig(), seed=0), (512, 512))
        f2, _ = count_flops(build_model(ModelConfig(stem_stride=2), seed=0), (512, 512))
        assert 3.90 <= f1 / f2 <= 4.10

    def test_trim_economics_in_band(self):
        m = build_model(ModelConfig(), seed=0)
        t = trim(m, ("P2",), "identity")
        p_full, _ = count_params(m)
        p_trim, _ = count_params(t)
        f_full, _ = count_flops(m, (512, 512))
        f_trim, _ = count_flops(t, (512, 512))
        assert 0.15 <= 1 - p_trim / p_full <= 0.35
        assert 0.20 <= 1 - f_trim / f_full <= 0.35

    def test_count_flops_rejects_bad_size(self):
        m = build_model(ModelConfig(), seed=0)
        with pytest.raises(InvalidArgumentError):
            count_flops(m, (100, 128))
