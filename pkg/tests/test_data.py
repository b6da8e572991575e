"""Synthetic data tests: determinism, smallness/contrast invariants, PGM and
label round trips, dataset layout."""

import numpy as np
import pytest

from irdet.boxes import BBox, iou
from irdet.data import (
    Sample,
    SceneConfig,
    format_labels,
    generate_scene,
    load_split,
    measured_contrast,
    parse_labels,
    read_pgm,
    write_dataset,
    write_pgm,
)
from irdet.errors import ConfigError, GenerationError, InvalidArgumentError

CFG = SceneConfig(seed=7)


class TestSceneConfig:
    def test_default_valid(self):
        SceneConfig().validate()

    @pytest.mark.parametrize(
        "kw",
        [
            dict(image_size=100),
            dict(image_size=16),
            dict(targets_min=0),
            dict(targets_min=3, targets_max=2),
            dict(size_min=0.1),
            dict(size_max=10.0, image_size=128),
            dict(intensity_min=0.0),
            dict(intensity_max=0.2),
            dict(intensity_min=0.1, intensity_max=0.05),
            dict(background="perlin"),
            dict(noise_sigma=0.5),
        ],
    )
    def test_invalid_rejected(self, kw):
        with pytest.raises(ConfigError):
            SceneConfig(**kw).validate()

    def test_area_budget_scales_with_image(self):
        SceneConfig(image_size=256, size_max=11.0).validate()
        with pytest.raises(ConfigError):
            SceneConfig(image_size=64, size_max=8.0).validate()


class TestGeneration:
    def test_deterministic_per_index(self):
        a = generate_scene(CFG, 3)
        b = generate_scene(CFG, 3)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.boxes == b.boxes

    def test_index_isolation(self):
        # Scene i does not depend on which other scenes were generated.
        first = generate_scene(CFG, 5)
        for i in range(5):
            generate_scene(CFG, i)
        again = generate_scene(CFG, 5)
        np.testing.assert_array_equal(first.image, again.image)

    def test_different_indices_differ(self):
        assert not np.array_equal(generate_scene(CFG, 0).image, generate_scene(CFG, 1).image)

    def test_different_seeds_differ(self):
        a = generate_scene(SceneConfig(seed=0), 0)
        b = generate_scene(SceneConfig(seed=1), 0)
        assert not np.array_equal(a.image, b.image)

    def test_image_range_and_dtype(self):
        s = generate_scene(CFG, 0)
        assert s.image.shape == (1, 128, 128)
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_target_count_in_range(self):
        cfg = SceneConfig(targets_min=2, targets_max=4, seed=1)
        for i in range(30):
            n = len(generate_scene(cfg, i).boxes)
            assert 2 <= n <= 4

    def test_smallness_and_contrast_invariants(self):
        # Every target in a 300-scene sweep stays under 0.5% area and 0.15
        # peak-over-local-background contrast.
        cfg = SceneConfig(seed=123)
        area = cfg.image_size**2
        for i in range(300):
            s = generate_scene(cfg, i)
            assert s.boxes, f"scene {i} has no targets"
            for box, cls in s.boxes:
                assert cls == 0
                assert box.area / area < 0.005, f"scene {i}: box area {box.area}"
                c = measured_contrast(s, box)
                assert c <= 0.15 + 1e-6, f"scene {i}: contrast {c}"
                assert c > 0.005, f"scene {i}: target invisible ({c})"

    def test_boxes_inside_image_and_disjoint(self):
        for i in range(50):
            s = generate_scene(CFG, i)
            for box, _ in s.boxes:
                x1, y1, x2, y2 = box.corners()
                assert x1 >= 0 and y1 >= 0 and x2 <= 128 and y2 <= 128
            for j, (a, _) in enumerate(s.boxes):
                for b, _ in s.boxes[j + 1 :]:
                    assert iou(a, b) == 0.0

    def test_backgrounds_all_run(self):
        for bg in ("gradient", "clutter", "mixed"):
            s = generate_scene(SceneConfig(background=bg, seed=2), 0)
            assert s.image.max() <= 1.0

    def test_target_is_local_maximum(self):
        # The blob peak should dominate its immediate neighborhood.
        s = generate_scene(SceneConfig(seed=9, noise_sigma=0.0, background="gradient"), 0)
        img = s.image[0]
        for box, _ in s.boxes:
            x1, y1, x2, y2 = (int(round(v)) for v in box.corners())
            inner = img[max(0, y1) : y2, max(0, x1) : x2].max()
            ring = measured_contrast(s, box)
            assert ring > 0.01
            assert inner > img[max(0, y1 - 3) : y2 + 3, max(0, x1 - 3) : x2 + 3].mean()

    def test_impossible_placement_raises(self):
        cfg = SceneConfig(image_size=32, size_min=2.0, size_max=2.2, targets_min=40, targets_max=40)
        with pytest.raises(GenerationError, match="disjoint"):
            generate_scene(cfg, 0)


class TestPGM:
    def test_roundtrip_is_quantization_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((1, 24, 32)).astype(np.float32)
        p = tmp_path / "x.pgm"
        write_pgm(p, img)
        back = read_pgm(p)
        assert back.shape == (1, 24, 32)
        np.testing.assert_array_equal(back, np.round(img * 255) / 255.0)

    def test_second_write_identical_bytes(self, tmp_path):
        img = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        write_pgm(p1, img)
        write_pgm(p2, img)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(InvalidArgumentError, match="P2"):
            read_pgm(p)

    def test_rejects_truncated_pixels(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(InvalidArgumentError, match="pixel bytes"):
            read_pgm(p)

    def test_rejects_16bit(self, tmp_path):
        p = tmp_path / "deep.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(InvalidArgumentError, match="8-bit"):
            read_pgm(p)

    def test_header_comment_tolerated(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x10\x20")
        img = read_pgm(p)
        np.testing.assert_allclose(img[0, 0], [16 / 255, 32 / 255])

    def test_write_rejects_multichannel(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            write_pgm(tmp_path / "x.pgm", np.zeros((3, 4, 4)))


class TestLabels:
    def test_roundtrip_precision(self):
        boxes = [(BBox(17.3, 99.874, 5.5, 6.25), 0), (BBox(64.0, 64.0, 3.0, 3.0), 2)]
        text = format_labels(boxes, (128, 128))
        back = parse_labels(text, (128, 128))
        assert len(back) == 2
        for (b0, c0), (b1, c1) in zip(boxes, back):
            assert c0 == c1
            assert abs(b0.cx - b1.cx) < 1e-3
            assert abs(b0.cy - b1.cy) < 1e-3
            assert abs(b0.w - b1.w) < 1e-3

    def test_format_is_six_decimal(self):
        text = format_labels([(BBox(64, 64, 4, 4), 0)], (128, 128))
        assert text == "0 0.500000 0.500000 0.031250 0.031250\n"

    def test_format_rejects_out_of_bounds(self):
        with pytest.raises(InvalidArgumentError, match="outside"):
            format_labels([(BBox(127, 64, 4, 4), 0)], (128, 128))

    def test_parse_rejects_malformed(self):
        for bad in (
            "0 0.5 0.5 0.1\n",  # missing field
            "x 0.5 0.5 0.1 0.1\n",  # non-numeric class
            "0 1.5 0.5 0.1 0.1\n",  # out of range
            "-1 0.5 0.5 0.1 0.1\n",  # negative class
            "0 0.99 0.5 0.1 0.1\n",  # extends past right edge
        ):
            with pytest.raises(InvalidArgumentError):
                parse_labels(bad, (128, 128))

    def test_parse_skips_blank_lines(self):
        assert parse_labels("\n\n", (64, 64)) == []


class TestDatasetIO:
    def test_write_and_load_roundtrip(self, tmp_path):
        cfg = SceneConfig(seed=3)
        train, val = write_dataset(cfg, tmp_path, train_count=4, val_count=2)
        assert len(train) == 4 and len(val) == 2

        loaded = load_split(tmp_path, "train")
        assert [s.image_id for s in loaded] == [s.image_id for s in train]
        for orig, back in zip(train, loaded):
            np.testing.assert_array_equal(back.image, np.round(orig.image * 255) / 255.0)
            assert len(back.boxes) == len(orig.boxes)
            for (b0, c0), (b1, c1) in zip(orig.boxes, back.boxes):
                assert c0 == c1
                assert abs(b0.cx - b1.cx) < 1e-3

    def test_val_split_distinct_scenes(self, tmp_path):
        train, val = write_dataset(SceneConfig(seed=3), tmp_path, 3, 3)
        train_ids = {s.image_id for s in train}
        assert not train_ids & {s.image_id for s in val}

    def test_load_missing_split_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "val")

    def test_load_missing_image_raises(self, tmp_path):
        (tmp_path / "train.txt").write_text("img_99999\n")
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "train")
