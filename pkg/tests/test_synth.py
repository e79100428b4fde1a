import math

import numpy as np
import pytest
from scipy import stats

from oracles import inside_rect
from symbox.errors import DatasetFormatError, InvalidArgumentError, TruncatedFileError, VersionMismatchError
from symbox.geometry import circumscribed_hbox
from symbox.synth import (
    MAGIC,
    SHAPE_KINDS,
    NoiseSpec,
    SynthConfig,
    apply_annotation_noise,
    generate_dataset,
    generate_scene,
    load_dataset,
    noisy_dataset,
    render_coverage,
    sample_dataset,
    save_dataset,
    scene_seeds,
)

CFG = SynthConfig()


class TestRender:
    def test_rectangle_matches_point_sampling(self):
        cov = render_coverage("rectangle", 40.3, 30.7, 30, 14, 0.6, (64, 80), 4)
        ys, xs = np.mgrid[0:64, 0:80]
        # 16x supersampled point test, written out independently
        sub = (np.arange(8) + 0.5) / 8 - 0.5
        ref = np.zeros((64, 80))
        for dy in sub:
            for dx in sub:
                ref += inside_rect(40.3, 30.7, 30, 14, 0.6, xs + dx, ys + dy)
        ref /= len(sub) ** 2
        assert cov.sum() == pytest.approx(30 * 14, rel=0.01)
        assert np.abs(cov - ref).max() < 0.2

    def test_shape_areas_ordered(self):
        areas = {k: render_coverage(k, 32, 32, 30, 15, 0.0, (64, 64), 4).sum() for k in SHAPE_KINDS}
        assert areas["rectangle"] == pytest.approx(450, rel=0.01)
        assert areas["ellipse"] == pytest.approx(math.pi * 15 * 7.5, rel=0.02)
        assert areas["isosceles-triangle"] == pytest.approx(225, rel=0.03)
        assert areas["ellipse"] < areas["rounded-rect"] < areas["rectangle"]

    @pytest.mark.parametrize("kind", SHAPE_KINDS)
    def test_mirror_symmetric_about_axis(self, kind):
        # axis horizontal through an integer-centred grid: vflip is the reflection
        cov = render_coverage(kind, 31.5, 31.5, 30, 14, 0.0, (64, 64), 4)
        np.testing.assert_allclose(cov[::-1], cov, atol=1e-12)


class TestScene:
    def test_forced_angle(self):
        s = generate_scene(CFG, 3, thetas=[0.7], kinds=["rectangle"])
        (o,) = s.objects
        assert o.theta_sym == 0.7
        assert o.hbox == circumscribed_hbox(o.rbox)
        assert o.rbox.w >= o.rbox.h

    def test_deterministic(self):
        assert generate_scene(CFG, 42) == generate_scene(CFG, 42)
        assert generate_scene(CFG, 42) != generate_scene(CFG, 43)

    def test_objects_inside_and_separated(self):
        for seed in range(30):
            s = generate_scene(CFG, seed)
            assert CFG.min_objects <= len(s.objects) <= CFG.max_objects
            for o in s.objects:
                assert o.hbox.xmin >= CFG.margin - 1e-9 and o.hbox.xmax <= 127 - CFG.margin + 1e-9
                assert o.hbox.ymin >= CFG.margin - 1e-9 and o.hbox.ymax <= 127 - CFG.margin + 1e-9
            c = [(o.rbox.cx, o.rbox.cy) for o in s.objects]
            for i in range(len(c)):
                for j in range(i):
                    assert math.dist(c[i], c[j]) >= CFG.min_separation * CFG.max_diagonal - 1e-9

    def test_pixels_uint8(self):
        s = generate_scene(CFG, 1)
        assert s.pixels.dtype == np.uint8 and s.pixels.shape == (128, 128)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_theta_uniform(self):
        thetas = [o.theta_sym for s in generate_dataset(SynthConfig(max_objects=1), 1000, 5) for o in s.objects]
        counts, _ = np.histogram(thetas, bins=10, range=(-math.pi / 2, math.pi / 2))
        assert stats.chisquare(counts).pvalue > 0.01

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            SynthConfig(min_objects=0)
        with pytest.raises(InvalidArgumentError):
            SynthConfig(shape_mix={"star": 1.0})

    def test_seeds_independent_of_count(self):
        assert scene_seeds(9, 3) == scene_seeds(9, 5)[:3]


class TestNoise:
    def test_zero_identity(self):
        s = generate_scene(CFG, 2)
        assert apply_annotation_noise(s, NoiseSpec(0.0), 1) == s

    def test_ratio_range_and_pixels(self):
        scenes = generate_dataset(CFG, 20, 0)
        noisy = noisy_dataset(scenes, 0.3, 0)
        for a, b in zip(scenes, noisy):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            for oa, ob in zip(a.objects, b.objects):
                assert 0.7 < ob.hbox.width / oa.hbox.width < 1.3
                assert 0.7 < ob.hbox.height / oa.hbox.height < 1.3
                assert ob.hbox.center == pytest.approx(oa.hbox.center)
                assert ob.rbox == oa.rbox and ob.theta_sym == oa.theta_sym

    def test_sigma_validated(self):
        with pytest.raises(InvalidArgumentError):
            NoiseSpec(1.0)


class TestSample:
    def test_counts(self):
        scenes = generate_dataset(CFG, 40, 0)
        assert len(sample_dataset(scenes, 10, 0)) == 4
        assert len(sample_dataset(scenes, 100, 0)) == 40
        assert len(sample_dataset(scenes, 0.5, 0)) == 1
        assert sample_dataset(scenes, 25, 3) == sample_dataset(scenes, 25, 3)

    def test_bad_pct(self):
        with pytest.raises(InvalidArgumentError):
            sample_dataset([], 0, 0)


class TestFile:
    def test_round_trip(self, tmp_path):
        scenes = generate_dataset(CFG, 5, 1)
        p = tmp_path / "d.bin"
        save_dataset(p, scenes)
        assert load_dataset(p) == scenes

    def test_truncated(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(p, generate_dataset(CFG, 3, 1))
        data = p.read_bytes()
        for cut in (5, len(MAGIC) + 10, len(data) // 2, len(data) - 1):
            p.write_bytes(data[:cut])
            with pytest.raises(TruncatedFileError):
                load_dataset(p)

    def test_corrupted_payload(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(p, generate_dataset(CFG, 2, 1))
        data = bytearray(p.read_bytes())
        data[100] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(DatasetFormatError):
            load_dataset(p)

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(p, generate_dataset(CFG, 1, 1))
        data = bytearray(p.read_bytes())
        p.write_bytes(b"NOTMAGIC" + bytes(data[8:]))
        with pytest.raises(DatasetFormatError):
            load_dataset(p)
        data[8] = 99
        p.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_dataset(p)

    def test_size_and_speed(self, tmp_path):
        import time
        scenes = generate_dataset(CFG, 100, 0)
        p = tmp_path / "d.bin"
        save_dataset(p, scenes * 5)
        assert p.stat().st_size < 10e6
        t = time.perf_counter()
        assert len(load_dataset(p)) == 500
        assert time.perf_counter() - t < 1.0

    def test_parallel_matches_serial(self):
        assert generate_dataset(CFG, 4, 2, workers=2) == generate_dataset(CFG, 4, 2)
