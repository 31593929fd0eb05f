"""Synthetic scene generator: rendering kinematics, the event oracle, blur,
sparsification, and byte-exact dataset reproduction."""

import dataclasses
import hashlib
from pathlib import Path

import numpy as np
import pytest

from evdepth.datagen import (SceneSpec, generate_dataset, load_dataset,
                             load_sample, make_sample, radial_blur,
                             render_sequence, sample_sparse, simulate_events,
                             value_noise)
from evdepth.events import voxelize


def spec_with(**kwargs):
    return dataclasses.replace(SceneSpec(), **kwargs)


class TestSceneSpec:
    def test_depth_ordering_enforced(self):
        with pytest.raises(ValueError, match="object_depth"):
            SceneSpec(object_depth=5.0, background_depth=4.0)

    def test_positive_exposure(self):
        with pytest.raises(ValueError, match="positive"):
            SceneSpec(exposure=0.0)


class TestRenderSequence:
    def test_static_scene_identical_frames(self):
        spec = spec_with(object_velocity=(0.0, 0.0), zoom_rate=0.0,
                         translation=(0.0, 0.0))
        frames, depths, times = render_sequence(spec)
        assert frames.shape == (9, 3, 64, 64)
        for f in range(1, 9):
            assert np.array_equal(frames[0], frames[f])
            assert np.array_equal(depths[0], depths[f])

    def test_object_kinematics(self):
        # vx = 32 px/s with dt = 0.25 s moves the square 8 columns right
        spec = spec_with(height=48, width=48, object_start=(10.0, 10.0),
                         object_velocity=(0.0, 32.0), zoom_rate=0.0,
                         translation=(0.0, 0.0), exposure=0.25, frames=2,
                         object_size=8)
        _, depths, _ = render_sequence(spec)
        first = np.argwhere(depths[0, 0] == spec.object_depth)
        second = np.argwhere(depths[1, 0] == spec.object_depth)
        assert first[:, 0].min() == 10 and first[:, 1].min() == 10
        assert second[:, 0].min() == 10 and second[:, 1].min() == 18

    def test_two_layer_depth(self):
        spec = spec_with(zoom_rate=0.0, translation=(0.0, 0.0))
        _, depths, _ = render_sequence(spec)
        assert set(np.unique(depths)) == {np.float32(spec.object_depth),
                                          np.float32(spec.background_depth)}

    def test_object_never_visible_rejected(self):
        spec = spec_with(object_start=(500.0, 500.0), object_velocity=(0.0, 0.0))
        with pytest.raises(ValueError, match="never enters"):
            render_sequence(spec)

    def test_noise_is_deterministic_and_unit_range(self):
        ys, xs = np.meshgrid(np.arange(32.0), np.arange(32.0), indexing="ij")
        a = value_noise(ys, xs, seed=5, scale=7.0)
        b = value_noise(ys, xs, seed=5, scale=7.0)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert not np.array_equal(a, value_noise(ys, xs, seed=6, scale=7.0))


class TestSimulateEvents:
    def test_identical_frames_no_events(self):
        frames = np.tile(np.random.default_rng(0).random((1, 8, 8)), (3, 1, 1))
        stream = simulate_events(frames, np.array([0.0, 0.01, 0.02]), 0.15)
        assert len(stream) == 0

    def test_exact_threshold_multiples(self):
        c = 0.15
        lum0, lum1 = 0.4, 0.4 * np.exp(3 * c)
        frames = np.stack([np.full((1, 1), lum0 - 1e-3), np.full((1, 1), lum1 - 1e-3)])
        stream = simulate_events(frames, np.array([0.0, 0.3]), c)
        assert len(stream) == 3
        assert np.allclose(stream.t, [0.1, 0.2, 0.3], atol=1e-9)
        assert np.all(stream.polarity == 1)

    def test_polarity_antisymmetry(self):
        rng = np.random.default_rng(1)
        a = rng.random((4, 4)) + 0.1
        b = rng.random((4, 4)) + 0.1
        fwd = simulate_events(np.stack([a, b]), np.array([0.0, 0.01]), 0.1)
        rev = simulate_events(np.stack([b, a]), np.array([0.0, 0.01]), 0.1)
        assert len(fwd) == len(rev)
        assert fwd.polarity.sum() == -rev.polarity.sum()

    def test_crossing_count_oracle(self):
        rng = np.random.default_rng(2)
        frames = rng.random((3, 5, 5)) + 0.05
        times = np.array([0.0, 0.01, 0.02])
        c = 0.12
        stream = simulate_events(frames, times, c)
        log_l = np.log(frames + 1e-3)
        want = 0
        for f in range(2):
            want += int(np.floor(np.abs(log_l[f + 1] - log_l[f]) / c + 1e-9).sum())
        assert len(stream) == want

    def test_sorted_timestamps(self):
        spec = SceneSpec()
        frames, _, times = render_sequence(spec)
        stream = simulate_events(frames.mean(axis=1), times, spec.contrast_threshold)
        assert np.all(np.diff(stream.t) >= 0)


class TestRadialBlur:
    def test_single_step_identity(self):
        img = np.random.default_rng(3).random((3, 12, 12))
        assert np.array_equal(radial_blur(img, 1, 0.3), img)

    def test_zero_strength_identity(self):
        img = np.random.default_rng(4).random((3, 10, 10))
        assert np.allclose(radial_blur(img, 5, 0.0), img)

    def test_constant_image_unchanged(self):
        img = np.full((3, 9, 9), 0.37)
        assert np.allclose(radial_blur(img, 6, 0.2), img, atol=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        img = rng.random((3, 8, 8))
        steps, strength = 4, 0.05
        got = radial_blur(img, steps, strength)

        h = w = 8
        cy = cx = (8 - 1) / 2.0
        acc = np.zeros_like(img)
        for k in range(steps):
            s = 1.0 + strength * k / steps
            for i in range(h):
                for j in range(w):
                    sy = min(max(cy + (i - cy) / s, 0), h - 1)
                    sx = min(max(cx + (j - cx) / s, 0), w - 1)
                    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    fy, fx = sy - y0, sx - x0
                    for c in range(3):
                        top = img[c, y0, x0] * (1 - fx) + img[c, y0, x1] * fx
                        bot = img[c, y1, x0] * (1 - fx) + img[c, y1, x1] * fx
                        acc[c, i, j] += top * (1 - fy) + bot * fy
        assert np.allclose(got, acc / steps, atol=1e-12)


class TestSampleSparse:
    def test_full_density_is_identity(self):
        z = np.random.default_rng(6).random((1, 8, 8)) + 1.0
        assert np.array_equal(sample_sparse(z, "random", density=1.0), z)

    def test_line_mode_counts_rows(self):
        z = np.ones((1, 64, 64))
        s = sample_sparse(z, "lines", line_step=8)
        populated = np.unique(np.nonzero(s[0])[0])
        assert populated.tolist() == list(range(0, 64, 8))

    def test_random_mode_deterministic(self):
        z = np.random.default_rng(7).random((1, 16, 16)) + 1.0
        a = sample_sparse(z, "random", density=0.05, seed=3)
        b = sample_sparse(z, "random", density=0.05, seed=3)
        assert np.array_equal(a, b)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown sparse mode"):
            sample_sparse(np.ones((1, 4, 4)), "diagonal")


class TestSampleInvariants:
    def test_sparse_subset_of_gt(self):
        sample = make_sample(SceneSpec(seed=3))
        mask = sample.sparse > 0
        assert np.all(sample.gt > 0)
        assert np.array_equal(sample.sparse[mask], sample.gt[mask])
        assert np.all(sample.sparse[~mask] == 0)

    def test_depth_between_object_and_background(self):
        spec = SceneSpec(seed=4)
        sample = make_sample(spec)
        assert sample.gt.min() >= spec.object_depth
        assert sample.gt.max() <= spec.background_depth

    def test_event_count_scales_with_speed(self):
        # linear-regime sweep: doubling the sweep speed should land within
        # [1.5x, 2.5x] of the base event count
        spec = spec_with(object_velocity=(0.0, 320.0), seed=11)
        fast = spec_with(object_velocity=(0.0, 640.0), seed=11)
        n_base = len(make_sample(spec).events)
        n_fast = len(make_sample(fast).events)
        assert 1.5 * n_base <= n_fast <= 2.5 * n_base

    def test_static_scene_consistency(self):
        spec = spec_with(object_velocity=(0.0, 0.0), zoom_rate=0.0,
                         translation=(0.0, 0.0), blur_strength=0.0)
        sample = make_sample(spec)
        assert len(sample.events) == 0
        frames, depths, _ = render_sequence(spec)
        assert np.array_equal(sample.image, frames[spec.frames // 2])
        assert np.array_equal(sample.gt, depths[spec.frames // 2])


class TestGenerateDataset:
    def test_zero_count_empty_manifest(self, tmp_path):
        generate_dataset(SceneSpec(), 0, 1, tmp_path / "d")
        assert (tmp_path / "d" / "manifest.txt").read_text() == ""

    def test_reproducible_bytes(self, tmp_path):
        def digest(root: Path) -> list:
            return [(p.relative_to(root).as_posix(),
                     hashlib.sha256(p.read_bytes()).hexdigest())
                    for p in sorted(root.rglob("*")) if p.is_file()]

        generate_dataset(SceneSpec(), 4, 9, tmp_path / "a")
        generate_dataset(SceneSpec(), 4, 9, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_samples_satisfy_invariants(self, tmp_path):
        generate_dataset(SceneSpec(), 8, 5, tmp_path / "d")
        samples = load_dataset(tmp_path / "d")
        assert len(samples) == 8
        for s in samples:
            assert s.image.shape == (3, 64, 64)
            assert np.all(s.gt > 0)
            mask = s.sparse > 0
            assert np.array_equal(s.sparse[mask], s.gt[mask])
            grid = voxelize(s.events, 4)
            assert np.isfinite(grid).all()

    def test_manifest_layout(self, tmp_path):
        generate_dataset(SceneSpec(), 3, 2, tmp_path / "d")
        lines = (tmp_path / "d" / "manifest.txt").read_text().splitlines()
        assert lines == ["0\tsample_00000", "1\tsample_00001", "2\tsample_00002"]
        sample = load_sample(tmp_path / "d" / "sample_00001")
        assert sample.meta["index"] == "1"
