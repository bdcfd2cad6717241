import json
from dataclasses import replace

import numpy as np
import pytest

from camopatch import color, imaging, optimizer
from camopatch.detector.base import Detection
from camopatch.imaging import BoundingBox, PatchPlacement, TransformConfig
from camopatch.optimizer import PatchState, TrainerConfig


def make_state(rng, h=6, w=6):
    patch = rng.uniform(0, 255, size=(h, w, 3))
    return PatchState(
        patch=patch,
        placement=PatchPlacement(0, 0, h, w),
        deception_velocity=np.zeros_like(patch),
        perceptibility_velocity=np.zeros_like(patch),
    )


class TestInitPatch:
    def test_black(self, rng):
        seg = rng.uniform(0, 255, size=(5, 5, 3))
        assert np.array_equal(
            optimizer.init_patch("black", seg, rng), np.zeros_like(seg)
        )

    def test_image_segment_has_zero_perc(self, rng):
        seg = rng.uniform(0, 255, size=(5, 5, 3))
        patch = optimizer.init_patch("image_segment", seg, rng)
        assert color.perc_distance(patch, seg) == 0.0

    def test_random_in_range(self, rng):
        seg = np.zeros((6, 6, 3))
        patch = optimizer.init_patch("random", seg, rng)
        assert patch.min() >= 0 and patch.max() <= 255
        assert patch.std() > 20  # actually random, not constant

    def test_hybrid_between_segment_and_random(self):
        # measured ordering over 10 seeds: 0 < hybrid < random
        seg_rng = np.random.default_rng(99)
        seg = seg_rng.uniform(30, 220, size=(8, 8, 3))
        for seed in range(10):
            r = np.random.default_rng(seed)
            hybrid = optimizer.init_patch("hybrid", seg, r)
            r2 = np.random.default_rng(seed)
            random_patch = optimizer.init_patch("random", seg, r2)
            dh = color.perc_distance(hybrid, seg)
            dr = color.perc_distance(random_patch, seg)
            assert 0.0 < dh < dr

    def test_unknown_mode_rejected(self, rng):
        with pytest.raises(ValueError):
            optimizer.init_patch("sparkly", np.zeros((2, 2, 3)), rng)


class TestSchedules:
    def test_should_decept_examples(self):
        assert optimizer.should_decept(0, 4) is True
        assert optimizer.should_decept(1, 4) is False
        assert optimizer.should_decept(4, 4) is True
        assert all(optimizer.should_decept(i, 1) for i in range(10))
        n = 3
        count = sum(optimizer.should_decept(i, n) for i in range(4 * n))
        assert count == 4

    def test_dlr_schedule(self):
        cfg = TrainerConfig()
        assert optimizer.dlr_schedule(0, cfg) == 0.1
        assert np.isclose(optimizer.dlr_schedule(5, cfg), 0.095)
        assert np.isclose(optimizer.dlr_schedule(9, cfg), 0.095)
        assert np.isclose(optimizer.dlr_schedule(10, cfg), 0.1 * 0.95**2)

    def test_plr_schedule_endpoints(self):
        cfg = TrainerConfig(iterations_per_step=100, plr_max_decay_enabled=False)
        assert optimizer.plr_schedule(0, 0, cfg) == 0.5
        assert np.isclose(optimizer.plr_schedule(99, 0, cfg), 0.05)
        mid = optimizer.plr_schedule(49, 0, cfg)  # closest to half period
        assert abs(mid - 0.55 * 0.5) < 0.01

    def test_plr_midpoint_exact_on_odd_step(self):
        cfg = TrainerConfig(iterations_per_step=101, plr_max_decay_enabled=False)
        assert np.isclose(optimizer.plr_schedule(50, 0, cfg), 0.55 * 0.5)

    def test_plr_non_increasing_within_step(self):
        cfg = TrainerConfig(iterations_per_step=50, n=2)
        values = [optimizer.plr_schedule(j, 0, cfg) for j in range(100)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_plr_max_non_increasing_across_steps(self):
        cfg = TrainerConfig(plr_max_decay_enabled=True)
        maxima = [optimizer.plr_max_schedule(s, cfg) for s in range(20)]
        assert all(a >= b for a, b in zip(maxima, maxima[1:]))
        cfg_off = TrainerConfig(plr_max_decay_enabled=False)
        assert all(optimizer.plr_max_schedule(s, cfg_off) == 0.5 for s in range(20))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainerConfig(n=0)
        with pytest.raises(ValueError):
            TrainerConfig(dlr0=0.0)
        with pytest.raises(ValueError):
            TrainerConfig(deception_momentum=1.0)
        with pytest.raises(ValueError):
            TrainerConfig(init_mode="nope")
        with pytest.raises(ValueError):
            TrainerConfig(dlr_decay=0.0)


class ConstantGradientDetector:
    """Stub handle with a fixed input gradient and no detections."""

    def __init__(self, value: float):
        self.value = value

    def detect(self, image, threshold):
        return []

    def loss(self, image, targets):
        return self.value * float(np.sum(image))

    def loss_gradient(self, image, targets):
        return np.full(image.shape, self.value)


class TestDeceptionUpdate:
    def setup_case(self, rng, grad_value):
        image = rng.uniform(40, 200, size=(16, 16, 3))
        state = make_state(rng, 4, 4)
        state.placement = PatchPlacement(6, 6, 4, 4)
        t = imaging.Transformation(0, 1.0, 0.0)
        handle = ConstantGradientDetector(grad_value)
        return image, state, t, handle

    def test_zero_gradient_zero_velocity_is_noop(self, rng):
        image, state, t, handle = self.setup_case(rng, 0.0)
        before = state.patch.copy()
        optimizer.deception_update(state, image, [], handle, t, 0.1, 0.9, (0.2, 0.3))
        assert np.array_equal(state.patch, before)

    def test_pure_sign_ascent(self, rng):
        image, state, t, handle = self.setup_case(rng, 3.5)
        before = state.patch.copy()
        optimizer.deception_update(state, image, [], handle, t, 0.1, 0.0, (0.2, 0.3))
        assert np.allclose(state.patch - before, 0.1)

    def test_momentum_compounds(self, rng):
        image, state, t, handle = self.setup_case(rng, 2.0)
        optimizer.deception_update(state, image, [], handle, t, 0.1, 0.9, (0.2, 0.3))
        first = state.patch.copy()
        optimizer.deception_update(state, image, [], handle, t, 0.1, 0.9, (0.2, 0.3))
        assert np.allclose(state.patch - first, 0.1 * 1.9)


class TestPerceptibilityUpdate:
    def test_noop_at_minimum(self, rng):
        state = make_state(rng)
        segment = state.patch.copy()
        before = state.patch.copy()
        optimizer.perceptibility_update(state, segment, 0.5, 0.9)
        assert np.array_equal(state.patch, before)

    def test_small_step_decreases_distance(self, rng):
        state = make_state(rng, 8, 8)
        segment = imaging.clip_rgb(state.patch + rng.normal(0, 40, state.patch.shape))
        d0 = color.perc_distance(state.patch, segment)
        optimizer.perceptibility_update(state, segment, 1e-3, 0.0)
        assert color.perc_distance(state.patch, segment) < d0

    def test_fifty_updates_halve_distance(self):
        # shipped 8x8 fixture (sigma-10 perturbation, defaults plr 0.5,
        # momentum 0.9): measured ratio 0.33 after 50 updates
        rng = np.random.default_rng(7)
        segment = rng.uniform(40, 215, size=(8, 8, 3))
        state = PatchState(
            patch=imaging.clip_rgb(segment + rng.normal(0, 10, segment.shape)),
            placement=PatchPlacement(0, 0, 8, 8),
            deception_velocity=np.zeros_like(segment),
            perceptibility_velocity=np.zeros_like(segment),
        )
        d0 = color.perc_distance(state.patch, segment)
        for _ in range(50):
            optimizer.perceptibility_update(state, segment, 0.5, 0.9)
            state.patch = imaging.clip_rgb(state.patch)
        assert color.perc_distance(state.patch, segment) <= 0.5 * d0


class TestTrainPatch:
    def case(self, toy_session, index=0):
        image, truth, box = toy_session.attack_case(index)
        return image, truth, box

    def fast_config(self, **kw):
        kw.setdefault("steps", 2)
        kw.setdefault("iterations_per_step", 5)
        kw.setdefault("patch_ratio", 0.5)
        return TrainerConfig(**kw)

    def test_zero_steps_returns_initialized_patch(self, toy_session):
        image, truth, box = self.case(toy_session)
        cfg = self.fast_config(steps=0, init_mode="image_segment")
        result = optimizer.train_patch([(image, box)], toy_session.handle, cfg)
        placement = result.placements[0]
        segment = imaging.extract_segment(image, placement)
        assert np.array_equal(result.patch, segment)
        assert result.record == []

    def test_deterministic(self, toy_session):
        image, truth, box = self.case(toy_session)
        cfg = self.fast_config(seed=5)
        r1 = optimizer.train_patch([(image, box)], toy_session.handle, cfg)
        r2 = optimizer.train_patch([(image, box)], toy_session.handle, cfg)
        assert np.array_equal(r1.patch, r2.patch)
        assert [row.map50 for row in r1.record] == [row.map50 for row in r2.record]

    def test_patch_in_range_after_every_iteration(self, toy_session):
        image, truth, box = self.case(toy_session)
        cfg = self.fast_config(steps=1, iterations_per_step=8)
        seen = []

        def probe(state):
            seen.append((state.patch.min(), state.patch.max()))

        optimizer.train_patch(
            [(image, box)], toy_session.handle, cfg, iteration_callback=probe
        )
        assert len(seen) == 8
        for lo, hi in seen:
            assert lo >= 0.0 and hi <= 255.0

    def test_deception_count_under_rescaling(self, toy_session):
        image, truth, box = self.case(toy_session)
        for n in (1, 2, 3):
            cfg = self.fast_config(steps=1, iterations_per_step=4, n=n)
            calls = []

            class CountingHandle:
                def __init__(self, inner):
                    self.inner = inner

                def detect(self, im, thr):
                    return self.inner.detect(im, thr)

                def loss(self, im, targets):
                    return self.inner.loss(im, targets)

                def loss_gradient(self, im, targets):
                    calls.append(1)
                    return self.inner.loss_gradient(im, targets)

            optimizer.train_patch(
                [(image, box)], CountingHandle(toy_session.handle), cfg
            )
            # one step of 4*n iterations contains exactly 4 deception updates
            assert sum(calls) == 4

    def test_velocity_persists_across_steps(self, toy_session):
        image, truth, box = self.case(toy_session)
        cfg = self.fast_config(steps=2, iterations_per_step=3)
        snapshots = []

        def probe(state):
            snapshots.append(np.abs(state.deception_velocity).max())

        optimizer.train_patch(
            [(image, box)], toy_session.handle, cfg, iteration_callback=probe
        )
        # first iteration of step 2 sees velocity accumulated in step 1
        assert snapshots[3] > 1.0 - 1e-12

    def test_straight_line_reference_equivalence(self, toy_session):
        """Momenta 0, n = 1: loop must equal plain sign-ascent + plain descent
        + clip, bit for bit."""
        image, truth, box = self.case(toy_session)
        handle = toy_session.handle
        cfg = self.fast_config(
            steps=1,
            iterations_per_step=5,
            deception_momentum=0.0,
            plr_momentum=0.0,
            init_mode="image_segment",
            seed=11,
        )
        result = optimizer.train_patch([(image, box)], handle, cfg)

        # straight-line reference
        rng = np.random.default_rng(11)
        h, w = image.shape[:2]
        placement = imaging.compute_placement(box, 0.5, h, w)
        segment = imaging.extract_segment(image, placement)
        targets = handle.detect(image, 0.5) or [Detection(box, 0, 1.0)]
        patch = segment.copy()
        for j in range(5):
            t = imaging.sample_transformation(rng, cfg.transform)
            composed = imaging.apply_patch(image, patch, placement)
            res = imaging.apply_transformation(
                composed, t, placement, cfg.transform.occupancy_range
            )
            ttargets = []
            for d in targets:
                b = imaging.transform_box(d.box, res)
                if b is not None:
                    ttargets.append(replace(d, box=b))
            g = imaging.pullback_gradient(handle.loss_gradient(res.image, ttargets), res)
            patch = patch + optimizer.dlr_schedule(0, cfg) * np.sign(g)
            patch = patch - optimizer.plr_schedule(j, 0, cfg) * color.perc_gradient(
                patch, segment
            )
            patch = imaging.clip_rgb(patch)
        assert np.array_equal(result.patch, patch)

    def test_detector_failure_preserves_partial_record(self, toy_session):
        image, truth, box = self.case(toy_session)

        class FlakyHandle:
            def __init__(self, inner, fail_after):
                self.inner = inner
                self.calls = 0
                self.fail_after = fail_after

            def detect(self, im, thr):
                return self.inner.detect(im, thr)

            def loss(self, im, targets):
                return self.inner.loss(im, targets)

            def loss_gradient(self, im, targets):
                self.calls += 1
                if self.calls > self.fail_after:
                    raise ConnectionError("worker went away")
                return self.inner.loss_gradient(im, targets)

        cfg = self.fast_config(steps=3, iterations_per_step=4)
        result = optimizer.train_patch(
            [(image, box)], FlakyHandle(toy_session.handle, 6), cfg
        )
        assert result.aborted
        assert len(result.record) == 1  # one completed step before the failure

    def test_multi_image_round_robin(self, toy_session):
        img_a, _, box_a = toy_session.attack_case(0)
        img_b, _, box_b = toy_session.attack_case(1)
        cfg = self.fast_config(steps=1, iterations_per_step=4)
        result = optimizer.train_patch(
            [(img_a, box_a), (img_b, box_b)], toy_session.handle, cfg
        )
        assert len(result.placements) == 2
        assert result.patch.shape == (
            result.placements[0].height,
            result.placements[0].width,
            3,
        )


class TestCheckpoints:
    def test_sidecar_round_trip_and_png_consistency(self, toy_session, tmp_path):
        image, truth, box = toy_session.attack_case(0)
        cfg = TrainerConfig(steps=2, iterations_per_step=5, patch_ratio=0.5, seed=3)
        optimizer.train_patch(
            [(image, box)], toy_session.handle, cfg, checkpoint_dir=tmp_path
        )
        sidecars = sorted(tmp_path.glob("patch_step*.json"))
        pngs = sorted(tmp_path.glob("patch_step*.png"))
        assert len(sidecars) == 2 and len(pngs) == 2
        patch, placement, payload = optimizer.load_sidecar(sidecars[-1])
        # sidecar floats round to the PNG bytes exactly
        png = imaging.load_image(pngs[-1])
        assert np.array_equal(np.rint(np.clip(patch, 0, 255)), png)
        assert payload["config_hash"] == cfg.config_hash()
        assert "rng_state" in payload

        record = (tmp_path / "run_record.csv").read_text().splitlines()
        assert record[0] == "step,map50,perc_distance,dlr,plr_max,seconds"
        assert len(record) == 3

    def test_sidecar_bytes_deterministic(self, toy_session, tmp_path):
        image, truth, box = toy_session.attack_case(0)
        cfg = TrainerConfig(steps=1, iterations_per_step=5, patch_ratio=0.5, seed=9)
        blobs = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            optimizer.train_patch(
                [(image, box)], toy_session.handle, cfg, checkpoint_dir=d
            )
            blobs.append((d / "patch_step0001.json").read_bytes())
        assert blobs[0] == blobs[1]
