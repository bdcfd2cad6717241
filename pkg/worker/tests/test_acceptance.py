"""Worker substitutability: the patch toolkit's detector contract, exercised
through its own external-detector client, plus the short attack run."""

import numpy as np
import pytest

from camopatch import imaging, optimizer
from camopatch.detector import base
from camopatch.detector.external import ExternalDetector


@pytest.fixture(scope="module")
def handle(worker_env):
    det = ExternalDetector(worker_env.serve_cmd)
    yield det
    det.close()


@pytest.fixture(scope="module")
def sample(worker_env):
    return imaging.load_image(worker_env.sample_image)


class TestContractSuite:
    def test_detect_deterministic(self, handle, sample):
        a = base.detect(handle, sample, 0.1)
        b = base.detect(handle, sample, 0.1)
        assert a == b

    def test_threshold_one_gives_empty(self, handle, sample):
        assert base.detect(handle, sample, 1.0) == []

    def test_detections_well_formed(self, handle, sample):
        h, w = sample.shape[:2]
        for d in base.detect(handle, sample, 0.001):
            assert 0.0 <= d.confidence <= 1.0
            assert 0 <= d.box.x_min < d.box.x_max <= w
            assert 0 <= d.box.y_min < d.box.y_max <= h

    def test_gradient_shape_and_consistency(self, handle, sample):
        targets = base.detect(handle, sample, 0.5)
        grad = base.loss_gradient(handle, sample, targets)
        assert grad.shape == sample.shape
        assert np.all(np.isfinite(grad))
        assert np.abs(grad).max() > 0.0

    def test_loss_repeatable_and_non_negative(self, handle, sample):
        targets = base.detect(handle, sample, 0.5)
        l1 = base.detection_loss(handle, sample, targets)
        l2 = base.detection_loss(handle, sample, targets)
        assert l1 == l2
        assert l1 >= 0.0

    def test_variable_size_round_trip(self, handle):
        rng = np.random.default_rng(5)
        image = rng.uniform(0, 255, size=(40, 56, 3))
        grad = base.loss_gradient(handle, image, [])
        assert grad.shape == image.shape


def test_five_step_attack_reduces_confidence_ceiling(handle, sample, capsys):
    clean = base.detect(handle, sample, 0.5)
    clean_ceiling = max((d.confidence for d in clean if d.class_id == 0), default=0.0)
    assert clean_ceiling > 0.5, "sample image must be confidently detected"

    cfg = optimizer.TrainerConfig(
        steps=5,
        iterations_per_step=40,
        seed=1,
        patch_ratio=0.5,
        dlr_decay=0.75,
        dlr_decay_frequency=1,
    )
    result = optimizer.train_patch([(sample, clean[0].box)], handle, cfg)
    patched = optimizer.apply_final_patch(sample, result)
    after = base.detect(handle, patched, 0.5)
    after_ceiling = max((d.confidence for d in after if d.class_id == 0), default=0.0)

    passed = after_ceiling < clean_ceiling
    with capsys.disabled():
        print(
            f"\n[{'PASS' if passed else 'FAIL'}] Worker substitutability: "
            f"confidence ceiling {clean_ceiling:.3f} -> {after_ceiling:.3f} "
            f"after 5 steps (PerC {result.final_perc_distance:.0f})"
        )
    assert passed
