import time

import numpy as np
import pytest

from camopatch.detector.corpus import generate_corpus
from camopatch.detector.toy import ToyDetector, train_toy_detector
from camopatch.recipes import DESK_CORPUS, DESK_TOY_TRAIN, DETECTOR_SEED

_acceptance_lines: list[str] = []


class ToySession:
    """Corpus + trained detector shared across the test session."""

    def __init__(self):
        self.corpus = generate_corpus(DESK_CORPUS)
        t0 = time.perf_counter()
        self.params, self.record = train_toy_detector(
            DESK_CORPUS, seed=DETECTOR_SEED, train_config=DESK_TOY_TRAIN,
            corpus=self.corpus,
        )
        self.train_seconds = time.perf_counter() - t0
        self.handle = ToyDetector(self.params)

    def attack_case(self, index: int = 0):
        """A validation image with its truth and the detector's top box.

        Scans forward from the requested index to the next image the detector
        is confident on (a small fraction of validation images are misses)."""
        for i in range(index, len(self.corpus.val_images)):
            image = self.corpus.val_images[i]
            dets = self.handle.detect(image, 0.5)
            if dets:
                return image, self.corpus.val_truths[i], dets[0].box
        raise AssertionError("no confident detection on any validation image")


@pytest.fixture(scope="session")
def toy_session() -> ToySession:
    return ToySession()


@pytest.fixture(scope="session")
def acceptance_report():
    return _acceptance_lines


def record_criterion(lines: list, name: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}: {detail}"
    lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
