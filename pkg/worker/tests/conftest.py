import subprocess
import sys

import pytest

from detector_worker.train import train_worker_model


class WorkerEnv:
    """Exported corpus, trained checkpoint and the serve command line."""

    def __init__(self, root):
        self.root = root
        for split, count in (("train", 160), ("val", 16)):
            subprocess.run(
                [
                    sys.executable,
                    "-m",
                    "camopatch.cli",
                    "export",
                    "corpus",
                    "--out",
                    str(root / f"data_{split}"),
                    "--seed",
                    "0",
                    "--split",
                    split,
                    "--count",
                    str(count),
                ],
                check=True,
                capture_output=True,
            )
        self.checkpoint = root / "worker.pt"
        self.meta = train_worker_model(
            root / "data_train", root / "data_val", self.checkpoint, seed=0
        )
        self.serve_cmd = (
            f"{sys.executable} -m detector_worker serve --checkpoint {self.checkpoint}"
        )
        self.sample_image = root / "data_val" / "val_000.png"


@pytest.fixture(scope="session")
def worker_env(tmp_path_factory) -> WorkerEnv:
    return WorkerEnv(tmp_path_factory.mktemp("workerenv"))
