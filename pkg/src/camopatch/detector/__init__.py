from camopatch.detector.base import (
    Detection,
    DetectorHandle,
    detect,
    detection_loss,
    finite_difference_gradient,
    loss_gradient,
    non_max_suppression,
)
from camopatch.detector.corpus import Corpus, CorpusConfig, generate_corpus
from camopatch.detector.external import (
    ExternalDetector,
    WorkerRequestError,
    WorkerTransportError,
)
from camopatch.detector.toy import (
    ToyDetector,
    ToyDetectorParams,
    ToyTrainConfig,
    ToyTrainingError,
    ToyTrainRecord,
    init_params,
    train_toy_detector,
)

__all__ = [
    "Detection",
    "DetectorHandle",
    "detect",
    "detection_loss",
    "finite_difference_gradient",
    "loss_gradient",
    "non_max_suppression",
    "Corpus",
    "CorpusConfig",
    "generate_corpus",
    "ExternalDetector",
    "WorkerRequestError",
    "WorkerTransportError",
    "ToyDetector",
    "ToyDetectorParams",
    "ToyTrainConfig",
    "ToyTrainingError",
    "ToyTrainRecord",
    "init_params",
    "train_toy_detector",
]
