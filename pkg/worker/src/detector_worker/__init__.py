from detector_worker.model import WorkerDetector, build_model, load_checkpoint

__version__ = "0.1.0"

__all__ = ["WorkerDetector", "build_model", "load_checkpoint", "__version__"]
