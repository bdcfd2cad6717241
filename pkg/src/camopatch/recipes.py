"""Shipped desk-scale recipes.

One place that pins the synthetic corpus, the toy-detector training recipe and
the two patch configurations (full and deception-only baseline) used by the
quickstart, the acceptance suite and the docs. The schedule compresses the
long-run decay behaviour into 10 steps: the deception rate decays every step
so perceptibility updates dominate late training.
"""

from __future__ import annotations

from dataclasses import replace

from camopatch.detector.corpus import CorpusConfig
from camopatch.detector.toy import ToyTrainConfig
from camopatch.optimizer import TrainerConfig

DESK_CORPUS = CorpusConfig(seed=0)
DESK_TOY_TRAIN = ToyTrainConfig()
DETECTOR_SEED = 0
PATCH_SEEDS = (1, 2, 3)


def desk_full_config(seed: int = 1) -> TrainerConfig:
    """Hybrid-init patch with alternating deception + perceptibility updates."""
    return TrainerConfig(
        steps=10,
        iterations_per_step=200,
        seed=seed,
        patch_ratio=0.5,
        dlr_decay=0.75,
        dlr_decay_frequency=1,
    )


def desk_deception_only(seed: int = 1) -> TrainerConfig:
    """Random-init sign-gradient baseline: perceptibility disabled."""
    return replace(desk_full_config(seed), plr_max0=0.0, init_mode="random")
