"""
Synthetic spatially-correlated bags on a G x G instance grid.

Negative instances are drawn from N(0, sigma^2 I); a positive bag hides one
axis-aligned rectangle of instances drawn from N(delta * e_1, sigma^2 I).
Instances are listed in row-major grid order, so spatial contiguity is
recoverable from the instance sequence. Survival bags always hide a rectangle;
their hazard grows log-linearly with its size. Each bag is generated from its own
counter-derived PCG64 stream (seed, stream, index), which makes a bag
independent of generation order or parallelism.
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Tuple

import numpy as np

from core.data_handler import Bag
from core.losses_metrics import SurvivalRecord

logger = logging.getLogger(__name__)

CLASSIFICATION_STREAM = 1
SURVIVAL_STREAM = 2
SPLIT_STREAMS = {'train': 0, 'test': 1}


@dataclass
class SynthConfig:
    grid: int = 12
    dim: int = 64
    delta: float = 0.6
    noise: float = 1.0
    blob_min: int = 2
    blob_max: int = 4
    pos_frac: float = 0.5
    hazard_scale: float = 0.0
    censor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.grid < 1 or self.dim < 1:
            raise ValueError("grid and dim must be positive")
        if not 1 <= self.blob_min <= self.blob_max <= self.grid:
            raise ValueError(f"Blob sides must satisfy 1 <= a <= b <= G, got a={self.blob_min}, "
                             f"b={self.blob_max}, G={self.grid}")
        if self.delta < 0 or self.noise < 0:
            raise ValueError("delta and noise must be nonnegative")
        if not 0.0 <= self.pos_frac <= 1.0 or not 0.0 <= self.censor_rate <= 1.0:
            raise ValueError("pos_frac and censor_rate must lie in [0, 1]")
        if not 0.0 <= self.hazard_scale <= 50.0:
            raise ValueError(f"hazard_scale must lie in [0, 50], got {self.hazard_scale}")

    def with_overrides(self, **changes) -> 'SynthConfig':
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def bag_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-derived generator for one bag"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, index])))


def _grid_coords(G: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(G * G), G)
    return np.stack([rows, cols], axis=1)


def _draw_instances(cfg: SynthConfig, rng: np.random.Generator, positive: bool) -> Tuple[np.ndarray, np.ndarray]:
    G = cfg.grid
    features = rng.normal(0.0, cfg.noise, size=(G * G, cfg.dim))
    instance_labels = np.zeros(G * G, dtype=np.uint8)
    if positive:
        height = int(rng.integers(cfg.blob_min, cfg.blob_max + 1))
        width = int(rng.integers(cfg.blob_min, cfg.blob_max + 1))
        top = int(rng.integers(0, G - height + 1))
        left = int(rng.integers(0, G - width + 1))
        mask = np.zeros((G, G), dtype=bool)
        mask[top:top + height, left:left + width] = True
        instance_labels = mask.reshape(-1).astype(np.uint8)
        features[instance_labels == 1, 0] += cfg.delta
    return features, instance_labels


def gen_classification_bag(cfg: SynthConfig, rng: np.random.Generator) -> Bag:
    cfg.validate()
    positive = bool(rng.random() < cfg.pos_frac)
    features, instance_labels = _draw_instances(cfg, rng, positive)
    return Bag(features=features, label=int(positive), coords=_grid_coords(cfg.grid),
               instance_labels=instance_labels)


def tumor_burden(cfg: SynthConfig, instance_labels: np.ndarray) -> float:
    """
    Positive fraction rescaled to [0, 1] over the attainable rectangle areas
    (smallest blob -> 0, largest blob -> 1)
    """
    smallest, largest = cfg.blob_min ** 2, cfg.blob_max ** 2
    if largest == smallest:
        return 1.0
    area = float(instance_labels.sum())
    return float(np.clip((area - smallest) / (largest - smallest), 0.0, 1.0))


def gen_survival_bag(cfg: SynthConfig, rng: np.random.Generator) -> Bag:
    """
    Survival bag: every bag carries one tumor rectangle, and the event time is
    Exp(rate = exp(hazard_scale * burden)) with ``burden`` from :func:`tumor_burden`.
    With probability ``censor_rate`` the record is censored at a time uniform on [0, t]
    """
    cfg.validate()
    features, instance_labels = _draw_instances(cfg, rng, positive=True)
    rate = float(np.exp(cfg.hazard_scale * tumor_burden(cfg, instance_labels)))
    time = float(rng.exponential(1.0 / rate))
    event = 1
    if rng.random() < cfg.censor_rate:
        time = float(rng.uniform(0.0, time))
        event = 0
    return Bag(features=features, survival=SurvivalRecord(time=time, event=event),
               coords=_grid_coords(cfg.grid), instance_labels=instance_labels)


class SyntheticBagGenerator:
    """Reproducible generation of whole synthetic datasets"""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.logger = logging.getLogger(__name__)

    def bag(self, index: int, survival: bool = False, split_stream: int = 0) -> Bag:
        stream = (SURVIVAL_STREAM if survival else CLASSIFICATION_STREAM) + 16 * split_stream
        rng = bag_rng(self.cfg.seed, stream, index)
        return gen_survival_bag(self.cfg, rng) if survival else gen_classification_bag(self.cfg, rng)

    def generate(self, count: int, survival: bool = False, split_stream: int = 0) -> List[Bag]:
        return [self.bag(i, survival, split_stream) for i in range(count)]

    def generate_splits(self, n_train: int, n_test: int, survival: bool = False,
                        folds: int = 0) -> Dict[str, List[Bag]]:
        """
        Train/test splits, or ``folds`` equally sized fold-k groups of n_train + n_test bags
        """
        if folds > 0:
            bags = self.generate(n_train + n_test, survival)
            splits = {f'fold-{k}': bags[k::folds] for k in range(folds)}
        else:
            splits = {'train': self.generate(n_train, survival, SPLIT_STREAMS['train']),
                      'test': self.generate(n_test, survival, SPLIT_STREAMS['test'])}
        self.logger.info(f"Generated synthetic {'survival' if survival else 'classification'} bags: "
                         + ', '.join(f"{k}={len(v)}" for k, v in splits.items()))
        return splits
