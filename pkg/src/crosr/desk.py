"""Desk-scale benchmark: 8x8 synthetic digits, small CNN, both outlier sets.

Runs in a few minutes on one CPU core and mirrors the MNIST outlier-addition
experiment: train on every synthetic class, then test on the known test set
mixed 1:1 with uniform noise or with noise-superimposed test digits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bench import (
    LabeledDataset,
    evaluate,
    gen_uniform_noise,
    make_synthetic_digits,
    outlier_addition,
    superimpose_noise,
)
from .dhrnet import DHRNetConfig, DHRNetModel, StageSpec, build
from .evt import TailFitConfig
from .openset import SoftmaxDetector, fit_profiles
from .trainer import TrainConfig, closed_set_accuracy, train

# per-purpose seed offsets; a run seed s uses s + offset
SEED_OFFSETS = {"data": 1000, "init": 2000, "train": 3000, "outliers": 4000, "split": 5000}

OUTLIER_SETS = ("noise", "noise-superimposed")


def derive_seed(seed: int, purpose: str) -> int:
    return int(seed) + SEED_OFFSETS[purpose]


def desk_network_config(variant: str = "dhrnet", num_classes: int = 6) -> DHRNetConfig:
    stages = (StageSpec(1, 32), StageSpec(1, 32), StageSpec(1, 32, pool=False, lateral=False))
    return DHRNetConfig(input_shape=(1, 8, 8), num_classes=num_classes, stages=stages, head=(64,),
                        bottleneck_dim=32, variant=variant, dropout=0.2)


def desk_train_config(seed: int) -> TrainConfig:
    return TrainConfig(epochs=20, batch_size=32, learning_rate=0.01, seed=derive_seed(seed, "train"))


@dataclass
class DeskData:
    train: LabeledDataset
    test: LabeledDataset
    outliers: dict[str, LabeledDataset] = field(default_factory=dict)

    def mixed(self, name: str) -> LabeledDataset:
        return outlier_addition(self.test, self.outliers[name])


def make_desk_data(seed: int, num_classes: int = 6, train_per_class: int = 100, test_per_class: int = 100,
                   pixel_noise: float = 0.15) -> DeskData:
    data_seed = derive_seed(seed, "data")
    out_seed = derive_seed(seed, "outliers")
    train_set = make_synthetic_digits(train_per_class, num_classes, seed=data_seed, noise=pixel_noise)
    test_set = make_synthetic_digits(test_per_class, num_classes, seed=data_seed + 1, noise=pixel_noise)
    outliers = {
        "noise": gen_uniform_noise(len(test_set), test_set.shape, out_seed),
        "noise-superimposed": superimpose_noise(test_set, out_seed + 1),
    }
    return DeskData(train_set, test_set, outliers)


def train_desk_model(data: DeskData, variant: str, seed: int) -> DHRNetModel:
    cfg = desk_network_config(variant, int(data.train.labels.max()) + 1)
    model = build(cfg, np.random.default_rng(derive_seed(seed, "init")))
    train(model, data.train, desk_train_config(seed))
    return model


def run_desk_benchmark(seed: int, tail: TailFitConfig | None = None, threshold: float = 0.5) -> dict[str, float]:
    """Closed-set accuracies and open-set macro-F1 for every detector/outlier pair.

    Detectors: thresholded softmax and Openmax on the supervised-only network,
    Openmax on DHRNet's activations, CROSR on DHRNet's joint features.
    """
    tail = tail or TailFitConfig()
    data = make_desk_data(seed)
    plain = train_desk_model(data, "plain", seed)
    dhr = train_desk_model(data, "dhrnet", seed)
    detectors = {
        "softmax": SoftmaxDetector(plain, threshold),
        "openmax": fit_profiles(plain, data.train.images, data.train.labels, "av", tail, threshold),
        "dhrnet-openmax": fit_profiles(dhr, data.train.images, data.train.labels, "av", tail, threshold),
        "crosr": fit_profiles(dhr, data.train.images, data.train.labels, "joint", tail, threshold),
    }
    result = {"acc/plain": closed_set_accuracy(plain, data.test), "acc/dhrnet": closed_set_accuracy(dhr, data.test)}
    for name in OUTLIER_SETS:
        mixed = data.mixed(name)
        for det_name, det in detectors.items():
            result[f"{det_name}/{name}"] = evaluate(det, mixed).macro_f1
    return result
