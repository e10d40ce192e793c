"""Openmax-style recalibration over activation or joint latent features.

A fitted :class:`OpenSetModel` holds one :class:`ClassProfile` per known class
(mean feature and Weibull tail of distances to it). Scoring a batch:

1. features are ``y`` (mode ``av``) or ``[y, z]`` (mode ``joint``);
2. ``w_i = 1 - R(rank_i) * WeibullCDF(|f - mu_i|)`` per known class;
3. ``y_hat = [y * w, sum(y * (1 - w))]`` and probabilities are its softmax;
4. the decision is *unknown* (index ``N``) when the unknown entry wins or
   the top probability is below the threshold.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileformat
from .dhrnet import FEATURE_MODES, DHRNetModel, extract_features
from .errors import ConfigurationError, FittingError, FormatError, InputError
from .evt import TailFitConfig, WeibullParams, fit_weibull_tail, weibull_cdf
from .tensor import softmax

REJECT_RULES = ("max", "unknown")


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    mean: np.ndarray
    weibull: WeibullParams


@dataclass
class OpenSetPrediction:
    """Batch of decisions. ``probabilities`` has N + 1 columns, the last is unknown."""

    probabilities: np.ndarray
    labels: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return self.probabilities.max(axis=1)

    @property
    def unknown_probability(self) -> np.ndarray:
        return self.probabilities[:, -1]


def scoring_threads() -> int:
    raw = os.environ.get("CROSR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"CROSR_THREADS must be an integer, got {raw!r}") from None


def distance(feature, profile: ClassProfile) -> float:
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != profile.mean.shape:
        raise InputError(f"feature has shape {f.shape}, profile mean has {profile.mean.shape}")
    return float(np.linalg.norm(f - profile.mean))


def distances(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Euclidean distances, [B, D] x [N, D] -> [B, N]."""
    features = np.atleast_2d(features)
    if features.shape[1] != means.shape[1]:
        raise InputError(f"feature dimension {features.shape[1]} does not match profile dimension {means.shape[1]}")
    return np.linalg.norm(features[:, None, :] - means[None, :, :], axis=2)


def recalibrate(y, w) -> np.ndarray:
    """Scale each activation by its belongingness and pool the rest as unknown.

    Works on a single vector or on rows of a batch.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.shape != w.shape:
        raise InputError(f"activation shape {y.shape} does not match weight shape {w.shape}")
    if np.any(w < 0) or np.any(w > 1):
        raise InputError("belongingness weights must lie in [0, 1]")
    known = y * w
    unknown = np.sum(y * (1.0 - w), axis=-1, keepdims=True)
    return np.concatenate([known, unknown], axis=-1)


def mass_conservation_check(y, w, atol: float = 1e-9, rtol: float = 1e-12) -> bool:
    y = np.asarray(y, dtype=np.float64)
    y_hat = recalibrate(y, w)
    lhs, rhs = y_hat.sum(axis=-1), y.sum(axis=-1)
    return bool(np.all(np.abs(lhs - rhs) <= atol + rtol * np.abs(y).sum(axis=-1)))


def rank_weights(y: np.ndarray, alpha: int, enabled: bool) -> np.ndarray:
    """``R_alpha(rank)`` for every entry of each row, rank 1 = largest activation."""
    y = np.atleast_2d(y)
    if not enabled:
        return np.ones_like(y)
    order = np.argsort(-y, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, y.shape[1] + 1)[None, :].repeat(y.shape[0], 0), axis=1)
    return np.maximum(0.0, (alpha - ranks) / alpha)


def decide(probabilities: np.ndarray, threshold: float, rule: str = "max") -> np.ndarray:
    """Labels in ``[0, N]`` from N + 1 probabilities; ``N`` means unknown."""
    probs = np.atleast_2d(probabilities)
    n = probs.shape[1] - 1
    top = probs.argmax(axis=1)
    reject = top == n
    if rule == "max":
        # exact probabilities never reach 1, rounded ones can
        if threshold >= 1.0:
            reject[:] = True
        else:
            reject |= probs.max(axis=1) < threshold
    elif rule == "unknown":
        reject |= probs[:, n] > threshold
    else:
        raise ConfigurationError(f"reject rule must be one of {REJECT_RULES}, got {rule!r}")
    return np.where(reject, n, top)


def profiles_from_features(features: np.ndarray, labels, predictions, num_classes: int,
                           tail: TailFitConfig) -> list[ClassProfile]:
    """Class means and Weibull tails from correctly classified samples."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"profile fitting accepts known-class labels in [0, {num_classes}) only")
    profiles = []
    for i in range(num_classes):
        sel = (labels == i) & (predictions == i)
        count = int(sel.sum())
        if count <= tail.tail_size:
            raise FittingError(f"class {i}: {count} correctly classified samples, "
                               f"need more than tail_size={tail.tail_size}")
        feats = features[sel]
        mean = feats.mean(axis=0)
        d = np.linalg.norm(feats - mean, axis=1)
        try:
            params = fit_weibull_tail(d, tail.tail_size)
        except FittingError as exc:
            raise type(exc)(f"class {i}: {exc}") from None
        profiles.append(ClassProfile(i, mean, params))
    return profiles


@dataclass
class OpenSetModel:
    network: DHRNetModel
    mode: str
    profiles: list[ClassProfile]
    tail: TailFitConfig
    threshold: float = 0.5
    reject_rule: str = "max"

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigurationError(f"feature mode must be one of {FEATURE_MODES}, got {self.mode!r}")
        if len(self.profiles) != self.num_classes:
            raise ConfigurationError(f"{len(self.profiles)} profiles for {self.num_classes} known classes")

    @property
    def num_classes(self) -> int:
        return self.network.config.num_classes

    @property
    def name(self) -> str:
        return f"{self.network.config.variant}+{'crosr' if self.mode == 'joint' else 'openmax'}"

    @property
    def rank_calibration(self) -> bool:
        return self.tail.calibration_enabled(self.num_classes)

    def belongingness(self, features: np.ndarray) -> np.ndarray:
        """``w`` for a batch of features, [B, N]."""
        n = self.num_classes
        means = np.stack([p.mean for p in self.profiles])
        d = distances(features, means)
        cdf = np.column_stack([weibull_cdf(d[:, i], p.weibull) for i, p in enumerate(self.profiles)])
        r = rank_weights(features[:, :n], self.tail.alpha, self.rank_calibration)
        return 1.0 - r * cdf

    def probabilities_from_features(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        y = features[:, :self.num_classes]
        return softmax(recalibrate(y, self.belongingness(features)), axis=1)

    def score(self, images, threads: int | None = None, chunk: int = 256) -> np.ndarray:
        """Probabilities over N + 1 classes for a batch of images."""
        images = np.asarray(images, dtype=np.float64)
        threads = scoring_threads() if threads is None else threads

        def run(start):
            feats = extract_features(self.network, images[start:start + chunk], self.mode, chunk)
            return self.probabilities_from_features(feats)

        starts = list(range(0, images.shape[0], chunk))
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        if not parts:
            return np.zeros((0, self.num_classes + 1))
        return np.concatenate(parts, axis=0)

    def save(self, path: str | Path) -> None:
        fileformat.write(path, *self._parts())

    def to_bytes(self) -> bytes:
        return fileformat.encode(*self._parts())

    def _parts(self):
        header = {
            "kind": "openset",
            "openset.mode": self.mode,
            "openset.threshold": repr(float(self.threshold)),
            "openset.reject_rule": self.reject_rule,
            "openset.tail_size": str(self.tail.tail_size),
            "openset.alpha": str(self.tail.alpha),
            "openset.rank_calibration": {None: "auto", True: "on", False: "off"}[self.tail.rank_calibration],
            **self.network.config.to_header(),
        }
        arrays = {f"net/{k}": v for k, v in self.network.params.items()}
        for p in self.profiles:
            arrays[f"profile/{p.class_id}/mean"] = p.mean
            arrays[f"profile/{p.class_id}/weibull"] = np.array([p.weibull.shape, p.weibull.scale])
        return header, arrays

    @classmethod
    def load(cls, path: str | Path) -> "OpenSetModel":
        header, arrays = fileformat.read(path)
        if header.get("kind") != "openset":
            raise FormatError(f"{path}: not an open-set model file (kind={header.get('kind')!r})")
        network = DHRNetModel.from_parts(header, arrays, prefix="net/")
        try:
            calib = {"auto": None, "on": True, "off": False}[header["openset.rank_calibration"]]
            tail = TailFitConfig(int(header["openset.tail_size"]), int(header["openset.alpha"]), calib)
            mode = header["openset.mode"]
            threshold = float(header["openset.threshold"])
            rule = header["openset.reject_rule"]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed open-set header ({exc})") from None
        profiles = []
        dim = network.config.feature_dim(mode)
        for i in range(network.config.num_classes):
            mean = arrays.get(f"profile/{i}/mean")
            wb = arrays.get(f"profile/{i}/weibull")
            if mean is None or wb is None or mean.shape != (dim,) or wb.shape != (2,):
                raise FormatError(f"{path}: missing or malformed profile for class {i}")
            profiles.append(ClassProfile(i, mean, WeibullParams(float(wb[0]), float(wb[1]))))
        return cls(network, mode, profiles, tail, threshold, rule)

    def predict(self, images, threshold: float | None = None) -> OpenSetPrediction:
        probs = self.score(images)
        th = self.threshold if threshold is None else threshold
        return OpenSetPrediction(probs, decide(probs, th, self.reject_rule))


def fit_profiles(network: DHRNetModel, images, labels, mode: str, tail: TailFitConfig | None = None,
                 threshold: float = 0.5, reject_rule: str = "max") -> OpenSetModel:
    """Fit one profile per known class from known-class training data.

    Only samples the network classifies correctly contribute. Labels outside
    ``[0, N)`` (including the unknown sentinel) are rejected, so unknown data
    cannot leak into fitting.
    """
    tail = tail or TailFitConfig()
    n = network.config.num_classes
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InputError(f"profile fitting accepts known-class labels in [0, {n}) only")
    feats = extract_features(network, images, mode)
    preds = feats[:, :n].argmax(axis=1)
    profiles = profiles_from_features(feats, labels, preds, n, tail)
    return OpenSetModel(network, mode, profiles, tail, threshold, reject_rule)


def predict(osmodel: OpenSetModel, images, threshold: float | None = None) -> OpenSetPrediction:
    return osmodel.predict(images, threshold)


class SoftmaxDetector:
    """Closed-set softmax with a confidence threshold; the unknown column is zero."""

    def __init__(self, network: DHRNetModel, threshold: float = 0.5):
        self.network = network
        self.threshold = threshold
        self.reject_rule = "max"

    @property
    def num_classes(self) -> int:
        return self.network.config.num_classes

    @property
    def name(self) -> str:
        return f"{self.network.config.variant}+softmax"

    def score(self, images, threads: int | None = None) -> np.ndarray:
        y = extract_features(self.network, images, "av")
        probs = softmax(y, axis=1)
        return np.concatenate([probs, np.zeros((probs.shape[0], 1))], axis=1)

    def predict(self, images, threshold: float | None = None) -> OpenSetPrediction:
        probs = self.score(images)
        th = self.threshold if threshold is None else threshold
        return OpenSetPrediction(probs, decide(probs, th, "max"))
