"""Datasets, open-set protocols and metrics."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .openset import decide

UNKNOWN = -1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Images in [0, 1] with integer labels; ``UNKNOWN`` marks outliers."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InputError(f"images must be [B, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise InputError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")
        if labels.size and labels.min() < UNKNOWN:
            raise InputError(f"invalid label {labels.min()}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, provenance: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index],
                              self.provenance if provenance is None else provenance)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    known: tuple[int, ...]
    unknown: tuple[int, ...] = ()
    outlier_source: str | None = None

    def __post_init__(self):
        if set(self.known) & set(self.unknown):
            raise ConfigurationError("known and unknown classes overlap")


@dataclass(frozen=True)
class ClassSplit:
    known_train: LabeledDataset
    known_test: LabeledDataset
    unknown_test: LabeledDataset
    spec: SplitSpec


# -- IDX --------------------------------------------------------------------------


def _read_idx(raw: bytes, expected_magic: int, name: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated at offset {len(raw)} while reading the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{name}: truncated at offset {len(raw)} inside the dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < n:
        raise FormatError(f"{name}: truncated at offset {len(raw)}; expected {n} data bytes from offset {head}")
    if len(raw) - head > n:
        raise FormatError(f"{name}: {len(raw) - head - n} unexpected trailing bytes at offset {head + n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path, provenance: str | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (the MNIST distribution format)."""
    paths = []
    for p in (images_path, labels_path):
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"IDX file not found: {p}")
        paths.append(p)
    images = _read_idx(paths[0].read_bytes(), IDX_IMAGES_MAGIC, str(paths[0]))
    labels = _read_idx(paths[1].read_bytes(), IDX_LABELS_MAGIC, str(paths[1]))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch at offset 4: {images.shape[0]} images in {paths[0]}, "
                          f"{labels.shape[0]} labels in {paths[1]}")
    return LabeledDataset(images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(np.int64),
                          provenance or paths[0].stem)


def encode_idx_images(pixels: np.ndarray) -> bytes:
    """Serialise uint8 images [B, H, W] to IDX bytes (used for fixtures and export)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(struct.pack(">I", IDX_IMAGES_MAGIC))
    buf.write(struct.pack(">3I", *pixels.shape))
    buf.write(pixels.tobytes())
    return buf.getvalue()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


# -- synthetic data ---------------------------------------------------------------


def _stroke_templates(num_classes: int, size: int, seed: int, strokes: int = 3) -> np.ndarray:
    """Binary stroke patterns, one per class, pairwise at least ``size`` pixels apart."""
    rng = np.random.default_rng(seed)
    templates: list[np.ndarray] = []
    while len(templates) < num_classes:
        img = np.zeros((size, size))
        for _ in range(strokes):
            (r0, c0), (r1, c1) = rng.integers(1, size - 1, size=(2, 2))
            t = np.linspace(0.0, 1.0, 4 * size)
            img[np.rint(r0 + (r1 - r0) * t).astype(int), np.rint(c0 + (c1 - c0) * t).astype(int)] = 1.0
        if img.sum() < size:
            continue
        if all(np.abs(img - other).sum() >= size for other in templates):
            templates.append(img)
    return np.stack(templates)


def make_synthetic_digits(n_per_class: int, num_classes: int = 10, size: int = 8, seed: int = 0,
                          template_seed: int = 0, noise: float = 0.1) -> LabeledDataset:
    """Stroke-pattern "digits": per-class templates with jitter, gain and pixel noise.

    ``template_seed`` fixes the class identities; ``seed`` draws the samples,
    so train and test sets share classes but not samples.
    """
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be positive")
    templates = _stroke_templates(num_classes, size, template_seed)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    rng.shuffle(labels)
    images = np.empty((labels.size, 1, size, size))
    for k, c in enumerate(labels):
        dy, dx = rng.integers(-1, 2, size=2)
        img = np.roll(templates[c], (dy, dx), axis=(0, 1))
        img = img * rng.uniform(0.6, 1.0) + rng.normal(0.0, noise, size=(size, size))
        images[k, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, f"synthetic-digits(seed={seed})")


def gen_uniform_noise(count: int, shape: Sequence[int], seed: int) -> LabeledDataset:
    """I.i.d. Uniform[0, 1] pixels, all labelled unknown."""
    if count < 1:
        raise ConfigurationError("noise count must be positive")
    rng = np.random.default_rng(seed)
    images = rng.random((count, *shape))
    return LabeledDataset(images, np.full(count, UNKNOWN), f"noise(seed={seed})")


def superimpose_noise(inliers: LabeledDataset, seed: int,
                      compose: Callable[[np.ndarray, np.ndarray], np.ndarray] = np.maximum) -> LabeledDataset:
    """Overlay fresh uniform noise on each inlier image (per-pixel max by default)."""
    if len(inliers) == 0:
        raise InputError("cannot superimpose noise on an empty dataset")
    rng = np.random.default_rng(seed)
    noise = rng.random(inliers.images.shape)
    images = np.clip(compose(inliers.images, noise), 0.0, 1.0)
    return LabeledDataset(images, np.full(len(inliers), UNKNOWN), f"{inliers.provenance}+noise(seed={seed})")


# -- protocols --------------------------------------------------------------------


def split_classes(dataset: LabeledDataset, known_count: int, seed: int,
                  test_fraction: float = 0.25) -> ClassSplit:
    """Class-separation protocol.

    A seeded random subset of ``known_count`` classes becomes the known set
    (relabelled ``0..known_count-1`` in ascending original order); its samples
    are split into train and test. Every sample of the remaining classes goes
    to the unknown test set, labelled ``UNKNOWN``.
    """
    classes = np.unique(dataset.labels[dataset.labels != UNKNOWN])
    if not 0 < known_count < classes.size:
        raise ConfigurationError(f"known count must be in [1, {classes.size}), got {known_count}")
    rng = np.random.default_rng(seed)
    known = np.sort(rng.choice(classes, size=known_count, replace=False))
    unknown = np.setdiff1d(classes, known)
    remap = {int(c): i for i, c in enumerate(known)}

    is_known = np.isin(dataset.labels, known)
    known_idx = np.flatnonzero(is_known)
    rng.shuffle(known_idx)
    n_test = int(round(test_fraction * known_idx.size))
    test_idx, train_idx = np.sort(known_idx[:n_test]), np.sort(known_idx[n_test:])

    def relabel(idx, tag):
        labels = np.array([remap[int(v)] for v in dataset.labels[idx]], dtype=np.int64)
        return LabeledDataset(dataset.images[idx], labels, f"{dataset.provenance}:{tag}")

    unk_idx = np.flatnonzero(np.isin(dataset.labels, unknown))
    unknown_test = LabeledDataset(dataset.images[unk_idx], np.full(unk_idx.size, UNKNOWN),
                                  f"{dataset.provenance}:unknown")
    spec = SplitSpec(seed, tuple(int(c) for c in known), tuple(int(c) for c in unknown))
    return ClassSplit(relabel(train_idx, "known-train"), relabel(test_idx, "known-test"), unknown_test, spec)


def outlier_addition(known_test: LabeledDataset, outliers: LabeledDataset) -> LabeledDataset:
    """Known test set plus an equal number of outliers (1:1 ratio)."""
    n = min(len(known_test), len(outliers))
    if n == 0:
        raise InputError("outlier addition needs nonempty known and outlier sets")
    if known_test.shape != outliers.shape:
        raise InputError(f"outlier images {outliers.shape} do not match known images {known_test.shape}")
    images = np.concatenate([known_test.images[:n], outliers.images[:n]])
    labels = np.concatenate([known_test.labels[:n], np.full(n, UNKNOWN)])
    return LabeledDataset(images, labels, f"{known_test.provenance}+{outliers.provenance}")


def encode_truth(labels, num_classes: int) -> np.ndarray:
    """Map the ``UNKNOWN`` sentinel to index ``num_classes``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= num_classes:
        raise InputError(f"label {labels.max()} is not a known class of {num_classes}")
    return np.where(labels == UNKNOWN, num_classes, labels)


# -- metrics ----------------------------------------------------------------------


@dataclass
class EvalReport:
    """Scores over N known classes plus the unknown class (last row/column).

    ``confusion[t, p]`` counts samples of true class ``t`` predicted as ``p``.
    """

    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    sweep: list[tuple[float, float]] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0] - 1

    def class_names(self) -> list[str]:
        return [str(i) for i in range(self.num_classes)] + ["unknown"]

    def per_class_csv(self) -> str:
        lines = ["class,support,precision,recall,f1"]
        support = self.confusion.sum(axis=1)
        for name, s, p, r, f in zip(self.class_names(), support, self.precision, self.recall, self.f1):
            lines.append(f"{name},{s},{p:.6f},{r:.6f},{f:.6f}")
        lines.append(f"macro,{support.sum()},,,{self.macro_f1:.6f}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        names = self.class_names()
        lines = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def pretty(self) -> str:
        names = self.class_names()
        width = max(len(n) for n in names) + 2
        out = [f"{'class':<{width}}{'prec':>8}{'rec':>8}{'f1':>8}{'n':>7}"]
        for name, p, r, f, s in zip(names, self.precision, self.recall, self.f1, self.confusion.sum(axis=1)):
            out.append(f"{name:<{width}}{p:8.3f}{r:8.3f}{f:8.3f}{s:7d}")
        out.append(f"macro-F1 over {len(names)} classes: {self.macro_f1:.4f}")
        return "\n".join(out) + "\n"


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def macro_f1(predictions, truth, num_classes: int) -> EvalReport:
    """Per-class and macro-averaged F1 over N + 1 classes; 0/0 counts as 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    k = num_classes + 1
    if pred.shape != true.shape:
        raise InputError(f"{pred.size} predictions for {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise InputError(f"{name} outside [0, {num_classes}]")
    confusion = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    tp = np.diag(confusion)
    precision = _safe_div(tp, confusion.sum(axis=0))
    recall = _safe_div(tp, confusion.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return EvalReport(confusion, precision, recall, f1, float(f1.mean()))


def default_theta_grid() -> np.ndarray:
    """0.00, 0.05, ..., 0.95."""
    return np.arange(20) * 0.05


def sweep_probabilities(probabilities: np.ndarray, truth, thetas, rule: str = "max") -> list[tuple[float, float]]:
    n = probabilities.shape[1] - 1
    true = encode_truth(truth, n)
    rows = []
    for theta in thetas:
        theta = float(theta)
        if not 0.0 <= theta <= 1.0:
            raise ConfigurationError(f"threshold {theta} outside [0, 1]")
        rows.append((theta, macro_f1(decide(probabilities, theta, rule), true, n).macro_f1))
    return rows


def threshold_sweep(detector, dataset: LabeledDataset, thetas=None) -> list[tuple[float, float]]:
    """Macro-F1 at every threshold; the network runs once and the scores are reused."""
    thetas = default_theta_grid() if thetas is None else thetas
    probs = detector.score(dataset.images)
    return sweep_probabilities(probs, dataset.labels, thetas, detector.reject_rule)


def evaluate(detector, dataset: LabeledDataset, threshold: float | None = None,
             thetas=None) -> EvalReport:
    """Score a mixed known/unknown test set and build its report (with sweep)."""
    probs = detector.score(dataset.images)
    n = detector.num_classes
    th = detector.threshold if threshold is None else threshold
    report = macro_f1(decide(probs, th, detector.reject_rule), encode_truth(dataset.labels, n), n)
    if thetas is not None:
        report.sweep = sweep_probabilities(probs, dataset.labels, thetas, detector.reject_rule)
    return report


def _fmt_theta(t: float) -> str:
    text = f"{t:.2f}"
    return text if float(text) == round(t, 12) else repr(float(t))


def sweep_csv(rows: Sequence[tuple[float, float]]) -> str:
    return "theta,macro_f1\n" + "".join(f"{_fmt_theta(t)},{f:.6f}\n" for t, f in rows)
