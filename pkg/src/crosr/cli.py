"""Command line: ``crosr {train,fit,eval,sweep} --config run.ini [--seed N] [--out DIR]``.

The config is an INI file; every section is optional and falls back to the
desk-benchmark defaults. Per-purpose seeds default to the global seed plus a
fixed offset (see :data:`crosr.desk.SEED_OFFSETS`) and can be pinned
individually with a ``seed`` key in the ``data``, ``model`` or ``train``
sections.

Exit codes: 0 success, 2 configuration or I/O error, 3 bad input data,
4 fitting error, 5 numerical failure. Errors print as
``error[<category>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .bench import (
    LabeledDataset,
    gen_uniform_noise,
    load_idx,
    make_synthetic_digits,
    outlier_addition,
    split_classes,
    superimpose_noise,
    sweep_csv,
)
from .desk import SEED_OFFSETS
from .dhrnet import DHRNetConfig, DHRNetModel, StageSpec, build
from .errors import ConfigurationError, CrosrError
from .evt import TailFitConfig
from .openset import OpenSetModel, SoftmaxDetector, fit_profiles
from .trainer import TrainConfig, train

log = logging.getLogger("crosr")

MODEL_FILE = "model.crsr"
TRAIN_LOG_FILE = "train_log.csv"
SUMMARY_FILE = "eval_summary.csv"

DEFAULTS = {
    "run": {"seed": "0", "out": "runs/default"},
    "data": {
        "source": "synthetic",
        "classes": "6",
        "train_per_class": "100",
        "test_per_class": "100",
        "pixel_noise": "0.15",
        "known_classes": "0",
        "outliers": "noise, noise-superimposed",
    },
    "model": {
        "variant": "dhrnet",
        "stages": "1:32:1:1; 1:32:1:1; 1:32:0:0",
        "head": "64",
        "bottleneck_dim": "32",
        "kernel_size": "3",
        "dropout": "0.2",
    },
    "train": {
        "epochs": "20",
        "batch_size": "32",
        "learning_rate": "0.01",
        "lr_milestones": "0.5, 0.75",
        "lr_decay": "0.1",
        "momentum": "0.9",
        "cls_weight": "1.0",
        "rec_weight": "1.0",
    },
    "evt": {"tail_size": "20", "alpha": "10", "rank_calibration": "auto", "modes": "av, joint"},
    "eval": {"threshold": "0.5", "reject_rule": "max", "sweep_points": "20"},
}


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]


@dataclass
class RunConfig:
    command: str
    seed: int
    out: Path
    parser: configparser.ConfigParser
    source_text: str = ""
    seeds: dict[str, int] = field(default_factory=dict)

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def getint(self, section: str, key: str) -> int:
        try:
            return self.parser.getint(section, key)
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {key}: {exc}") from None

    def getfloat(self, section: str, key: str) -> float:
        try:
            return self.parser.getfloat(section, key)
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {key}: {exc}") from None

    def network_config(self, num_classes: int, input_shape) -> DHRNetConfig:
        stages = tuple(StageSpec.from_text(s) for s in self.get("model", "stages").split(";") if s.strip())
        cfg = DHRNetConfig(
            input_shape=tuple(input_shape),
            num_classes=num_classes,
            stages=stages,
            head=tuple(int(v) for v in _list(self.get("model", "head"))),
            bottleneck_dim=self.getint("model", "bottleneck_dim"),
            variant=self.get("model", "variant"),
            kernel_size=self.getint("model", "kernel_size"),
            dropout=self.getfloat("model", "dropout"),
        )
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.getint("train", "epochs"),
            batch_size=self.getint("train", "batch_size"),
            learning_rate=self.getfloat("train", "learning_rate"),
            lr_milestones=tuple(float(v) for v in _list(self.get("train", "lr_milestones"))),
            lr_decay=self.getfloat("train", "lr_decay"),
            momentum=self.getfloat("train", "momentum"),
            cls_weight=self.getfloat("train", "cls_weight"),
            rec_weight=self.getfloat("train", "rec_weight"),
            seed=self.seeds["train"],
        )

    def tail_config(self) -> TailFitConfig:
        raw = self.get("evt", "rank_calibration").strip().lower()
        flags = {"auto": None, "on": True, "off": False}
        if raw not in flags:
            raise ConfigurationError(f"[evt] rank_calibration must be auto, on or off, got {raw!r}")
        return TailFitConfig(self.getint("evt", "tail_size"), self.getint("evt", "alpha"), flags[raw])

    def modes(self) -> list[str]:
        modes = _list(self.get("evt", "modes"))
        for m in modes:
            if m not in ("av", "joint"):
                raise ConfigurationError(f"[evt] modes: unknown feature mode {m!r}")
        return modes

    def resolved_text(self) -> str:
        lines = []
        for section in self.parser.sections():
            lines.append(f"[{section}]")
            for key, value in self.parser.items(section):
                if section == "run" and key == "out":
                    continue  # keeps reruns into other directories byte-identical
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def load_run_config(command: str, config_path: str | None, seed: int | None, out: str | None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    text = ""
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    if seed is not None:
        parser.set("run", "seed", str(seed))
    if out is not None:
        parser.set("run", "out", out)
    run = RunConfig(command, 0, Path(parser.get("run", "out")), parser, text)
    run.seed = run.getint("run", "seed")
    for purpose, section in (("data", "data"), ("init", "model"), ("train", "train")):
        if parser.has_option(section, "seed"):
            run.seeds[purpose] = run.getint(section, "seed")
        else:
            run.seeds[purpose] = run.seed + SEED_OFFSETS[purpose]
    run.seeds["outliers"] = run.seeds["data"] - SEED_OFFSETS["data"] + SEED_OFFSETS["outliers"]
    run.seeds["split"] = run.seeds["data"] - SEED_OFFSETS["data"] + SEED_OFFSETS["split"]
    return run


# -- data -------------------------------------------------------------------------


@dataclass
class RunData:
    train: LabeledDataset
    test: LabeledDataset
    unknown: LabeledDataset | None
    num_classes: int


def load_data(run: RunConfig) -> RunData:
    source = run.get("data", "source").strip()
    known_count = run.getint("data", "known_classes")
    if source == "synthetic":
        classes = run.getint("data", "classes")
        noise = run.getfloat("data", "pixel_noise")
        n_train, n_test = run.getint("data", "train_per_class"), run.getint("data", "test_per_class")
        seed = run.seeds["data"]
        train_set = make_synthetic_digits(n_train, classes, seed=seed, noise=noise)
        test_set = make_synthetic_digits(n_test, classes, seed=seed + 1, noise=noise)
    elif source == "idx":
        paths = {}
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not run.parser.has_option("data", key):
                raise ConfigurationError(f"[data] source=idx needs {key}")
            paths[key] = Path(run.get("data", key))
            if not paths[key].exists():
                raise FileNotFoundError(f"data path not found: {paths[key]}")
        train_set = load_idx(paths["train_images"], paths["train_labels"])
        test_set = load_idx(paths["test_images"], paths["test_labels"])
    else:
        raise ConfigurationError(f"[data] source must be synthetic or idx, got {source!r}")

    total = int(train_set.labels.max()) + 1
    if known_count == 0 or known_count == total:
        return RunData(train_set, test_set, None, total)
    split_train = split_classes(train_set, known_count, run.seeds["split"], test_fraction=0.0)
    # same seed -> same class choice on the test set
    split_test = split_classes(test_set, known_count, run.seeds["split"], test_fraction=1.0)
    return RunData(split_train.known_train, split_test.known_test, split_test.unknown_test, known_count)


def outlier_sets(run: RunConfig, data: RunData) -> dict[str, LabeledDataset]:
    sets = {}
    seed = run.seeds["outliers"]
    for name in _list(run.get("data", "outliers")):
        if name == "noise":
            sets[name] = gen_uniform_noise(len(data.test), data.test.shape, seed)
        elif name == "noise-superimposed":
            sets[name] = superimpose_noise(data.test, seed + 1)
        elif name == "unknown-classes":
            if data.unknown is None:
                raise ConfigurationError("outlier set unknown-classes needs [data] known_classes below the class count")
            sets[name] = data.unknown
        else:
            raise ConfigurationError(f"unknown outlier set {name!r}")
    if not sets:
        raise ConfigurationError("[data] outliers lists no outlier sets")
    return sets


# -- commands ---------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _model_path(run: RunConfig) -> Path:
    if run.parser.has_option("run", "model"):
        return Path(run.get("run", "model"))
    return run.out / MODEL_FILE


def _openset_path(run: RunConfig, mode: str) -> Path:
    return run.out / f"openset_{mode}.crsr"


def cmd_train(run: RunConfig) -> int:
    data = load_data(run)
    cfg = run.network_config(data.num_classes, data.train.shape)
    model = build(cfg, np.random.default_rng(run.seeds["init"]))
    log.info("train: variant=%s parameters=%d samples=%d", cfg.variant, model.parameter_count, len(data.train))
    model, history = train(model, data.train, run.train_config(), val=data.test)
    run.out.mkdir(parents=True, exist_ok=True)
    model.save(_model_path(run))
    _write(run.out / TRAIN_LOG_FILE, history.to_csv())
    _write(run.out / "config.ini", run.resolved_text())
    last = history.records[-1] if history.records else None
    if last is not None:
        print(f"trained {cfg.variant}: final cls_loss={last.cls_loss:.4f} rec_loss={last.rec_loss:.4f} "
              f"val_acc={last.val_acc:.4f}")
    print(f"wrote {_model_path(run)}")
    return 0


def _load_network(run: RunConfig) -> DHRNetModel:
    path = _model_path(run)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path} (run 'crosr train' first)")
    return DHRNetModel.load(path)


def cmd_fit(run: RunConfig) -> int:
    network = _load_network(run)
    data = load_data(run)
    tail = run.tail_config()
    threshold = run.getfloat("eval", "threshold")
    rule = run.get("eval", "reject_rule")
    for mode in run.modes():
        if mode == "joint" and network.config.variant == "plain":
            log.warning("fit: skipping mode joint for variant plain (no latent code)")
            continue
        calib = "on" if tail.calibration_enabled(network.config.num_classes) else "off"
        print(f"fit: mode={mode} alpha={tail.alpha} tail_size={tail.tail_size} rank_calibration={calib}")
        osm = fit_profiles(network, data.train.images, data.train.labels, mode, tail, threshold, rule)
        for p in osm.profiles:
            print(f"  class {p.class_id}: m={p.weibull.shape:.6g} eta={p.weibull.scale:.6g}")
        osm.save(_openset_path(run, mode))
        print(f"wrote {_openset_path(run, mode)}")
    return 0


def _detectors(run: RunConfig):
    network = _load_network(run)
    threshold = run.getfloat("eval", "threshold")
    dets = [SoftmaxDetector(network, threshold)]
    for mode in run.modes():
        path = _openset_path(run, mode)
        if mode == "joint" and network.config.variant == "plain":
            continue
        if not path.exists():
            raise FileNotFoundError(f"open-set model not found: {path} (run 'crosr fit' first)")
        dets.append(OpenSetModel.load(path))
    return dets


def cmd_eval(run: RunConfig) -> int:
    data = load_data(run)
    detectors = _detectors(run)
    sets = outlier_sets(run, data)
    rows = ["detector,outlier_set,macro_f1"]
    for det in detectors:
        for name, outliers in sets.items():
            mixed = outlier_addition(data.test, outliers)
            report = bench.evaluate(det, mixed)
            stem = f"report_{det.name}_{name}"
            _write(run.out / f"{stem}.csv", report.per_class_csv())
            _write(run.out / f"{stem}_confusion.csv", report.confusion_csv())
            _write(run.out / f"{stem}.txt", f"{det.name} vs {name}\n" + report.pretty())
            rows.append(f"{det.name},{name},{report.macro_f1:.6f}")
    summary = "\n".join(rows) + "\n"
    _write(run.out / SUMMARY_FILE, summary)
    sys.stdout.write(summary)
    return 0


def cmd_sweep(run: RunConfig) -> int:
    data = load_data(run)
    detectors = _detectors(run)
    sets = outlier_sets(run, data)
    points = run.getint("eval", "sweep_points")
    if points < 2:
        raise ConfigurationError("[eval] sweep_points must be at least 2")
    thetas = np.arange(points) / points
    for det in detectors:
        for name, outliers in sets.items():
            mixed = outlier_addition(data.test, outliers)
            probs = det.score(mixed.images)
            rows = bench.sweep_probabilities(probs, mixed.labels, thetas, det.reject_rule)
            path = run.out / f"sweep_{det.name}_{name}.csv"
            _write(path, sweep_csv(rows))
            print(f"wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "fit": cmd_fit, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosr", description="Open-set recognition with DHRNet and CROSR.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train a network and write the model file and training log"),
                            ("fit", "fit class profiles and write open-set model files"),
                            ("eval", "evaluate detectors on every outlier set"),
                            ("sweep", "macro-F1 over a grid of rejection thresholds")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        p.add_argument("--out", help="output directory (overrides [run] out)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        run = load_run_config(args.command, args.config, args.seed, args.out)
        return COMMANDS[args.command](run)
    except CrosrError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
