import math

import numpy as np
import pytest

from crosr.bench import UNKNOWN, LabeledDataset
from crosr.dhrnet import DHRNetConfig, StageSpec, build, extract_features
from crosr.errors import ConfigurationError, InputError, NumericalError
from crosr.trainer import TrainConfig, closed_set_accuracy, train

from conftest import toy_model


def blobs(n=200, seed=0):
    """Two classes: a bright blob top-left or bottom-right, plus pixel noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:8, 0:8]
    centres = [(2, 2), (5, 5)]
    labels = np.arange(n) % 2
    images = np.empty((n, 1, 8, 8))
    for i, c in enumerate(labels):
        cy, cx = centres[c] + rng.normal(0, 0.5, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 3.0)
        images[i, 0] = np.clip(blob + rng.normal(0, 0.1, (8, 8)), 0, 1)
    return LabeledDataset(images, labels, "blobs")


def two_class_model(variant="dhrnet", seed=0):
    return toy_model(variant, seed=seed, num_classes=2, dropout=0.1)


def test_default_loss_weights():
    cfg = TrainConfig()
    assert cfg.cls_weight == 1.0 and cfg.rec_weight == 1.0


def test_zero_learning_rate_leaves_weights_untouched():
    model = two_class_model()
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, blobs(40), TrainConfig(epochs=2, learning_rate=0.0))
    for k, v in before.items():
        assert model.params[k].tobytes() == v.tobytes()


def test_separable_blobs_are_learned():
    data = blobs(200)
    model, log = train(two_class_model(), data, TrainConfig(epochs=30, learning_rate=0.02, seed=1))
    assert len(log.records) == 30
    assert log.total_losses[-1] < log.total_losses[0]
    assert closed_set_accuracy(model, data) >= 0.95
    assert all(math.isfinite(v) for v in log.total_losses)


def test_same_seed_gives_identical_weights():
    data = blobs(60)
    cfg = TrainConfig(epochs=3, seed=5)
    a, log_a = train(two_class_model(), data, cfg)
    b, log_b = train(two_class_model(), data, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert log_a.to_csv() == log_b.to_csv()


def test_zero_reconstruction_weight_matches_plain_training():
    data = blobs(60)
    cfg = TrainConfig(epochs=4, seed=2, rec_weight=0.0)
    plain, log_plain = train(two_class_model("plain"), data, cfg)
    dhr, log_dhr = train(two_class_model("dhrnet"), data, cfg)
    assert [r.cls_loss for r in log_plain.records] == [r.cls_loss for r in log_dhr.records]
    assert [r.val_acc for r in log_plain.records] == [r.val_acc for r in log_dhr.records]
    for k, v in plain.params.items():
        assert dhr.params[k].tobytes() == v.tobytes()


def test_unknown_samples_rejected():
    data = blobs(20)
    labels = data.labels.copy()
    labels[3] = UNKNOWN
    with pytest.raises(InputError, match="unknown"):
        train(two_class_model(), LabeledDataset(data.images, labels), TrainConfig(epochs=1))


def test_out_of_range_labels_rejected():
    data = blobs(20)
    with pytest.raises(InputError):
        train(two_class_model(), LabeledDataset(data.images, data.labels + 1), TrainConfig(epochs=1))


def test_divergence_is_a_hard_error():
    model = two_class_model()
    with pytest.raises(NumericalError, match="epoch 0"):
        with np.errstate(over="ignore", invalid="ignore"):
            train(model, blobs(40), TrainConfig(epochs=3, learning_rate=1e200))


def test_train_log_csv_layout():
    _, log = train(two_class_model(), blobs(20), TrainConfig(epochs=2))
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,cls_loss,rec_loss,val_acc"
    assert len(lines) == 3
    assert lines[1].startswith("0,")


def test_step_schedule():
    cfg = TrainConfig(epochs=8, learning_rate=1.0)
    assert [cfg.rate_at(e) for e in range(8)] == pytest.approx([1, 1, 1, 1, 0.1, 0.1, 0.01, 0.01])


@pytest.mark.parametrize("kwargs", [dict(epochs=-1), dict(batch_size=0), dict(momentum=1.0), dict(dropout=1.0)])
def test_bad_train_config(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_accuracy_of_perfect_predictions():
    model = two_class_model()
    data = blobs(50)
    own = extract_features(model, data.images, "av").argmax(axis=1)
    assert closed_set_accuracy(model, LabeledDataset(data.images, own)) == 1.0


def test_untrained_model_is_at_chance():
    # labels independent of the images, so hits are Binomial(n, 1/10)
    n = 2000
    images = np.random.default_rng(3).random((n, 1, 8, 8))
    data = LabeledDataset(images, np.arange(n) % 10)
    stages = (StageSpec(1, 8), StageSpec(1, 8, pool=False, lateral=False))
    cfg = DHRNetConfig(input_shape=(1, 8, 8), num_classes=10, stages=stages, head=(16,), bottleneck_dim=4)
    acc = closed_set_accuracy(build(cfg, np.random.default_rng(0)), data)
    assert abs(acc - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)
