import numpy as np
import pytest

from crosr.dhrnet import DHRNetConfig, StageSpec, build


def toy_config(variant="dhrnet", stages=None, num_classes=3, bottleneck_dim=3, head=(5,), dropout=0.0):
    stages = stages or (StageSpec(1, 4), StageSpec(1, 4, pool=False, lateral=False))
    return DHRNetConfig(input_shape=(1, 8, 8), num_classes=num_classes, stages=stages, head=head,
                        bottleneck_dim=bottleneck_dim, variant=variant, dropout=dropout)


def toy_model(variant="dhrnet", seed=0, **kw):
    return build(toy_config(variant, **kw), np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# seeds used by unit tests that need trained desk models; kept apart from the
# acceptance seeds
DESK_TEST_SEED = 11


@pytest.fixture(scope="session")
def desk_data():
    from crosr.desk import make_desk_data

    return make_desk_data(DESK_TEST_SEED)


@pytest.fixture(scope="session")
def desk_dhrnet(desk_data):
    from crosr.desk import train_desk_model

    return train_desk_model(desk_data, "dhrnet", DESK_TEST_SEED)


@pytest.fixture(scope="session")
def digits10():
    """A quickly trained 10-class network with two laterals and bottleneck 32."""
    from crosr.bench import make_synthetic_digits
    from crosr.trainer import TrainConfig, train

    data = make_synthetic_digits(60, 10, seed=21, noise=0.1)
    stages = (StageSpec(1, 32), StageSpec(1, 32), StageSpec(1, 32, pool=False, lateral=False))
    cfg = DHRNetConfig(input_shape=(1, 8, 8), num_classes=10, stages=stages, head=(64,), bottleneck_dim=32)
    model = build(cfg, np.random.default_rng(21))
    train(model, data, TrainConfig(epochs=15, learning_rate=0.01, seed=21))
    return model, data
