import numpy as np
import pytest

from cgsta.dataio import SyntheticConfig
from cgsta.model import ModelConfig, init_params
from cgsta.trainer import TrainConfig

# K=4, L=8, H=4, R=2, G=1 as in the gradient-fidelity gate; other widths kept tiny
MICRO = dict(K=4, L=8, d_e=3, d_u=4, d_a=3, F_in=3, H=4, R=2, G=1, H_t=2, H_f=4, d_g=2)


@pytest.fixture
def micro_cfg():
    return ModelConfig(**MICRO)


@pytest.fixture
def micro_params(micro_cfg):
    return init_params(micro_cfg, np.random.default_rng(3))


@pytest.fixture
def micro_windows():
    rng = np.random.default_rng(11)
    pos = rng.standard_normal((2, 4, 8))
    neg = pos + rng.standard_normal((2, 4, 8)) * 0.8
    return pos, neg


def tiny_synth(seed=0, **kw):
    base = dict(K=6, n_groups=3, T_train=600, T_test=300, seed=seed)
    base.update(kw)
    return SyntheticConfig(**base)


def tiny_model_cfg(**kw):
    base = dict(K=6, L=16, d_e=4, d_u=8, d_a=4, F_in=4, H=4, R=4, G=2, H_t=4, H_f=8, d_g=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_cfg(**kw):
    base = dict(epochs=2, batch_size=8, max_batches_per_epoch=3)
    base.update(kw)
    return TrainConfig(**base)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
