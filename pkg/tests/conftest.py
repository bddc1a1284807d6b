import numpy as np
import pytest
import torch

from dapsam.config import DataConfig, DomainSpec, EncoderConfig, RunConfig, Toggles, TrainConfig
from dapsam.data import generate_domain_suite, load_dataset
from dapsam.model import init_model

TOY = EncoderConfig()


def small_run_config(**train_overrides) -> RunConfig:
    """Tiny but complete config: 3 domains x 12 samples, a few epochs."""
    train = dict(warmup_steps=4, max_epochs=4, stop_epoch=4, bank_size=16, batch_size=4, seed=0)
    train.update(train_overrides)
    data = DataConfig(domains=(DomainSpec("A"), DomainSpec("B", gamma=0.8, contrast=1.2, noise_std=0.02),
                               DomainSpec("C", gamma=1.3, bias_amp=0.1)), samples_per_domain=12)
    return RunConfig(encoder=TOY, train=TrainConfig(**train), data=data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory):
    path = tmp_path_factory.mktemp("suite") / "data"
    generate_domain_suite(small_run_config().data, path, seed=7)
    return path


@pytest.fixture(scope="session")
def small_dataset(small_suite):
    return load_dataset(small_suite)


@pytest.fixture
def toy_store():
    return init_model(TOY, TrainConfig(bank_size=32, seed=3))


def rand_fmap(gen, shape=(2, 8, 8, 16)):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def fd_grad(fn, tensor, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (perturbed in place)."""
    out = np.zeros(tuple(tensor.shape))
    flat = tensor.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic.detach() if isinstance(analytic, torch.Tensor) else analytic)
    n = np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
