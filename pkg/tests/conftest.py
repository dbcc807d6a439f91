import pytest
import torch

from mvl.core import RngStream
from mvl.energy import build_mlp_energy
from mvl.estimators import EstimatorConfig
from mvl.manifolds import Euclidean
from mvl.targets import banana
from mvl.training import TrainConfig, train_energy_model


@pytest.fixture(scope="session")
def banana_model():
    """Contraction MLP (2 x 100 swish, spectral norm) trained 400 steps with MVL at eps = 1e-3."""
    target = banana()
    model = build_mlp_energy(Euclidean(2), (100, 100), "swish", "contraction", True, RngStream(1))
    cfg = TrainConfig(EstimatorConfig("mvl_langevin", 1e-3, True), batch_size=200, learning_rate=4e-3, iterations=400)
    hist = train_energy_model(model, target, cfg)
    return model, target, hist


@pytest.fixture
def rng():
    return RngStream(1234)


def rel_err(a, b):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / b.norm().clamp_min(1e-300))


@pytest.fixture(scope="session")
def wae_run():
    from mvl.autoencoder import AEConfig, train_ae

    return train_ae(AEConfig(mode="wae_kl", iterations=600, log_every=30, seed=0))


@pytest.fixture(scope="session")
def vae_run():
    from mvl.autoencoder import AEConfig, train_ae

    return train_ae(AEConfig(mode="implicit_vae", iterations=600, log_every=30, seed=0))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; lines are echoed in the terminal summary."""

    def record(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
