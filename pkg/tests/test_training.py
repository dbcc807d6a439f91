import math

import pytest
import torch

from mvl.core import RngStream
from mvl.energy import GaussianEnergy, build_mlp_energy
from mvl.estimators import EstimatorConfig, exact_sm_hutchinson, fisher_divergence_analytic
from mvl.manifolds import Circle, Euclidean
from mvl.targets import banana, gaussian
from mvl.training import TrainConfig, TrainingDiverged, adam_step, rmsprop_step, train_energy_model


def test_rmsprop_zero_gradient_keeps_params():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    new, _ = rmsprop_step(None, p, torch.zeros(2, dtype=torch.float64), 0.1)
    assert torch.equal(new, p)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = torch.zeros(1, dtype=torch.float64)
    g = torch.tensor([3.0], dtype=torch.float64)
    state = None
    for _ in range(300):
        prev = p
        p, state = rmsprop_step(state, p, g, 0.01)
    assert float(prev - p) == pytest.approx(0.01, rel=1e-6)


def test_rmsprop_descends_quadratic():
    th, state = torch.tensor([1.0], dtype=torch.float64), None
    losses = []
    for _ in range(100):
        losses.append(float(th**2))
        th, state = rmsprop_step(state, th, 2 * th, 0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_first_step_is_lr():
    p, _ = adam_step(None, torch.zeros(3, dtype=torch.float64), torch.tensor([5.0, -0.1, 2.0], dtype=torch.float64), 0.01)
    assert torch.allclose(p, torch.tensor([-0.01, 0.01, -0.01], dtype=torch.float64), atol=1e-8)


def test_optimizer_shape_check():
    with pytest.raises(ValueError):
        rmsprop_step(None, torch.zeros(2, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")


@pytest.mark.parametrize("objective", [
    EstimatorConfig("mvl_langevin", 1e-3),
    EstimatorConfig("dsm", 1e-3),
    EstimatorConfig("cd1", 1e-3),
    EstimatorConfig("exact_hutchinson"),
], ids=lambda o: o.label)
def test_gaussian_scale_recovered(objective):
    model = GaussianEnergy([0.0], 1.0)
    cfg = TrainConfig(objective, batch_size=200, learning_rate=3e-3, iterations=2000, seed=3)
    train_energy_model(model, gaussian([0.0], 2.0), cfg)
    s = math.exp(float(model.params[-1]))
    assert abs(s - 4.0) <= 0.05 * 4.0


def test_same_seed_same_history():
    def run():
        m = build_mlp_energy(Euclidean(2), (16,), "swish", stream=RngStream(0))
        h = train_energy_model(m, banana(), TrainConfig(EstimatorConfig("mvl_langevin", 1e-3), batch_size=50, iterations=30, eval_every=10, seed=5))
        return h, m.params

    (h1, p1), (h2, p2) = run(), run()
    assert h1.train_loss == h2.train_loss and h1.heldout == h2.heldout
    assert torch.equal(p1, p2)


def test_history_shapes(banana_model):
    _, _, hist = banana_model
    assert len(hist.train_loss) == 400 and len(hist.rows()) == 400
    assert [i for i, _ in hist.heldout] == list(range(50, 401, 50))
    assert all(math.isfinite(v) for _, v in hist.heldout)


def test_moving_average_decreases(banana_model):
    _, _, hist = banana_model
    ma = hist.moving_average(100)
    assert float(ma[-1]) < float(ma[0])


def test_banana_mvl_close_to_hutchinson_training(banana_model):
    model, target, _ = banana_model
    ref = build_mlp_energy(Euclidean(2), (100, 100), "swish", "contraction", True, RngStream(1))
    train_energy_model(ref, target, TrainConfig(EstimatorConfig("exact_hutchinson"), batch_size=200, learning_rate=4e-3, iterations=400))
    x = target.sample(20_000, RngStream(99))
    fd_mvl = fisher_divergence_analytic(x, target, model).mean
    fd_ref = fisher_divergence_analytic(x, target, ref).mean
    assert abs(fd_mvl - fd_ref) <= 0.10 * fd_ref


def test_early_stopping_returns_no_worse_than_final():
    m = build_mlp_energy(Euclidean(2), (16,), "swish", stream=RngStream(2))
    cfg = TrainConfig(EstimatorConfig("mvl_langevin", 1e-3), batch_size=50, learning_rate=3e-2, iterations=300, eval_every=10, early_stop_patience=3, seed=1)
    hist = train_energy_model(m, banana(), cfg)
    last = hist.heldout[-1][1]
    best = hist.heldout_at(hist.best_iteration)
    assert best <= last
    assert best == min(v for _, v in hist.heldout)


def test_fixed_dataset_mode():
    data = banana().sample(500, RngStream(3))
    m = build_mlp_energy(Euclidean(2), (16,), "swish", stream=RngStream(4))
    hist = train_energy_model(m, data, TrainConfig(EstimatorConfig("dsm", 1e-3), batch_size=64, iterations=20, eval_every=5))
    assert len(hist.train_loss) == 20 and len(hist.heldout) == 4


def test_divergence_aborts():
    m = GaussianEnergy([0.0], 1.0)
    with pytest.raises(TrainingDiverged) as info:
        train_energy_model(m, gaussian([0.0], 2.0), TrainConfig(EstimatorConfig("mvl_langevin", 1e-3), learning_rate=1e3, iterations=50))
    assert info.value.iteration >= 1


def test_objective_manifold_mismatch():
    circ = build_mlp_energy(Circle(), (8,), "tanh", stream=RngStream(0))
    with pytest.raises(ValueError):
        train_energy_model(circ, banana(), TrainConfig(EstimatorConfig("mvl_langevin")))
    flat = build_mlp_energy(Euclidean(2), (8,), "tanh", stream=RngStream(0))
    with pytest.raises(ValueError):
        train_energy_model(flat, banana(), TrainConfig(EstimatorConfig("mvl_riemannian")))


def test_energy_penalty_shrinks_energies():
    def run(c):
        m = build_mlp_energy(Euclidean(2), (16,), "swish", "raw_mlp", stream=RngStream(5))
        train_energy_model(m, banana(), TrainConfig(EstimatorConfig("mvl_langevin", 1e-3), batch_size=100, iterations=100, energy_l2_coefficient=c, seed=2))
        return float((m.energy(banana().sample(500, RngStream(6))) ** 2).mean())

    assert run(1.0) < run(0.0)
