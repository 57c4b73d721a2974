import numpy as np
import pytest

from efm.errors import ContractError, DimensionError
from efm.flow import (
    FlowBatch,
    FlowModel,
    SourceDistribution,
    TrainConfig,
    flow_loss,
    integrate,
    sample,
    train,
)


class StubField:
    def __init__(self, fn, dim=1):
        self.fn = fn
        self.dim = dim

    def velocity(self, x, t, c=None):
        return self.fn(x, t)


def constant_flow(v, cond_dim=0):
    v = np.asarray(v, dtype=np.float32)
    model = FlowModel(len(v), cond_dim, hidden=(4,))
    for p in model.parameters():
        p.data[...] = 0
    model.net.biases[-1].data[:] = v
    return model


def test_loss_zero_when_field_matches_velocity():
    model = constant_flow([1.0])
    batch = FlowBatch([[0.0]], [[1.0]], [0.5])
    assert flow_loss(model, batch).item() == 0.0


def test_loss_one_when_field_zero():
    model = constant_flow([0.0])
    assert flow_loss(model, FlowBatch([[0.0]], [[1.0]], [0.5])).item() == 1.0


def test_loss_2d_arithmetic():
    model = constant_flow([1.0, 1.0])
    batch = FlowBatch([[0.0, 0.0]], [[2.0, 0.0]], [0.3])
    assert flow_loss(model, batch).item() == pytest.approx(2.0)


def test_loss_dimension_mismatch():
    with pytest.raises(DimensionError):
        flow_loss(constant_flow([0.0]), FlowBatch([[0.0, 1.0]], [[1.0, 1.0]], [0.5]))


def test_batch_rejects_bad_t():
    with pytest.raises(ContractError):
        FlowBatch([[0.0]], [[1.0]], [1.5])


@pytest.mark.parametrize("steps", [1, 3, 10, 64])
def test_constant_field_exact(steps):
    model = constant_flow([0.75, -1.25])
    x0 = np.array([[0.1, 0.2], [-3.0, 4.0]], dtype=np.float32)
    np.testing.assert_allclose(integrate(model, x0, None, steps), x0 + [0.75, -1.25], atol=1e-6)


def test_time_field_two_steps():
    out = integrate(StubField(lambda x, t: np.full_like(x, t)), np.array([[1.0]]), None, 2)
    assert out[0, 0] == pytest.approx(1.25)


def test_linear_field_four_steps():
    out = integrate(StubField(lambda x, t: x), np.array([[2.0]]), None, 4)
    assert out[0, 0] == pytest.approx(2.0 * 1.25**4, rel=1e-6)


def test_integrate_rejects_zero_steps():
    with pytest.raises(ContractError):
        integrate(constant_flow([0.0]), np.zeros((1, 1)), None, 0)


def test_unconditional_ignores_conditioning_buffer():
    model = FlowModel(1, 0, (8,), rng=np.random.default_rng(0))
    x0 = np.linspace(0, 1, 5)[:, None]
    a = integrate(model, x0, None)
    b = integrate(model, x0, np.random.default_rng(1).normal(size=(5, 7)))
    np.testing.assert_array_equal(a, b)


def test_sample_rejects_mismatched_conditioning():
    model = FlowModel(1, 2, (8,))
    with pytest.raises(DimensionError):
        sample(model, np.zeros((3, 3)), np.random.default_rng(0))


def test_sample_reproducible():
    model = FlowModel(2, 0, (8,), rng=np.random.default_rng(0))
    a = sample(model, None, np.random.default_rng(4), n=6)
    b = sample(model, None, np.random.default_rng(4), n=6)
    np.testing.assert_array_equal(a, b)


def test_uniform_source_support():
    src = SourceDistribution.uniform(3, [0, -1, 2], [1, 0, 2.5])
    pts = src.sample(1000, np.random.default_rng(0))
    assert src.contains(pts).all()
    with pytest.raises(ContractError):
        SourceDistribution.uniform(1, 1.0, 1.0)


def test_flow_state_roundtrip():
    model = FlowModel(2, 3, (5, 6), SourceDistribution.uniform(2, -1, 2), np.random.default_rng(0))
    back = FlowModel.from_state_dict(model.state_dict("p."), "p.")
    assert back.cond_dim == 3 and back.net.layer_sizes == model.net.layer_sizes
    np.testing.assert_array_equal(back.source.lower, [-1, -1])
    x = np.random.default_rng(1).random((4, 2))
    c = np.ones((4, 3))
    np.testing.assert_array_equal(integrate(back, x, c), integrate(model, x, c))


def _train_1d(target_fn, steps=3000, seed=0):
    model = FlowModel(1, 0, (64, 64, 64), rng=np.random.default_rng(seed))
    result = train(model, lambda rng, n: (target_fn(rng, n), None),
                   TrainConfig(steps=steps, lr=2e-3, lr_final=1e-4, seed=seed + 1))
    return model, result


@pytest.fixture(scope="module")
def point_mass_model():
    return _train_1d(lambda rng, n: np.full((n, 1), 3.0, dtype=np.float32), steps=6000)[0]


def test_point_mass_transport(point_mass_model):
    out = integrate(point_mass_model, np.linspace(0, 1, 101)[:, None])
    assert np.abs(out - 3.0).max() < 0.05


def test_point_mass_samples(point_mass_model):
    out = sample(point_mass_model, None, np.random.default_rng(0), n=200)
    assert np.abs(out - 3.0).max() < 0.05


def test_identity_target_gives_identity_map():
    model, result = _train_1d(lambda rng, n: rng.random((n, 1), dtype=np.float32))
    x0 = np.linspace(0, 1, 101)[:, None]
    assert np.mean(np.abs(integrate(model, x0) - x0)) < 0.1
    assert result.loss_curve[-1] < result.loss_curve[0]


def test_uniform_target_support_and_monotone():
    model, _ = _train_1d(lambda rng, n: rng.uniform(2, 5, (n, 1)).astype(np.float32))
    out = integrate(model, np.random.default_rng(3).random((1000, 1)))
    assert out.min() > 1.8 and out.max() < 5.2
    grid = integrate(model, np.linspace(0, 1, 101)[:, None])[:, 0]
    assert (-np.diff(grid)).max(initial=0.0) < 1e-3
    # Euler refinement converges
    x0 = np.linspace(0, 1, 21)[:, None]
    gaps = [np.abs(integrate(model, x0, None, n) - integrate(model, x0, None, 2 * n)).max() for n in (4, 8, 16, 32)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_training_deterministic():
    a = _train_1d(lambda rng, n: rng.random((n, 1), dtype=np.float32), steps=50)[1].loss_curve
    b = _train_1d(lambda rng, n: rng.random((n, 1), dtype=np.float32), steps=50)[1].loss_curve
    assert a == b
