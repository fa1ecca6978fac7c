import numpy as np
import pytest

from unlearnbench import data, encoder

# lines appended by test_acceptance.py; printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_world():
    """Small dataset, split and briefly trained model for fast runner tests."""
    ds = data.generate(K=12, per_identity=8, D_in=6, seed=3, noise_std=0.3)
    plan = data.make_split(ds, n_forget=4, train_frac=0.5, seed=1, distractor_factor=2)
    model = encoder.init_model(6, 12, d=8, hidden=(16, 16), seed=0)
    model, _ = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train],
                             encoder.TrainConfig(lr=0.05, epochs=20, batch_size=16))
    return ds, plan, model


@pytest.fixture(scope="session")
def reference_world():
    """Reference dataset and the model trained on its seed-0 split (about two seconds)."""
    ds = data.generate(K=100, per_identity=20, D_in=16, seed=0, noise_std=0.3)
    plan = data.make_split(ds, n_forget=10, train_frac=0.5, seed=0)
    model = encoder.init_model(16, 100, seed=0)
    trained, curve = encoder.train(model, ds.inputs[plan.train], ds.labels[plan.train], encoder.TrainConfig(seed=0))
    return ds, plan, trained, curve
