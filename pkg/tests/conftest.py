import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sia_lab.toyworld import generate_dataset, train_classifier, train_keypoint_detector

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SPURIOUS = [0.8, 0.6, 0.4, 0.2, 0.0]


class LinearClassifier:
    """Logistic model ``sigmoid(<w, x> + b)`` with BCE loss; gradients in closed form."""

    kind = "linear-test"

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.image_shape = self.w.shape

    def logit(self, x):
        return float(np.sum(self.w * x) + self.b)

    def forward(self, x):
        return 1.0 / (1.0 + np.exp(-self.logit(x)))

    def loss(self, x, y):
        p = self.forward(x)
        return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)))

    def loss_gradient(self, x, y):
        return (self.forward(x) - y) * self.w

    def is_fooled(self, x, y):
        return int(self.forward(x) >= 0.5) != int(y)

    def random_ground_truth(self, rng):
        return int(rng.integers(2))


@pytest.fixture(scope="session")
def world():
    return generate_dataset(K=6, N=400, seed=1, spurious=SPURIOUS, primary_gain=0.5, noise=0.03)


@pytest.fixture(scope="session")
def split(world):
    return world.split(300)


@pytest.fixture(scope="session")
def classifier(split):
    return train_classifier(split[0], epochs=300, lr=1.0, seed=0)


@pytest.fixture(scope="session")
def detector(split):
    return train_keypoint_detector(split[0], epochs=400, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdict lines -------------------------------------------------------

VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records criterion ``n`` and returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        VERDICTS[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
