import numpy as np
import pytest
from hypothesis import settings

from quadmix.losses import LossWeights, SampleInputs, StreamInput, compute_objective
from quadmix.model import ToyModel
from quadmix.rng import Rng
from quadmix.tensor_io import IGNORE, LabelMap

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_labels(rng: np.random.Generator, k: int, shape, p_ignore: float = 0.2) -> LabelMap:
    v = rng.integers(0, k, shape).astype(np.uint16)
    v[rng.random(shape) < p_ignore] = IGNORE
    return LabelMap(v, k)


def objective_fixture(seed: int, k: int = 4, h: int = 8, w: int = 8):
    """Model, one full training sample and loss weights for gradient checks."""
    rng = np.random.default_rng(seed)

    def stream(t=2):
        frames = rng.random((t, 3, h, w)).astype(np.float32)
        flow = rng.uniform(-2, 2, (h, w, 2)) if t == 2 else None
        return StreamInput.from_frames(frames, flow, random_labels(rng, k, (h, w)))

    model = ToyModel.init(k, Rng(seed + 1), scale=0.5)
    model.fusion.weight += rng.normal(0, 0.3, model.fusion.weight.shape)
    model.fusion.bias += rng.normal(0, 0.3, model.fusion.bias.shape)
    model.psi.weight += rng.normal(0, 0.3, model.psi.weight.shape)
    union = (rng.random((2, h, w)) < 0.5).astype(np.uint8)
    sample = SampleInputs(stream(), stream(), stream(), stream(), union, [stream()], [stream(), stream()])
    return model, [sample], LossWeights(0.7, 0.5)


def max_fd_relative_error(model, samples, weights, agg_cfg=None, eps=1e-3):
    """Worst relative error between analytic and central-difference gradients."""
    grads = compute_objective(model, samples, weights, agg_cfg).grads
    worst = 0.0
    for name, p in model.params().items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = compute_objective(model, samples, weights, agg_cfg, with_grad=False).total
            p[idx] = orig - eps
            down = compute_objective(model, samples, weights, agg_cfg, with_grad=False).total
            p[idx] = orig
            num = (up - down) / (2 * eps)
            ana = grads[name][idx]
            denom = max(abs(ana), abs(num))
            if denom > 1e-10:
                worst = max(worst, abs(ana - num) / denom)
    return worst


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
