import numpy as np
import pytest
import torch

from shortcut_lens.models import FeatureExtractorConfig, LensConfig

TINY_EXTRACTOR = FeatureExtractorConfig(base_channels=4, block_counts=(1, 1), input_size=16)
TINY_LENS = LensConfig(base_channels=8, flat_units=1)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_images(n, size=16, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, size, size, 3)).astype(np.float32)


def max_relative_gradient_error(module, loss_fn, count=20, step=1e-6, seed=0):
    return max(relative_gradient_errors(module, loss_fn, count, step, seed))


def relative_gradient_errors(module, loss_fn, count=20, step=1e-6, seed=0):
    """Relative error between autograd and central differences for random scalar parameters."""
    module.double()
    params = [p for p in module.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    errors = []
    for _ in range(count):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(params[pi].numel()))
        module.zero_grad()
        loss_fn().backward()
        analytic = float(params[pi].grad.view(-1)[idx])
        with torch.no_grad():
            flat = params[pi].view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + step
            up = float(loss_fn())
            flat[idx] = orig - step
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return errors


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE: dict[str, tuple[str, str]] = {}


def report(criterion: str, status: str, detail: str) -> None:
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (status, detail)


def _criterion_order(key: str):
    head = "".join(ch for ch in key if ch.isdigit())
    return int(head or 0), key


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_criterion_order):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{status:<13} {key:<5} {detail}")
