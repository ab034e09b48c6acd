import numpy as np
import pytest
import torch

from ntprompt import toydata
from ntprompt.backbone import DTYPE, BackboneSpec, MultiScaleFeatures, make_backbone
from ntprompt.datasets import toy_domain

torch.set_num_threads(1)


def central_diff(fn, x, h=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. tensor ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn())
        flat[i] = old - h
        down = float(fn())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-6):
    """Largest element-wise relative error, with an absolute floor for near-zero entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_features(sizes, b, c, seed=0):
    gen = torch.Generator().manual_seed(seed)
    per_layer = [torch.randn(b, m, generator=gen, dtype=DTYPE).abs() for m in sizes]
    final = torch.nn.functional.normalize(torch.randn(b, c, generator=gen, dtype=DTYPE), dim=-1)
    return MultiScaleFeatures(per_layer, final)


@pytest.fixture(scope="session")
def small_spec():
    return BackboneSpec(M=2, C=8, d_t=4, layer_dims=(4, 6), seed=3)


@pytest.fixture(scope="session")
def toy_backbone():
    return make_backbone(BackboneSpec(), concepts=toydata.concept_images())


@pytest.fixture(scope="session")
def toy_pair():
    return toy_domain("clean", 40, 32, 0), toy_domain("sketch", 40, 32, 0)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
