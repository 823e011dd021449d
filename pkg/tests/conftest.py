import numpy as np
import pytest

from cardio_dg.model import HeartBeatNet, ModelConfig
from cardio_dg.nn import Tensor


def numeric_grad(f, arr, h=1e-6, coords=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place, then restored)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = {}
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def rel_error(analytic, numeric):
    """max |a - n| scaled by the largest numeric magnitude (floored at 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def check_gradients(build, tensors, rng, max_coords=None, h=1e-6):
    """Compare backward of ``sum(build() * R)`` against finite differences for each tensor.

    Returns the worst relative error. ``build`` must be deterministic.
    """
    out = build()
    proj = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(build().data * proj))

    for t in tensors:
        t.grad = None
    out = build()
    out.backward(proj)
    worst = 0.0
    for t in tensors:
        n = t.data.size
        coords = None if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        num = numeric_grad(scalar, t.data, h, coords)
        keys = sorted(num)
        ana = t.grad.reshape(-1)[keys]
        worst = max(worst, rel_error(ana, [num[k] for k in keys]))
    return worst


def tiny_config(variant="full", **kw):
    base = dict(widths=(8, 8, 8, 8), se_ratio=4, concentration_width=4, head_hidden=8, window=64,
                stem_stride=2, stage_strides=(1, 2, 2, 1))
    base.update(kw)
    return ModelConfig.desk(variant, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    return HeartBeatNet(tiny_config(), seed=0, dtype=np.float64)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def toy_set(n, seed=0, n_classes=3, length=128, window=64, prefix="r", domain="A"):
    """Small in-memory PreparedSet whose classes differ by dominant frequency."""
    from cardio_dg.train import PreparedSet

    r = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    t = np.arange(length)
    signals = []
    for k in labels:
        base = np.sin(2 * np.pi * (k + 1) * t / 32 + r.uniform(0, 2 * np.pi))
        sig = base[None] * r.uniform(0.5, 1.5, (12, 1)) + 0.3 * r.standard_normal((12, length))
        signals.append(((sig - sig.mean(1, keepdims=True)) / sig.std(1, keepdims=True)).astype(np.float32))
    ids = [f"{prefix}{i:04d}" for i in range(n)]
    return PreparedSet(ids, labels, [domain] * n, signals, window)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
