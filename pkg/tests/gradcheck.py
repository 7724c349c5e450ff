"""Central finite-difference gradient checks shared by the test modules."""
import numpy as np

from stackseg.tensor import backward

H = 1e-5


def numeric_grad(fn, t, h=H, indices=None):
    """d fn() / d t.data by central differences; ``indices`` limits the probed entries."""
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(t.shape)


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-8:
        # a true-zero gradient (e.g. a bias feeding batch norm): both sides are round-off
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / scale)


def check(fn, tensors, max_entries=24, seed=0):
    """Largest relative error between analytic and numeric grads over ``tensors``.

    Large tensors are probed at ``max_entries`` random positions.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached an input"
        analytic = t.grad.reshape(-1).copy()
        idx = np.arange(t.size)
        if t.size > max_entries:
            idx = np.sort(rng.choice(t.size, max_entries, replace=False))
        numeric = numeric_grad(fn, t, indices=idx).reshape(-1)
        worst = max(worst, rel_error(analytic[idx], numeric[idx]))
    return worst
