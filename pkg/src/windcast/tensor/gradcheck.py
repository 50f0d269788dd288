"""Central finite-difference verification of analytic gradients."""

import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is ~0 from turning pure
    roundoff into a large ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, params, eps=1e-5, n_samples=200, seed=0, floor=1e-6, return_details=False):
    """Compare ``backward()`` gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``
    (float64 tensors with ``requires_grad``). At most ``n_samples`` coordinates
    per tensor are probed, drawn without replacement from a seeded generator.
    Returns the maximum relative error (and per-parameter maxima when
    ``return_details`` is set).
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters, got {p.dtype}")
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    details = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        size = flat.size
        idx = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        err = relative_error(a.reshape(-1)[idx], numeric, floor)
        details.append(float(err.max()) if err.size else 0.0)
    worst = max(details) if details else 0.0
    return (worst, details) if return_details else worst
