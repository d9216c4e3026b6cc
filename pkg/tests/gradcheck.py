"""Central-difference gradient oracle used across the test suite.

The check perturbs randomly chosen parameter coordinates by +/-h in double
precision and compares the analytic gradient already accumulated in
``p.grad`` against (f(x+h) - f(x-h)) / 2h. The relative-error denominator
is floored so that coordinates with a structurally zero gradient are not
dominated by finite-difference rounding noise (~eps * |loss| / h).
"""

import numpy as np


def finite_difference_check(loss_fn, params, n_coords=100, h=1e-5, floor=1e-5, seed=0):
    """Returns (worst relative error, worst coordinate description)."""
    params = [p for p in params if p.value.size > 0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_info = None
    for _ in range(n_coords):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.value.shape)
        orig = p.value[idx]
        p.value[idx] = orig + h
        up = loss_fn()
        p.value[idx] = orig - h
        down = loss_fn()
        p.value[idx] = orig
        fd = (up - down) / (2.0 * h)
        an = p.grad[idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), floor)
        if rel > worst:
            worst = rel
            worst_info = (p.name, idx, float(an), float(fd))
    return worst, worst_info


def array_grad_check(loss_fn, array, grad, n_coords=60, h=1e-6, floor=1e-5, seed=0):
    """Same oracle for gradients with respect to a plain input array."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(rng.integers(s)) for s in array.shape)
        orig = array[idx]
        array[idx] = orig + h
        up = loss_fn()
        array[idx] = orig - h
        down = loss_fn()
        array[idx] = orig
        fd = (up - down) / (2.0 * h)
        rel = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), floor)
        worst = max(worst, rel)
    return worst
