"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(
    loss_fn,
    params,
    eps=1e-6,
    max_coords=64,
    seed=0,
    reference_dtype=np.float64,
    return_details=False,
    numeric_fn=None,
    one_sided_fallback=False,
):
    """Compare backprop gradients of ``loss_fn`` with central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. Analytic gradients are taken at the parameters' own dtype.
    The numerical side perturbs copies cast to ``reference_dtype`` (float64 by
    default, so that the reference is not dominated by float32 round-off);
    pass ``reference_dtype=None`` to difference at the native dtype.

    At most ``max_coords`` coordinates per parameter are checked, chosen by a
    seeded RNG. Returns the largest ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``numeric_fn`` replaces ``loss_fn`` on the finite-difference side. It is
    meant for estimators whose backward pass is not the true derivative
    (straight-through): pass a differentiable surrogate that has the same
    value at the current parameters and whose derivative the estimator
    claims to compute.

    With ``one_sided_fallback`` a coordinate whose central difference
    straddles a kink (ReLU, max, nearest-neighbour switch) is also compared
    with the forward and backward one-sided differences, and the smallest of
    the three errors is kept. At a kink the analytic value is one of the
    one-sided derivatives, so this accepts valid subgradients without
    accepting arbitrary values.
    """
    params = list(params)
    for p in params:
        p.grad = None
    first = loss_fn()
    again = loss_fn()
    if first.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.array_equal(first.data, again.data):
        raise ValueError("loss_fn is not deterministic: two evaluations differ")
    if numeric_fn is not None:
        base = numeric_fn()
        if not np.allclose(base.data, first.data, rtol=1e-5, atol=1e-7):
            raise ValueError("numeric_fn and loss_fn disagree at the current parameters")
    else:
        numeric_fn = loss_fn
    first.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True) for p in params
    ]

    originals = [p.data for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    try:
        if reference_dtype is not None:
            for p in params:
                p.data = p.data.astype(reference_dtype)
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            if flat.size <= max_coords:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for c in coords:
                old = flat[c]
                flat[c] = old + eps
                up = float(numeric_fn().data)
                flat[c] = old - eps
                down = float(numeric_fn().data)
                flat[c] = old
                num = (up - down) / (2.0 * eps)
                ana = float(analytic[k].reshape(-1)[c])
                err = _rel(ana, num)
                if one_sided_fallback and err > 0:
                    mid = float(numeric_fn().data)
                    for side in ((up - mid) / eps, (mid - down) / eps):
                        if _rel(ana, side) < err:
                            num, err = side, _rel(ana, side)
                details.append((p.name, int(c), ana, num, err))
                worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
    if return_details:
        return worst, details
    return worst
