"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, backward


def finite_diff_check(
    f,
    params: list[Parameter],
    eps: float = 1e-4,
    max_coords: int = 512,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor; it is re-evaluated twice per checked coordinate. All coordinates
    are checked unless their total exceeds ``max_coords``, in which case a
    seeded subset is sampled. The difference quotient uses the actually
    representable step (x+eps and x-eps after storage rounding), and loss
    values are read out in float64.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    total = sum(p.value.size for p in params)
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if total > max_coords:
            take = max(1, int(round(max_coords * n / total)))
            coords = rng.choice(n, size=min(take, n), replace=False)
        else:
            coords = np.arange(n)
        a_flat = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi_x = float(flat[i])
            hi_f = float(np.float64(f().data.reshape(-1)[0]))
            flat[i] = orig - eps
            lo_x = float(flat[i])
            lo_f = float(np.float64(f().data.reshape(-1)[0]))
            flat[i] = orig
            fd = (hi_f - lo_f) / (hi_x - lo_x)
            a = float(a_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-2)
            if rel > worst:
                worst = rel
    return worst
