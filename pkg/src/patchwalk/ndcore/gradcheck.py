"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["finite_diff_check"]


def finite_diff_check(f, params, h: float = 1e-5, coord_limit: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Worst per-parameter relative L2 error between analytic and
    central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from the
    current values of ``params`` (a dict or list of Tensors).  For each
    parameter the probed coordinates form vectors a (analytic) and c (central
    difference); the reported error is max over parameters of
    ||a - c|| / (||a|| + ||c|| + 1e-12).  The norm ratio keeps coordinates
    whose true gradient sits below the finite-difference noise floor from
    dominating the report, while any systematically wrong backward rule still
    shifts the ratio far above tolerance.  ``coord_limit`` caps the number of
    probed coordinates per parameter (seeded subsample) so that wide layers
    can be spot-checked without a full sweep.
    """
    if isinstance(params, dict):
        plist = [params[k] for k in sorted(params)]
    else:
        plist = list(params)

    for p in plist:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar objective")
    out.backward()
    analytic = [np.array(p.grad, copy=True) if p.grad is not None else np.zeros_like(p.data)
                for p in plist]

    worst = 0.0
    for p, ga in zip(plist, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if coord_limit is not None and n > coord_limit:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=coord_limit, replace=False)
        else:
            coords = range(n)
        ga_flat = ga.reshape(-1)
        a_vec, c_vec = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            c_vec.append((fp - fm) / (2.0 * h))
            a_vec.append(float(ga_flat[i]))
        a = np.array(a_vec)
        c = np.array(c_vec)
        err = float(np.linalg.norm(a - c)
                    / (np.linalg.norm(a) + np.linalg.norm(c) + 1e-12))
        if err > worst:
            worst = err
    return worst
