"""Kernel definitions and the backend for kernel-weighted sums.

The compiled extension ``_ckernels`` is used when importable; otherwise the
numpy implementation in ``_pykernels`` is.  Set ``SEMIREP_PURE_PYTHON=1`` to
force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _pykernels

if os.environ.get("SEMIREP_PURE_PYTHON"):
    _backend = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _backend
        BACKEND = "cython"
    except ImportError:  # extension not built
        _backend = _pykernels
        BACKEND = "python"

SQRT5 = float(np.sqrt(5.0))


@dataclass(frozen=True)
class Kernel:
    name: str
    support: float
    rule: Callable[[np.ndarray], np.ndarray]

    def __call__(self, u):
        return self.rule(np.asarray(u, dtype=float))

    def scaled(self, u, h):
        """K_h(u) = K(u / h) / h."""
        return self.rule(np.asarray(u, dtype=float) / h) / h


def _epanechnikov_var1(u):
    return np.where(np.abs(u) < SQRT5, 0.75 / SQRT5 * (1.0 - u * u / 5.0), 0.0)


EPANECHNIKOV = Kernel("epanechnikov-var1", SQRT5, _epanechnikov_var1)


def kernel_eval(u):
    """Variance-one Epanechnikov density."""
    return EPANECHNIKOV(u)


def get_backend(name: str | None = None):
    if name is None:
        return _backend
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def local_moments(zs, ys, ze, hs, backend=None):
    """Kernel moments at each evaluation point.

    ``zs`` must be sorted.  Returns ``s`` (E, 3) with sum_i w_i d_i^r for
    r = 0, 1, 2 and ``t`` (E, 2, k) with sum_i w_i d_i^r y_i for r = 0, 1, where
    ``d_i = zs_i - ze_e`` and ``w_i = K_h(d_i)``.
    """
    b = get_backend(backend)
    ys = np.ascontiguousarray(ys, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    return b.local_moments(np.ascontiguousarray(zs, dtype=float), ys,
                           np.ascontiguousarray(ze, dtype=float),
                           np.ascontiguousarray(np.broadcast_to(hs, np.shape(ze)), dtype=float))


def kernel_sums(zs, vals, ze, h, backend=None):
    """sum_i K_h(zs_i - ze_e) vals_i for every evaluation point; ``zs`` sorted."""
    b = get_backend(backend)
    vals = np.ascontiguousarray(vals, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    out = b.kernel_sums(np.ascontiguousarray(zs, dtype=float), vals,
                        np.ascontiguousarray(ze, dtype=float), float(h))
    return out[:, 0] if squeeze else out


def solve_moments(s, t):
    """Local-linear intercept and slope from kernel moments.

    Returns (a0, a1, det) with a0, a1 of shape (E, k); det is the 2x2
    determinant normalised by s0 * s2 (0 means singular, NaN means empty).
    """
    det = s[:, 0] * s[:, 2] - s[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        a0 = (s[:, 2, None] * t[:, 0] - s[:, 1, None] * t[:, 1]) / det[:, None]
        a1 = (s[:, 0, None] * t[:, 1] - s[:, 1, None] * t[:, 0]) / det[:, None]
        rel = det / (s[:, 0] * s[:, 2])
    return a0, a1, rel


def silverman_bandwidth(x) -> float:
    """Normal-reference rule 1.06 min(sd, IQR/1.34) N^(-1/5)."""
    x = np.asarray(x, dtype=float).ravel()
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return float(1.06 * spread * x.size ** (-0.2))
