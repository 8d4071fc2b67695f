"""Local-linear profile estimator of the nonparametric curve.

For a fixed parametric block ``B`` the curve solves, at every evaluation point
``z``, the kernel-weighted estimating equation

    0 = sum_i sum_j delta_i K_h(Z_ij - z) (1, (Z_ij - z)/h)
        * L_jtheta{Y_i, X_i, theta_c(Z_i1), .., a0 + a1 (Z_ij - z), .., theta_c(Z_im)}

with the other positions held at the current curve ``theta_c``.  For the
Gaussian likelihood the score is affine in theta, so the solution is a
local-linear fit of the pseudo-response

    (u_ij - sum_{k != j} W_jk theta_c(Z_ik)) / W_jj,

where ``u = N' Sigma^-1 (Y - X beta)`` and ``W = N' Sigma^-1 N``.  A sweep
re-solves every evaluation point from the previous sweep's curve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .core_model import (GAUSSIAN, ClusterDataset, ModelParams, _exch, check_params,
                         loglik_from_residuals, precision_theta)
from .errors import (BandwidthSelectionError, ConvergenceError, ExtrapolationError,
                     NoDataInWindowError, SingularWindowError)

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-10
WIDEN_FACTOR = 1.5
MAX_WIDEN = 30


@dataclass(frozen=True, eq=False)
class ThetaEstimate:
    """Curve values and slopes on sorted evaluation points.

    Calling the estimate returns the solved value at an evaluation point and
    linear interpolation between evaluation points.
    """

    eval_points: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    bandwidth: float
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        ep = self.eval_points
        if z.size and (z.min() < ep[0] or z.max() > ep[-1]):
            raise ExtrapolationError(
                f"curve requested outside [{ep[0]:.6g}, {ep[-1]:.6g}]")
        idx = np.clip(np.searchsorted(ep, z), 0, ep.size - 1)
        exact = ep[idx] == z
        out = np.interp(z, ep, self.values)
        return np.where(exact, self.values[idx], out)

    def on_dataset(self, dataset: ClusterDataset) -> np.ndarray:
        """(n, m) curve values at every cluster's positions."""
        try:
            return self(dataset.z)
        except ExtrapolationError:
            ep = self.eval_points
            bad = np.where(((dataset.z < ep[0]) | (dataset.z > ep[-1])).any(1))[0]
            raise ExtrapolationError(
                f"curve undefined for clusters {bad.tolist()}", clusters=bad.tolist()) from None

    @classmethod
    def zeros(cls, eval_points, bandwidth=float("nan")) -> "ThetaEstimate":
        ep = np.asarray(eval_points, dtype=float)
        return cls(ep, np.zeros_like(ep), np.zeros_like(ep), bandwidth)


class SmootherPlan:
    """Evaluation points, window bandwidths and sort order for one (dataset, h).

    Everything that depends only on the covariate layout is computed once and
    reused by every sweep.  Evaluation points whose window is empty or
    singular at ``h`` get a locally widened bandwidth; these are reported in
    ``diagnostics``.
    """

    def __init__(self, dataset: ClusterDataset, h: float, grid_points: int = 101,
                 include_grid: bool = True, backend: Optional[str] = None):
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {h!r}")
        self.h = float(h)
        self.backend = backend
        obs = dataset.observed
        self.m = dataset.m
        self.n_active = int(obs.sum())
        if self.n_active == 0:
            raise NoDataInWindowError("no observed clusters")
        za = dataset.z[obs].ravel()
        self.order = np.argsort(za, kind="stable")
        self.zs = za[self.order]
        lo, hi = dataset.z_bounds
        pts = [dataset.z.ravel()]
        if include_grid and grid_points > 0:
            pts.append(np.linspace(lo, hi, grid_points))
        self.eval_points = np.unique(np.concatenate(pts))
        self.index = np.searchsorted(self.eval_points, dataset.z)
        self.active_index = self.index[obs]
        self.hs = np.full(self.eval_points.size, self.h)
        s, _ = kernels.local_moments(self.zs, np.zeros((self.zs.size, 1)), self.eval_points,
                                     self.hs, backend)
        widened = 0
        bad = ~_window_ok(s)
        tries = 0
        while bad.any() and tries < MAX_WIDEN:
            widened_idx = np.where(bad)[0]
            self.hs[widened_idx] *= WIDEN_FACTOR
            s_new, _ = kernels.local_moments(self.zs, np.zeros((self.zs.size, 1)),
                                             self.eval_points[widened_idx],
                                             self.hs[widened_idx], backend)
            bad[widened_idx] = ~_window_ok(s_new)
            tries += 1
        if bad.any():
            raise SingularWindowError("could not find a non-singular window by widening")
        widened = int((self.hs > self.h).sum())
        zmin, zmax = self.zs[0], self.zs[-1]
        edge = (self.eval_points < zmin + self.h) | (self.eval_points > zmax - self.h)
        self.diagnostics = {"widened_points": widened, "boundary_points": int(edge.sum())}

    def smooth(self, ys_active: np.ndarray):
        """Local-linear fit of active pseudo-responses (n1, m, k) at all eval points."""
        k = ys_active.shape[-1]
        flat = ys_active.reshape(-1, k)[self.order]
        s, t = kernels.local_moments(self.zs, flat, self.eval_points, self.hs, self.backend)
        a0, a1, _ = kernels.solve_moments(s, t)
        return a0, a1


    def weight_matrix(self, at: Optional[np.ndarray] = None) -> np.ndarray:
        """Dense local-linear weights, (len(at), n1 * m), in flattened (cluster, position)
        order, so that ``a0[at] = weights @ ys_active.reshape(-1)``."""
        at = np.arange(self.eval_points.size) if at is None else np.asarray(at)
        ze = self.eval_points[at][:, None]
        hs = self.hs[at][:, None]
        d = self.zs[None, :] - ze
        w = kernels.EPANECHNIKOV.scaled(d, hs)
        s0, s1, s2 = w.sum(1), (w * d).sum(1), (w * d * d).sum(1)
        lw = w * (s2[:, None] - s1[:, None] * d) / (s0 * s2 - s1 * s1)[:, None]
        out = np.empty_like(lw)
        out[:, self.order] = lw
        return out


def profile_operator(plan: SmootherPlan, W: np.ndarray) -> np.ndarray:
    """Exact profile fixed point as a linear map u -> curve at the observed positions.

    Returns the (n1 m) x (n1 m) matrix ``S`` with ``theta_obs = S u`` (both
    flattened in (cluster, position) order); solves the sweep fixed point
    ``theta = L D^-1 (u - O theta)`` directly.
    """
    idx = plan.active_index.reshape(-1)
    L = plan.weight_matrix(idx)
    P = idx.size
    n1 = P // plan.m
    dinv = 1.0 / np.diag(W)
    off = W - np.diag(np.diag(W))
    LD = L * np.tile(dinv, n1)[None, :]
    big_off = np.kron(np.eye(n1), off)
    return np.linalg.solve(np.eye(P) + LD @ big_off, LD)


def _window_ok(s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = (s[:, 0] * s[:, 2] - s[:, 1] ** 2) / (s[:, 0] * s[:, 2])
    return (s[:, 0] > 0) & (rel > SINGULAR_TOL)


def score_projection(v: np.ndarray, sigma2: float, rho: float, m: int, R: int) -> np.ndarray:
    """u = N' Sigma^-1 v for observation-scale arrays v of shape (n, q, k)."""
    a, c, _ = _exch(sigma2, rho, m * R)
    n, q, k = v.shape
    pos = v.reshape(n, m, R, k).sum(2)
    tot = v.sum(1)
    return a * (pos - c * R * tot[:, None, :])


def profile_columns(plan: SmootherPlan, u: np.ndarray, W: np.ndarray,
                    theta0: Optional[np.ndarray] = None, tol: float = 1e-8,
                    max_iter: int = 100):
    """Sweep the profile equations for several right-hand sides at once.

    ``u`` is (n1, m, k) for the observed clusters.  Returns curve values and
    slopes at every evaluation point (E, k) plus the sweep count, the final
    sup-change on the observed positions and a convergence flag.
    """
    n1, m, k = u.shape
    diag = np.diag(W)
    off = W - np.diag(diag)
    E = plan.eval_points.size
    a0 = np.zeros((E, k)) if theta0 is None else np.array(theta0, dtype=float).reshape(E, k)
    idx = plan.active_index
    a1 = np.zeros((E, k))
    change = np.inf
    sweeps = 0
    while sweeps < max_iter:
        th = a0[idx]
        pseudo = (u - np.einsum("jl,nlk->njk", off, th)) / diag[None, :, None]
        new0, a1 = plan.smooth(pseudo)
        change = float(np.max(np.abs(new0[idx] - th))) if th.size else 0.0
        a0 = new0
        sweeps += 1
        if change < tol:
            break
    return a0, a1, sweeps, change, change < tol


def theta_profile(dataset: ClusterDataset, params: ModelParams, h: float,
                  theta_init: Optional[ThetaEstimate] = None, *, grid_points: int = 101,
                  tol: float = 1e-8, max_iter: int = 100, strict: bool = True,
                  plan: Optional[SmootherPlan] = None) -> ThetaEstimate:
    """Fixed point of the profile sweeps for fixed ``params``.

    The stopping rule is the sup-change over the positions of observed
    clusters; the remaining evaluation points are smooth functions of those.
    With ``strict`` a non-converged run raises :class:`ConvergenceError`,
    otherwise it is returned with ``diagnostics['converged'] = False``.
    """
    params.validate(dataset.q)
    if plan is None:
        plan = SmootherPlan(dataset, h, grid_points)
    obs = dataset.observed
    v = (dataset.y[obs] - dataset.x[obs] @ params.beta)[:, :, None]
    u = score_projection(v, params.sigma2, params.rho, dataset.m, dataset.R)
    W = precision_theta(params.sigma2, params.rho, dataset.m, dataset.R)
    theta0 = None
    if theta_init is not None:
        theta0 = theta_init(plan.eval_points)
    a0, a1, sweeps, change, ok = profile_columns(plan, u, W, theta0, tol, max_iter)
    diag = dict(plan.diagnostics, sweeps=sweeps, sup_change=change, converged=ok)
    if not ok and strict:
        raise ConvergenceError(
            f"profile sweeps did not converge in {max_iter} sweeps (last change {change:.3g})",
            last_change=change)
    return ThetaEstimate(plan.eval_points, a0[:, 0].copy(), a1[:, 0].copy(), plan.h, diag)


def local_linear_solve(dataset: ClusterDataset, z: float, theta_current, params: ModelParams,
                       h: float, *, likelihood=GAUSSIAN, tol: float = 1e-10,
                       max_iter: int = 50) -> tuple[float, float]:
    """Solve the local estimating equation at a single point ``z``.

    Damped Newton on the two equations; for the Gaussian likelihood the first
    step is exact.  The equations are averaged over clusters so that ``tol``
    is independent of ``n``.
    """
    check_params(params.sigma2, params.rho, dataset.q)
    obs = np.where(dataset.observed)[0]
    zz = dataset.z[obs]
    d = zz - z
    w = kernels.EPANECHNIKOV.scaled(d, h)
    ii, jj = np.nonzero(w > 0)
    if ii.size == 0:
        raise NoDataInWindowError(f"no observed data within the window at z={z:.6g}")
    wv = w[ii, jj]
    dv = d[ii, jj]
    G = np.stack([np.ones_like(dv), dv / h], axis=1)
    Xd = np.stack([np.ones_like(dv), dv], axis=1)
    jac_shape = (G * wv[:, None]).T @ Xd
    det = np.linalg.det(jac_shape)
    if not abs(det) > SINGULAR_TOL * abs(jac_shape[0, 0] * jac_shape[1, 1]):
        raise SingularWindowError(f"singular local system at z={z:.6g}")
    rows = obs[ii]
    if callable(theta_current):
        th_base = np.asarray(theta_current(dataset.z[rows]), dtype=float)
    else:
        th_base = np.asarray(theta_current, dtype=float).reshape(dataset.n, dataset.m)[rows]
    th_base = np.array(th_base, copy=True)
    y, x = dataset.y[rows], dataset.x[rows]
    alpha = np.array([float(np.mean(th_base[np.arange(rows.size), jj])), 0.0])
    n = dataset.n
    for _ in range(max_iter):
        th = th_base.copy()
        th[np.arange(rows.size), jj] = alpha[0] + alpha[1] * dv
        der = likelihood.derivatives(y, x, th, params, dataset.R)
        score = der.L_theta[np.arange(rows.size), jj]
        curv = der.L_thth[jj, jj] if der.L_thth.ndim == 2 else der.L_thth[np.arange(rows.size), jj, jj]
        g = (G * (wv * score)[:, None]).sum(0) / n
        if np.max(np.abs(g)) < tol:
            break
        J = (G * (wv * curv)[:, None]).T @ Xd / n
        step = np.linalg.solve(J, g)
        lam = 1.0
        while lam > 1e-4:
            cand = alpha - lam * step
            th[np.arange(rows.size), jj] = cand[0] + cand[1] * dv
            der2 = likelihood.derivatives(y, x, th, params, dataset.R)
            g2 = (G * (wv * der2.L_theta[np.arange(rows.size), jj])[:, None]).sum(0) / n
            if np.max(np.abs(g2)) <= np.max(np.abs(g)):
                break
            lam *= 0.5
        alpha = cand
    return float(alpha[0]), float(alpha[1])


@dataclass(frozen=True)
class BandwidthChoice:
    h: float
    h_cv: float
    factor: float
    candidates: np.ndarray
    scores: np.ndarray
    failed: tuple

    def __float__(self):
        return self.h


def bandwidth_candidates(dataset: ClusterDataset, n_candidates: int = 25,
                         span: tuple = (0.05, 0.5)) -> np.ndarray:
    zo = dataset.z[dataset.observed]
    rng = float(zo.max() - zo.min())
    if n_candidates == 1:
        return np.array([span[0] * rng])
    return np.geomspace(span[0] * rng, span[1] * rng, n_candidates)


def undersmoothing_factor(n: int) -> float:
    return float(n) ** (-2.0 / 15.0)


def loco_cv_score(dataset: ClusterDataset, params: ModelParams, h: float,
                  theta_init: Optional[np.ndarray] = None, tol: float = 1e-8,
                  max_iter: int = 100):
    """Leave-one-cluster-out predictive loglikelihood at bandwidth ``h``.

    The held-out curve values come from the converged full-data local sums
    with the held-out cluster's own kernel contributions removed; the other
    clusters' pseudo-responses are kept at the full-data fixed point.
    Returns (score, fixed-point values) or raises SingularWindowError when a
    deleted window degenerates.
    """
    plan = SmootherPlan(dataset, h, include_grid=False)
    obs = dataset.observed
    m, R = dataset.m, dataset.R
    v = (dataset.y[obs] - dataset.x[obs] @ params.beta)[:, :, None]
    u = score_projection(v, params.sigma2, params.rho, dataset.m, dataset.R)
    W = precision_theta(params.sigma2, params.rho, m, R)
    a0, _, _, _, _ = profile_columns(plan, u, W, theta_init, tol, max_iter)
    idx = plan.active_index
    diag = np.diag(W)
    off = W - np.diag(diag)
    th = a0[idx]
    pseudo = ((u - np.einsum("jl,nlk->njk", off, th)) / diag[None, :, None])[:, :, 0]
    s, t = kernels.local_moments(plan.zs, pseudo.ravel()[plan.order], plan.eval_points,
                                 plan.hs, plan.backend)
    s_at = s[idx]                       # (n1, m, 3)
    t_at = t[idx][..., 0]               # (n1, m, 2)
    za = dataset.z[obs]
    hs_at = plan.hs[idx]
    d = za[:, None, :] - za[:, :, None]  # [i, j, l] = Z_il - Z_ij
    w = kernels.EPANECHNIKOV.scaled(d, hs_at[:, :, None])
    s_own = np.stack([w.sum(2), (w * d).sum(2), (w * d * d).sum(2)], axis=-1)
    t_own = np.stack([(w * pseudo[:, None, :]).sum(2),
                      (w * d * pseudo[:, None, :]).sum(2)], axis=-1)
    sd = (s_at - s_own).reshape(-1, 3)
    td = (t_at - t_own).reshape(-1, 2, 1)
    if not _window_ok(sd).all():
        raise SingularWindowError(f"held-out window degenerates at h={h:.6g}")
    held, _, _ = kernels.solve_moments(sd, td)
    held = held.reshape(za.shape)
    r = dataset.y[obs] - dataset.x[obs] @ params.beta - np.repeat(held, R, axis=1)
    score = float(loglik_from_residuals(r, params.sigma2, params.rho).sum())
    return score, a0


def select_bandwidth(dataset: ClusterDataset, params: ModelParams, *,
                     n_candidates: int = 25, span: tuple = (0.05, 0.5),
                     candidates=None, undersmooth: bool = True,
                     tol: float = 1e-8, max_iter: int = 100) -> BandwidthChoice:
    """Likelihood cross-validation over clusters, then undersmoothing.

    ``h_cv`` maximises the leave-one-cluster-out predictive loglikelihood over
    a log-spaced grid spanning ``span`` times the range of Z; the returned
    bandwidth is ``h_cv * n^(-2/15)`` with ``n`` the number of observed
    clusters.
    """
    n1 = dataset.n_observed
    if n1 < 10:
        raise BandwidthSelectionError(f"need at least 10 observed clusters, have {n1}")
    params.validate(dataset.q)
    cands = (np.asarray(candidates, dtype=float) if candidates is not None
             else bandwidth_candidates(dataset, n_candidates, span))
    scores = np.full(cands.size, -np.inf)
    failed = []
    warm = None
    # widest first so that warm starts move from smooth to rough curves
    for k in range(cands.size - 1, -1, -1):
        try:
            scores[k], a0 = loco_cv_score(dataset, params, cands[k], warm, tol, max_iter)
            warm = a0
        except (SingularWindowError, NoDataInWindowError):
            failed.append(float(cands[k]))
    if not np.isfinite(scores).any():
        raise BandwidthSelectionError("every bandwidth candidate failed", failed=failed)
    best = int(np.argmax(scores))
    h_cv = float(cands[best])
    factor = undersmoothing_factor(n1) if undersmooth else 1.0
    return BandwidthChoice(h_cv * factor, h_cv, factor, cands, scores, tuple(sorted(failed)))
