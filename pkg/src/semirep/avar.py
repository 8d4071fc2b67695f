"""Asymptotic variance of plug-in summaries.

The plug-in variance replaces every population object in the influence
expansion of ``kappa_semi`` by a kernel estimate on a grid:

* ``Omega(z) = sum_j f_j(z) E{delta L_jj | Z_j = z}`` (negative for the
  Gaussian model),
* ``qt(z1, z2) = sum_{j != k} f_jk(z1, z2) E{delta L_jk | Z_j = z1, Z_k = z2}``
  and ``Q(z1, z2) = qt(z1, z2) / Omega(z2)``,
* ``G`` solving ``G = Q - A(G)`` with ``A(G)(z1, z2) = int Q(z1, t) G(t, z2) dt``,
* ``theta_B`` solving ``b(z) + Omega(z) theta_B(z) + int qt(z, t) theta_B(t) dt = 0``
  with ``b(z) = sum_j f_j(z) E{delta L_jthetaB | Z_j = z}``.

Densities and conditional means use the variance-one Epanechnikov kernel with
a normal-reference bandwidth that is separate from the fit bandwidth.
Integral equations are collocated on the grid with trapezoid weights.

Variances are reported on the asymptotic scale, i.e. for ``sqrt(n) (kappa_hat - kappa)``.

The module also holds the bootstrap alternative.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .backfit import FitConfig, FitResult, fit as fit_model
from .core_model import (ClusterDataset, ModelParams, build_sigma_pair, expected_theta_cross,
                         observed_derivatives)
from .errors import (BootstrapUnstableError, DegenerateInformationError, IntegralEquationError,
                     NearSingularOmegaError, SemirepError, ValidationError)
from .summaries import (PiModel, ResponseFunctional, SummaryEstimate, as_functional,
                        fitted_curve, kappa_imputed, kappa_ipw, kappa_semi)

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
OMEGA_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Values on sorted nodes with linear interpolation (clamped at the ends)."""

    nodes: np.ndarray
    values: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        v = self.values
        if v.ndim == 1:
            return np.interp(z, self.nodes, v)
        flat = z.reshape(-1)
        out = np.column_stack([np.interp(flat, self.nodes, v[:, k]) for k in range(v.shape[1])])
        return out.reshape(z.shape + (v.shape[1],))


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Values on a tensor grid with bilinear interpolation (clamped at the ends)."""

    nodes1: np.ndarray
    nodes2: np.ndarray
    values: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    def rows(self, z1) -> np.ndarray:
        """Interpolate along the first argument: (len(z1), len(nodes2))."""
        z1 = np.asarray(z1, dtype=float).reshape(-1)
        nd = self.nodes1
        pos = np.clip(np.searchsorted(nd, z1, side="right") - 1, 0, nd.size - 2)
        t = np.clip((z1 - nd[pos]) / (nd[pos + 1] - nd[pos]), 0.0, 1.0)
        return (1 - t)[:, None] * self.values[pos] + t[:, None] * self.values[pos + 1]

    def __call__(self, z1, z2) -> np.ndarray:
        z1 = np.asarray(z1, dtype=float)
        z2 = np.asarray(z2, dtype=float)
        z1b, z2b = np.broadcast_arrays(z1, z2)
        r = self.rows(z1b.reshape(-1))
        nd = self.nodes2
        flat2 = z2b.reshape(-1)
        pos = np.clip(np.searchsorted(nd, flat2, side="right") - 1, 0, nd.size - 2)
        t = np.clip((flat2 - nd[pos]) / (nd[pos + 1] - nd[pos]), 0.0, 1.0)
        idx = np.arange(flat2.size)
        out = (1 - t) * r[idx, pos] + t * r[idx, pos + 1]
        return out.reshape(z1b.shape)


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    d = np.diff(nodes)
    w = np.zeros(nodes.size)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def _kmat(z: np.ndarray, nodes: np.ndarray, b: float) -> np.ndarray:
    """K_b(z - node) with shape z.shape + (G,)."""
    return kernels.EPANECHNIKOV.scaled(np.asarray(z)[..., None] - nodes, b)


@dataclass(frozen=True, eq=False)
class VarPieces:
    """Ingredients of the plug-in variance for one functional."""

    M1: np.ndarray
    M2: np.ndarray
    C1: Grid1D
    C2: Grid1D
    theta_B: Grid1D
    eps: np.ndarray          # (n1, p+2), observed clusters
    D: np.ndarray            # (n,), zero for missing clusters
    F: np.ndarray            # (n,)
    weight_mode: str
    info: dict = field(default_factory=dict, repr=False)

    def correction(self, delta: np.ndarray) -> np.ndarray:
        """Per-cluster ``M2' M1^-1 delta eps + delta D``."""
        out = np.zeros(self.F.shape[0])
        obs = delta.astype(bool)
        out[obs] = self.eps @ np.linalg.solve(self.M1, self.M2)
        return out + self.D


class PluginVariance:
    """Shared plug-in machinery for one (dataset, fit).

    Omega, G and theta_B depend only on the fit, so they are computed once
    and reused across functionals.
    """

    def __init__(self, dataset: ClusterDataset, fit: FitResult, *, grid_points: int = 41,
                 bandwidth: Optional[float] = None, trim: float = 0.01):
        self.dataset = dataset
        self.fit = fit
        self.params = fit.params
        self.theta_vals = fitted_curve(dataset, fit)
        obs = dataset.observed
        self.obs = obs
        self.n = dataset.n
        zall = dataset.z
        self.b = float(bandwidth) if bandwidth is not None else kernels.silverman_bandwidth(zall)
        lo, hi = dataset.z_bounds
        nodes = np.linspace(lo, hi, grid_points)
        dens = _kmat(zall, nodes, self.b).sum(0) / self.n           # (m, G)
        total = dens.sum(0)
        keep = np.where(total >= trim * total.max())[0]
        nodes = nodes[keep[0]:keep[-1] + 1]
        if nodes.size < 3:
            raise NearSingularOmegaError("fewer than three grid nodes survive density trimming")
        self.nodes = nodes
        self.w = trapezoid_weights(nodes)
        outside = (zall < nodes[0]) | (zall > nodes[-1])
        self.trimmed_mass = float(outside.mean())
        self.density = dens[:, keep[0]:keep[-1] + 1].T                # (G, m)
        self.der = observed_derivatives(dataset, self.theta_vals, self.params)
        self.zo = zall[obs]
        self.Ko = _kmat(self.zo, nodes, self.b)                       # (n1, m, G)
        self._omega = self._G = self._thetaB = None
        self._qt = None

    # -- population objects --------------------------------------------------------------
    def omega(self) -> Grid1D:
        if self._omega is None:
            Ljj = np.diag(self.der.L_thth)
            vals = np.einsum("j,njg->g", Ljj, self.Ko) / self.n
            if np.any(np.abs(vals) < OMEGA_TOL):
                bad = self.nodes[np.abs(vals) < OMEGA_TOL]
                raise NearSingularOmegaError(f"|Omega| below {OMEGA_TOL:g} at nodes {bad.tolist()}")
            self._omega = Grid1D(self.nodes, vals, {"bandwidth": self.b,
                                                    "trimmed_mass": self.trimmed_mass,
                                                    "density": self.density})
        return self._omega

    def cross_kernel(self) -> np.ndarray:
        """qt(z1, z2) on the grid."""
        if self._qt is None:
            m = self.dataset.m
            Lt = self.der.L_thth
            qt = np.zeros((self.nodes.size, self.nodes.size))
            for j in range(m):
                for k in range(m):
                    if j != k and Lt[j, k] != 0.0:
                        qt += Lt[j, k] * (self.Ko[:, j, :].T @ self.Ko[:, k, :])
            self._qt = qt / self.n
        return self._qt

    def solve_G(self) -> Grid2D:
        if self._G is None:
            om = self.omega().values
            qt = self.cross_kernel()
            Q = qt / om[None, :]
            lhs = np.eye(self.nodes.size) + Q * self.w[None, :]
            G = _solve_checked(lhs, Q, "G")
            resid = float(np.max(np.abs(G - Q + (Q * self.w[None, :]) @ G)))
            if not resid < RESIDUAL_TOL:
                raise IntegralEquationError(f"G equation residual {resid:.3g}", residual=resid)
            self._G = Grid2D(self.nodes, self.nodes, G, {"Q": Q, "residual": resid})
        return self._G

    def solve_theta_B(self) -> Grid1D:
        if self._thetaB is None:
            om = self.omega().values
            qt = self.cross_kernel()
            d = self.dataset
            cross = expected_theta_cross(d.x[self.obs], self.params.sigma2, self.params.rho,
                                         d.m, d.R)                           # (n1, m, p+2)
            b = np.einsum("njg,njc->gc", self.Ko, cross) / self.n
            lhs = np.diag(om) + qt * self.w[None, :]
            th = _solve_checked(lhs, -b, "theta_B")
            resid = float(np.max(np.abs(lhs @ th + b)))
            if not resid < RESIDUAL_TOL:
                raise IntegralEquationError(f"theta_B equation residual {resid:.3g}",
                                            residual=resid)
            self._thetaB = Grid1D(self.nodes, th, {"residual": resid, "b": b})
        return self._thetaB

    # -- per-functional pieces ---------------------------------------------------------
    def information(self):
        thB = self.solve_theta_B()
        eps = self.der.L_B + np.einsum("nj,njc->nc", self.der.L_theta, thB(self.zo))
        M1 = eps.T @ eps / self.n
        ev = np.linalg.eigvalsh(M1)
        if not ev.min() > 1e-12 * max(ev.max(), 1e-300):
            raise DegenerateInformationError(
                f"M1 is not positive definite (eigenvalues {ev.tolist()})")
        return eps, M1

    def pieces(self, functional, weight_mode: str = "standard") -> VarPieces:
        if weight_mode not in ("standard", "imputed"):
            raise ValidationError(f"unknown weight mode {weight_mode!r}")
        f = as_functional(functional)
        d = self.dataset
        om = self.omega()
        G = self.solve_G()
        thB = self.solve_theta_B()
        eps, M1 = self.information()
        th, p = self.theta_vals, self.params
        F = f.evaluate(d.x, d.z, th, p)
        FB = f.derivative_B(d.x, d.z, th, p)
        Fth = f.derivative_theta(d.x, d.z, th, p)
        w = np.ones(d.n) if weight_mode == "standard" else 1.0 - d.delta
        wF = w[:, None] * Fth                                            # (n, m)
        M2 = (w[:, None] * FB + np.einsum("nj,njc->nc", wF, thB(d.z))).sum(0) / d.n
        Kall = _kmat(d.z, self.nodes, self.b)                           # (n, m, G)
        C1 = -np.einsum("nj,njg->g", wF, Kall) / d.n / om.values
        zf = d.z.reshape(-1)
        C2 = (wF.reshape(-1) / om(zf)) @ G.rows(zf) / d.n
        C1g, C2g = Grid1D(self.nodes, C1), Grid1D(self.nodes, C2)
        D = np.zeros(d.n)
        D[self.obs] = np.sum(self.der.L_theta * (C1g(self.zo) + C2g(self.zo)), axis=1)
        return VarPieces(M1, M2, C1g, C2g, thB, eps, D, F, weight_mode,
                         {"M1_eigenvalues": np.linalg.eigvalsh(M1).tolist(),
                          "trimmed_mass": self.trimmed_mass, "bandwidth": self.b,
                          "G_residual": G.info["residual"],
                          "theta_B_residual": thB.info["residual"]})


def _solve_checked(lhs: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > 1e12:
        raise IntegralEquationError(f"{what} system is singular (condition number {cond:.3g})",
                                    residual=float("inf"))
    return np.linalg.solve(lhs, rhs)


# -- operation-level wrappers ------------------------------------------------------------

def estimate_omega(dataset: ClusterDataset, fit: FitResult, grid_points: int = 41,
                   **kw) -> Grid1D:
    return PluginVariance(dataset, fit, grid_points=grid_points, **kw).omega()


def solve_G(dataset: ClusterDataset, fit: FitResult, grid_points: int = 41, **kw) -> Grid2D:
    return PluginVariance(dataset, fit, grid_points=grid_points, **kw).solve_G()


def solve_theta_B(dataset: ClusterDataset, fit: FitResult, grid_points: int = 41,
                  **kw) -> Grid1D:
    return PluginVariance(dataset, fit, grid_points=grid_points, **kw).solve_theta_B()


def compute_var_pieces(dataset: ClusterDataset, fit: FitResult, functional,
                       weight_mode: str = "standard", *, machinery: Optional[PluginVariance] = None,
                       **kw) -> VarPieces:
    pv = machinery or PluginVariance(dataset, fit, **kw)
    return pv.pieces(functional, weight_mode)


def influence_terms(pieces: VarPieces, dataset: ClusterDataset, kappa: float,
                    base: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-cluster influence values; ``base`` defaults to ``F``."""
    base = pieces.F if base is None else base
    return base - kappa + pieces.correction(dataset.delta)


def plug_in_variance(pieces: VarPieces, dataset: ClusterDataset, mode: str = "semi",
                     rf: Optional[ResponseFunctional] = None) -> float:
    """Plug-in asymptotic variance.

    ``mode="semi"``: ``mean (F - kappa)^2 + M2' M1^-1 M2 + mean(delta D^2)``.
    ``mode="imputed"``: sample variance of the imputation influence term
    (``pieces`` must come from the ``"imputed"`` weight mode).
    """
    if mode == "semi":
        F = pieces.F
        kappa = F.mean()
        v = (np.mean((F - kappa) ** 2) + pieces.M2 @ np.linalg.solve(pieces.M1, pieces.M2)
             + np.mean(pieces.D ** 2))
        return float(max(v, 0.0))
    if mode == "imputed":
        if pieces.weight_mode != "imputed" or rf is None:
            raise ValidationError("imputed mode needs imputed-weight pieces and a response functional")
        g = np.zeros(dataset.n)
        obs = dataset.observed
        if obs.any():
            g[obs] = rf.response(dataset.y[obs])
        t = np.where(obs, g, pieces.F)
        psi = t + pieces.correction(dataset.delta)
        return float(np.mean((psi - psi.mean()) ** 2))
    raise ValidationError(f"unknown plug-in mode {mode!r}")


def cross_covariance(p1: VarPieces, p2: VarPieces, mode: str = "influence") -> float:
    """Asymptotic covariance of two plug-in estimates from the same fit.

    ``"influence"`` keeps every term of the two influence expansions;
    ``"corollary"`` keeps only ``mean (F1 - k1)(F2 - k2)``.
    """
    c = float(np.mean((p1.F - p1.F.mean()) * (p2.F - p2.F.mean())))
    if mode == "corollary":
        return c
    if mode != "influence":
        raise ValidationError(f"unknown cross-covariance mode {mode!r}")
    return c + float(p1.M2 @ np.linalg.solve(p1.M1, p2.M2)) + float(np.mean(p1.D * p2.D))


def plugin_estimate(dataset: ClusterDataset, fit: FitResult, functional, *,
                    machinery: Optional[PluginVariance] = None, **kw) -> SummaryEstimate:
    """``kappa_semi`` with its plug-in variance attached."""
    pv = machinery or PluginVariance(dataset, fit, **kw)
    est = kappa_semi(dataset, fit, functional)
    pieces = pv.pieces(functional)
    return replace(est.with_variance(plug_in_variance(pieces, dataset), "plugin"),
                   diagnostics=dict(est.diagnostics, **pieces.info))


# -- theta expansion ---------------------------------------------------------------------

def theta_influence(dataset: ClusterDataset, params: ModelParams, theta_true: Callable,
                    z: np.ndarray, h: float, pv: PluginVariance) -> np.ndarray:
    """Leading-order approximation of ``theta_hat(z, B) - theta(z)``.

    Uses the scores at the true curve and parameters, the fit kernel ``K_h``
    and the estimated ``Omega`` and ``G`` from ``pv``.
    """
    obs = dataset.observed
    zo = dataset.z[obs]
    der = observed_derivatives(dataset, theta_true(dataset.z), params)
    L = der.L_theta                                                   # (n1, m)
    z = np.asarray(z, dtype=float)
    om = pv.omega()(z)
    Kh = kernels.EPANECHNIKOV.scaled(zo[..., None] - z, h)           # (n1, m, Z)
    first = -np.einsum("nj,njz->z", L, Kh) / dataset.n / om
    Gz = pv.solve_G()(z[:, None], zo.reshape(1, -1))                  # (Z, n1 m)
    second = Gz @ L.reshape(-1) / dataset.n / om
    return first + second


# -- bootstrap -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap replicates of a (possibly vector) estimator.

    ``variance`` is on the asymptotic scale (``n`` times the replicate
    variance); ``raw_variance`` is the replicate variance itself.
    """

    estimate: np.ndarray
    replicates: np.ndarray
    variance: np.ndarray
    raw_variance: np.ndarray
    ci95: np.ndarray
    failures: int
    scheme: str
    seed: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate.tolist(), "variance": self.variance.tolist(),
                "raw_variance": self.raw_variance.tolist(), "ci95": self.ci95.tolist(),
                "failures": self.failures, "replicates": int(self.replicates.shape[0]),
                "scheme": self.scheme, "seed": self.seed}


def _with_bandwidth(config: FitConfig, bandwidth: Optional[float]) -> FitConfig:
    return config if bandwidth is None else replace(config, h=float(bandwidth))


def semi_estimator(functionals: Sequence, config: FitConfig,
                   bandwidth: Optional[float] = None) -> Callable:
    """Fit-then-summarise pipeline returning one ``kappa_semi`` per functional.

    With ``bandwidth`` every call fits at that fixed bandwidth (the bootstrap
    default: replicates reuse the original fit's bandwidth).
    """
    config = _with_bandwidth(config, bandwidth)

    def run(ds: ClusterDataset) -> np.ndarray:
        f = fit_model(ds, config)
        return np.array([kappa_semi(ds, f, fn).kappa for fn in functionals])
    return run


def imputed_estimator(rf: ResponseFunctional, config: FitConfig,
                      bandwidth: Optional[float] = None) -> Callable:
    config = _with_bandwidth(config, bandwidth)

    def run(ds: ClusterDataset) -> np.ndarray:
        return np.array([kappa_imputed(ds, fit_model(ds, config), rf).kappa])
    return run


def ipw_estimator(rf: ResponseFunctional, config: FitConfig, pi_model: PiModel,
                  bandwidth: Optional[float] = None) -> Callable:
    config = _with_bandwidth(config, bandwidth)

    def run(ds: ClusterDataset) -> np.ndarray:
        f = fit_model(ds, config)
        return np.array([kappa_ipw(ds, f, rf, pi_model.fit(ds)).kappa])
    return run


def _resample(dataset: ClusterDataset, rng: np.random.Generator, scheme: str,
              fit: Optional[FitResult]) -> ClusterDataset:
    n = dataset.n
    if scheme == "cluster":
        return dataset.take(rng.integers(0, n, size=n))
    # parametric: new responses from the fitted model at the observed design
    th = fitted_curve(dataset, fit)
    mu = dataset.x @ fit.params.beta + np.repeat(th, dataset.R, axis=1)
    sig, _ = build_sigma_pair(fit.params, dataset.q)
    chol = np.linalg.cholesky(sig)
    y = mu + rng.standard_normal((n, dataset.q)) @ chol.T
    return dataset.replace(y=y)


def bootstrap_variance(dataset: ClusterDataset, estimator: Callable, B: int = 200, *,
                       scheme: str = "cluster", seed: int = 0, threads: int = 1,
                       fit: Optional[FitResult] = None, max_failure_rate: float = 0.10
                       ) -> BootstrapResult:
    """Bootstrap variance of ``estimator(dataset) -> array``.

    ``scheme="cluster"`` resamples clusters with replacement;
    ``scheme="parametric"`` redraws responses from ``fit``.  Replicate ``b``
    uses the ``b``-th child of ``SeedSequence(seed)`` so results do not depend
    on ``threads``.  Failed replicates are dropped; more than
    ``max_failure_rate`` failures raise :class:`BootstrapUnstableError`.
    """
    if B < 50:
        raise ValidationError(f"need at least 50 bootstrap replicates, got {B}")
    if scheme not in ("cluster", "parametric"):
        raise ValidationError(f"unknown bootstrap scheme {scheme!r}")
    if scheme == "parametric" and fit is None:
        raise ValidationError("parametric bootstrap needs the fitted model")
    est = np.atleast_1d(np.asarray(estimator(dataset), dtype=float))
    children = np.random.SeedSequence(seed).spawn(B)

    def one(ss):
        rng = np.random.default_rng(ss)
        try:
            ds = _resample(dataset, rng, scheme, fit)
            return np.atleast_1d(np.asarray(estimator(ds), dtype=float))
        except SemirepError as exc:
            log.debug("bootstrap replicate failed: %s", exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(ss) for ss in children]
    good = [r for r in results if r is not None and np.all(np.isfinite(r))]
    failures = B - len(good)
    if failures > max_failure_rate * B:
        raise BootstrapUnstableError(f"{failures} of {B} bootstrap replicates failed")
    reps = np.vstack(good)
    raw = reps.var(axis=0, ddof=1)
    ci = np.percentile(reps, [2.5, 97.5], axis=0).T
    return BootstrapResult(est, reps, dataset.n * raw, raw, ci, failures, scheme, int(seed))
