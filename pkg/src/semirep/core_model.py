"""Gaussian partially linear repeated-measures model.

A cluster holds ``q = m * R`` observations.  Observation ``(j - 1) * R + k``
belongs to smoothing position ``j``, so ``theta(Z_j)`` enters ``R``
consecutive responses:

    Y = X beta + N theta(Z) + eps,   eps ~ Normal(0, Sigma),
    Sigma = sigma2 * ((1 - rho) I + rho J).

The parametric block ``B`` is ``(beta, sigma2, rho)``; every derivative with
respect to ``B`` is laid out in that order (length ``p + 2``).

Everything here is vectorised over clusters: arrays carry a leading cluster
axis of length ``n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolationError, InvalidParamsError, ValidationError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    sigma2: float
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2, self.rho]])

    @classmethod
    def from_vector(cls, v) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:-2].copy(), v[-2], v[-1])

    def validate(self, q: int) -> "ModelParams":
        check_params(self.sigma2, self.rho, q)
        return self


def rho_bounds(q: int) -> tuple[float, float]:
    """Open interval of correlations giving a positive-definite Sigma."""
    lo = -1.0 / (q - 1) if q > 1 else -np.inf
    return lo, 1.0


def check_params(sigma2: float, rho: float, q: int) -> None:
    lo, hi = rho_bounds(q)
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise InvalidParamsError(f"sigma2 must be positive, got {sigma2!r}")
    if not (lo < rho < hi):
        raise InvalidParamsError(
            f"rho={rho!r} outside the positive-definite region ({lo:.6g}, {hi:.6g}) for q={q}")


@dataclass(frozen=True)
class Cluster:
    y: Optional[np.ndarray]
    x: np.ndarray
    z: np.ndarray
    delta: int


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    """Balanced clustered data.

    Parameters
    ----------
    y : (n, q) array
        Responses; rows of clusters with ``delta == 0`` are NaN and never read.
    x : (n, q, p) array
        Parametric design.  Must not contain an intercept column.
    z : (n, m) array
        Smoothing covariate, one value per position.
    delta : (n,) array of 0/1
        Cluster-level response indicator.
    R : int
        Repeats per position.
    z_bounds : (lo, hi), optional
        Known support of ``z``; defaults to the observed range.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    delta: np.ndarray
    R: int
    z_bounds: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n, m = z.shape
        if x.ndim == 2:
            x = x[:, :, None]
        delta = np.asarray(self.delta, dtype=np.int8).reshape(-1)
        R = int(self.R)
        q = m * R
        if x.shape[:2] != (n, q):
            raise ValidationError(f"x has shape {x.shape}, expected ({n}, {q}, p)")
        if delta.shape != (n,) or not np.isin(delta, (0, 1)).all():
            raise ValidationError("delta must be a 0/1 vector with one entry per cluster")
        y = np.array(self.y, dtype=float, copy=True).reshape(n, q)
        y[delta == 0] = np.nan
        if not np.isfinite(y[delta == 1]).all():
            raise ValidationError("observed clusters must have finite responses")
        if not (np.isfinite(x).all() and np.isfinite(z).all()):
            raise ValidationError("x and z must be finite")
        bounds = self.z_bounds
        if bounds is None:
            bounds = (float(z.min()), float(z.max()))
        else:
            bounds = (float(bounds[0]), float(bounds[1]))
            if z.min() < bounds[0] or z.max() > bounds[1]:
                raise ValidationError(f"z values fall outside the declared support {bounds}")
        for name, arr in (("y", y), ("x", x), ("z", z), ("delta", delta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "z_bounds", bounds)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    @property
    def q(self) -> int:
        return self.m * self.R

    @property
    def p(self) -> int:
        return self.x.shape[2]

    @property
    def observed(self) -> np.ndarray:
        return self.delta == 1

    @property
    def n_observed(self) -> int:
        return int(self.delta.sum())

    def cluster(self, i: int) -> Cluster:
        y = self.y[i] if self.delta[i] == 1 else None
        return Cluster(y, self.x[i], self.z[i], int(self.delta[i]))

    @property
    def clusters(self) -> list:
        return [self.cluster(i) for i in range(self.n)]

    def take(self, index: Sequence[int]) -> "ClusterDataset":
        """Clusters ``index`` in that order (repeats allowed)."""
        idx = np.asarray(index, dtype=int)
        return ClusterDataset(self.y[idx], self.x[idx], self.z[idx], self.delta[idx],
                              self.R, self.z_bounds, dict(self.meta))

    def replace(self, **changes) -> "ClusterDataset":
        fields = dict(y=self.y, x=self.x, z=self.z, delta=self.delta, R=self.R,
                      z_bounds=self.z_bounds, meta=dict(self.meta))
        fields.update(changes)
        return ClusterDataset(**fields)

    def expand_z(self) -> np.ndarray:
        """(n, q) smoothing covariate on the observation scale."""
        return np.repeat(self.z, self.R, axis=1)


def incidence_matrix(m: int, R: int) -> np.ndarray:
    """(m*R, m) 0/1 matrix mapping position values to observations."""
    return np.repeat(np.eye(m), R, axis=0)


def expand_theta(theta_vals: np.ndarray, R: int) -> np.ndarray:
    return np.repeat(theta_vals, R, axis=-1)


def _exch(sigma2: float, rho: float, q: int) -> tuple[float, float, float]:
    """Scalars of the closed-form inverse: Sigma^-1 = a (I - c J)."""
    a = 1.0 / (sigma2 * (1.0 - rho))
    denom = 1.0 + (q - 1) * rho
    return a, rho / denom, 1.0 / denom ** 2


def build_sigma_pair(params: ModelParams, q: int) -> tuple[np.ndarray, np.ndarray]:
    check_params(params.sigma2, params.rho, q)
    s2, rho = params.sigma2, params.rho
    sigma = s2 * ((1.0 - rho) * np.eye(q) + rho * np.ones((q, q)))
    a, c, _ = _exch(s2, rho, q)
    sigma_inv = a * (np.eye(q) - c * np.ones((q, q)))
    return sigma, sigma_inv


def logdet_sigma(sigma2: float, rho: float, q: int) -> float:
    return (q - 1) * np.log(sigma2 * (1.0 - rho)) + np.log(sigma2 * (1.0 + (q - 1) * rho))


def precision_theta(sigma2: float, rho: float, m: int, R: int) -> np.ndarray:
    """N' Sigma^-1 N, the (m, m) negative theta-curvature."""
    a, c, _ = _exch(sigma2, rho, m * R)
    return a * (R * np.eye(m) - c * R * R * np.ones((m, m)))


def residuals(y, x, theta_vals, beta, R) -> np.ndarray:
    return y - x @ beta - expand_theta(theta_vals, R)


def loglik_from_residuals(r: np.ndarray, sigma2: float, rho: float) -> np.ndarray:
    q = r.shape[-1]
    a, c, _ = _exch(sigma2, rho, q)
    s = r.sum(-1)
    quad = a * ((r * r).sum(-1) - c * s * s)
    return -0.5 * q * LOG_2PI - 0.5 * logdet_sigma(sigma2, rho, q) - 0.5 * quad


@dataclass(frozen=True)
class DerivativeBundle:
    """Loglikelihood derivatives; leading axis over clusters when batched.

    ``L_B`` (.., p+2), ``L_theta`` (.., m), ``L_thth`` (m, m), ``L_thB`` (.., m, p+2).
    """

    L_B: np.ndarray
    L_theta: np.ndarray
    L_thth: np.ndarray
    L_thB: np.ndarray


def derivatives_from_residuals(r, x, sigma2, rho, m, R) -> DerivativeBundle:
    n, q = r.shape
    p = x.shape[-1]
    a, c, dc = _exch(sigma2, rho, q)
    s = r.sum(-1)
    s_pos = r.reshape(n, m, R).sum(-1)
    L_theta = a * (s_pos - c * R * s[:, None])

    xs = x.sum(1)
    L_beta = a * (np.einsum("nqp,nq->np", x, r) - c * xs * s[:, None])
    S1 = (r * r).sum(-1)
    quad = a * (S1 - c * s * s)
    L_s2 = -0.5 * q / sigma2 + 0.5 * quad / sigma2
    dquad = (S1 - c * s * s - dc * (1.0 - rho) * s * s) / (sigma2 * (1.0 - rho) ** 2)
    L_rho = 0.5 * (q - 1) / (1.0 - rho) - 0.5 * (q - 1) / (1.0 + (q - 1) * rho) - 0.5 * dquad
    L_B = np.concatenate([L_beta, L_s2[:, None], L_rho[:, None]], axis=1)

    x_pos = x.reshape(n, m, R, p).sum(2)
    L_thB = np.empty((n, m, p + 2))
    L_thB[:, :, :p] = -a * (x_pos - c * R * xs[:, None, :])
    L_thB[:, :, p] = -L_theta / sigma2
    L_thB[:, :, p + 1] = L_theta / (1.0 - rho) - a * dc * R * s[:, None]
    return DerivativeBundle(L_B, L_theta, -precision_theta(sigma2, rho, m, R), L_thB)


def expected_theta_cross(x, sigma2, rho, m, R) -> np.ndarray:
    """E{L_thB | X, Z} under the model: only the beta block is non-zero."""
    n, q, p = x.shape
    a, c, _ = _exch(sigma2, rho, q)
    out = np.zeros((n, m, p + 2))
    xs = x.sum(1)
    out[:, :, :p] = -a * (x.reshape(n, m, R, p).sum(2) - c * R * xs[:, None, :])
    return out


class GaussianExchangeable:
    """Likelihood instance for Gaussian responses with exchangeable Sigma.

    The smoother and the variance machinery only talk to a likelihood through
    ``loglik`` and ``derivatives``; other instances can implement the same two
    methods on batched arrays.
    """

    name = "gaussian-exchangeable"

    def loglik(self, y, x, theta_vals, params: ModelParams, R: int) -> np.ndarray:
        r = residuals(y, x, theta_vals, params.beta, R)
        return loglik_from_residuals(r, params.sigma2, params.rho)

    def derivatives(self, y, x, theta_vals, params: ModelParams, R: int) -> DerivativeBundle:
        m = theta_vals.shape[-1]
        r = residuals(y, x, theta_vals, params.beta, R)
        return derivatives_from_residuals(r, x, params.sigma2, params.rho, m, R)


GAUSSIAN = GaussianExchangeable()


def _single(cluster: Cluster, theta_vals, params: ModelParams):
    if cluster.delta != 1 or cluster.y is None:
        raise ContractViolationError("likelihood evaluated on a cluster with a missing response")
    theta_vals = np.asarray(theta_vals, dtype=float).reshape(1, -1)
    m = theta_vals.shape[1]
    q = cluster.x.shape[0]
    check_params(params.sigma2, params.rho, q)
    return cluster.y[None, :], cluster.x[None], theta_vals, q // m


def cluster_loglik(cluster: Cluster, theta_vals, params: ModelParams) -> float:
    y, x, th, R = _single(cluster, theta_vals, params)
    return float(GAUSSIAN.loglik(y, x, th, params, R)[0])


def cluster_derivatives(cluster: Cluster, theta_vals, params: ModelParams) -> DerivativeBundle:
    y, x, th, R = _single(cluster, theta_vals, params)
    d = GAUSSIAN.derivatives(y, x, th, params, R)
    return DerivativeBundle(d.L_B[0], d.L_theta[0], d.L_thth, d.L_thB[0])


def observed_derivatives(dataset: ClusterDataset, theta_vals: np.ndarray,
                         params: ModelParams) -> DerivativeBundle:
    """Derivatives for the observed clusters only, in dataset order."""
    obs = dataset.observed
    return GAUSSIAN.derivatives(dataset.y[obs], dataset.x[obs], theta_vals[obs], params, dataset.R)
