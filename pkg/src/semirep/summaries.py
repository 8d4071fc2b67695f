"""Population-level summaries of a fitted model.

A :class:`Functional` maps one cluster's covariates, curve values and ``B`` to
a scalar ``F``; the plug-in estimate is the average of ``F`` over all
clusters.  :class:`ResponseFunctional` pairs a response summary ``G(Y)`` with
``F = E{G(Y) | X, Z}`` for the two missing-data estimators.

All functionals are vectorised: ``evaluate(x, z, theta, params)`` takes
``x`` (n, q, p), ``z`` (n, m), ``theta`` (n, m) and returns (n,).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .backfit import FitResult
from .core_model import ClusterDataset, ModelParams, build_sigma_pair
from .errors import (ContractViolationError, RankDeficiencyError, SeparationError,
                     ValidationError)

log = logging.getLogger(__name__)

Z975 = 1.959963984540054
PI_CLIP = 1e-6
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _phi(u):
    return np.exp(-0.5 * u * u) / _SQRT_2PI


def fd_step(arg):
    return 1e-6 * (1.0 + np.abs(arg))


# ---------------------------------------------------------------------------
# functionals

@dataclass(frozen=True, eq=False)
class Functional:
    """Smooth summary ``F(X, Z, theta(Z_1..Z_m), B)`` of one cluster.

    Parameters
    ----------
    name : str
    rule : callable
        ``rule(x, z, theta, params) -> (n,)``.
    grad_B, grad_theta : callable, optional
        Analytic derivatives returning (n, p+2) and (n, m).  Missing ones are
        replaced by central differences with step ``1e-6 (1 + |arg|)``.
    fixed : mapping of column index -> value
        Columns of X overridden before every evaluation.
    """

    name: str
    rule: Callable
    grad_B: Optional[Callable] = None
    grad_theta: Optional[Callable] = None
    fixed: Mapping[int, float] = field(default_factory=dict)

    def with_fixed(self, fixed: Mapping[int, float]) -> "Functional":
        return replace(self, fixed={int(k): float(v) for k, v in dict(fixed).items()})

    def _prep(self, x):
        if not self.fixed:
            return x
        x = np.array(x, dtype=float, copy=True)
        for col, val in self.fixed.items():
            if not -x.shape[-1] <= col < x.shape[-1]:
                raise ValidationError(f"fixed column {col} out of range for p={x.shape[-1]}")
            x[..., col] = val
        return x

    def evaluate(self, x, z, theta, params: ModelParams) -> np.ndarray:
        return np.asarray(self.rule(self._prep(x), z, theta, params), dtype=float)

    def derivative_B(self, x, z, theta, params: ModelParams) -> np.ndarray:
        xf = self._prep(x)
        if self.grad_B is not None:
            return np.asarray(self.grad_B(xf, z, theta, params), dtype=float)
        v = params.vector()
        out = np.empty((xf.shape[0], v.size))
        for k in range(v.size):
            e = np.zeros_like(v)
            e[k] = fd_step(v[k])
            hi = self.rule(xf, z, theta, ModelParams.from_vector(v + e))
            lo = self.rule(xf, z, theta, ModelParams.from_vector(v - e))
            out[:, k] = (hi - lo) / (2 * e[k])
        return out

    def derivative_theta(self, x, z, theta, params: ModelParams) -> np.ndarray:
        xf = self._prep(x)
        if self.grad_theta is not None:
            return np.asarray(self.grad_theta(xf, z, theta, params), dtype=float)
        theta = np.asarray(theta, dtype=float)
        out = np.empty(theta.shape)
        for j in range(theta.shape[1]):
            step = fd_step(theta[:, j])
            tp, tm = theta.copy(), theta.copy()
            tp[:, j] += step
            tm[:, j] -= step
            out[:, j] = (self.rule(xf, z, tp, params) - self.rule(xf, z, tm, params)) / (2 * step)
        return out

    def check_derivatives(self, x, z, theta, params: ModelParams, rtol: float = 1e-5) -> float:
        """Largest relative discrepancy between analytic and numeric derivatives."""
        worst = 0.0
        numeric = replace(self, grad_B=None, grad_theta=None)
        pairs = []
        if self.grad_B is not None:
            pairs.append((self.derivative_B(x, z, theta, params),
                          numeric.derivative_B(x, z, theta, params)))
        if self.grad_theta is not None:
            pairs.append((self.derivative_theta(x, z, theta, params),
                          numeric.derivative_theta(x, z, theta, params)))
        for a, b in pairs:
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))))
        if worst > rtol:
            raise ValidationError(
                f"analytic derivatives of functional {self.name!r} disagree with finite "
                f"differences (relative error {worst:.3g})")
        return worst


def _mu(x, theta, params):
    """Conditional mean per observation, (n, q)."""
    R = x.shape[1] // theta.shape[1]
    return x @ params.beta + np.repeat(theta, R, axis=1)


def _pos_mean(v, m):
    n, q = v.shape
    return v.reshape(n, m, q // m).sum(2) / q


def survival_functional(c: float, fixed: Optional[Mapping[int, float]] = None) -> Functional:
    """``F = q^-1 sum_o Phi{(x_o' beta + theta(z_o) - c) / sigma}``."""
    c = float(c)

    def rule(x, z, theta, params):
        return ndtr((_mu(x, theta, params) - c) / np.sqrt(params.sigma2)).mean(1)

    def gB(x, z, theta, params):
        s = np.sqrt(params.sigma2)
        u = (_mu(x, theta, params) - c) / s
        dens = _phi(u)
        q = x.shape[1]
        out = np.zeros((x.shape[0], params.p + 2))
        out[:, :params.p] = np.einsum("nq,nqp->np", dens, x) / (q * s)
        out[:, params.p] = -(dens * u).mean(1) / (2.0 * params.sigma2)
        return out

    def gth(x, z, theta, params):
        s = np.sqrt(params.sigma2)
        dens = _phi((_mu(x, theta, params) - c) / s)
        return _pos_mean(dens, theta.shape[1]) / s

    return Functional(f"survival(c={c!r})", rule, gB, gth, dict(fixed or {}))


def mean_functional(fixed=None) -> Functional:
    """``F = E(mean of Y | X, Z)``."""

    def rule(x, z, theta, params):
        return _mu(x, theta, params).mean(1)

    def gB(x, z, theta, params):
        out = np.zeros((x.shape[0], params.p + 2))
        out[:, :params.p] = x.mean(1)
        return out

    def gth(x, z, theta, params):
        return np.full(theta.shape, 1.0 / theta.shape[1])

    return Functional("mean", rule, gB, gth, dict(fixed or {}))


def second_moment_functional(fixed=None) -> Functional:
    """``F = E(mean of Y^2 | X, Z) = mean(mu^2) + sigma2``."""

    def rule(x, z, theta, params):
        return (_mu(x, theta, params) ** 2).mean(1) + params.sigma2

    def gB(x, z, theta, params):
        mu = _mu(x, theta, params)
        out = np.zeros((x.shape[0], params.p + 2))
        out[:, :params.p] = 2 * np.einsum("nq,nqp->np", mu, x) / x.shape[1]
        out[:, params.p] = 1.0
        return out

    def gth(x, z, theta, params):
        return 2 * _pos_mean(_mu(x, theta, params), theta.shape[1])

    return Functional("second-moment", rule, gB, gth, dict(fixed or {}))


def constant_functional(value: float = 1.0) -> Functional:
    value = float(value)

    def rule(x, z, theta, params):
        return np.full(x.shape[0], value)

    def gB(x, z, theta, params):
        return np.zeros((x.shape[0], params.p + 2))

    def gth(x, z, theta, params):
        return np.zeros(theta.shape)

    return Functional(f"constant({value!r})", rule, gB, gth)


def covariate_functional(col: int = 0) -> Functional:
    """Cluster mean of one X column; ignores the fit."""

    def rule(x, z, theta, params):
        return x[..., col].mean(1)

    def gB(x, z, theta, params):
        return np.zeros((x.shape[0], params.p + 2))

    def gth(x, z, theta, params):
        return np.zeros(theta.shape)

    return Functional(f"covariate({col})", rule, gB, gth)


def _probe_inputs(p: int = 2, m: int = 2, R: int = 2, n: int = 7):
    rng = np.random.default_rng(20240611)
    x = rng.uniform(size=(n, m * R, p))
    z = rng.uniform(size=(n, m))
    theta = rng.normal(size=(n, m))
    params = ModelParams(rng.normal(size=p), 1.3, 0.3)
    return x, z, theta, params


_REGISTRY: dict = {}


def register(name: str, factory: Callable, *, check: bool = True) -> None:
    """Register a functional factory under ``name``; analytic derivatives of
    the produced functional are verified against finite differences."""
    if check:
        probe = factory(**({"c": 0.7} if name in ("survival", "indicator-above-c") else {}))
        if isinstance(probe, ResponseFunctional):
            probe = probe.functional
        probe.check_derivatives(*_probe_inputs())
    _REGISTRY[name] = factory


def get_functional(name: str, **kwargs):
    """Look up a registered functional (or response functional) by name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValidationError(
            f"unknown functional {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def registered() -> list:
    return sorted(_REGISTRY)


# ---------------------------------------------------------------------------
# response functionals

@dataclass(frozen=True, eq=False)
class ResponseFunctional:
    """Response summary ``G(Y)`` with its model-implied conditional mean.

    ``functional`` is ``F = E{G(Y) | X, Z}``.  When it is not known in closed
    form, use :meth:`monte_carlo` which integrates ``G`` against the fitted
    Gaussian law with a fixed seed.
    """

    name: str
    G: Callable
    functional: Functional
    exact: bool = True

    def response(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.G(y), dtype=float)

    @classmethod
    def monte_carlo(cls, name: str, G: Callable, draws: int = 10_000,
                    seed: int = 0) -> "ResponseFunctional":
        def rule(x, z, theta, params):
            mu = _mu(x, theta, params)
            q = mu.shape[1]
            sig, _ = build_sigma_pair(params, q)
            chol = np.linalg.cholesky(sig)
            eps = np.random.default_rng(seed).standard_normal((draws, q)) @ chol.T
            return np.array([np.mean(G(mi[None, :] + eps)) for mi in mu])

        return cls(name, G, Functional(f"E[{name}]", rule), exact=False)


def _mean_G(y):
    return np.asarray(y, dtype=float).mean(-1)


def _second_G(y):
    return (np.asarray(y, dtype=float) ** 2).mean(-1)


def mean_response() -> ResponseFunctional:
    return ResponseFunctional("mean", _mean_G, mean_functional())


def second_moment_response() -> ResponseFunctional:
    return ResponseFunctional("second-moment", _second_G, second_moment_functional())


def indicator_response(c: float, fixed=None) -> ResponseFunctional:
    c = float(c)

    def G(y):
        return (np.asarray(y, dtype=float) > c).mean(-1)

    return ResponseFunctional(f"indicator-above-c(c={c!r})", G, survival_functional(c, fixed))


register("survival", survival_functional)
register("mean", mean_response)
register("second-moment", second_moment_response)
register("indicator-above-c", indicator_response)


def as_functional(obj) -> Functional:
    return obj.functional if isinstance(obj, ResponseFunctional) else obj


# ---------------------------------------------------------------------------
# estimates

@dataclass(frozen=True, eq=False)
class SummaryEstimate:
    """A summary estimate.

    ``variance`` is on the asymptotic scale (the variance of
    ``sqrt(n) (kappa_hat - kappa)``), so ``ci95 = kappa +- 1.96 sqrt(variance / n)``.
    ``terms`` holds the per-cluster contributions whose average is ``kappa``.
    """

    kappa: float
    method: str
    n_used: int
    variance: Optional[float] = None
    variance_source: Optional[str] = None
    terms: Optional[np.ndarray] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.variance is not None and not self.variance >= 0:
            raise ContractViolationError(f"negative variance {self.variance!r}")

    @property
    def ci95(self) -> Optional[tuple]:
        if self.variance is None:
            return None
        half = Z975 * np.sqrt(self.variance / self.n_used)
        return (self.kappa - half, self.kappa + half)

    @property
    def se(self) -> Optional[float]:
        return None if self.variance is None else float(np.sqrt(self.variance / self.n_used))

    def with_variance(self, variance: float, source: str) -> "SummaryEstimate":
        return replace(self, variance=float(variance), variance_source=source)

    def to_dict(self) -> dict:
        ci = self.ci95
        return {"kappa": self.kappa, "variance": self.variance, "se": self.se,
                "ci95": None if ci is None else list(ci), "method": self.method,
                "variance_source": self.variance_source, "n_used": self.n_used}


def fitted_curve(dataset: ClusterDataset, fit: FitResult) -> np.ndarray:
    """(n, m) curve values at every cluster, observed or not."""
    return fit.theta.on_dataset(dataset)


def functional_terms(dataset: ClusterDataset, fit: FitResult, functional) -> np.ndarray:
    f = as_functional(functional)
    theta = fitted_curve(dataset, fit)
    return f.evaluate(dataset.x, dataset.z, theta, fit.params)


def kappa_semi(dataset: ClusterDataset, fit: FitResult, functional) -> SummaryEstimate:
    """Plug-in estimate: average of F over all clusters (missing responses included)."""
    terms = functional_terms(dataset, fit, functional)
    if not np.isfinite(terms).all():
        bad = np.where(~np.isfinite(terms))[0].tolist()
        raise ValidationError(f"functional is not finite at clusters {bad}")
    return SummaryEstimate(float(terms.mean()), "semi", dataset.n, terms=terms,
                           diagnostics={"functional": as_functional(functional).name})


def month_mask(a: float, month_col: int, knee_col: Optional[int] = None,
               knot: float = 4.0) -> dict:
    """Fixed-column mask setting the month column to ``a`` and its knee column to (a - knot)+."""
    mask = {int(month_col): float(a)}
    if knee_col is not None:
        mask[int(knee_col)] = max(float(a) - knot, 0.0)
    return mask


def survival_curve(dataset: ClusterDataset, fit: FitResult, c_grid: Sequence[float],
                   fixed: Optional[Mapping[int, float]] = None) -> list:
    """Plug-in survival estimates ``pr(Y > c)`` over ``c_grid`` with fixed X columns."""
    return [kappa_semi(dataset, fit, survival_functional(c, fixed)) for c in c_grid]


@dataclass(frozen=True)
class DeltaRule:
    """Smooth two-argument rule with gradient."""

    g: Callable[[float, float], float]
    grad: Optional[Callable[[float, float], tuple]] = None

    def gradient(self, a: float, b: float) -> tuple:
        if self.grad is not None:
            g1, g2 = self.grad(a, b)
            return float(g1), float(g2)
        ha, hb = fd_step(a), fd_step(b)
        g1 = (self.g(a + ha, b) - self.g(a - ha, b)) / (2 * ha)
        g2 = (self.g(a, b + hb) - self.g(a, b - hb)) / (2 * hb)
        return float(g1), float(g2)


POPULATION_VARIANCE = DeltaRule(lambda a, b: b - a * a, lambda a, b: (-2.0 * a, 1.0))


def kappa_gen(rule: DeltaRule, est1: SummaryEstimate, est2: SummaryEstimate,
              v12: float) -> SummaryEstimate:
    """Delta-method composition ``g(kappa1, kappa2)``."""
    if est1.n_used != est2.n_used:
        raise ValidationError("component estimates come from different sample sizes")
    if est1.variance is None or est2.variance is None:
        raise ValidationError("component estimates need variances")
    g1, g2 = rule.gradient(est1.kappa, est2.kappa)
    v = g1 * g1 * est1.variance + g2 * g2 * est2.variance + 2.0 * g1 * g2 * v12
    source = est1.variance_source if est1.variance_source == est2.variance_source else "mixed"
    return SummaryEstimate(float(rule.g(est1.kappa, est2.kappa)), "delta", est1.n_used,
                           max(float(v), 0.0), source,
                           diagnostics={"g1": g1, "g2": g2, "v12": float(v12),
                                        "negative_variance_clipped": bool(v < 0)})


def corollary_cross_term(est1: SummaryEstimate, est2: SummaryEstimate) -> float:
    """Sample covariance of the plug-in terms, ``n^-1 sum (F1 - k1)(F2 - k2)``."""
    return float(np.mean((est1.terms - est1.kappa) * (est2.terms - est2.kappa)))


# ---------------------------------------------------------------------------
# missingness model

def default_features(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Cluster means of every X column, cluster mean of Z and an intercept."""
    return np.column_stack([x.mean(1), z.mean(1), np.ones(x.shape[0])])


@dataclass(frozen=True, eq=False)
class LogisticFit:
    zeta: np.ndarray
    psi: np.ndarray
    information: np.ndarray
    iterations: int
    gradient_norm: float


def fit_logistic(features: np.ndarray, delta: np.ndarray, *, tol: float = 1e-10,
                 max_iter: int = 100) -> LogisticFit:
    """Logistic regression of ``delta`` on ``features`` by IRLS.

    Returns the estimate and the influence terms
    ``psi_i = I^-1 phi_i (delta_i - pi_i)`` with ``I`` the average information.
    """
    F = np.asarray(features, dtype=float)
    d = np.asarray(delta, dtype=float).reshape(-1)
    n, k = F.shape
    if d.size != n:
        raise ValidationError("features and delta disagree in length")
    if d.min() == d.max():
        raise SeparationError("delta takes a single value; logistic model is degenerate")
    sv = np.linalg.svd(F, compute_uv=False)
    if sv.min() <= 1e-10 * sv.max():
        _, _, vt = np.linalg.svd(F)
        cols = tuple(int(i) for i in np.where(np.abs(vt[-1]) > 0.1)[0])
        raise RankDeficiencyError(f"logistic features are rank deficient in columns {list(cols)}",
                                  columns=cols)
    zeta = np.zeros(k)
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(F @ zeta)
        w = p * (1.0 - p)
        grad = F.T @ (d - p)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            break
        if np.all(w < 1e-12):
            raise SeparationError("IRLS weights underflowed everywhere (separated data)")
        info = (F * w[:, None]).T @ F
        step = np.linalg.solve(info, grad)
        # halve until the loglikelihood does not drop
        ll = np.sum(d * np.log(np.clip(p, 1e-300, 1)) + (1 - d) * np.log(np.clip(1 - p, 1e-300, 1)))
        lam = 1.0
        while lam > 1e-8:
            cand = zeta + lam * step
            pc = expit(F @ cand)
            llc = np.sum(d * np.log(np.clip(pc, 1e-300, 1)) +
                         (1 - d) * np.log(np.clip(1 - pc, 1e-300, 1)))
            if llc >= ll - 1e-12:
                break
            lam *= 0.5
        zeta = cand
        if np.max(np.abs(zeta)) > 1e3:
            raise SeparationError("logistic coefficients diverge (separated data)")
    p = expit(F @ zeta)
    w = p * (1.0 - p)
    info = (F * w[:, None]).T @ F / n
    psi = np.linalg.solve(info, (F * (d - p)[:, None]).T).T
    return LogisticFit(zeta, psi, info, it, grad_norm)


@dataclass(frozen=True, eq=False)
class PiModel:
    """Logistic model for ``pr(delta = 1 | X, Z)``.

    ``features(x, z) -> (n, k)``; ``zeta`` is set by :meth:`fit`.  A fixed
    model (known ``zeta``) can be built directly.
    """

    features: Callable = default_features
    zeta: Optional[np.ndarray] = None
    fit_info: Optional[LogisticFit] = field(default=None, repr=False)
    clip: bool = True

    def fit(self, dataset: ClusterDataset) -> "PiModel":
        lf = fit_logistic(self.features(dataset.x, dataset.z), dataset.delta)
        return replace(self, zeta=lf.zeta, fit_info=lf)

    def predict(self, x, z) -> tuple[np.ndarray, int]:
        if self.zeta is None:
            raise ValidationError("PiModel has not been fitted")
        raw = expit(self.features(x, z) @ self.zeta)
        if not self.clip:
            return raw, 0
        clipped = np.clip(raw, PI_CLIP, 1.0 - PI_CLIP)
        return clipped, int(np.sum((raw <= PI_CLIP) | (raw >= 1.0 - PI_CLIP)))


def constant_pi(value: float) -> PiModel:
    """Known constant response probability in (0, 1]; not clipped."""
    if not 0 < value <= 1:
        raise ValidationError(f"response probability must lie in (0, 1], got {value!r}")
    logit = np.log(value / (1.0 - value)) if value < 1 else np.inf

    def feats(x, z):
        return np.ones((x.shape[0], 1))

    return PiModel(feats, np.array([logit]), clip=False)


def _responses(dataset: ClusterDataset, rf: ResponseFunctional) -> np.ndarray:
    g = np.zeros(dataset.n)
    obs = dataset.observed
    if obs.any():
        g[obs] = rf.response(dataset.y[obs])
    return g


def kappa_imputed(dataset: ClusterDataset, fit: Optional[FitResult],
                  rf: ResponseFunctional) -> SummaryEstimate:
    """Imputation estimator: observed ``G(Y)``, model prediction ``F`` for missing clusters."""
    obs = dataset.observed
    g = _responses(dataset, rf)
    if obs.all():
        f = np.zeros(dataset.n)
    else:
        if fit is None:
            raise ValidationError("a fit is required when some responses are missing")
        f = functional_terms(dataset, fit, rf)
    terms = np.where(obs, g, f)
    return SummaryEstimate(float(terms.mean()), "imputed", dataset.n, terms=terms,
                           diagnostics={"functional": rf.name, "n_missing": int((~obs).sum())})


def kappa_ipw(dataset: ClusterDataset, fit: FitResult, rf: ResponseFunctional,
              pi_model: PiModel) -> SummaryEstimate:
    """Doubly-robust estimator with its sample-variance plug-in variance."""
    pi, at_edge = pi_model.predict(dataset.x, dataset.z)
    d = dataset.delta.astype(float)
    g = _responses(dataset, rf)
    f = functional_terms(dataset, fit, rf)
    ratio = d / pi
    terms = ratio * g + (1.0 - ratio) * f
    kappa = float(terms.mean())
    var = float(np.mean((terms - kappa) ** 2))
    diag = {"functional": rf.name, "pi_at_clip_boundary": at_edge, "warnings": []}
    if at_edge > 0.05 * dataset.n:
        msg = f"{at_edge} of {dataset.n} fitted probabilities at the clipping boundary"
        diag["warnings"].append(msg)
        log.warning(msg)
    return SummaryEstimate(kappa, "ipw", dataset.n, var, "plugin", terms=terms, diagnostics=diag)
