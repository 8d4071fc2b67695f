"""Simulation designs, missingness mechanisms, ground-truth oracles and the
Monte Carlo experiment runner.

Every generator takes an ``int`` seed or a :class:`numpy.random.SeedSequence`
and is bit-reproducible.  Experiments spawn one child sequence per replicate
so that results do not depend on the number of worker threads.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.special import expit, ndtr

from .core_model import ClusterDataset, ModelParams, check_params
from .errors import DegenerateMissingnessError, ExperimentUnstableError, SemirepError, ValidationError
from .summaries import default_features

log = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence]


def _rng(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


def _seq(seed: SeedLike) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


# ---------------------------------------------------------------------------
# curves

def theta_rule(spec) -> Callable[[np.ndarray], np.ndarray]:
    """Resolve a curve specification.

    Accepts a callable, ``"sin8"`` (``sin(8z - 1)``), ``"constant"`` /
    ``"constant:c"``, ``"linear:a,b"`` (``a + b z``) or a mapping with
    ``z`` and ``theta`` lists (piecewise-linear table).
    """
    if callable(spec):
        return spec
    if isinstance(spec, Mapping):
        zt = np.asarray(spec["z"], dtype=float)
        tt = np.asarray(spec["theta"], dtype=float)
        return lambda z: np.interp(z, zt, tt)
    name, _, args = str(spec).partition(":")
    vals = [float(a) for a in args.split(",")] if args else []
    if name == "sin8":
        return lambda z: np.sin(8.0 * np.asarray(z) - 1.0)
    if name == "constant":
        c = vals[0] if vals else 0.0
        return lambda z: np.full(np.shape(z), c)
    if name == "linear":
        a, b = (vals + [0.0, 1.0][len(vals):])[:2]
        return lambda z: a + b * np.asarray(z)
    raise ValidationError(f"unknown curve specification {spec!r}")


# ---------------------------------------------------------------------------
# missingness

@dataclass(frozen=True)
class MissingnessMechanism:
    """Cluster-level response mechanism depending on (X, Z) only.

    kind: ``"none"``, ``"mcar"`` (constant ``pi``) or ``"mar-logistic"``
    (``logistic(features(x, z) @ zeta)``).
    """

    kind: str = "none"
    pi: float = 1.0
    zeta: tuple = ()
    features: Callable = default_features

    def __post_init__(self):
        if self.kind not in ("none", "mcar", "mar-logistic"):
            raise ValidationError(f"unknown missingness kind {self.kind!r}")
        if self.kind == "mcar" and not 0 < self.pi < 1:
            raise ValidationError(f"MCAR probability must be in (0, 1), got {self.pi!r}")

    def probabilities(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        if self.kind == "none":
            return np.ones(n)
        if self.kind == "mcar":
            return np.full(n, self.pi)
        return expit(self.features(x, z) @ np.asarray(self.zeta, dtype=float))


def apply_missingness(dataset: ClusterDataset, mech: MissingnessMechanism,
                      seed: SeedLike) -> ClusterDataset:
    """Draw cluster indicators from ``mech`` and drop the missing responses."""
    if mech.kind == "none":
        return dataset.replace(delta=np.ones(dataset.n, dtype=np.int8))
    pi = mech.probabilities(dataset.x, dataset.z)
    delta = (_rng(seed).uniform(size=dataset.n) < pi).astype(np.int8)
    if delta.sum() == 0:
        raise DegenerateMissingnessError("every cluster lost its response")
    return dataset.replace(delta=delta)


# ---------------------------------------------------------------------------
# designs

@dataclass(frozen=True)
class SimDesign:
    """Partially linear design with uniform covariates.

    Defaults are the two-position, three-repeat design with ``sin(8z - 1)``.
    """

    n: int = 100
    m: int = 2
    R: int = 3
    beta: tuple = (1.0, 1.0)
    sigma2: float = 1.0
    rho: float = 0.4
    theta: object = "sin8"
    missingness: MissingnessMechanism = field(default_factory=MissingnessMechanism)

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.R < 1:
            raise ValidationError("n, m and R must be positive")
        check_params(self.sigma2, self.rho, self.m * self.R)
        theta_rule(self.theta)

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def params(self) -> ModelParams:
        return ModelParams(np.asarray(self.beta, dtype=float), self.sigma2, self.rho)

    @property
    def theta_fn(self):
        return theta_rule(self.theta)


def exchangeable_noise(rng: np.random.Generator, n: int, q: int, sigma2: float,
                       rho: float) -> np.ndarray:
    """(n, q) draws with covariance ``sigma2 ((1 - rho) I + rho J)``."""
    if rho >= 0:
        shared = rng.standard_normal((n, 1))
        own = rng.standard_normal((n, q))
        return np.sqrt(sigma2 * rho) * shared + np.sqrt(sigma2 * (1 - rho)) * own
    # spectral square root: eigenvalues sigma2 (1 + (q-1) rho) on 1, sigma2 (1 - rho) elsewhere
    e = rng.standard_normal((n, q))
    mean = e.mean(1, keepdims=True)
    lam1 = sigma2 * (1 + (q - 1) * rho)
    lam2 = sigma2 * (1 - rho)
    return np.sqrt(lam1) * mean + np.sqrt(lam2) * (e - mean)


def generate_sim_dataset(design: SimDesign, seed: SeedLike) -> ClusterDataset:
    """Draw one dataset: Z and X uniform(0, 1), exchangeable Gaussian noise.

    The two child streams of ``seed`` drive the data and the missingness.
    """
    data_ss, miss_ss = _seq(seed).spawn(2)
    rng = _rng(data_ss)
    n, m, R, p = design.n, design.m, design.R, design.p
    q = m * R
    z = rng.uniform(size=(n, m))
    x = rng.uniform(size=(n, q, p))
    eps = exchangeable_noise(rng, n, q, design.sigma2, design.rho)
    y = x @ np.asarray(design.beta, dtype=float) + np.repeat(design.theta_fn(z), R, axis=1) + eps
    ds = ClusterDataset(y, x, z, np.ones(n, dtype=np.int8), R, z_bounds=(0.0, 1.0),
                        meta={"design": "uniform"})
    if design.missingness.kind != "none":
        ds = apply_missingness(ds, design.missingness, miss_ss)
    return ds


@dataclass(frozen=True)
class KenyaDesign:
    """Synthetic families: two children per mother, four visits per child.

    X columns are (sex, logpden, month, (month - knot)+); Z is the mother's
    age at each child's birth, shared by that child's visits.
    """

    n: int = 68
    beta: tuple = (0.3, -0.08, -0.6, 0.5)
    sigma2: float = 1.0
    rho: float = 0.3
    theta: object = None
    p_male: float = 0.5
    p_zero_density: float = 0.2
    density_range: tuple = (2.0, 10.0)
    age_range: tuple = (15.0, 35.0)
    gap_range: tuple = (1.0, 5.0)
    month_range: tuple = (0.1, 11.0)
    knot: float = 4.0

    m: int = 2
    R: int = 4

    @property
    def theta_fn(self):
        if self.theta is None:
            return lambda z: 11.0 + 0.8 * np.sin((np.asarray(z) - 25.0) / 6.0)
        return theta_rule(self.theta)

    @property
    def params(self) -> ModelParams:
        return ModelParams(np.asarray(self.beta, dtype=float), self.sigma2, self.rho)

    @property
    def z_bounds(self) -> tuple:
        return (self.age_range[0], self.age_range[1] + self.gap_range[1])


def generate_kenya_like(design: KenyaDesign, seed: SeedLike) -> ClusterDataset:
    rng = _rng(seed)
    n, m, R = design.n, design.m, design.R
    q = m * R
    z1 = rng.uniform(*design.age_range, size=n)
    z2 = z1 + rng.uniform(*design.gap_range, size=n)
    z = np.column_stack([z1, z2])
    sex = np.repeat((rng.uniform(size=(n, m)) < design.p_male).astype(float), R, axis=1)
    zero = rng.uniform(size=n) < design.p_zero_density
    dens = np.where(zero, 0.0, rng.uniform(*design.density_range, size=n))
    logpden = np.repeat(dens[:, None], q, axis=1)
    month = rng.uniform(*design.month_range, size=(n, q))
    knee = np.maximum(month - design.knot, 0.0)
    x = np.stack([sex, logpden, month, knee], axis=2)
    eps = exchangeable_noise(rng, n, q, design.sigma2, design.rho)
    y = x @ np.asarray(design.beta, dtype=float) + np.repeat(design.theta_fn(z), R, axis=1) + eps
    meta = {"design": "kenya-like", "columns": ["sex", "logpden", "month", "month_knee"],
            "truth": {"beta": list(design.beta), "sigma2": design.sigma2, "rho": design.rho}}
    return ClusterDataset(y, x, z, np.ones(n, dtype=np.int8), R, z_bounds=design.z_bounds,
                          meta=meta)


# ---------------------------------------------------------------------------
# oracles

def _gl(a: float, b: float, k: int = 64):
    t, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (b - a) * t + 0.5 * (a + b), 0.5 * (b - a) * w


@dataclass(frozen=True)
class OracleValue:
    value: float
    se: float
    method: str


def true_kappa_oracle(design: SimDesign, spec: tuple, method: str = "quadrature", *,
                      draws: int = 1_000_000, seed: int = 0) -> OracleValue:
    """True value of a summary under ``design``.

    ``spec`` is ``(name, kwargs)`` with name in ``survival`` (kwargs ``c`` and
    optional ``fixed`` column map), ``mean``, ``second-moment`` or
    ``variance`` (of a single response).  Quadrature uses 64 Gauss-Legendre
    nodes per free uniform coordinate; survival with more than one free X
    column falls back to Monte Carlo with a warning.
    """
    name, kw = spec[0], dict(spec[1]) if len(spec) > 1 else {}
    beta = np.asarray(design.beta, dtype=float)
    th = design.theta_fn
    s = np.sqrt(design.sigma2)
    zg, zw = _gl(0.0, 1.0)
    e_th = float(zw @ th(zg))
    e_th2 = float(zw @ th(zg) ** 2)
    fixed = {int(k): float(v) for k, v in dict(kw.get("fixed", {})).items()}
    free = [k for k in range(design.p) if k not in fixed]
    if name in ("mean", "second-moment", "variance"):
        mean_x = sum(beta[k] * fixed.get(k, 0.5) for k in range(design.p))
        var_x = sum(beta[k] ** 2 / 12.0 for k in free)
        mean = mean_x + e_th
        var = var_x + (e_th2 - e_th ** 2) + design.sigma2
        val = {"mean": mean, "second-moment": var + mean * mean, "variance": var}[name]
        return OracleValue(float(val), 0.0, "quadrature")
    if name != "survival":
        raise ValidationError(f"oracle does not support summary {name!r}")
    c = float(kw["c"])
    const = sum(beta[k] * v for k, v in fixed.items())
    if method == "quadrature" and len(free) <= 1:
        if free:
            xg, xw = _gl(0.0, 1.0)
            lin = const + beta[free[0]] * xg
        else:
            xg, xw = np.array([0.0]), np.array([1.0])
            lin = np.array([const])
        val = float(xw @ ndtr((lin[:, None] + th(zg)[None, :] - c) / s) @ zw)
        return OracleValue(val, 0.0, "quadrature")
    if method == "quadrature":
        warnings.warn("survival oracle with several free columns uses Monte Carlo", stacklevel=2)
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(draws, design.p))
    for k, v in fixed.items():
        X[:, k] = v
    vals = ndtr((X @ beta + th(rng.uniform(size=draws)) - c) / s)
    return OracleValue(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(draws)),
                       "monte-carlo")


def kenya_kappa0(design: KenyaDesign, a: float, c: float, k: int = 64) -> float:
    """Survival ``pr(Y > c | month = a)`` under the Kenya-like generator.

    Averages over the two children's age laws, sex, and the zero-inflated
    density covariate with Gauss-Legendre quadrature.
    """
    b = np.asarray(design.beta, dtype=float)
    s = np.sqrt(design.sigma2)
    th = design.theta_fn
    base = b[2] * a + b[3] * max(a - design.knot, 0.0)
    z1, w1 = _gl(*design.age_range, k)
    w1 = w1 / (design.age_range[1] - design.age_range[0])
    g, wg = _gl(*design.gap_range, k)
    wg = wg / (design.gap_range[1] - design.gap_range[0])
    t1 = th(z1)                                       # child 1
    t2 = th(z1[:, None] + g[None, :])                 # child 2
    d, wd = _gl(*design.density_range, k)
    wd = wd / (design.density_range[1] - design.density_range[0])
    dens_nodes = np.concatenate([[0.0], d])
    dens_w = np.concatenate([[design.p_zero_density], (1 - design.p_zero_density) * wd])
    total = 0.0
    for sex, ws in ((1.0, design.p_male), (0.0, 1.0 - design.p_male)):
        lin = base + b[0] * sex + b[1] * dens_nodes      # (D,)
        c1 = ndtr((lin[:, None] + t1[None, :] - c) / s) @ w1
        c2 = np.einsum("dij,i,j->d", ndtr((lin[:, None, None] + t2[None] - c) / s), w1, wg)
        total += ws * dens_w @ (0.5 * (c1 + c2))
    return float(total)


# ---------------------------------------------------------------------------
# experiments

@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Per-replicate values and summaries for named quantities.

    ``values`` is (replicates, K) with NaN rows for failed replicates;
    ``lower`` / ``upper`` hold interval ends when the pipeline reports them.
    """

    names: tuple
    values: np.ndarray
    lower: Optional[np.ndarray]
    upper: Optional[np.ndarray]
    oracle: dict
    failures: tuple
    seed: int

    @property
    def ok(self) -> np.ndarray:
        return np.all(np.isfinite(self.values), axis=1)

    @property
    def mean(self) -> np.ndarray:
        return self.values[self.ok].mean(0)

    @property
    def mc_se(self) -> np.ndarray:
        v = self.values[self.ok]
        if v.shape[0] < 2:
            return np.full(v.shape[1], np.nan)
        return v.std(0, ddof=1) / np.sqrt(v.shape[0])

    @property
    def mc_var(self) -> np.ndarray:
        return self.values[self.ok].var(0, ddof=1)

    @property
    def bias(self) -> np.ndarray:
        return np.array([self.mean[k] - self.oracle.get(nm, np.nan)
                         for k, nm in enumerate(self.names)])

    @property
    def coverage(self) -> Optional[np.ndarray]:
        if self.lower is None:
            return None
        tru = np.array([self.oracle.get(nm, np.nan) for nm in self.names])
        lo, hi = self.lower[self.ok], self.upper[self.ok]
        has = np.isfinite(lo) & np.isfinite(hi)
        inside = ((lo <= tru) & (tru <= hi) & has).sum(0)
        count = has.sum(0)
        out = np.full(tru.size, np.nan)
        good = np.isfinite(tru) & (count > 0)
        out[good] = inside[good] / count[good]
        return out

    def column(self, name: str) -> np.ndarray:
        return self.values[self.ok, self.names.index(name)]

    def to_dict(self) -> dict:
        cov = self.coverage
        return {
            "seed": self.seed,
            "replicates": int(self.values.shape[0]),
            "failures": [list(f) for f in self.failures],
            "summary": [
                {"name": nm, "mean": float(self.mean[k]), "mc_se": float(self.mc_se[k]),
                 "mc_var": float(self.mc_var[k]) if self.values[self.ok].shape[0] > 1 else None,
                 "oracle": self.oracle.get(nm), "bias": (None if nm not in self.oracle
                                                         else float(self.bias[k])),
                 "coverage": None if cov is None or not np.isfinite(cov[k]) else float(cov[k])}
                for k, nm in enumerate(self.names)],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["replicate"] + list(self.names)
        if self.lower is not None:
            head += [f"{nm}_lo95" for nm in self.names] + [f"{nm}_hi95" for nm in self.names]
        w.writerow(head)
        for r in range(self.values.shape[0]):
            row = [r] + [format(float(v), ".17g") for v in self.values[r]]
            if self.lower is not None:
                row += [format(float(v), ".17g") for v in self.lower[r]]
                row += [format(float(v), ".17g") for v in self.upper[r]]
            w.writerow(row)
        return buf.getvalue()


def run_experiment(generate: Callable[[np.random.SeedSequence], ClusterDataset],
                   pipeline: Callable, replicates: int, seed: int, *, threads: int = 1,
                   oracle: Optional[Mapping[str, float]] = None,
                   max_failure_rate: float = 0.10) -> ExperimentReport:
    """Monte Carlo loop.

    ``generate(ss)`` draws a dataset from a seed sequence; ``pipeline(dataset,
    ss)`` returns an ordered mapping ``name -> value`` or ``name -> (value, lo,
    hi)``.  Replicate ``r`` uses the ``r``-th child of ``SeedSequence(seed)``;
    its first grandchild drives the data, its second the pipeline.
    """
    if replicates < 1:
        raise ValidationError("replicates must be at least 1")
    children = np.random.SeedSequence(seed).spawn(replicates)

    def one(ss):
        data_ss, pipe_ss = ss.spawn(2)
        try:
            return pipeline(generate(data_ss), pipe_ss), None
        except SemirepError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(ss) for ss in children]
    names = None
    for res, _ in results:
        if res is not None:
            names = tuple(res.keys())
            break
    failures = tuple((r, err) for r, (res, err) in enumerate(results) if res is None)
    if names is None or len(failures) > max_failure_rate * replicates:
        raise ExperimentUnstableError(f"{len(failures)} of {replicates} replicates failed")
    K = len(names)
    vals = np.full((replicates, K), np.nan)
    lo = hi = None
    for r, (res, _) in enumerate(results):
        if res is None:
            continue
        for k, nm in enumerate(names):
            v = res[nm]
            if isinstance(v, (tuple, list)):
                if lo is None:
                    lo = np.full((replicates, K), np.nan)
                    hi = np.full((replicates, K), np.nan)
                vals[r, k], lo[r, k], hi[r, k] = (float(t) for t in v)
            else:
                vals[r, k] = float(v)
    return ExperimentReport(names, vals, lo, hi, dict(oracle or {}), failures, int(seed))


def design_dict(design) -> dict:
    d = asdict(design) if not isinstance(design, SimDesign) else {
        k: v for k, v in asdict(design).items() if k != "missingness"}
    if isinstance(design, SimDesign):
        mech = design.missingness
        d["missingness"] = {"kind": mech.kind, "pi": mech.pi, "zeta": list(mech.zeta)}
    return d
