"""Monte Carlo checks of the weight laws and of posterior robustness.

Everything here works on weighted-mean functionals of a fixed one-dimensional
dataset, ``theta = sum_i p_i f(z_i)`` with ``p`` the normalised posterior
bootstrap weights over the data and pseudo atoms. Reports carry the full
configuration and seed so any number can be regenerated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from ._kernels import ks_perm_stats, log_gamma_fill
from .dirichlet import draw_weight_batch
from .sampler import _run_parallel, derive_seed

__all__ = [
    "TwoSampleReport",
    "CovarianceReport",
    "VnReport",
    "DEFAULT_FUNCTIONALS",
    "weighted_mean_moments",
    "weighted_mean_draws",
    "ks_permutation_test",
    "energy_permutation_test",
    "blocked_vs_nonblocked_test",
    "ks_trend",
    "vn_bound_check",
    "sandwich_check",
    "write_reports",
]

STAGE_DIAGNOSTICS = 3

# bounded test functions for the weighted-mean functionals
DEFAULT_FUNCTIONALS: dict = {
    "tanh": np.tanh,
    "step": lambda z: (z <= 0.0).astype(np.float64),
    "cos": np.cos,
}


@dataclass
class TwoSampleReport:
    statistic: str  # "ks" or "energy"
    value: float
    p_value: float
    sizes: tuple
    config: dict = field(default_factory=dict)
    permutations: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if min(self.sizes) < 100:
            raise ValueError(f"two-sample tests need >= 100 draws per sample, got {self.sizes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        return d


def _rel(a: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(a - ref) / np.linalg.norm(ref))


@dataclass
class CovarianceReport:
    npl: np.ndarray
    sandwich: np.ndarray
    parametric: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("npl", "sandwich", "parametric"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            scale = max(1.0, float(np.abs(m).max()))
            if not np.allclose(m, m.T, rtol=0, atol=1e-9 * scale):
                raise ValueError(f"{name} covariance is not symmetric")
            if np.linalg.eigvalsh((m + m.T) / 2).min() < -1e-12 * scale:
                raise ValueError(f"{name} covariance is not positive semi-definite")
            setattr(self, name, (m + m.T) / 2)

    @property
    def npl_vs_sandwich(self) -> float:
        return _rel(self.npl, self.sandwich)

    @property
    def npl_vs_parametric(self) -> float:
        return _rel(self.npl, self.parametric)

    @property
    def sandwich_vs_parametric(self) -> float:
        return _rel(self.sandwich, self.parametric)

    def slope_deviations(self) -> dict:
        """Relative deviations of the slope variance (last coordinate)."""
        v = {k: float(getattr(self, k)[-1, -1]) for k in ("npl", "sandwich", "parametric")}
        return {
            "npl_vs_sandwich": abs(v["npl"] - v["sandwich"]) / v["sandwich"],
            "npl_vs_parametric": abs(v["npl"] - v["parametric"]) / v["parametric"],
            "sandwich_vs_parametric": abs(v["sandwich"] - v["parametric"]) / v["parametric"],
        }

    def to_dict(self) -> dict:
        return {
            "npl": self.npl.tolist(),
            "sandwich": self.sandwich.tolist(),
            "parametric": self.parametric.tolist(),
            "npl_vs_sandwich": self.npl_vs_sandwich,
            "npl_vs_parametric": self.npl_vs_parametric,
            "sandwich_vs_parametric": self.sandwich_vs_parametric,
            "slope": self.slope_deviations(),
            "config": self.config,
        }


@dataclass
class VnReport:
    mean: float
    se: float
    bound: float
    draws: int
    config: dict = field(default_factory=dict)

    @property
    def ci(self) -> tuple:
        return (self.mean - 1.96 * self.se, self.mean + 1.96 * self.se)

    @property
    def passed(self) -> bool:
        return self.mean <= self.bound + 3.0 * self.se

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = list(self.ci)
        d["passed"] = self.passed
        return d


# -- analytic oracle ---------------------------------------------------------

def weighted_mean_moments(data, pseudo, alpha: float, blocked: bool = False,
                          L: Optional[int] = None) -> tuple[float, float]:
    """Exact mean and variance of ``sum_i p_i z_i`` under the weight law.

    ``p`` are the weights normalised to sum one over ``n`` data values
    followed by ``n`` pseudo values. Non-blocked, ``p ~ Dir(1 x n, alpha/n x n)``.
    Blocked, ``L`` must divide ``n``: given the random partitions the functional
    is ``sum_j v_j Z_j`` over block means ``Z_j``, whose conditional mean is the
    same for every partition, so the variance is the partition average of the
    Dirichlet variance, using the finite-population moments of block means.
    """
    x = np.asarray(data, dtype=np.float64).ravel()
    xt = np.asarray(pseudo, dtype=np.float64).ravel()
    n = x.size
    if n == 0:
        raise ValueError("data must be non-empty")
    if xt.size != n:
        raise ValueError(f"need {n} pseudo values, got {xt.size}")
    if not alpha >= 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        xt = np.zeros(0)
    if np.all(x == x[0]) and np.all(xt == x[0]):
        return float(x[0]), 0.0
    c = alpha / n
    if not blocked or L is None or L == n:
        a = np.concatenate([np.ones(n), np.full(xt.size, c)])
        z = np.concatenate([x, xt])
        a0 = a.sum()
        m = float(a @ z / a0)
        return m, float((a @ z**2 / a0 - m * m) / (a0 + 1.0))
    L = int(L)
    if not 1 <= L <= n or n % L:
        raise ValueError(f"blocked moments need L dividing n, got L={L}, n={n}")
    s = n // L
    fpc = (n - s) / (n - 1) if n > 1 else 0.0

    def second(vals):
        # E[Z^2] for the mean of a size-s sample without replacement
        return vals.mean() ** 2 + vals.var() / s * fpc

    a0 = L * (1.0 + c)
    m = (n * x.mean() + (alpha * xt.mean() if xt.size else 0.0)) / (n + alpha)
    ez2 = L * second(x) + (c * L * second(xt) if xt.size else 0.0)
    return float(m), float((ez2 / a0 - m * m) / (a0 + 1.0))


# -- Monte Carlo draws of the functional -------------------------------------

def _centered_mean(P: np.ndarray, z: np.ndarray) -> np.ndarray:
    # centring at z[0] makes a constant functional reproduce its value exactly
    return z[0] + P @ (z - z[0])


def weighted_mean_draws(z: np.ndarray, n: int, alpha: float, draws: int, rng,
                        L: Optional[int] = None) -> np.ndarray:
    """``draws`` values of the weighted mean of ``z = (data, pseudo)``."""
    W, Wt = draw_weight_batch(n, alpha, draws, rng, L=L)
    P = np.hstack([W, Wt])
    P /= P.sum(axis=1, keepdims=True)
    return _centered_mean(P, z)


def _fixed_t_weights(n: int, T: int, alpha: float, draws: int, rng, L: int) -> np.ndarray:
    # data blocked into L blocks, T pseudo atoms never blocked; rows sum to 1
    lg = log_gamma_fill(np.tile(np.ones(L), draws), rng).reshape(draws, L)
    lgt = log_gamma_fill(np.tile(np.full(T, alpha / T), draws), rng).reshape(draws, T)
    base = np.arange(n, dtype=np.int64) % L
    assign = rng.permuted(np.tile(base, (draws, 1)), axis=1)
    sizes = np.bincount(base, minlength=L).astype(np.float64)
    full = np.hstack([lg, lgt])
    counts = np.concatenate([sizes, np.ones(T)])
    log_mass = logsumexp(full, axis=1, b=counts, keepdims=True)
    p = np.exp(full - log_mass)
    rows = np.arange(draws)[:, None]
    return np.hstack([p[:, :L][rows, assign], p[:, L:]])


# -- permutation tests -------------------------------------------------------

def ks_permutation_test(a, b, permutations: int, rng) -> tuple[float, float]:
    """KS statistic and permutation p-value ``(1 + #{D* >= D}) / (1 + P)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="stable")
    labels = np.concatenate([np.zeros(n1, np.uint8), np.ones(n2, np.uint8)])
    obs = float(ks_perm_stats(pooled[order], labels[order][None, :], n1, n2)[0])
    if permutations == 0:
        return obs, 1.0
    perm = rng.permuted(np.tile(labels, (permutations, 1)), axis=1)
    null = ks_perm_stats(pooled[order], perm, n1, n2)
    # tolerance guards ties that differ only by rounding of k/n1 - j/n2
    exceed = int(np.count_nonzero(null >= obs - 1e-12))
    return obs, (1.0 + exceed) / (1.0 + permutations)


def _distance_products(Z: np.ndarray, A: np.ndarray, block: int = 2048) -> tuple:
    """Row sums of the Euclidean distance matrix and the diagonal of ``A^T D A``."""
    N = Z.shape[0]
    sq = np.einsum("ij,ij->i", Z, Z)
    r = np.empty(N)
    quad = np.zeros(A.shape[1])
    for s in range(0, N, block):
        e = min(N, s + block)
        d2 = sq[s:e, None] + sq[None, :] - 2.0 * (Z[s:e] @ Z.T)
        np.maximum(d2, 0.0, out=d2)
        D = np.sqrt(d2, out=d2)
        r[s:e] = D.sum(axis=1)
        quad += np.einsum("ip,ip->p", A[s:e], D @ A)
    return r, quad


def energy_permutation_test(X, Y, permutations: int, rng, block: int = 2048) -> tuple[float, float]:
    """Energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` with a permutation p-value.

    Uses V-statistic averages. The null distribution needs only ``D @ A`` for
    the matrix ``A`` of group indicators, computed a block of rows at a time
    so the full distance matrix is never stored.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n1, n2 = X.shape[0], Y.shape[0]
    Z = np.vstack([X, Y])
    N = n1 + n2
    first = np.zeros(N)
    first[:n1] = 1.0
    cols = [first]
    if permutations:
        cols += list(rng.permuted(np.tile(first, (permutations, 1)), axis=1))
    A = np.stack(cols, axis=1)
    r, aDa = _distance_products(Z, A, block)
    total = r.sum()
    aD1 = A.T @ r
    aDb = aD1 - aDa
    bDb = total - 2.0 * aD1 + aDa
    stats = 2.0 * aDb / (n1 * n2) - aDa / n1**2 - bDb / n2**2
    obs = float(stats[0])
    if not permutations:
        return obs, 1.0
    exceed = int(np.count_nonzero(stats[1:] >= obs - 1e-12 * abs(obs)))
    return obs, (1.0 + exceed) / (1.0 + permutations)


# -- blocked vs non-blocked --------------------------------------------------

def _functionals(functionals) -> dict:
    if functionals is None:
        return dict(DEFAULT_FUNCTIONALS)
    if isinstance(functionals, Mapping):
        return dict(functionals)
    out = {}
    for i, f in enumerate(functionals):
        out[getattr(f, "__name__", f"f{i}")] = f
    return out


def _fixed_dataset(n: int, T: int, seed: int):
    rng = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 0))
    x = rng.standard_normal(n)
    xt = 0.5 + rng.standard_normal(T)
    return x, xt


def blocked_vs_nonblocked_test(
    n: int,
    L: int,
    alpha: float,
    draws: int,
    functionals: Union[None, Sequence[Callable], Mapping[str, Callable]] = None,
    seed: int = 0,
    regime: str = "implemented",
    T: Optional[int] = None,
    permutations: int = 1000,
) -> list[TwoSampleReport]:
    """KS comparison of weighted-mean functionals under blocked and plain draws.

    A fixed dataset (``n`` standard normal data values and pseudo values
    centred at 0.5) is drawn from ``seed``. ``regime="implemented"`` blocks
    both data and pseudo atoms as the sampler does; ``regime="fixed-T"``
    blocks only the data and keeps ``T`` unblocked pseudo atoms (``L`` must
    divide ``n``). One report per functional, all sharing the same weights.
    """
    if draws < 1000:
        raise ValueError(f"draws must be >= 1000, got {draws}")
    if not 1 <= L <= n:
        raise ValueError(f"L must satisfy 1 <= L <= n, got L={L}, n={n}")
    if not alpha >= 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if regime not in ("implemented", "fixed-T"):
        raise ValueError(f"regime must be 'implemented' or 'fixed-T', got {regime!r}")
    T = n if T is None else int(T)
    fs = _functionals(functionals)
    x, xt = _fixed_dataset(n, T if regime == "fixed-T" else n, seed)
    rb = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 1))
    rn = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 2))
    rp = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 3))
    if regime == "implemented":
        def weights(rng, blocks):
            W, Wt = draw_weight_batch(n, alpha, draws, rng, L=blocks)
            P = np.hstack([W, Wt])
            return P / P.sum(axis=1, keepdims=True)
        Pb, Pn = weights(rb, L), weights(rn, None)
    else:
        if n % L:
            raise ValueError(f"fixed-T regime needs L dividing n, got L={L}, n={n}")
        if not alpha > 0:
            raise ValueError("fixed-T regime needs alpha > 0")
        Pb = _fixed_t_weights(n, T, alpha, draws, rb, L)
        Pn = _fixed_t_weights(n, T, alpha, draws, rn, n)
    z_raw = np.concatenate([x, xt])
    reports = []
    for name, f in fs.items():
        z = np.asarray(f(z_raw), dtype=np.float64)
        a, b = _centered_mean(Pb, z), _centered_mean(Pn, z)
        stat, p = ks_permutation_test(a, b, permutations, rp)
        cfg = {"n": n, "L": L, "alpha": alpha, "T": T, "draws": draws, "seed": seed,
               "regime": regime, "functional": name}
        reports.append(TwoSampleReport("ks", stat, p, (draws, draws), cfg, permutations))
    return reports


def _trend_rep(ns, L, alpha, draws, regime, functional, seed, rep):
    s = derive_seed(seed, STAGE_DIAGNOSTICS, 100 + rep)
    return [blocked_vs_nonblocked_test(n, L, alpha, draws, {functional: DEFAULT_FUNCTIONALS[functional]},
                                       seed=s, regime=regime, permutations=0)[0].value for n in ns]


def ks_trend(ns: Sequence[int], L: int, alpha: float, draws: int, repetitions: int, seed: int = 0,
             regime: str = "implemented", functional: str = "tanh", workers: int = 1) -> dict:
    """KS statistic across increasing ``n`` for several seeded repetitions.

    Returns the statistic table (repetitions x len(ns)) and how many
    repetitions are strictly decreasing in ``n``.
    """
    fn = partial(_trend_rep, tuple(ns), L, alpha, draws, regime, functional, seed)
    table = np.array(_run_parallel(fn, repetitions, workers))
    decreasing = int(np.sum(np.all(np.diff(table, axis=1) < 0, axis=1)))
    return {"ns": list(ns), "L": L, "alpha": alpha, "draws": draws, "seed": seed,
            "regime": regime, "functional": functional, "statistics": table.tolist(),
            "decreasing": decreasing, "repetitions": repetitions}


# -- V_n bound ---------------------------------------------------------------

def vn_bound_check(n: int, L: Optional[int], T: int, alpha: float, draws: int, seed: int = 0) -> VnReport:
    """Monte Carlo mean of ``V_n = G / (G + H_n)`` against the bound ``alpha / n``.

    ``G`` sums ``T`` Gamma(alpha/T) variates and ``H_n = (n/L) Gamma(L, 1)``
    is built from ``L`` unit-rate exponentials (``L=None`` means ``L=n``).
    """
    if draws < 10_000:
        raise ValueError(f"draws must be >= 1e4, got {draws}")
    if not alpha >= 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    L = n if L is None else int(L)
    if not 1 <= L <= n or T < 1:
        raise ValueError(f"need 1 <= L <= n and T >= 1, got L={L}, n={n}, T={T}")
    cfg = {"n": n, "L": L, "T": T, "alpha": alpha, "draws": draws, "seed": seed}
    if alpha == 0:
        return VnReport(0.0, 0.0, 0.0, draws, cfg)
    rng = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 4))
    lgt = log_gamma_fill(np.full(T * draws, alpha / T), rng).reshape(draws, T)
    lg = log_gamma_fill(np.ones(L * draws), rng).reshape(draws, L)
    log_G = logsumexp(lgt, axis=1)
    log_H = math.log(n / L) + logsumexp(lg, axis=1)
    v = np.exp(log_G - np.logaddexp(log_G, log_H))
    return VnReport(float(v.mean()), float(v.std(ddof=1) / math.sqrt(draws)), alpha / n, draws, cfg)


# -- sandwich covariance -----------------------------------------------------

def _linear_task(n: int, seed: int, heteroscedastic: bool):
    rng = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 5))
    x = rng.standard_normal(n)
    scale = 0.5 + np.abs(x) if heteroscedastic else np.ones(n)
    y = 1.0 + 2.0 * x + scale * rng.standard_normal(n)
    return np.column_stack([np.ones(n), x]), y


def sandwich_check(n: int, M: int, seed: int = 0, heteroscedastic: bool = True,
                   prior_var: float = 1e6) -> CovarianceReport:
    """Compare three covariances for the coefficients of ``y ~ b0 + b1 x``.

    The data come from a linear mean with noise scale ``0.5 + |x|``
    (heteroscedastic) or one. The NPL covariance is the sample covariance of
    ``M`` exact weighted least-squares fits under Bayesian-bootstrap weights
    (``alpha = 0``). The sandwich is ``J^-1 K J^-1 / n`` with ``J = X'X/n``
    and ``K`` the mean outer product of the scores at the least-squares fit.
    The parametric posterior is conjugate Gaussian with prior variance
    ``prior_var`` and the residual-variance plug-in.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    X, y = _linear_task(n, seed, heteroscedastic)
    XtX = X.T @ X
    if n <= X.shape[1] or np.linalg.cond(XtX) > 1e12:
        raise ValueError("design matrix is singular")
    beta = np.linalg.solve(XtX, X.T @ y)
    e = y - X @ beta
    J = XtX / n
    K = (X * e[:, None] ** 2).T @ X / n
    Ji = np.linalg.inv(J)
    sandwich = Ji @ K @ Ji / n
    sigma2 = float(e @ e) / (n - X.shape[1])
    parametric = sigma2 * np.linalg.inv(XtX + np.eye(X.shape[1]) / prior_var)
    rng = np.random.default_rng(derive_seed(seed, STAGE_DIAGNOSTICS, 6))
    W, _ = draw_weight_batch(n, 0.0, M, rng)
    # per-draw 2x2 normal equations, solved exactly
    pairs = np.stack([X[:, 0] * X[:, 0], X[:, 0] * X[:, 1], X[:, 1] * X[:, 1]], axis=1)
    S = W @ pairs
    A = np.empty((M, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = S[:, 0], S[:, 1], S[:, 1], S[:, 2]
    rhs = W @ (X * y[:, None])
    coefs = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    npl = np.cov(coefs, rowvar=False)
    cfg = {"n": n, "M": M, "seed": seed, "heteroscedastic": heteroscedastic,
           "prior_var": prior_var, "alpha": 0.0, "beta_hat": beta.tolist()}
    return CovarianceReport(npl, sandwich, parametric, cfg)


# -- emission ----------------------------------------------------------------

def write_reports(reports: Sequence, out_dir, name: str) -> tuple[Path, Path]:
    """``<name>.json`` with every report and ``<name>.csv`` with one row each."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in reports]
    jpath = out / f"{name}.json"
    jpath.write_text(json.dumps({"format": "nptl-diagnostics/1", "reports": docs}, indent=2, sort_keys=True))
    rows = []
    for d in docs:
        flat = {k: v for k, v in d.items() if not isinstance(v, (dict, list))}
        flat.update({f"config.{k}": v for k, v in d.get("config", {}).items()
                     if not isinstance(v, (dict, list))})
        rows.append(flat)
    cols = sorted({k for r in rows for k in r})
    cpath = out / f"{name}.csv"
    with cpath.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        wr.writerows(rows)
    return jpath, cpath
