"""Dirichlet and block-Dirichlet weight sampling via the Gamma construction.

All draws go through log-space Gamma variates so that concentrations far
below one (``alpha / n`` is routinely tiny) never underflow before
normalisation. Every function takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._kernels import log_gamma_fill

__all__ = [
    "DirichletSpec",
    "BlockMapping",
    "WeightDraw",
    "WeightUnderflowWarning",
    "sample_gamma",
    "sample_log_gamma",
    "sample_dirichlet",
    "sample_log_dirichlet",
    "make_block_mapping",
    "draw_weights_blocked",
    "draw_weights_nonblocked",
    "draw_weights_decomposed",
    "draw_weight_batch",
    "DecomposedDraw",
]


class WeightUnderflowWarning(RuntimeWarning):
    """Some weights with positive concentration rounded to exactly zero."""


@dataclass(frozen=True)
class DirichletSpec:
    n: int
    L: int
    alpha: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 1 <= self.L <= self.n:
            raise ValueError(f"block count L must satisfy 1 <= L <= n, got L={self.L}, n={self.n}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class BlockMapping:
    """Independent random partitions of ``range(n)`` into ``L`` blocks.

    ``train_assign[i]`` and ``pseudo_assign[i]`` are 0-based block ids.
    """

    train_assign: np.ndarray
    pseudo_assign: np.ndarray
    L: int

    @property
    def n(self) -> int:
        return int(self.train_assign.shape[0])

    def block_sizes(self, which: str = "train") -> np.ndarray:
        assign = self.train_assign if which == "train" else self.pseudo_assign
        return np.bincount(assign, minlength=self.L)


@dataclass(frozen=True)
class WeightDraw:
    """Per-datum weights for the real (``w``) and pseudo (``w_tilde``) atoms."""

    w: np.ndarray
    w_tilde: np.ndarray
    mapping: Optional[BlockMapping] = None

    @property
    def n(self) -> int:
        return int(self.w.shape[0])

    @property
    def total(self) -> float:
        return float(self.w.sum() + self.w_tilde.sum())

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.w, self.w_tilde])

    def __add__(self, other: "WeightDraw") -> "WeightDraw":
        return WeightDraw(self.w + other.w, self.w_tilde + other.w_tilde)


def _check_shape(shape):
    shape = np.asarray(shape, dtype=np.float64)
    if not np.all(shape > 0):
        raise ValueError("Gamma shape must be strictly positive")
    return shape


def sample_log_gamma(shape, rng: np.random.Generator) -> np.ndarray:
    """Log of independent Gamma(shape, 1) draws (vectorised over ``shape``)."""
    shape = _check_shape(shape)
    flat = log_gamma_fill(shape.ravel(), rng)
    return flat.reshape(shape.shape)


def sample_gamma(shape: float, rng: np.random.Generator) -> float:
    """One Gamma(shape, 1) variate.

    Shapes below one use ``Ga(a) = Ga(a + 1) * U**(1/a)`` evaluated in log
    space; the exponentiated result may round to 0.0 but is never negative
    or NaN.
    """
    lg = sample_log_gamma(np.array([shape]), rng)[0]
    return float(np.exp(lg))


def _lse(x: np.ndarray, b: Optional[np.ndarray] = None) -> float:
    # 1-D log-sum-exp; scipy's version costs more than a small draw itself
    m = x.max()
    if not np.isfinite(m):
        return float(m)
    e = np.exp(x - m)
    return float(m + np.log(e.sum() if b is None else e @ b))


def _log_dirichlet(concentration: np.ndarray, rng) -> np.ndarray:
    # zero concentrations are admitted here and give -inf (weight exactly 0)
    lg = log_gamma_fill(concentration, rng)
    return lg - _lse(lg)


def sample_log_dirichlet(concentration, rng: np.random.Generator) -> np.ndarray:
    """Log of a Dirichlet draw; stays finite where the linear value underflows."""
    conc = np.asarray(concentration, dtype=np.float64)
    if conc.ndim != 1 or conc.shape[0] == 0:
        raise ValueError("concentration must be a non-empty vector")
    if not np.all(conc > 0):
        raise ValueError("concentration entries must be strictly positive")
    return _log_dirichlet(conc, rng)


def sample_dirichlet(concentration, rng: np.random.Generator) -> np.ndarray:
    """Draw from Dir(concentration) by normalising independent Gamma variates."""
    p = np.exp(sample_log_dirichlet(concentration, rng))
    return p / p.sum()


def make_block_mapping(n: int, L: int, rng: np.random.Generator) -> BlockMapping:
    """Uniformly random partitions of ``[n]`` into ``L`` near-equal blocks.

    Block sizes are ``floor(n/L)`` or ``ceil(n/L)``. Train and pseudo
    assignments are drawn independently.
    """
    if not 1 <= L <= n:
        raise ValueError(f"block count L must satisfy 1 <= L <= n, got L={L}, n={n}")
    base = np.arange(n, dtype=np.int64) % L
    train = np.empty(n, dtype=np.int64)
    pseudo = np.empty(n, dtype=np.int64)
    train[rng.permutation(n)] = base
    pseudo[rng.permutation(n)] = base
    return BlockMapping(train, pseudo, int(L))


def _scaled(log_p: np.ndarray, counts: np.ndarray, total: float) -> np.ndarray:
    # weights s.t. sum_j counts[j] * out[j] == total; normaliser in log space
    with np.errstate(divide="ignore"):
        log_mass = _lse(log_p, counts)
    return total * np.exp(log_p - log_mass)


def _warn_underflow(values: np.ndarray, concentration_positive: bool, what: str):
    if concentration_positive:
        zeros = int(np.count_nonzero(values == 0.0))
        if zeros:
            warnings.warn(
                f"{zeros} of {values.size} {what} weights underflowed to 0.0 "
                "despite positive concentration",
                WeightUnderflowWarning,
                stacklevel=3,
            )


def draw_weights_blocked(
    spec: DirichletSpec,
    mapping: BlockMapping,
    rng: np.random.Generator,
    warn_underflow: bool = False,
) -> WeightDraw:
    """Block-Dirichlet weights scaled so that ``sum(w) + sum(w_tilde) == 2n``.

    ``(v, v_tilde) ~ Dir(1 x L, alpha/n x L)`` and datum ``i`` receives the
    weight of its block. With ``L`` dividing ``n`` the scale factor is exactly
    ``2L``; otherwise block sizes are accounted for so the total is still 2n.
    """
    n, L = spec.n, spec.L
    if mapping.n != n or mapping.L != L:
        raise ValueError(f"mapping (n={mapping.n}, L={mapping.L}) does not match spec (n={n}, L={L})")
    conc = np.concatenate([np.ones(L), np.full(L, spec.alpha / n)])
    log_p = _log_dirichlet(conc, rng)
    counts = np.concatenate([mapping.block_sizes("train"), mapping.block_sizes("pseudo")])
    v = _scaled(log_p, counts.astype(np.float64), 2.0 * n)
    w = v[:L][mapping.train_assign]
    w_tilde = v[L:][mapping.pseudo_assign]
    if warn_underflow:
        _warn_underflow(w_tilde, spec.alpha > 0, "pseudo")
    return WeightDraw(w, w_tilde, mapping)


def draw_weights_nonblocked(
    n: int,
    alpha: float,
    rng: np.random.Generator,
    warn_underflow: bool = False,
) -> WeightDraw:
    """``(w, w_tilde) ~ 2n * Dir(1 x n, alpha/n x n)`` over all 2n atoms."""
    DirichletSpec(n, 1, alpha)
    conc = np.concatenate([np.ones(n), np.full(n, alpha / n)])
    log_p = _log_dirichlet(conc, rng)
    v = 2.0 * n * np.exp(log_p)
    if warn_underflow:
        _warn_underflow(v[n:], alpha > 0, "pseudo")
    return WeightDraw(v[:n], v[n:], None)


@dataclass(frozen=True)
class DecomposedDraw:
    """``V_n Q + (1 - V_n) B_n`` split of a posterior-bootstrap weight vector."""

    v_n: float
    q_weights: np.ndarray
    b_weights: np.ndarray

    def composed(self) -> np.ndarray:
        """Normalised weights on the ``n`` data atoms followed by ``T`` pseudo atoms."""
        return np.concatenate([(1.0 - self.v_n) * self.b_weights, self.v_n * self.q_weights])


def draw_weights_decomposed(
    n: int,
    T: int,
    alpha: float,
    rng: np.random.Generator,
    L: Optional[int] = None,
    mapping: Optional[np.ndarray] = None,
) -> DecomposedDraw:
    """Draw the three independent pieces of the mixture decomposition.

    ``G = sum_j Ga(alpha/T)`` over the pseudo atoms, ``H_n = (n/L) Ga(L, 1)``,
    ``V_n = G / (G + H_n)``; ``Q`` normalises the pseudo Gamma variates and
    ``B_n`` spreads ``L`` normalised block Gammas over the data. ``L`` defaults
    to ``n`` (no blocking), where the composed vector is exactly
    ``Dir(1 x n, alpha/T x T)``. With blocking, ``L`` must divide ``n``.
    """
    if n < 1 or T < 1:
        raise ValueError("n and T must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    L = n if L is None else int(L)
    if not 1 <= L <= n or n % L:
        raise ValueError(f"L must divide n, got L={L}, n={n}")
    lg_tilde = log_gamma_fill(np.full(T, alpha / T), rng)
    lg = log_gamma_fill(np.ones(L), rng)
    log_G = logsumexp(lg_tilde)
    log_H = np.log(n / L) + logsumexp(lg)
    v_n = float(np.exp(log_G - np.logaddexp(log_G, log_H)))
    q = np.exp(lg_tilde - log_G)
    if mapping is None:
        mapping = np.empty(n, dtype=np.int64)
        mapping[rng.permutation(n)] = np.arange(n) % L
    eta = np.exp(lg - logsumexp(lg))
    b = eta[mapping] * (L / n)
    return DecomposedDraw(v_n, q / q.sum(), b / b.sum())


def draw_weight_batch(
    n: int,
    alpha: float,
    draws: int,
    rng: np.random.Generator,
    L: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``draws`` independent weight vectors as ``(W, W_tilde)``, each ``(draws, n)``.

    ``L=None`` gives the non-blocked law; otherwise every row uses a fresh
    block mapping. Same laws as :func:`draw_weights_nonblocked` and
    :func:`draw_weights_blocked`, sampled in one pass over the generator.
    """
    DirichletSpec(n, 1 if L is None else L, alpha)
    k = n if L is None else L
    conc = np.concatenate([np.ones(k), np.full(k, alpha / n)])
    lg = log_gamma_fill(np.tile(conc, draws), rng).reshape(draws, 2 * k)
    if L is None:
        log_p = lg - logsumexp(lg, axis=1, keepdims=True)
        v = 2.0 * n * np.exp(log_p)
        return v[:, :n], v[:, n:]
    base = np.arange(n, dtype=np.int64) % L
    tiles = np.tile(base, (draws, 1))
    train = rng.permuted(tiles, axis=1)
    pseudo = rng.permuted(tiles, axis=1)
    sizes = np.bincount(base, minlength=L).astype(np.float64)
    counts = np.concatenate([sizes, sizes])
    with np.errstate(divide="ignore"):
        log_mass = logsumexp(lg, axis=1, b=counts, keepdims=True)
    v = 2.0 * n * np.exp(lg - log_mass)
    rows = np.arange(draws)[:, None]
    return v[:, :L][rows, train], v[:, L:][rows, pseudo]
