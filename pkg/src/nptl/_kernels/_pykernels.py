"""Pure-Python reference kernels.

These mirror ``_ckernels.pyx`` operation for operation, including the order in
which uniforms are pulled from the generator, so both backends return
bit-identical results for the same ``numpy.random.Generator`` state.
"""

import math

import numpy as np

# Uniforms are pulled in fixed-size chunks; any leftover at the end of a call
# is discarded. The compiled kernel uses the same chunking.
CHUNK = 1024


class _UniformStream:
    __slots__ = ("rng", "buf", "pos")

    def __init__(self, rng):
        self.rng = rng
        self.buf = rng.random(CHUNK).tolist()
        self.pos = 0

    def next(self):
        if self.pos == CHUNK:
            self.buf = self.rng.random(CHUNK).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


def _normal(src):
    # Marsaglia polar method; second variate discarded.
    while True:
        u1 = 2.0 * src.next() - 1.0
        u2 = 2.0 * src.next() - 1.0
        s = u1 * u1 + u2 * u2
        if 0.0 < s < 1.0:
            return u1 * math.sqrt(-2.0 * math.log(s) / s)


def _log_gamma_ge1(a, src):
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        while True:
            x = _normal(src)
            v = 1.0 + c * x
            if v > 0.0:
                break
        v = v * v * v
        u = src.next()
        if u < 1.0 - 0.0331 * (x * x) * (x * x):
            return math.log(d) + math.log(v)
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d) + math.log(v)


def _log_gamma(a, src):
    if a == 0.0:
        return -math.inf
    if a >= 1.0:
        return _log_gamma_ge1(a, src)
    # Ga(a) = Ga(a + 1) * U**(1/a), kept in log space
    lg = _log_gamma_ge1(a + 1.0, src)
    u = 1.0 - src.next()
    return lg + math.log(u) / a


def log_gamma_fill(shapes, rng):
    """Log of independent Gamma(shape, 1) draws, one per entry of ``shapes``.

    A shape of exactly zero yields ``-inf`` (point mass at zero).
    """
    shapes = np.ascontiguousarray(shapes, dtype=np.float64)
    out = np.empty(shapes.shape[0], dtype=np.float64)
    src = _UniformStream(rng)
    for i, a in enumerate(shapes.tolist()):
        out[i] = _log_gamma(a, src)
    return out


def ks_perm_stats(values, labels, n1, n2):
    """Two-sample KS statistic for each row of a label matrix.

    ``values`` is the pooled sample sorted ascending; ``labels[p, i]`` is 0 if
    the ``i``-th pooled value belongs to the first sample under permutation
    ``p`` and 1 otherwise.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    labels = np.atleast_2d(np.ascontiguousarray(labels, dtype=np.uint8))
    n = values.shape[0]
    ends = np.flatnonzero(np.append(values[1:] != values[:-1], True))
    out = np.empty(labels.shape[0], dtype=np.float64)
    step = max(1, 4_000_000 // max(n, 1))
    for start in range(0, labels.shape[0], step):
        block = labels[start:start + step]
        c2 = np.cumsum(block, axis=1, dtype=np.int64)
        c1 = (np.arange(1, n + 1, dtype=np.int64) - c2)
        d = np.abs(c1[:, ends] / n1 - c2[:, ends] / n2)
        out[start:start + step] = d.max(axis=1)
    return out
