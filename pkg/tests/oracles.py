"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code: formulas are written out
scalar by scalar so that agreement is meaningful.
"""

import math

import numpy as np


def gamma_iso(shape, sill, a, r, nugget=0.0):
    """Isotropic semivariance at distance ``r`` with practical-range forms."""
    if r == 0:
        return 0.0
    t = r / a
    if shape == "spherical":
        g = 1.5 * t - 0.5 * t**3 if t < 1 else 1.0
    elif shape == "exponential":
        g = 1.0 - math.exp(-3.0 * t)
    elif shape == "gaussian":
        g = 1.0 - math.exp(-3.0 * t * t)
    else:
        raise ValueError(shape)
    return nugget + sill * g


def dense_krige(kind, pts, vals, target, shape, sill, a, nugget=0.0, mean=None):
    """Kriging by one explicit dense solve of the full normal equations."""
    n = len(pts)
    c0 = sill + nugget

    def cov(p, q):
        return c0 - gamma_iso(shape, sill, a, math.dist(p, q), nugget)

    if kind == "ordinary":
        A = np.zeros((n + 1, n + 1))
        b = np.zeros(n + 1)
        for i in range(n):
            for j in range(n):
                A[i, j] = cov(pts[i], pts[j])
            A[i, n] = A[n, i] = 1.0
            b[i] = cov(pts[i], target)
        b[n] = 1.0
        sol = np.linalg.solve(A, b)
        w, mu = sol[:n], sol[n]
        est = float(np.dot(w, vals))
        var = c0 - float(np.dot(w, b[:n])) - mu
    else:
        A = np.array([[cov(p, q) for q in pts] for p in pts])
        b = np.array([cov(p, target) for p in pts])
        w = np.linalg.solve(A, b)
        est = mean + float(np.dot(w, np.asarray(vals) - mean))
        var = c0 - float(np.dot(w, b))
    return est, var, w


def truncnorm_mean(a, b):
    """Mean of a standard normal restricted to ``[a, b]``."""
    pdf = lambda x: 0.0 if math.isinf(x) else math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    cdf = lambda x: 0.5 * math.erfc(-x / math.sqrt(2))
    return (pdf(a) - pdf(b)) / (cdf(b) - cdf(a))


def ks_to_discrete(draws, support, weights):
    """Kolmogorov-Smirnov distance between draws and a discrete distribution."""
    draws = np.sort(np.asarray(draws, dtype=float))
    support = np.asarray(support, dtype=float)
    cum = np.cumsum(weights)
    emp_right = np.searchsorted(draws, support, side="right") / draws.size
    emp_left = np.searchsorted(draws, support, side="left") / draws.size
    left = np.concatenate([[0.0], cum[:-1]])
    return float(max(np.max(np.abs(emp_right - cum)), np.max(np.abs(emp_left - left))))


def lower_quantile(support, weights, p):
    """Smallest atom whose cumulative weight reaches ``p`` (plain loop)."""
    acc = 0.0
    for z, w in zip(support, weights):
        acc += w
        if acc >= p - 1e-12:
            return z
    return support[-1]


def circulant_field_2d(nx, ny, shape, a, rng, n_fields=1):
    """Stationary unit-variance 2D Gaussian fields by circulant embedding (FFT).

    The torus is twice the grid in each direction; any small negative
    eigenvalues of the embedding are clipped to zero.
    """
    mx, my = 2 * nx, 2 * ny
    dx = np.minimum(np.arange(mx), mx - np.arange(mx))
    dy = np.minimum(np.arange(my), my - np.arange(my))
    r = np.hypot(dy[:, None], dx[None, :])
    cov = np.vectorize(lambda d: 1.0 - gamma_iso(shape, 1.0, a, d))(r)
    lam = np.clip(np.fft.fft2(cov).real, 0.0, None) / (mx * my)
    out = []
    for _ in range(n_fields):
        w = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
        f = np.fft.fft2(np.sqrt(lam) * w)
        out.append(f.real[:ny, :nx])
    return out
