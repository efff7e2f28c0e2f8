"""Compiled scalar kernels: normal CDF/quantile, truncated draws, Gibbs sweeps.

Everything here consumes pre-drawn uniforms, so a realization's numbers depend
only on its own random stream and never on how realizations are batched.
"""

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)

# Acklam's rational approximation to the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@njit(cache=True)
def norm_cdf(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True)
def norm_sf(x):
    return 0.5 * math.erfc(x / SQRT2)


@njit(cache=True)
def norm_ppf(p):
    """Inverse standard normal CDF; rational start plus one Halley step."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    # refine against erfc; in the upper half use the survival side for accuracy
    if p < 0.5:
        e = norm_cdf(x) - p
    else:
        e = (1.0 - p) - norm_sf(x)
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit(cache=True)
def _upper_tail_draw(a, b, u):
    """Standard normal restricted to [a, b] with a >= 0, by inverse survival."""
    qa = norm_sf(a)
    qb = norm_sf(b)
    if qa - qb > 1e-300 and qa > 0.0:
        t = qa - u * (qa - qb)
        if t <= 0.0:
            return b
        x = -norm_ppf(t)
    else:
        # far tail: exponential approximation of the truncated density
        width = b - a
        if math.isinf(width):
            x = a - math.log(1.0 - u) / a
        else:
            x = a - math.log(1.0 - u * (1.0 - math.exp(-a * width))) / a
    return min(max(x, a), b)


@njit(cache=True)
def truncnorm_draw(mean, sd, lo, hi, u):
    """Inverse-CDF draw of N(mean, sd^2) truncated to [lo, hi] using uniform ``u``."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    if a >= 0.0:
        z = _upper_tail_draw(a, b, u)
    elif b <= 0.0:
        z = -_upper_tail_draw(-b, -a, 1.0 - u)
    else:
        pa = norm_cdf(a)
        pb = norm_cdf(b)
        z = norm_ppf(pa + u * (pb - pa))
        z = min(max(z, a), b)
    x = mean + sd * z
    return min(max(x, lo), hi)


@njit(cache=True)
def norm_cdf_array(x):
    out = np.empty(x.size)
    for i in range(x.size):
        out[i] = norm_cdf(x[i])
    return out


@njit(cache=True)
def norm_ppf_array(p):
    out = np.empty(p.size)
    for i in range(p.size):
        out[i] = norm_ppf(p[i])
    return out


@njit(cache=True)
def gibbs_sweeps(Q, lo, hi, u_start, u_sweeps):
    """Truncated-Gaussian Gibbs sampler for N(0, Q^-1) restricted to a box.

    Starts from independent N(0, 1) draws truncated to each interval and runs
    one sweep per row of ``u_sweeps``, updating coordinates in index order
    from their full conditionals.
    """
    n = lo.size
    x = np.empty(n)
    for i in range(n):
        x[i] = truncnorm_draw(0.0, 1.0, lo[i], hi[i], u_start[i])
    for s in range(u_sweeps.shape[0]):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                if j != i:
                    acc += Q[i, j] * x[j]
            qii = Q[i, i]
            x[i] = truncnorm_draw(-acc / qii, 1.0 / math.sqrt(qii), lo[i], hi[i], u_sweeps[s, i])
    return x


@njit(cache=True)
def segment_quantile(indptr, cum, p):
    """Position (within each CSR row) of the smallest atom with cumulative weight >= p[row]."""
    m = indptr.size - 1
    out = np.empty(m, dtype=np.int64)
    for r in range(m):
        lo = indptr[r]
        hi = indptr[r + 1]
        target = p[r] - 1e-12
        k = lo
        # binary search for the first cum >= target in [lo, hi)
        a, b = lo, hi
        while a < b:
            mid = (a + b) // 2
            if cum[mid] < target:
                a = mid + 1
            else:
                b = mid
        k = a
        if k >= hi:
            k = hi - 1
        out[r] = k
    return out


@njit(cache=True)
def sgs_path(order, nb, w, sd, eps):
    """Unconditional sequential simulation along a fixed visiting order.

    Row ``t`` of ``nb``/``w`` holds the already-visited neighbours of cell
    ``order[t]`` (padded with -1) and their simple-kriging weights.
    """
    n = order.size
    x = np.zeros(n)
    for t in range(n):
        acc = 0.0
        for j in range(nb.shape[1]):
            c = nb[t, j]
            if c < 0:
                break
            acc += w[t, j] * x[c]
        x[order[t]] = acc + sd[t] * eps[t]
    return x
