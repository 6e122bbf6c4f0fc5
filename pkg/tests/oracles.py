"""Independent reference computations used by the tests.

Nothing here imports the package's numerics: rates and kernel weights are
rebuilt from scipy densities and laws are obtained by brute-force matrix
exponentials.
"""

import itertools
import math

import numpy as np
from scipy import linalg, stats


def gaussian_weights(p, h, sigma, L):
    l = np.arange(-L, L + 1)
    return p * h * stats.norm.pdf(l * h, scale=sigma)


def gaussian_truncation_radius(h, sigma, tol):
    """Smallest L whose discarded cells |y| > (L + 1/2) h hold mass <= tol."""
    L = 0
    while 2 * stats.norm.sf((L + 0.5) * h / sigma) > tol:
        L += 1
    return L


def dense_generator_matrix(b, d, weights):
    """``A = diag(b - d) + W`` with ``W[i, j] = w_{i-j}`` restricted to the window."""
    W = len(b)
    L = (len(weights) - 1) // 2
    A = np.diag(np.asarray(b, float) - np.asarray(d, float))
    for i in range(W):
        for j in range(W):
            if abs(i - j) <= L:
                A[i, j] += weights[i - j + L]
    return A


def capped_ctmc_law(b, d, weights, n0, t, cap):
    """Law at time ``t`` of the window-truncated branching chain.

    States with total population ``<= cap`` are enumerated; any jump above
    the cap goes to one absorbing overflow state.  Returns
    ``(states, probabilities, overflow_probability)``.
    """
    W = len(b)
    L = (len(weights) - 1) // 2
    states = [s for s in itertools.product(range(cap + 1), repeat=W) if sum(s) <= cap]
    index = {s: k for k, s in enumerate(states)}
    over = len(states)
    Q = np.zeros((over + 1, over + 1))

    def add(src, dst, rate):
        if rate <= 0:
            return
        k = index[src]
        j = index.get(dst, over) if sum(dst) <= cap else over
        Q[k, j] += rate
        Q[k, k] -= rate

    for s in states:
        for i in range(W):
            if s[i] == 0:
                continue
            up = list(s)
            up[i] += 1
            add(s, tuple(up), b[i] * s[i])
            down = list(s)
            down[i] -= 1
            add(s, tuple(down), d[i] * s[i])
            for l in range(-L, L + 1):
                tgt = i + l
                if 0 <= tgt < W:
                    m = list(s)
                    m[tgt] += 1
                    add(s, tuple(m), weights[l + L] * s[i])
    p0 = np.zeros(over + 1)
    p0[index[tuple(n0)]] = 1.0
    pt = p0 @ linalg.expm(Q * t)
    return states, pt[:over], pt[over]


def yule_variance(n0, b, t):
    return n0 * math.exp(b * t) * (math.exp(b * t) - 1)


def thinning_variance(n0, d, t):
    q = math.exp(-d * t)
    return n0 * q * (1 - q)
