"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv2d(x, w, b, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for s in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - padding
                                q = j * stride + v - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[s, c, r, q] * w[o, c, u, v]
                    out[s, o, i, j] = acc
    return out


def naive_dense(x, w, b):
    n, fin = x.shape
    fout = w.shape[1]
    out = np.zeros((n, fout))
    for s in range(n):
        for o in range(fout):
            acc = 0.0 if b is None else b[o]
            for i in range(fin):
                acc += x[s, i] * w[i, o]
            out[s, o] = acc
    return out


def brute_variogram(coords, values, bin_width, max_lag):
    n_bins = int(math.ceil(max_lag / bin_width))
    sums = [0.0] * n_bins
    pairs = [0] * n_bins
    for i in range(len(coords)):
        for j in range(i + 1, len(coords)):
            d = math.dist(coords[i], coords[j])
            if d > max_lag:
                continue
            k = min(int(d / bin_width), n_bins - 1)
            sums[k] += (values[i] - values[j]) ** 2
            pairs[k] += 1
    gamma = [s / (2 * p) if p else math.nan for s, p in zip(sums, pairs)]
    return np.array(gamma), np.array(pairs)


def exp_gamma(h, c0, c1, a):
    return 0.0 if h == 0 else c0 + c1 * (1 - math.exp(-h / a))


def dense_krige(coords, values, c0, c1, a, query):
    """Ordinary kriging for one query, assembled entry by entry and solved with numpy."""
    n = len(coords)
    A = np.zeros((n + 1, n + 1))
    rhs = np.zeros(n + 1)
    for i in range(n):
        for j in range(n):
            A[i, j] = 0.0 if i == j else exp_gamma(math.dist(coords[i], coords[j]), c0, c1, a)
        A[i, n] = A[n, i] = 1.0
        rhs[i] = exp_gamma(math.dist(coords[i], query), c0, c1, a)
    rhs[n] = 1.0
    sol = np.linalg.solve(A, rhs)
    w = sol[:n]
    return float(w @ values), float(w @ rhs[:n] + sol[n]), w


def two_pass_sd(values):
    vals = [v for v in values]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def normal_equations(X, z):
    return np.linalg.solve(X.T @ X, X.T @ z)


def stencil(grid_cells, r, c):
    """3x3 neighbourhood as (a..i) in row-major order, north row first."""
    w = grid_cells[r - 1 : r + 2, c - 1 : c + 2]
    return w.ravel().tolist()


def horn_slope(cells, r, c, size):
    a, b, cc, d, e, f, g, h, i = stencil(cells, r, c)
    dzdx = ((cc + 2 * f + i) - (a + 2 * d + g)) / (8 * size)
    dzdy = ((g + 2 * h + i) - (a + 2 * b + cc)) / (8 * size)
    return math.sqrt(dzdx**2 + dzdy**2)


def riley_tri(cells, r, c):
    vals = stencil(cells, r, c)
    centre = vals[4]
    return math.sqrt(sum((v - centre) ** 2 for k, v in enumerate(vals) if k != 4))


def parameter_count_by_shapes(arch):
    """Independent count from layer dimensions alone."""
    total = 0
    c_in, size = 1, arch.input_size
    for layer in arch.conv_layers:
        total += layer.out_channels * c_in * layer.kernel**2 + layer.out_channels
        size = (size + 2 * layer.padding - layer.kernel) // layer.stride + 1
        c_in = layer.out_channels
    size //= arch.pool
    fin = c_in * size * size
    for d in arch.dense_layers:
        total += fin * d.width + d.width
        fin = d.width
    return total + fin + 1
