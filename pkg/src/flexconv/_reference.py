"""Pure-numpy fallback for the compiled kernels.

Mirrors the `_native` signatures exactly so the backend can be swapped at
import time (and so the benchmark can compare both). Point-chunked to keep
temporaries bounded at large n; all reductions happen in a fixed order, so
repeated calls are bitwise reproducible. This is also the "naive" variant the
benchmark reports against the tuned extension.
"""

from __future__ import annotations

import heapq

import numpy as np

KERNEL_VERSION = 1

_CHUNK = 65536


def flex_conv_forward(features, locations, neighbors, theta, theta_b, out, num_threads):
    n = features.shape[0]
    cout, c_in, d = theta.shape
    th_flat = theta.reshape(cout, c_in * d)
    for a in range(0, n, _CHUNK):
        b = min(a + _CHUNK, n)
        nb = neighbors[a:b]
        fnb = features[nb]  # (m, k, C)
        offs = locations[a:b, None, :] - locations[nb]  # (m, k, d)
        moments = np.einsum("mkc,mkt->mct", fnb, offs)
        sums = fnb.sum(axis=1)
        out[a:b] = moments.reshape(b - a, c_in * d) @ th_flat.T
        out[a:b] += sums @ theta_b.T
    return out


def flex_conv_backward(upstream, features, locations, neighbors, theta, theta_b,
                       d_features, d_locations, d_theta, d_theta_b, with_locations):
    n = features.shape[0]
    for a in range(0, n, _CHUNK):
        b = min(a + _CHUNK, n)
        g = upstream[a:b]
        nb = neighbors[a:b]
        fnb = features[nb]
        offs = locations[a:b, None, :] - locations[nb]
        moments = np.einsum("mkc,mkt->mct", fnb, offs)
        d_theta += np.einsum("mp,mct->pct", g, moments)
        d_theta_b += g.T @ fnb.sum(axis=1)
        # per-point effective weights: w_ij(c) = bias_w[c] + <off_w[c,:], l_i - l_j>
        off_w = np.einsum("mp,pct->mct", g, theta)
        bias_w = g @ theta_b
        contrib = bias_w[:, None, :] + np.einsum("mkt,mct->mkc", offs, off_w)
        np.add.at(d_features, nb, contrib)
        if with_locations:
            d_off = np.einsum("mkc,mct->mkt", fnb, off_w)
            d_locations[a:b] += d_off.sum(axis=1)
            np.add.at(d_locations, nb, -d_off)
    return d_features


def max_pool_forward(features, neighbors, out, argmax, num_threads):
    n = neighbors.shape[0]
    c = features.shape[1]
    for a in range(0, n, _CHUNK):
        b = min(a + _CHUNK, n)
        nb = neighbors[a:b]
        vals = features[nb]  # (m, k, C)
        best = vals.max(axis=1)
        # ties go to the lowest global index
        winners = np.where(vals == best[:, None, :], nb[:, :, None], np.iinfo(np.int64).max)
        out[a:b] = best
        argmax[a:b] = winners.min(axis=1)
    return out


def max_pool_backward(upstream, argmax, d_features):
    cols = np.broadcast_to(np.arange(upstream.shape[1]), upstream.shape)
    np.add.at(d_features, (argmax, cols), upstream)
    return d_features


_BRUTE_LIMIT = 4096


def _brute_rows(points, a, b, k, out):
    d2 = ((points[a:b, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")  # stable: ties stay index-ascending
    rows = np.arange(a, b)
    others = order[order != rows[:, None]].reshape(b - a, points.shape[0] - 1)
    out[a:b, 0] = rows
    out[a:b, 1:] = others[:, : k - 1]


def knn_self_query(points, axis, split, left, right, lo, hi, perm, k, out, num_threads):
    n = points.shape[0]
    if n <= _BRUTE_LIMIT:
        for a in range(0, n, 512):
            _brute_rows(points, a, min(a + 512, n), k, out)
        return out
    for i in range(n):
        out[i, 0] = i
        if k == 1:
            continue
        q = points[i]
        heap = []  # max-heap of (-dist2, -idx): worst candidate on top
        stack = [0]
        while stack:
            node = stack.pop()
            ax = axis[node]
            if ax < 0:
                for idx in perm[lo[node]:hi[node]]:
                    if idx == i:
                        continue
                    dist = float(((q - points[idx]) ** 2).sum())
                    entry = (-dist, -idx)
                    if len(heap) < k - 1:
                        heapq.heappush(heap, entry)
                    elif entry > heap[0]:
                        heapq.heapreplace(heap, entry)
            else:
                diff = q[ax] - split[node]
                near, far = (left[node], right[node]) if diff < 0 else (right[node], left[node])
                if len(heap) < k - 1 or diff * diff <= -heap[0][0]:
                    stack.append(far)
                stack.append(near)
        found = sorted((-nd, -ni) for nd, ni in heap)
        out[i, 1:] = [ni for _, ni in found]
    return out
