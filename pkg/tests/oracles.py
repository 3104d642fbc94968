"""Explicit-loop reference implementations, written independently of the package."""

import math

import numpy as np


def irc_loop(img, rep, tau):
    B = len(img)
    ni = [[x / math.sqrt(sum(v * v for v in row)) for x in row] for row in img]
    nr = [[x / math.sqrt(sum(v * v for v in row)) for x in row] for row in rep]
    sim = [[sum(a * b for a, b in zip(ni[i], nr[j])) / tau for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        # image i against all reports
        denom = sum(math.exp(sim[i][j]) for j in range(B))
        total += -math.log(math.exp(sim[i][i]) / denom)
        # report i against all images
        denom = sum(math.exp(sim[j][i]) for j in range(B))
        total += -math.log(math.exp(sim[i][i]) / denom)
    return total / (2 * B)


def mlr_loop(y, x, gamma):
    B, K = len(y), len(y[0])
    total = 0.0
    for i in range(B):
        for k in range(K):
            if x[i][k] == 1:
                total += math.log(y[i][k])
            else:
                total += gamma * math.log(1 - y[i][k])
    return -total / (B * K)


def seg_loop(X, Y, floor=1e-8):
    """X, Y nested lists B x V x Q."""
    B = len(X)
    out = 0.0
    for b in range(B):
        V, Q = len(X[b]), len(X[b][0])
        ce = 0.0
        for v in range(V):
            for q in range(Q):
                ce += X[b][v][q] * math.log(max(Y[b][v][q], floor))
        d = 0.0
        for q in range(Q):
            num = sum(X[b][v][q] * Y[b][v][q] for v in range(V))
            den = sum(X[b][v][q] ** 2 for v in range(V)) + sum(Y[b][v][q] ** 2 for v in range(V))
            d += num / den if den > 0 else 0.0
        out += 1 - ce / V - 2 * d / Q
    return out / B


def dice_loop(a, b):
    a = np.asarray(a).ravel().tolist()
    b = np.asarray(b).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    total = sum(1 for x in a if x) + sum(1 for y in b if y)
    return 1.0 if total == 0 else 2 * inter / total


def surface_loop(mask):
    mask = np.asarray(mask).astype(bool)
    pts = []
    for idx in zip(*np.nonzero(mask)):
        for axis in range(mask.ndim):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not (0 <= n[axis] < mask.shape[axis]) or not mask[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return sorted(set(pts))


def percentile_linear(values, q):
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def hd95_loop(A, B, q=95.0):
    if not A or not B:
        return None
    def directed(P, R):
        return [min(math.sqrt(sum((p - r) ** 2 for p, r in zip(a, b))) for b in R) for a in P]
    return max(percentile_linear(directed(A, B), q), percentile_linear(directed(B, A), q))
