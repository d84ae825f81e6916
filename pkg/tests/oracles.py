"""Independent reference computations used by the test-suite.

Nothing here imports the code paths it checks.
"""
from __future__ import annotations

import itertools

import numpy as np


def conv_params(c_in, c_out, k):
    return c_in * c_out * k * k + c_out


def encoder_params(branch, onebyone, s1f, s1o, d1, s2f, s2o, d2, n_patches=9, noblocks=False):
    total = n_patches * (conv_params(1, branch, 3) + 3 * conv_params(branch, branch, 3))
    total += conv_params(n_patches * branch, onebyone, 1)
    if noblocks:
        return total
    c = onebyone
    for first, out, d in ((s1f, s1o, d1), (s2f, s2o, d2)):
        total += conv_params(c, first, 3) + conv_params(first, out, 3)
        b = d // 2
        total += conv_params(c, b, 3) + conv_params(b, b, 3) + conv_params(c, b, 1)
        c = d
    return total


def skid_params(filters, n_classes, branch=256, onebyone=1024, fc=1024, noblocks=False):
    s1f, s1o, d1, s2f, s2o, d2 = filters
    enc = encoder_params(branch, onebyone, s1f, s1o, d1, s2f, s2o, d2, noblocks=noblocks)
    width = onebyone if noblocks else d2
    return enc + width * fc + fc + fc * n_classes + n_classes


def convlstm_head_params(in_ch, hidden=512, layers=2, k=3, n_labels=3):
    total = 0
    c = in_ch
    for _ in range(layers):
        total += 4 * (c + hidden) * hidden * k * k + 4 * hidden
        c = hidden
    return total + hidden * n_labels + n_labels


def cnn3d_head_params(in_ch, hidden=512, layers=2, k=3, n_labels=3):
    total = 0
    c = in_ch
    for _ in range(layers):
        total += c * hidden * k ** 3 + hidden
        c = hidden
    return total + hidden * n_labels + n_labels


def pairwise_auc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    wins = 0.0
    for p, n in itertools.product(pos, neg):
        wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def ensemble_bruteforce(h, w):
    """h[plane][label], w[label][plane] -> (bits, scores) with plain loops."""
    n_labels, n_planes = len(w), len(w[0])
    scores, bits = [], []
    for j in range(n_labels):
        acc = 0.0
        for i in range(n_planes):
            acc += w[j][i] * h[i][j]
        scores.append(acc)
        bits.append(1 if acc >= 0.5 else 0)
    return bits, scores


def recover_perm_from_means(patches, n_patches=9):
    """Source index of each output slot from patch means (source i has mean i/N)."""
    means = [float(np.mean(p)) for p in patches]
    src_of_slot = [int(round(m * n_patches)) for m in means]
    perm = [0] * n_patches
    for slot, src in enumerate(src_of_slot):
        perm[src] = slot
    return tuple(perm)


def central_difference(f, x0, h):
    return (f(x0 + h) - f(x0 - h)) / (2 * h)
