"""Scalar-loop reference evaluations used as independent oracles.

These deliberately avoid numpy vectorisation and share no code with
:mod:`i2ckd.losses`; they exist to be slow and obviously right.
"""
from __future__ import annotations

import math

IGNORE = 255


def prototypes_bruteforce(features, mask, num_classes):
    """Per-pixel accumulation loop. Returns (values [C][K], present [C])."""
    K = len(features)
    h, w = len(mask), len(mask[0])
    sums = [[0.0] * K for _ in range(num_classes)]
    counts = [0] * num_classes
    for y in range(h):
        for x in range(w):
            label = int(mask[y][x])
            if label == IGNORE:
                continue
            counts[label] += 1
            for k in range(K):
                sums[label][k] += float(features[k][y][x])
    values = [
        [s / counts[c] if counts[c] else 0.0 for s in sums[c]] for c in range(num_classes)
    ]
    return values, [n > 0 for n in counts]


def triplet_reference(ps, pt, present, margin):
    C = len(ps)
    total, pairs = 0.0, 0
    for c in range(C):
        for j in range(C):
            if c == j or not (present[c] and present[j]):
                continue
            pairs += 1
            d_pos = math.sqrt(sum((a - b) ** 2 for a, b in zip(ps[c], pt[c])))
            d_neg = math.sqrt(sum((a - b) ** 2 for a, b in zip(ps[c], pt[j])))
            total += max(0.0, margin + d_pos - d_neg)
    return total / pairs if pairs else 0.0


def channel_kld_reference(scores_t, scores_s, temperature):
    T = float(temperature)
    C = len(scores_t)
    total = 0.0
    for k in range(C):
        yt = [float(v) / T for row in scores_t[k] for v in row]
        ys = [float(v) / T for row in scores_s[k] for v in row]
        zt = sum(math.exp(v) for v in yt)
        zs = sum(math.exp(v) for v in ys)
        for a, b in zip(yt, ys):
            p = math.exp(a) / zt
            q = math.exp(b) / zs
            if p > 0:
                total += p * math.log(p / q)
    return T * T / C * total


def task_ce_reference(scores, mask):
    C = len(scores)
    total, n = 0.0, 0
    for y in range(len(mask)):
        for x in range(len(mask[0])):
            label = int(mask[y][x])
            if label == IGNORE:
                continue
            logits = [float(scores[c][y][x]) for c in range(C)]
            top = max(logits)
            lse = top + math.log(sum(math.exp(v - top) for v in logits))
            total += lse - logits[label]
            n += 1
    return total / n if n else 0.0
