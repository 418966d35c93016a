"""Independent straight-line reference implementations used as test oracles.

Deliberately written with plain Python loops and no shared code with the
package, so a bug in the production path cannot hide in its own oracle.
"""

from __future__ import annotations

import math


def nms_trace(scores, k):
    """Literal greedy-NMS trace.

    delta = floor(n / 4k); k rounds of: argmax (ties to the lowest index),
    then set every score within delta of the pick to -1. Scores are clamped
    to [0, 1] first. If everything is already -1, take the lowest-index
    frame not yet chosen and flag fallback. Returns (sorted picks, delta,
    fallback).
    """
    n = len(scores)
    delta = n // (4 * k)
    s = [min(max(float(x), 0.0), 1.0) for x in scores]
    chosen = []
    fallback = False
    for _ in range(k):
        best_i = 0
        best_v = s[0]
        for i in range(1, n):
            if s[i] > best_v:
                best_i, best_v = i, s[i]
        if best_v == -1.0:
            fallback = True
            for i in range(n):
                if i not in chosen:
                    best_i = i
                    break
        chosen.append(best_i)
        for j in range(n):
            if abs(best_i - j) <= delta:
                s[j] = -1.0
    return sorted(chosen), delta, fallback


def bce_reference(s, t):
    """-[t ln s + (1-t) ln(1-s)] averaged, straight from the formula."""
    total = 0.0
    for si, ti in zip(s, t):
        total += -(ti * math.log(si) + (1.0 - ti) * math.log(1.0 - si))
    return total / len(s)


def xent_reference(logits_rows, targets):
    """Softmax cross-entropy averaged over rows, straight from the formula."""
    total = 0.0
    for row, target in zip(logits_rows, targets):
        mx = max(row)
        z = sum(math.exp(v - mx) for v in row)
        total += -(row[target] - mx - math.log(z))
    return total / len(targets)
