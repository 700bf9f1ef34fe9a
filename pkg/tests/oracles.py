"""Slow scalar reference implementations used as test oracles."""

import math


def cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (max(na, 1e-8) * max(nb, 1e-8))


def intra_naive(pos, neg, tau):
    """Symmetric multi-positive InfoNCE written as explicit loops."""
    def one_side(anchor, other):
        n = len(anchor)
        total = 0.0
        for i in range(n):
            same = 0.0
            for k in range(n):
                if k != i:
                    same += math.exp(cos(anchor[i], anchor[k]) / tau)
            cross = 0.0
            for j in range(len(other)):
                cross += math.exp(cos(anchor[i], other[j]) / tau)
            total += -math.log(same / (same + cross))
        return total / n

    return 0.5 * (one_side(pos, neg) + one_side(neg, pos))


def contrast_naive(g_dyn, g_stable, g_aug, tau):
    neg_mass = sum(math.exp(cos(a, g_stable) / tau) for a in g_aug)
    total = 0.0
    for g in g_dyn:
        e = math.exp(cos(g, g_stable) / tau)
        total += -math.log(e / (e + neg_mass))
    return total / len(g_dyn)


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    hits = 0.0
    for p in pos:
        for q in neg:
            hits += 1.0 if p > q else 0.5 if p == q else 0.0
    return hits / (len(pos) * len(neg))


def ap_stepwise(scores, labels):
    """Average precision walking the ranking one item at a time (stable ties)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    tp, ap = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
            ap += tp / rank
    return ap / n_pos


def best_f1_exhaustive(scores, labels):
    best, best_thr = -1.0, None
    for thr in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s < thr and y == 1)
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        if f1 > best:
            best, best_thr = f1, thr
    return best, best_thr
