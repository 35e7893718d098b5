"""Independent reference implementations used by the tests.

Everything here is written from the definitions with plain loops and
float64 arithmetic, sharing no code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def contrastive_loss_loops(z, positives, tau):
    """Sum over anchors of -1/|P(i)| sum_p log(exp(s_ip/tau) / sum_{a != i} exp(s_ia/tau))."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    total = 0.0
    skipped = 0
    for i in range(n):
        pos = list(positives[i])
        if not pos:
            skipped += 1
            continue
        denom = 0.0
        for a in range(n):
            if a != i:
                denom += math.exp(float(np.dot(z[i], z[a])) / tau)
        acc = 0.0
        for p in pos:
            acc += math.log(math.exp(float(np.dot(z[i], z[p])) / tau) / denom)
        total += -acc / len(pos)
    return total, skipped


def positives_by_pairs(keys):
    """P(i) by comparing every pair of ancestry keys."""
    n = len(keys)
    return [[j for j in range(n) if j != i and keys[j] == keys[i]] for i in range(n)]


def hierarchical_loss_loops(z, patient_keys, slide_keys, patch_keys, tau, lambdas, levels):
    """Weighted sum of per-level losses; ``lambdas`` maps level name -> weight."""
    keys = {"patch": patch_keys, "slide": slide_keys, "patient": patient_keys}
    per = {}
    for lv in levels:
        per[lv] = contrastive_loss_loops(z, positives_by_pairs(keys[lv]), tau)[0]
    return sum(lambdas[lv] * per[lv] for lv in levels), per


def nt_xent_pairs(z, pairs, tau):
    """SimCLR-style loss: each row's single partner is its positive, every other row a negative."""
    z = np.asarray(z, dtype=np.float64)
    partner = {}
    for a, b in pairs:
        partner[a] = b
        partner[b] = a
    n = len(z)
    sim = z @ z.T / tau
    total = 0.0
    for i in range(n):
        logits = [sim[i, j] for j in range(n) if j != i]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        total += lse - sim[i, partner[i]]
    return total


def numeric_grad(f, x, h):
    """Central differences of scalar ``f`` over every coordinate of float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def adamw_scalar(p, g, m, v, t, lr, b1, b2, eps, wd):
    """One AdamW step on a Python float, decay first."""
    p = p * (1 - lr * wd)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return p - lr * mhat / (math.sqrt(vhat) + eps), m, v


def knn_bruteforce(train_x, train_y, test_x, k, n_classes):
    """Full sort per query; ties broken by lower train index; argmax ties by lower class."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    scores = np.zeros((len(test_x), n_classes))
    preds = []
    for q in range(len(test_x)):
        sims = [(float(np.dot(test_x[q], train_x[j])), j) for j in range(len(train_x))]
        sims.sort(key=lambda t: (-t[0], t[1]))
        top = sims[:k]
        tot = sum(s for s, _ in top)
        row = [0.0] * n_classes
        if tot > 0:
            for s, j in top:
                row[int(train_y[j])] += s / tot
        else:
            for s, j in top:
                row[int(train_y[j])] += 1.0 / len(top)
        best = 0
        for c in range(1, n_classes):
            if row[c] > row[best]:
                best = c
        scores[q] = row
        preds.append(best)
    return scores, np.array(preds)


def auroc_pairs(scores, positive):
    """Probability a positive outscores a negative, ties counted 1/2."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def auprc_steps(scores, positive):
    """Sum over distinct thresholds (high to low) of precision * recall increment."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    area = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= thr
        tp = np.sum(sel & positive)
        precision = tp / sel.sum()
        recall = tp / n_pos
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return float(area)


def mca_from_predictions(pred, labels, n_classes):
    recalls = []
    for c in range(n_classes):
        members = [i for i in range(len(labels)) if labels[i] == c]
        if members:
            recalls.append(sum(1 for i in members if pred[i] == c) / len(members))
    return sum(recalls) / len(recalls)


def group_mean(scores, keys):
    """Group-by average with groups in first-appearance order."""
    order, sums, counts = [], {}, {}
    for row, key in zip(scores, keys):
        if key not in sums:
            order.append(key)
            sums[key] = np.zeros(len(row))
            counts[key] = 0
        sums[key] += row
        counts[key] += 1
    return order, np.array([sums[k] / counts[k] for k in order])


def effective_rank_svd(v):
    v = np.asarray(v, dtype=np.float64)
    v = v - v.mean(axis=0)
    s = np.linalg.svd(v, compute_uv=False)
    if s.sum() == 0:
        return 1.0
    p = s / s.sum()
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def mean_offdiag_cosine(v):
    v = np.asarray(v, dtype=np.float64)
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    n = len(u)
    tot = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                tot += float(u[i] @ u[j])
    return tot / (n * (n - 1))
