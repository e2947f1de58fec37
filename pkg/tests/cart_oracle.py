"""Plain-python exhaustive CART used as an independent reference.

Every (feature, threshold) candidate is scored by directly recomputing the
children's summed squared error; no running sums are shared with the
compiled implementation.
"""

import math


def _sse(rows):
    n = len(rows)
    k = len(rows[0])
    total = 0.0
    for c in range(k):
        mu = math.fsum(r[c] for r in rows) / n
        total += math.fsum((r[c] - mu) ** 2 for r in rows)
    return total


def _mean(rows):
    n = len(rows)
    return [math.fsum(r[c] for r in rows) / n for c in range(len(rows[0]))]


def grow(X, Y, max_depth=None, min_split=2, min_leaf=1, depth=0, rtol=1e-14, gain_rtol=1e-12):
    """X, Y are lists of lists. Returns a nested dict tree."""
    n = len(X)
    node_sse = _sse(Y)
    raw = math.fsum(v * v for r in Y for v in r)
    leaf = {"value": _mean(Y), "n_samples": n}
    if (max_depth is not None and depth >= max_depth) or n < min_split or n < 2 * min_leaf \
            or node_sse <= rtol * raw:
        return leaf
    best = None  # (gain, feature, threshold)
    for f in range(len(X[0])):
        values = sorted(set(x[f] for x in X))
        for a, b in zip(values[:-1], values[1:]):
            t = 0.5 * (a + b)
            if t == b:
                t = a
            li = [j for j in range(n) if X[j][f] <= t]
            ri = [j for j in range(n) if X[j][f] > t]
            if len(li) < min_leaf or len(ri) < min_leaf:
                continue
            gain = node_sse - (_sse([Y[j] for j in li]) + _sse([Y[j] for j in ri]))
            # documented rule: strictly better than the incumbent by
            # gain_rtol * node impurity, scanning features then thresholds
            if gain > (0.0 if best is None else best[0]) + gain_rtol * node_sse:
                best = (gain, f, t)
    if best is None:
        return leaf
    _, f, t = best
    li = [j for j in range(n) if X[j][f] <= t]
    ri = [j for j in range(n) if X[j][f] > t]
    return {
        "feature": f,
        "threshold": t,
        "left": grow([X[j] for j in li], [Y[j] for j in li], max_depth, min_split, min_leaf, depth + 1, rtol,
                     gain_rtol),
        "right": grow([X[j] for j in ri], [Y[j] for j in ri], max_depth, min_split, min_leaf, depth + 1, rtol,
                     gain_rtol),
    }


def same_tree(a, b, tol=1e-12):
    """Node-for-node comparison; returns (ok, message)."""
    if ("feature" in a) != ("feature" in b):
        return False, f"leaf/internal mismatch: {a.get('n_samples')} vs {b.get('n_samples')}"
    if "feature" not in a:
        if a["n_samples"] != b["n_samples"]:
            return False, f"leaf sizes {a['n_samples']} vs {b['n_samples']}"
        for u, v in zip(a["value"], b["value"]):
            if abs(u - v) > tol * max(1.0, abs(v)):
                return False, f"leaf values {a['value']} vs {b['value']}"
        return True, ""
    if a["feature"] != b["feature"] or a["threshold"] != b["threshold"]:
        return False, f"split ({a['feature']}, {a['threshold']}) vs ({b['feature']}, {b['threshold']})"
    ok, msg = same_tree(a["left"], b["left"], tol)
    if not ok:
        return ok, msg
    return same_tree(a["right"], b["right"], tol)
