"""CART decision trees, random forests and histogram gradient boosting.

All three learners share one flat tree layout (:class:`Tree`): parallel
arrays ``feature``, ``threshold``, ``left``, ``right`` and ``value`` indexed
by node id, with ``feature == -1`` marking a leaf. A row goes left when
``x[feature] <= threshold``.

Split search runs in numba-compiled kernels. Randomness inside a kernel
(per-split feature subsets of a forest) comes from a splitmix64 stream whose
seed is derived from the model seed, so every trainer is a pure function of
``(x, y, params, seed)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import PreconditionError, ShapeError
from .numcore import RngState, as_matrix, derive_seed

__all__ = [
    "Tree",
    "TreeParams",
    "ForestParams",
    "GbdtParams",
    "DecisionTreeModel",
    "RandomForestModel",
    "GbdtModel",
    "train_decision_tree",
    "train_random_forest",
    "train_gbdt",
    "predict_proba",
    "gbdt_decision_function",
]

# Two splits whose impurity decreases differ by less than this are ties.
GAIN_TIE_TOL = 1e-12


# -- numba kernels -----------------------------------------------------------

@numba.njit(cache=True)
def _splitmix_next(state):
    z = state[0] + np.uint64(0x9E3779B97F4A7C15)
    state[0] = z
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _rand_below(state, n):
    # top 53 bits as a double in [0, 1), scaled
    u = np.float64(_splitmix_next(state) >> np.uint64(11)) * (2.0 ** -53)
    k = np.int64(u * n)
    return k if k < n else n - 1


@numba.njit(cache=True)
def _is_better(gain, f, thr, best_gain, best_f, best_thr, tol):
    if best_f < 0:
        return True
    if gain > best_gain + tol:
        return True
    if gain < best_gain - tol:
        return False
    if f != best_f:
        return f < best_f
    return thr < best_thr


@numba.njit(cache=True)
def _expand_order(col_order, rows, n_data):
    """Per-feature sorted order of the sample positions ``0..len(rows)-1``.

    ``col_order[f]`` lists the data rows sorted by feature ``f``. A row drawn
    several times by the bootstrap contributes all of its positions.
    """
    n_pos = rows.shape[0]
    d = col_order.shape[0]
    counts = np.zeros(n_data + 1, np.int64)
    for p in range(n_pos):
        counts[rows[p] + 1] += 1
    for r in range(n_data):
        counts[r + 1] += counts[r]
    fill = counts[:n_data].copy()
    by_row = np.empty(n_pos, np.int32)
    for p in range(n_pos):
        by_row[fill[rows[p]]] = p
        fill[rows[p]] += 1
    out = np.empty((d, n_pos), np.int32)
    for f in range(d):
        k = 0
        for j in range(n_data):
            r = col_order[f, j]
            for c in range(counts[r], counts[r + 1]):
                out[f, k] = by_row[c]
                k += 1
    return out


@numba.njit(cache=True)
def _build_cart_presorted(XT, y, rows, order, max_depth, min_samples_split,
                          min_samples_leaf, max_features, sample_features, seed):
    # order[f] holds the sample positions sorted by feature f; every node owns
    # the same slice [start, end) of every row of order, kept sorted by
    # stable partitioning after each split
    n_total = rows.shape[0]
    n_features = XT.shape[0]
    cap = 2 * n_total + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, np.int64)
    gain_out = np.zeros(cap)

    ys = np.empty(n_total, np.int64)
    for p in range(n_total):
        ys[p] = y[rows[p]]
    goes_left = np.zeros(n_total, np.int64)
    # feature values by sample position, saves an indirection in the scans
    xp = np.empty((n_features, n_total))
    for f in range(n_features):
        for p in range(n_total):
            xp[f, p] = XT[f, rows[p]]
    scratch = np.empty(n_total, np.int32)
    feat_order = np.arange(n_features)
    # reciprocals of node sizes; multiplying beats dividing in the scans
    inv = np.zeros(n_total + 1)
    for i in range(1, n_total + 1):
        inv[i] = 1.0 / i
    rng = np.empty(1, np.uint64)
    rng[0] = np.uint64(seed)

    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_total
    st_depth[0] = 0
    sp = 1
    node_count = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        n = end - start
        n1 = 0
        for i in range(start, end):
            n1 += ys[order[0, i]]
        n_node[node] = n
        value[node] = n1 / n
        if (n1 == 0 or n1 == n or n < min_samples_split
                or (max_depth >= 0 and depth >= max_depth)
                or n < 2 * min_samples_leaf):
            continue

        n0 = n - n1
        parent_score = (n1 * n1 + n0 * n0) * inv[n]
        best_f = -1
        best_thr = 0.0
        best_gain = 0.0
        best_nl = 0
        visited = 0
        k = 0
        while k < n_features:
            if sample_features:
                j = k + _rand_below(rng, n_features - k)
                tmp = feat_order[k]
                feat_order[k] = feat_order[j]
                feat_order[j] = tmp
            f = feat_order[k]
            k += 1
            col = order[f]
            if xp[f, col[start]] == xp[f, col[end - 1]]:
                continue
            l1 = 0
            a = xp[f, col[start]]
            for i in range(start, end - 1):
                l1 += ys[col[i]]
                b = xp[f, col[i + 1]]
                if a == b:
                    continue
                nl = i + 1 - start
                nr = n - nl
                if nl >= min_samples_leaf and nr >= min_samples_leaf:
                    l0 = nl - l1
                    r1 = n1 - l1
                    r0 = nr - r1
                    score = (l1 * l1 + l0 * l0) * inv[nl] + (r1 * r1 + r0 * r0) * inv[nr]
                    gain = (score - parent_score) * inv[n]
                    thr = 0.5 * (a + b)
                    if thr == b:
                        thr = a
                    if _is_better(gain, f, thr, best_gain, best_f, best_thr, GAIN_TIE_TOL):
                        best_gain = gain
                        best_f = f
                        best_thr = thr
                        best_nl = nl
                a = b
            visited += 1
            if visited >= max_features:
                break
        if best_f < 0:
            continue

        # the best feature's slice is sorted, so its first best_nl positions
        # are exactly the left child; carry that split over to every feature
        col = order[best_f]
        for i in range(start, start + best_nl):
            goes_left[col[i]] = 1
        for f in range(n_features):
            col = order[f]
            nl = 0
            nr = 0
            for i in range(start, end):
                # branchless: write to both sides, advance only one
                p = col[i]
                g = goes_left[p]
                col[start + nl] = p
                scratch[nr] = p
                nl += g
                nr += 1 - g
            for i in range(nr):
                col[start + nl + i] = scratch[i]
        col = order[best_f]
        for i in range(start, start + best_nl):
            goes_left[col[i]] = 0

        feature[node] = best_f
        threshold[node] = best_thr
        gain_out[node] = best_gain
        lc = node_count
        rc = node_count + 1
        node_count += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        st_node[sp] = rc
        st_start[sp] = start + best_nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lc
        st_start[sp] = start
        st_end[sp] = start + best_nl
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:node_count], threshold[:node_count], left[:node_count],
            right[:node_count], value[:node_count], n_node[:node_count],
            gain_out[:node_count])


@numba.njit(cache=True)
def _build_cart_sorting(XT, y, rows, max_depth, min_samples_split, min_samples_leaf,
                        max_features, sample_features, seed):
    n_total = rows.shape[0]
    n_features = XT.shape[0]
    cap = 2 * n_total + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, np.int64)
    gain_out = np.zeros(cap)

    idx = rows.copy()
    scratch = np.empty(n_total, np.int64)
    vals0 = np.empty(n_total)
    vals1 = np.empty(n_total)
    feat_order = np.arange(n_features)
    # reciprocals of node sizes; multiplying beats dividing in the scans
    inv = np.zeros(n_total + 1)
    for i in range(1, n_total + 1):
        inv[i] = 1.0 / i
    rng = np.empty(1, np.uint64)
    rng[0] = np.uint64(seed)

    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_total
    st_depth[0] = 0
    sp = 1
    node_count = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        n = end - start
        n1 = 0
        for i in range(start, end):
            n1 += y[idx[i]]
        n_node[node] = n
        value[node] = n1 / n
        if (n1 == 0 or n1 == n or n < min_samples_split
                or (max_depth >= 0 and depth >= max_depth)
                or n < 2 * min_samples_leaf):
            continue

        n0 = n - n1
        parent_score = (n1 * n1 + n0 * n0) * inv[n]
        best_f = -1
        best_thr = 0.0
        best_gain = 0.0
        visited = 0
        k = 0
        while k < n_features:
            if sample_features:
                j = k + _rand_below(rng, n_features - k)
                tmp = feat_order[k]
                feat_order[k] = feat_order[j]
                feat_order[j] = tmp
            f = feat_order[k]
            k += 1
            # split the node's values by class and sort each half in place;
            # a merge walk over both then visits every distinct value once
            c0 = 0
            c1 = 0
            for i in range(n):
                r = idx[start + i]
                if y[r] == 1:
                    vals1[c1] = XT[f, r]
                    c1 += 1
                else:
                    vals0[c0] = XT[f, r]
                    c0 += 1
            v0 = vals0[:c0]
            v1 = vals1[:c1]
            v0.sort()
            v1.sort()
            lo = v0[0]
            hi = v0[c0 - 1]
            if v1[0] < lo:
                lo = v1[0]
            if v1[c1 - 1] > hi:
                hi = v1[c1 - 1]
            if lo == hi:
                continue
            i0 = 0
            i1 = 0
            while True:
                # smallest value not yet consumed, then consume all copies
                if i1 >= c1 or (i0 < c0 and v0[i0] <= v1[i1]):
                    a = v0[i0]
                else:
                    a = v1[i1]
                while i0 < c0 and v0[i0] == a:
                    i0 += 1
                while i1 < c1 and v1[i1] == a:
                    i1 += 1
                nl = i0 + i1
                if nl == n:
                    break
                if i1 >= c1 or (i0 < c0 and v0[i0] <= v1[i1]):
                    b = v0[i0]
                else:
                    b = v1[i1]
                nr = n - nl
                if nl < min_samples_leaf or nr < min_samples_leaf:
                    continue
                l1 = i1
                l0 = i0
                r1 = n1 - l1
                r0 = nr - r1
                score = (l1 * l1 + l0 * l0) * inv[nl] + (r1 * r1 + r0 * r0) * inv[nr]
                gain = (score - parent_score) * inv[n]
                thr = 0.5 * (a + b)
                if thr == b:
                    thr = a
                if _is_better(gain, f, thr, best_gain, best_f, best_thr, GAIN_TIE_TOL):
                    best_gain = gain
                    best_f = f
                    best_thr = thr
            visited += 1
            if visited >= max_features:
                break
        if best_f < 0:
            continue

        # stable partition of the node's rows: left rows then right rows
        nl = 0
        for i in range(start, end):
            if XT[best_f, idx[i]] <= best_thr:
                scratch[nl] = idx[i]
                nl += 1
        pos = nl
        for i in range(start, end):
            if not XT[best_f, idx[i]] <= best_thr:
                scratch[pos] = idx[i]
                pos += 1
        for i in range(n):
            idx[start + i] = scratch[i]

        feature[node] = best_f
        threshold[node] = best_thr
        gain_out[node] = best_gain
        lc = node_count
        rc = node_count + 1
        node_count += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        st_node[sp] = rc
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lc
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:node_count], threshold[:node_count], left[:node_count],
            right[:node_count], value[:node_count], n_node[:node_count],
            gain_out[:node_count])


@numba.njit(cache=True)
def _tree_predict(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


@numba.njit(cache=True)
def _tree_apply(X, feature, threshold, left, right, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node


@numba.njit(cache=True)
def _bin_matrix(X, edges, offsets, out):
    n, d = X.shape
    for f in range(d):
        e = edges[offsets[f]:offsets[f + 1]]
        for i in range(n):
            out[i, f] = np.searchsorted(e, X[i, f])


@numba.njit(cache=True)
def _best_hist_split(binned, g, h, idx, start, end, n_bins, active,
                     min_samples_leaf, min_child_hessian, lam,
                     hist_g, hist_h, hist_c):
    # binned is (n_rows, n_features); histograms are (n_features, 256)
    d = binned.shape[1]
    n = end - start
    sum_g = 0.0
    sum_h = 0.0
    for i in range(start, end):
        sum_g += g[idx[i]]
        sum_h += h[idx[i]]
    parent = sum_g * sum_g / (sum_h + lam)
    best_gain = 0.0
    best_f = -1
    best_b = -1
    if n < 2 * min_samples_leaf:
        return best_gain, best_f, best_b, sum_g, sum_h
    for f in range(d):
        for b in range(n_bins[f]):
            hist_g[f, b] = 0.0
            hist_h[f, b] = 0.0
            hist_c[f, b] = 0
    for i in range(start, end):
        r = idx[i]
        gr = g[r]
        hr = h[r]
        row = binned[r]
        for f in range(d):
            b = row[f]
            hist_g[f, b] += gr
            hist_h[f, b] += hr
            hist_c[f, b] += 1
    for f in range(d):
        nb = n_bins[f]
        if nb < 2 or not active[f]:
            continue
        gl = 0.0
        hl = 0.0
        cl = 0
        for b in range(nb - 1):
            gl += hist_g[f, b]
            hl += hist_h[f, b]
            cl += hist_c[f, b]
            cr = n - cl
            if cl < min_samples_leaf:
                continue
            if cr < min_samples_leaf:
                break
            hr = sum_h - hl
            if hl < min_child_hessian or hr < min_child_hessian:
                continue
            gr = sum_g - gl
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
            if gain > best_gain + GAIN_TIE_TOL or (best_f < 0 and gain > 0.0):
                best_gain = gain
                best_f = f
                best_b = b
    return best_gain, best_f, best_b, sum_g, sum_h


@numba.njit(cache=True)
def _grow_leafwise(binned, g, h, n_bins, active, max_leaves, max_depth,
                   min_samples_leaf, min_child_hessian, lam):
    n, d = binned.shape
    hist_g = np.zeros((d, 256))
    hist_h = np.zeros((d, 256))
    hist_c = np.zeros((d, 256), np.int64)
    cap = 2 * max_leaves + 1
    feature = np.full(cap, -1, np.int64)
    split_bin = np.full(cap, -1, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, np.int64)
    gain_out = np.zeros(cap)
    start_a = np.zeros(cap, np.int64)
    end_a = np.zeros(cap, np.int64)
    depth_a = np.zeros(cap, np.int64)
    cand_gain = np.zeros(cap)
    cand_f = np.full(cap, -1, np.int64)
    cand_b = np.full(cap, -1, np.int64)
    open_leaf = np.zeros(cap, np.bool_)
    scratch = np.empty(n, np.int64)
    idx = np.arange(n)

    gn, fn, bn, sg, sh = _best_hist_split(binned, g, h, idx, 0, n, n_bins, active,
                                          min_samples_leaf, min_child_hessian, lam,
                                          hist_g, hist_h, hist_c)
    value[0] = -sg / (sh + lam)
    n_node[0] = n
    start_a[0] = 0
    end_a[0] = n
    cand_gain[0] = gn
    cand_f[0] = fn
    cand_b[0] = bn
    open_leaf[0] = True
    node_count = 1
    n_leaves = 1
    while n_leaves < max_leaves:
        pick = -1
        for nd in range(node_count):
            if open_leaf[nd] and cand_f[nd] >= 0:
                if max_depth >= 0 and depth_a[nd] >= max_depth:
                    continue
                if pick < 0 or cand_gain[nd] > cand_gain[pick] + GAIN_TIE_TOL:
                    pick = nd
        if pick < 0:
            break
        f = cand_f[pick]
        b = cand_b[pick]
        s = start_a[pick]
        e = end_a[pick]
        nl = 0
        for i in range(s, e):
            if binned[idx[i], f] <= b:
                scratch[nl] = idx[i]
                nl += 1
        pos = nl
        for i in range(s, e):
            if binned[idx[i], f] > b:
                scratch[pos] = idx[i]
                pos += 1
        for i in range(e - s):
            idx[s + i] = scratch[i]

        open_leaf[pick] = False
        feature[pick] = f
        split_bin[pick] = b
        gain_out[pick] = cand_gain[pick]
        lc = node_count
        rc = node_count + 1
        node_count += 2
        left[pick] = lc
        right[pick] = rc
        start_a[lc] = s
        end_a[lc] = s + nl
        start_a[rc] = s + nl
        end_a[rc] = e
        for c in (lc, rc):
            depth_a[c] = depth_a[pick] + 1
            gc, fc, bc, sgc, shc = _best_hist_split(
                binned, g, h, idx, start_a[c], end_a[c], n_bins, active,
                min_samples_leaf, min_child_hessian, lam, hist_g, hist_h, hist_c)
            value[c] = -sgc / (shc + lam)
            n_node[c] = end_a[c] - start_a[c]
            cand_gain[c] = gc
            cand_f[c] = fc
            cand_b[c] = bc
            open_leaf[c] = True
        n_leaves += 1

    return (feature[:node_count], split_bin[:node_count], left[:node_count],
            right[:node_count], value[:node_count], n_node[:node_count],
            gain_out[:node_count])


# -- tree container ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree. ``value`` holds a class-1 probability for CART
    leaves and an additive raw score for boosted leaves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node_samples: np.ndarray | None = None
    gain: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, dep = stack.pop()
            best = max(best, dep)
            if self.feature[node] >= 0:
                stack.append((int(self.left[node]), dep + 1))
                stack.append((int(self.right[node]), dep + 1))
        return best

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        _tree_predict(x, self.feature, self.threshold, self.left, self.right,
                      self.value, out)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf id reached by every row."""
        out = np.empty(x.shape[0], dtype=np.int64)
        _tree_apply(x, self.feature, self.threshold, self.left, self.right, out)
        return out

    def preorder(self):
        """Yield ``(feature, threshold_or_value)`` records in preorder."""
        stack = [0]
        while stack:
            node = stack.pop()
            f = int(self.feature[node])
            if f < 0:
                yield -1, float(self.value[node])
            else:
                yield f, float(self.threshold[node])
                stack.append(int(self.right[node]))
                stack.append(int(self.left[node]))

    @classmethod
    def from_preorder(cls, records) -> "Tree":
        """Inverse of :meth:`preorder`; node ids come out in preorder."""
        feats, thr, vals = [], [], []
        for f, v in records:
            feats.append(int(f))
            thr.append(v if f >= 0 else 0.0)
            vals.append(v if f < 0 else 0.0)
        n = len(feats)
        left = np.full(n, -1, np.int64)
        right = np.full(n, -1, np.int64)
        pending = []  # internal nodes still waiting for a right child
        for i in range(n):
            if i > 0:
                prev = i - 1
                if feats[prev] >= 0:
                    left[prev] = i
                else:
                    if not pending:
                        raise ValueError("malformed preorder tree")
                    right[pending.pop()] = i
            if feats[i] >= 0:
                pending.append(i)
        if pending:
            raise ValueError("malformed preorder tree: dangling internal node")
        return cls(np.asarray(feats, np.int64), np.asarray(thr, np.float64),
                   left, right, np.asarray(vals, np.float64))


def _predict_trees(trees, x, scale=1.0):
    acc = np.zeros(x.shape[0])
    for t in trees:
        acc += t.predict(x)
    return acc


# -- parameters and models ---------------------------------------------------

@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    criterion: str = "gini"

    def __post_init__(self):
        if self.criterion != "gini":
            raise PreconditionError("only the gini criterion is supported")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise PreconditionError("min_samples_split >= 2 and min_samples_leaf >= 1 required")


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: int | str | None = "sqrt"
    bootstrap: bool = True
    seed: int = 42
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1

    def resolve_max_features(self, d: int) -> int:
        mf = self.max_features
        if mf is None:
            return d
        if mf == "sqrt":
            return max(1, int(math.floor(math.sqrt(d))))
        if mf == "log2":
            return max(1, int(math.floor(math.log2(d))))
        mf = int(mf)
        if not 1 <= mf <= d:
            raise PreconditionError(f"max_features must lie in [1, {d}]")
        return mf


@dataclass(frozen=True)
class GbdtParams:
    n_iterations: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    histogram_bins: int = 255
    min_samples_leaf: int = 20
    l2_reg: float = 1.0
    min_child_hessian: float = 1e-3
    max_depth: int | None = None
    feature_fraction: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if not 2 <= self.histogram_bins <= 255:
            raise PreconditionError("histogram_bins must lie in [2, 255]")
        if self.max_leaves < 2:
            raise PreconditionError("max_leaves must be >= 2")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise PreconditionError("feature_fraction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class DecisionTreeModel:
    tree: Tree
    n_features: int
    params: TreeParams = field(default_factory=TreeParams)

    kind = "dtree"


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: list
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)

    kind = "rforest"


@dataclass(frozen=True, eq=False)
class GbdtModel:
    initial_score: float
    trees: list
    n_features: int
    params: GbdtParams = field(default_factory=GbdtParams)

    kind = "gbdt"


def _check_xy(x, y):
    x = as_matrix(x, "x")
    y = np.ascontiguousarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        raise PreconditionError("cannot train on an empty dataset")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} rows")
    if np.any((y != 0) & (y != 1)):
        raise PreconditionError("labels must be 0 or 1")
    return x, y


# Presorting pays one pass over every column per split; per-node sorting pays
# max_features sorts. The first wins unless the column count dwarfs the
# per-split feature budget.
PRESORT_MAX_RATIO = 8


class _CartInput:
    """Column-major copy of the training matrix plus, when presorting, the
    stable per-column row order. Built once per training call."""

    def __init__(self, x: np.ndarray, max_features: int):
        self.n_rows, self.n_features = x.shape
        self.xt = np.ascontiguousarray(x.T)
        self.presort = self.n_features <= PRESORT_MAX_RATIO * max_features
        self.col_order = None
        if self.presort:
            self.col_order = np.ascontiguousarray(
                np.argsort(x, axis=0, kind="stable").T.astype(np.int32))


def _fit_cart(data: _CartInput, y, rows, params, max_features, sample_features, seed) -> Tree:
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    args = (max_depth, params.min_samples_split, params.min_samples_leaf,
            max_features, sample_features, np.uint64(seed))
    if data.presort:
        order = _expand_order(data.col_order, rows, data.n_rows)
        out = _build_cart_presorted(data.xt, y, rows, order, *args)
    else:
        out = _build_cart_sorting(data.xt, y, rows, *args)
    return Tree(*out)


def train_decision_tree(x, y, params: TreeParams | None = None) -> DecisionTreeModel:
    """Greedy CART with gini impurity, thresholds at midpoints of consecutive
    distinct values. Equal-gain splits resolve to the lowest feature index,
    then the smallest threshold."""
    params = params or TreeParams()
    x, y = _check_xy(x, y)
    rows = np.arange(x.shape[0], dtype=np.int64)
    tree = _fit_cart(_CartInput(x, x.shape[1]), y, rows, params, x.shape[1], False, 0)
    return DecisionTreeModel(tree, x.shape[1], params)


def train_random_forest(x, y, params: ForestParams | None = None) -> RandomForestModel:
    params = params or ForestParams()
    x, y = _check_xy(x, y)
    n, d = x.shape
    if params.n_trees < 1:
        raise PreconditionError("n_trees must be >= 1")
    mf = params.resolve_max_features(d)
    tparams = TreeParams(params.max_depth, params.min_samples_split, params.min_samples_leaf)
    sample_features = mf < d
    data = _CartInput(x, mf)
    trees = []
    for t in range(params.n_trees):
        if params.bootstrap:
            rows = RngState(derive_seed(params.seed, t, 0)).integers(n, n)
        else:
            rows = np.arange(n, dtype=np.int64)
        tree = _fit_cart(data, y, rows, tparams, mf, sample_features,
                         derive_seed(params.seed, t, 1))
        trees.append(DecisionTreeModel(tree, d, tparams))
    return RandomForestModel(trees, d, params)


class _Binner:
    """Equal-frequency histogram edges, computed once per training run."""

    def __init__(self, x: np.ndarray, max_bins: int):
        edges, offsets = [], [0]
        n = x.shape[0]
        for f in range(x.shape[1]):
            u, counts = np.unique(x[:, f], return_counts=True)
            if u.shape[0] <= max_bins:
                cut = np.arange(u.shape[0] - 1)
            else:
                cum = np.cumsum(counts)
                targets = n * np.arange(1, max_bins) / max_bins
                cut = np.unique(np.searchsorted(cum, targets, side="left"))
                cut = cut[cut < u.shape[0] - 1]
            e = 0.5 * (u[cut] + u[cut + 1])
            # midpoint rounding up onto the next value would misroute it
            e = np.where(e == u[cut + 1], u[cut], e)
            edges.append(e)
            offsets.append(offsets[-1] + e.shape[0])
        self.edges = edges
        self.flat = np.concatenate(edges) if edges else np.empty(0)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.n_bins = np.diff(self.offsets) + 1

    def transform(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape, dtype=np.uint8)
        _bin_matrix(x, self.flat, self.offsets, out)
        return out


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_gbdt(x, y, params: GbdtParams | None = None) -> GbdtModel:
    """Logistic-loss gradient boosting with leaf-wise histogram trees.

    Each iteration fits a tree to gradients ``p - y`` and hessians
    ``p (1 - p)``; split gain is
    ``0.5 * (GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam))`` and leaves output
    ``-G / (H + lam)``, scaled by the learning rate at prediction time.
    """
    params = params or GbdtParams()
    x, y = _check_xy(x, y)
    n, d = x.shape
    base = float(np.clip(y.mean(), 1e-15, 1 - 1e-15))
    init = math.log(base / (1.0 - base))
    binner = _Binner(x, params.histogram_bins)
    binned = binner.transform(x)
    yf = y.astype(np.float64)
    raw = np.full(n, init)
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    n_active = max(1, int(round(params.feature_fraction * d)))
    trees = []
    for it in range(params.n_iterations):
        p = _sigmoid(raw)
        g = p - yf
        h = p * (1.0 - p)
        active = np.ones(d, dtype=np.bool_)
        if n_active < d:
            active[:] = False
            pick = RngState(derive_seed(params.seed, it)).choice_without_replacement(d, n_active)
            active[pick] = True
        feat, sbin, left, right, value, n_node, gain = _grow_leafwise(
            binned, g, h, binner.n_bins, active, params.max_leaves, max_depth,
            params.min_samples_leaf, params.min_child_hessian, params.l2_reg)
        thr = np.zeros(feat.shape[0])
        for node in np.nonzero(feat >= 0)[0]:
            thr[node] = binner.edges[feat[node]][sbin[node]]
        tree = Tree(feat, thr, left, right, value, n_node, gain)
        trees.append(tree)
        raw += params.learning_rate * tree.predict(x)
    return GbdtModel(init, trees, d, params)


def gbdt_decision_function(model: GbdtModel, x, n_trees: int | None = None) -> np.ndarray:
    """Raw log-odds ``initial_score + lr * sum(tree outputs)``."""
    x = _check_x(model, x)
    trees = model.trees if n_trees is None else model.trees[:n_trees]
    return model.initial_score + model.params.learning_rate * _predict_trees(trees, x)


def _check_x(model, x):
    x = as_matrix(x, "x")
    if x.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {x.shape[1]}")
    return x


def predict_proba(model, x) -> np.ndarray:
    """Class-1 probability for any tree model."""
    if isinstance(model, DecisionTreeModel):
        return model.tree.predict(_check_x(model, x))
    if isinstance(model, RandomForestModel):
        x = _check_x(model, x)
        return _predict_trees([m.tree for m in model.trees], x) / len(model.trees)
    if isinstance(model, GbdtModel):
        return _sigmoid(gbdt_decision_function(model, x))
    raise TypeError(f"not a tree model: {type(model).__name__}")
