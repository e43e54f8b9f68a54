"""Exact rectangular linear assignment by shortest augmenting paths.

Rows are matched one at a time along Dijkstra shortest paths in the reduced
cost graph; dual potentials keep every reduced cost nonnegative, so each
augmentation preserves optimality (Jonker-Volgenant family, rectangular form).
"""

from __future__ import annotations

import numpy as np
from numba import njit


TIE_TOLERANCE = 1e-12


class AssignmentError(ValueError):
    pass


@njit(cache=True)
def _augmenting_path_solve(cost):
    n, p = cost.shape
    u = np.zeros(n)
    v = np.zeros(p)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(p, -1, dtype=np.int64)
    path = np.full(p, -1, dtype=np.int64)
    shortest = np.empty(p)
    remaining = np.empty(p, dtype=np.int64)
    in_rows = np.zeros(n, dtype=np.bool_)
    in_cols = np.zeros(p, dtype=np.bool_)

    for cur_row in range(n):
        for j in range(p):
            shortest[j] = np.inf
            path[j] = -1
            in_cols[j] = False
            remaining[j] = j
        for r in range(n):
            in_rows[r] = False
        num_remaining = p
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            in_rows[i] = True
            lowest = np.inf
            index = -1
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                # on equal cost prefer a free column, it ends the search
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    index = it
            if index < 0 or lowest == np.inf:
                return col4row, u, v, False
            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            in_cols[j] = True
            # keep the remaining list in ascending column order for reproducible ties
            for it in range(index, num_remaining - 1):
                remaining[it] = remaining[it + 1]
            num_remaining -= 1

        u[cur_row] += min_val
        for r in range(n):
            if in_rows[r] and r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        for j in range(p):
            if in_cols[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            r = path[j]
            row4col[j] = r
            nxt = col4row[r]
            col4row[r] = j
            j = nxt
            if r == cur_row:
                break
    return col4row, u, v, True


@njit(cache=True)
def _lexicographic_optimum(cost, col4row, u, v, tol):
    """Smallest optimal assignment in row-major lexicographic order.

    With optimal duals fixed, an injective map is optimal exactly when it uses
    only tight edges and covers every column with a negative potential. Padding
    the matrix with dummy rows that may take any zero-potential column turns this
    into perfect matchings of a tight bipartite graph, searched greedily row by row
    with alternating-path exchanges.
    """
    n, p = cost.shape
    tight = np.zeros((p, p), dtype=np.bool_)
    for i in range(n):
        for j in range(p):
            tight[i, j] = cost[i, j] - u[i] - v[j] <= tol
    for i in range(n, p):
        for j in range(p):
            tight[i, j] = v[j] >= -tol
    match = np.full(p, -1, dtype=np.int64)
    owner = np.full(p, -1, dtype=np.int64)
    for i in range(n):
        match[i] = col4row[i]
        owner[col4row[i]] = i
    d = n
    for j in range(p):
        if owner[j] == -1:
            match[d] = j
            owner[j] = d
            d += 1
    locked_col = np.zeros(p, dtype=np.bool_)
    seen = np.zeros(p, dtype=np.bool_)
    stack_row = np.empty(p + 1, dtype=np.int64)
    stack_col = np.empty(p + 1, dtype=np.int64)
    for r in range(n):
        for c in range(p):
            if not tight[r, c] or locked_col[c]:
                continue
            if match[r] == c:
                break
            # force r -> c: the current owner of c must reach r's column through tight edges
            target = match[r]
            for j in range(p):
                seen[j] = locked_col[j]
            seen[c] = True
            depth = 0
            stack_row[0] = owner[c]
            stack_col[0] = -1
            found = False
            while depth >= 0 and not found:
                x = stack_row[depth]
                j = stack_col[depth] + 1
                while j < p and (seen[j] or not tight[x, j]):
                    j += 1
                if j == p:
                    depth -= 1
                    continue
                stack_col[depth] = j
                seen[j] = True
                if j == target:
                    found = True
                else:
                    depth += 1
                    stack_row[depth] = owner[j]
                    stack_col[depth] = -1
            if not found:
                continue
            for k in range(depth + 1):
                x = stack_row[k]
                j = stack_col[k]
                match[x] = j
                owner[j] = x
            match[r] = c
            owner[c] = r
            break
        locked_col[match[r]] = True
    return match[:n].copy()


def solve(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost injective map from rows to columns of an ``n × p`` matrix, ``n ≤ p``.

    Returns ``(assignment, cost)`` where ``assignment[r]`` is the column given to
    row ``r``. A tall matrix is rejected; transpose it at the call site.
    """
    c = np.ascontiguousarray(np.asarray(cost, dtype=np.float64))
    if c.ndim != 2:
        raise AssignmentError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, p = c.shape
    if n < 1:
        raise AssignmentError("cost matrix needs at least one row")
    if n > p:
        raise AssignmentError(f"need rows <= cols, got {n} x {p}")
    if not np.isfinite(c).all():
        raise AssignmentError("cost matrix entries must be finite")
    col4row, u, v, ok = _augmenting_path_solve(c)
    if not ok:
        raise AssignmentError("assignment infeasible")
    # ties are resolved toward the lexicographically smallest optimal assignment
    tol = TIE_TOLERANCE * max(1.0, float(np.abs(c).max()))
    assignment = _lexicographic_optimum(c, col4row, u, v, tol)
    total = 0.0
    for r in range(n):
        total += c[r, assignment[r]]
    return assignment, total


def squared_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)
