"""Optimal injective assignment (Hungarian matching) for rectangular cost
matrices.

The solver pads to square, runs the shortest-augmenting-path algorithm with
dual potentials, then extracts the lexicographically smallest assignment
among the optima: by complementary slackness every optimal assignment uses
only tight edges (reduced cost zero), so the tie-break is a greedy walk over
the tight-edge subgraph with perfect-matching feasibility checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Assignment:
    """min(n, m) pairs, sorted by row; injective on both sides."""

    pairs: list[tuple[int, int]]
    total_cost: float

    def as_query_for_gt(self) -> dict[int, int]:
        """Column -> row view (ground truth index -> matched query)."""
        return {j: i for i, j in self.pairs}


def _solve_square(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment on a square matrix.

    Returns (col_of_row, u, v) with feasible duals: cost - u - v >= 0
    everywhere and exactly 0 on matched edges. Ties always resolve to the
    lowest column index, so the result is deterministic.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.full(n + 1, n)  # sentinel col n; "row n" = unassigned marker
    for i in range(n):
        row_of_col[n] = i
        j0 = n
        minv = np.full(n, inf)
        way = np.zeros(n, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[:n]
            cur = cost[i0, free] - u[i0] - v[:n][free]
            better = cur < minv[free]
            idx = np.flatnonzero(free)
            upd = idx[better]
            minv[upd] = cur[better]
            way[upd] = j0
            masked = np.where(used[:n], inf, minv)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[~used[:n]] -= delta
            j0 = j1
            if row_of_col[j0] == n:
                break
        while j0 != n:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        col_of_row[row_of_col[j]] = j
    return col_of_row, u[:n], v[:n]


def _perfect_matching_exists(adj: list[np.ndarray], n_cols: int, forced_rows: dict[int, int], restricted: set[int], dummy_cols: np.ndarray) -> bool:
    """Kuhn's algorithm: can every row be matched within the tight graph,
    honoring forced pairs and rows restricted to dummy columns?"""
    n_rows = len(adj)
    match_col = np.full(n_cols, -1, dtype=np.int64)
    taken_cols = set(forced_rows.values())
    for r, c in forced_rows.items():
        match_col[c] = r

    def candidates(r: int) -> np.ndarray:
        cols = adj[r]
        if r in restricted:
            cols = cols[dummy_cols[cols]]
        return cols

    def try_row(r: int, seen: np.ndarray) -> bool:
        for c in candidates(r):
            if seen[c]:
                continue
            seen[c] = True
            owner = match_col[c]
            if owner == -1 or (owner not in forced_rows and try_row(owner, seen)):
                match_col[c] = r
                return True
        return False

    for r in range(n_rows):
        if r in forced_rows:
            continue
        if not any(match_col[c] == r for c in range(n_cols)):
            seen = np.zeros(n_cols, dtype=bool)
            for c in taken_cols:
                seen[c] = True
            if not try_row(r, seen):
                return False
    return True


def hungarian(cost) -> Assignment:
    """Minimize total cost over injective assignments of min(n, m) pairs.

    NaN entries violate the contract; ties between optimal assignments
    break to the lexicographically smallest (row, col) pair list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise ValueError(f"cost must be a non-empty 2-d matrix, got shape {cost.shape}")
    if np.any(np.isnan(cost)):
        raise ValueError("cost matrix contains NaN")
    if np.any(np.isinf(cost)):
        raise ValueError("cost matrix contains infinite entries")
    n, m = cost.shape
    size = max(n, m)
    padded = np.zeros((size, size))
    padded[:n, :m] = cost

    col_of_row, u, v = _solve_square(padded)
    eps = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (padded - u[:, None] - v[None, :]) <= eps
    adj = [np.flatnonzero(tight[r]) for r in range(size)]
    dummy_cols = np.zeros(size, dtype=bool)
    dummy_cols[m:] = True

    k_pairs = min(n, m)
    forced: dict[int, int] = {}
    restricted: set[int] = set()
    pairs: list[tuple[int, int]] = []
    row = 0
    while len(pairs) < k_pairs:
        # rows left must still cover the remaining positions
        last_start = n - (k_pairs - len(pairs))
        placed = False
        while row <= last_start and not placed:
            free_real = [c for c in adj[row] if c < m and c not in forced.values()]
            for c in free_real:
                trial = dict(forced)
                trial[row] = int(c)
                if _perfect_matching_exists(adj, size, trial, restricted, dummy_cols):
                    forced = trial
                    pairs.append((row, int(c)))
                    placed = True
                    break
            if not placed:
                restricted.add(row)
            row += 1
        if not placed:
            raise AssertionError("no optimal completion found; solver invariant violated")

    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total_cost=total)
