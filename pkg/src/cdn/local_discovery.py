"""Local FCI estimates over small, correlation-sampled variable subsets.

Mark codes (unsigned bytes): 0 = no edge, 1 = circle, 2 = arrowhead, 3 = tail.
``pag[i, j]`` is the mark at ``j``'s end of the edge between ``i`` and ``j``.
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .stats import FisherZ, ParameterError, summary_stats

NONE, CIRCLE, ARROW, TAIL = 0, 1, 2, 3
MAX_K = 8
# ordered-pair edge codes: 0 = no edge, 1..9 = (mark at i, mark at j), 10 = pair not covered
N_EDGE_CODES = 11
NOT_COVERED = 10

CITest = Callable[[int, int, tuple], bool]


def pair_code(pag: np.ndarray, i: int, j: int) -> int:
    at_j, at_i = int(pag[i, j]), int(pag[j, i])
    if at_j == NONE:
        return 0
    return 1 + 3 * (at_i - 1) + (at_j - 1)


@dataclass
class LocalEstimates:
    n: int
    k: int
    subsets: list[tuple[int, ...]]
    pags: list[np.ndarray]
    alpha: float = 0.05
    _index: dict[tuple[int, int], list[int]] | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return len(self.subsets)

    def pair_index(self) -> dict[tuple[int, int], list[int]]:
        """Ordered node pair -> estimate slots whose subset contains both nodes."""
        if self._index is None:
            idx: dict[tuple[int, int], list[int]] = {}
            for t, sub in enumerate(self.subsets):
                for a in sub:
                    for b in sub:
                        if a != b:
                            idx.setdefault((a, b), []).append(t)
            self._index = idx
        return self._index

    def code_tensor(self) -> np.ndarray:
        """``(n, n, T)`` edge codes per ordered pair, NOT_COVERED where absent."""
        out = np.full((self.n, self.n, self.T), NOT_COVERED, dtype=np.uint8)
        for t, (sub, pag) in enumerate(zip(self.subsets, self.pags)):
            s = np.asarray(sub)
            at_j = pag
            at_i = pag.T
            code = np.where(at_j == NONE, 0, 1 + 3 * (at_i.astype(int) - 1) + (at_j.astype(int) - 1))
            out[np.ix_(s, s, [t])] = code[:, :, None].astype(np.uint8)
        out[np.arange(self.n), np.arange(self.n), :] = NOT_COVERED
        return out

    def code_counts(self) -> np.ndarray:
        """``(n, n, N_EDGE_CODES)`` histogram of edge codes over the T estimates."""
        codes = self.code_tensor()
        counts = np.zeros((self.n, self.n, N_EDGE_CODES), dtype=np.int32)
        for c in range(N_EDGE_CODES):
            counts[:, :, c] = (codes == c).sum(axis=2)
        return counts


# ---------------------------------------------------------------------------
# Subset sampling
# ---------------------------------------------------------------------------


def sample_subsets(rho: np.ndarray, k: int, T: int, seed: int) -> list[tuple[int, ...]]:
    """Seed node uniformly, then grow with probability proportional to the
    max absolute correlation to the current subset (floored at 1e-3)."""
    rho = np.abs(np.asarray(rho, dtype=np.float64))
    N = rho.shape[0]
    if k > N:
        raise ParameterError(f"k={k} exceeds N={N}")
    if k < 1 or T < 1:
        raise ParameterError("k and T must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(T):
        chosen = [int(rng.integers(N))]
        avail = np.ones(N, dtype=bool)
        avail[chosen[0]] = False
        strength = rho[chosen[0]].copy()
        while len(chosen) < k:
            w = np.where(avail, np.maximum(strength, 1e-3), 0.0)
            v = int(rng.choice(N, p=w / w.sum()))
            chosen.append(v)
            avail[v] = False
            strength = np.maximum(strength, rho[v])
        out.append(tuple(chosen))
    return out


# ---------------------------------------------------------------------------
# FCI
# ---------------------------------------------------------------------------


def _adjacent(pag, a: int, b: int) -> bool:
    return pag[a][b] != NONE


def _neighbors(pag, a: int) -> list[int]:
    row = pag[a]
    return [b for b in range(len(row)) if row[b] != NONE]


def _learn_skeleton(k: int, ci: CITest, max_cond: int) -> tuple[list[list[bool]], dict]:
    adj = [[i != j for j in range(k)] for i in range(k)]
    sepset: dict[frozenset, tuple] = {}
    level = 0
    while level <= max_cond:
        snapshot = [[v for v in range(k) if adj[i][v]] for i in range(k)]
        tested_any = False
        for i in range(k):
            for j in range(k):
                if i == j or not adj[i][j]:
                    continue
                nb = [v for v in snapshot[i] if v != j]
                if len(nb) < level:
                    continue
                tested_any = True
                for S in combinations(nb, level):
                    if ci(i, j, S):
                        adj[i][j] = adj[j][i] = False
                        sepset[frozenset((i, j))] = S
                        break
        if not tested_any:
            break
        level += 1
    return adj, sepset


def _orient_colliders(pag, sepset: dict) -> None:
    k = len(pag)
    for b in range(k):
        nb = _neighbors(pag, b)
        for a, c in combinations(nb, 2):
            if _adjacent(pag, a, c):
                continue
            if b not in sepset.get(frozenset((a, c)), ()):
                pag[a][b] = ARROW
                pag[c][b] = ARROW


def _possible_dsep(pag, x: int) -> set[int]:
    """Nodes reachable from x along paths whose every inner triple is a collider or a triangle."""
    frontier = [(x, v) for v in _neighbors(pag, x)]
    seen_edges = set(frontier)
    reached = {v for _, v in frontier}
    while frontier:
        a, b = frontier.pop()
        for c in _neighbors(pag, b):
            if c == a or (b, c) in seen_edges:
                continue
            collider = pag[a][b] == ARROW and pag[c][b] == ARROW
            if collider or _adjacent(pag, a, c):
                seen_edges.add((b, c))
                frontier.append((b, c))
                reached.add(c)
    reached.discard(x)
    return reached


def _is_parent(pag, a: int, b: int) -> bool:
    """a -> b"""
    return pag[a][b] == ARROW and pag[b][a] == TAIL


def _rule1(pag) -> bool:
    # a *-> b o-* c, a and c nonadjacent  =>  b -> c
    changed = False
    for b in range(len(pag)):
        nb = _neighbors(pag, b)
        for a in nb:
            if pag[a][b] != ARROW:
                continue
            for c in nb:
                if c == a or _adjacent(pag, a, c) or pag[c][b] != CIRCLE:
                    continue
                pag[b][c] = ARROW
                pag[c][b] = TAIL
                changed = True
    return changed


def _rule2(pag) -> bool:
    # a -> b *-> c or a *-> b -> c, with a *-o c  =>  a *-> c
    changed = False
    for a in range(len(pag)):
        nb = _neighbors(pag, a)
        for c in nb:
            if pag[a][c] != CIRCLE:
                continue
            for b in nb:
                if b == c or not _adjacent(pag, b, c):
                    continue
                if (_is_parent(pag, a, b) and pag[b][c] == ARROW) or (pag[a][b] == ARROW and _is_parent(pag, b, c)):
                    pag[a][c] = ARROW
                    changed = True
                    break
    return changed


def _rule3(pag) -> bool:
    # a *-> b <-* c, a *-o d o-* c, a and c nonadjacent, d *-o b  =>  d *-> b
    changed = False
    for b in range(len(pag)):
        nb = _neighbors(pag, b)
        for d in nb:
            if pag[d][b] != CIRCLE:
                continue
            into_b = [a for a in nb if a != d and pag[a][b] == ARROW]
            for a, c in combinations(into_b, 2):
                if _adjacent(pag, a, c):
                    continue
                if pag[a][d] == CIRCLE and pag[c][d] == CIRCLE:
                    pag[d][b] = ARROW
                    changed = True
                    break
    return changed


def _discriminating_start(pag, a: int, b: int, c: int) -> int | None:
    """First node theta of a discriminating path <theta, ..., a, b, c> for b, if any.

    Walks backwards from a through colliders that are parents of c.
    """
    k = len(pag)
    stack = [(a, frozenset((a, b, c)))]
    while stack:
        cur, visited = stack.pop()
        for x in range(k):
            if x in visited or pag[x][cur] != ARROW:
                continue
            if not _adjacent(pag, x, c):
                return x
            if pag[cur][x] == ARROW and _is_parent(pag, x, c):
                stack.append((x, visited | {x}))
    return None


def _rule4(pag, sepset: dict) -> bool:
    changed = False
    for c in range(len(pag)):
        for b in _neighbors(pag, c):
            if pag[c][b] != CIRCLE:
                continue
            for a in _neighbors(pag, b):
                if a == c or not _adjacent(pag, a, c):
                    continue
                if not (pag[b][a] == ARROW and _is_parent(pag, a, c)):
                    continue
                theta = _discriminating_start(pag, a, b, c)
                if theta is None:
                    continue
                if b in sepset.get(frozenset((theta, c)), ()):
                    pag[b][c] = ARROW
                    pag[c][b] = TAIL
                else:
                    pag[a][b] = pag[b][a] = ARROW
                    pag[b][c] = pag[c][b] = ARROW
                changed = True
                break
    return changed


def fci_from_ci(k: int, ci: CITest, max_cond: int | None = None) -> np.ndarray:
    """FCI over ``k`` variables given a CI oracle ``ci(i, j, S) -> independent``.

    Skeleton by PC-stable adjacency search, Possible-D-SEP pruning, collider
    orientation, then orientation rules R1-R4 to a fixed point.
    """
    if k > MAX_K:
        raise ParameterError(f"k={k} exceeds the supported bound {MAX_K}")
    max_cond = max(k - 2, 0) if max_cond is None else max_cond
    adj, sepset = _learn_skeleton(k, ci, max_cond)
    pag = [[CIRCLE if adj[i][j] else NONE for j in range(k)] for i in range(k)]
    _orient_colliders(pag, sepset)

    removed = False
    for x in range(k):
        pds_x = _possible_dsep(pag, x)
        for y in _neighbors(pag, x):
            if y < x:
                continue
            cand = sorted((pds_x | _possible_dsep(pag, y)) - {x, y})
            done = False
            for size in range(0, min(len(cand), max_cond) + 1):
                for S in combinations(cand, size):
                    if ci(x, y, S):
                        pag[x][y] = pag[y][x] = NONE
                        sepset[frozenset((x, y))] = S
                        removed = done = True
                        break
                if done:
                    break
    if removed:
        pag = [[CIRCLE if v != NONE else NONE for v in row] for row in pag]
        _orient_colliders(pag, sepset)

    while _rule1(pag) | _rule2(pag) | _rule3(pag) | _rule4(pag, sepset):
        pass
    return np.array(pag, dtype=np.uint8).reshape(k, k)


def fci(D_subset: np.ndarray | None = None, alpha: float = 0.05, *, ci_test: CITest | None = None, k: int | None = None) -> np.ndarray:
    """FCI on a data matrix (Fisher-z CI tests) or on a supplied CI oracle."""
    if ci_test is None:
        if D_subset is None:
            raise ParameterError("need data or a CI oracle")
        D = np.asarray(D_subset, dtype=np.float64)
        st = summary_stats(D)
        rho = st.rho.copy()
        const = st.var == 0
        rho[const, const] = 0.0
        ci_test = FisherZ(rho, D.shape[0], alpha)
        k = D.shape[1]
    elif k is None:
        raise ParameterError("k is required with a CI oracle")
    return fci_from_ci(k, ci_test)


class _SubsetOracle:
    def __init__(self, base: FisherZ, subset: tuple[int, ...]):
        self.base = base
        self.sub = subset

    def __call__(self, i: int, j: int, S) -> bool:
        g = self.sub
        return self.base(g[i], g[j], tuple(g[s] for s in S))


def local_estimates_from_corr(rho: np.ndarray, m: int, k: int, T: int, alpha: float, seed: int) -> LocalEstimates:
    rho = np.asarray(rho, dtype=np.float64)
    N = rho.shape[0]
    k = min(k, N)
    if k > MAX_K:
        raise ParameterError(f"k={k} exceeds the supported bound {MAX_K}")
    subsets = sample_subsets(rho, k, T, seed)
    oracle = FisherZ(rho, m, alpha)
    cache: dict[tuple[int, ...], np.ndarray] = {}
    pags = []
    for sub in subsets:
        key = tuple(sorted(sub))
        pag_sorted = cache.get(key)
        if pag_sorted is None:
            pag_sorted = fci_from_ci(len(key), _SubsetOracle(oracle, key))
            cache[key] = pag_sorted
        # reorder from sorted node order into the sampled subset order
        pos = [key.index(v) for v in sub]
        pags.append(pag_sorted[np.ix_(pos, pos)].copy())
    return LocalEstimates(N, k, subsets, pags, alpha)


def local_estimates(D: np.ndarray, k: int = 5, T: int = 100, alpha: float = 0.05, seed: int = 0) -> LocalEstimates:
    st = summary_stats(D)
    rho = st.rho.copy()
    const = st.var == 0
    rho[const, const] = 0.0
    return local_estimates_from_corr(rho, st.m, k, T, alpha, seed)


# ---------------------------------------------------------------------------
# features.bin
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIId")


def write_features(path: str | Path, rho: np.ndarray, est: LocalEstimates) -> None:
    """Little-endian layout: u32 N, u32 k, u32 T, f64 alpha; N*N f64 correlation
    (row-major); then T records of k u32 node indices and k*k u8 mark codes."""
    N = rho.shape[0]
    parts = [_HEADER.pack(N, est.k, est.T, est.alpha), np.ascontiguousarray(rho, dtype="<f8").tobytes()]
    for sub, pag in zip(est.subsets, est.pags):
        parts.append(np.asarray(sub, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(pag, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path: str | Path) -> tuple[np.ndarray, LocalEstimates]:
    buf = Path(path).read_bytes()
    N, k, T, alpha = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    rho = np.frombuffer(buf, dtype="<f8", count=N * N, offset=off).reshape(N, N).copy()
    off += 8 * N * N
    subsets, pags = [], []
    for _ in range(T):
        sub = np.frombuffer(buf, dtype="<u4", count=k, offset=off)
        off += 4 * k
        pag = np.frombuffer(buf, dtype=np.uint8, count=k * k, offset=off).reshape(k, k).copy()
        off += k * k
        subsets.append(tuple(int(s) for s in sub))
        pags.append(pag)
    if off != len(buf):
        raise OSError(f"{path}: {len(buf) - off} trailing bytes")
    return rho, LocalEstimates(N, k, subsets, pags, alpha)
