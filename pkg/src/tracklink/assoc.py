"""Generalized linear assignment over tracklets and trajectory assembly.

The assignment maximises sum P_ij X_ij with row and column sums <= 1; X_ij = 1
means tracklet i directly precedes tracklet j.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import SoftassignConfig, Trajectory, Tracklet

BRUTE_FORCE_MAX_N = 10


class ConsistencyError(RuntimeError):
    """An internal invariant failed (e.g. a cycle in the predecessor links)."""


@dataclass
class AssignmentSolution:
    X: np.ndarray
    objective: float

    def chains(self) -> list:
        """Index chains in predecessor order; raises on cyclic links."""
        return chains_from_links(self.X.shape[0], self.X)

    def links(self) -> list:
        rows, cols = np.nonzero(self.X)
        return list(zip(rows.tolist(), cols.tolist()))


def chains_from_links(n: int, X: np.ndarray) -> list:
    succ = {}
    has_pred = set()
    for i, j in zip(*np.nonzero(X)):
        succ[int(i)] = int(j)
        has_pred.add(int(j))
    chains = []
    seen = set()
    for start in range(n):
        if start in has_pred:
            continue
        chain = [start]
        seen.add(start)
        while chain[-1] in succ:
            nxt = succ[chain[-1]]
            if nxt in seen:
                raise ConsistencyError(f"cycle through index {nxt}")
            chain.append(nxt)
            seen.add(nxt)
        chains.append(chain)
    if len(seen) != n:
        raise ConsistencyError("predecessor links contain a cycle")
    return chains


def _solution(P: np.ndarray, X: np.ndarray) -> AssignmentSolution:
    X = X.astype(np.int8)
    return AssignmentSolution(X=X, objective=float((P * X).sum()))


def _check_matrix(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"affinity matrix must be square, got {P.shape}")
    if not np.isfinite(P).all():
        raise ValueError("affinity matrix has non-finite entries")
    if (P < 0).any():
        raise ValueError("affinity matrix has negative entries")
    return P


def _segment_logsumexp(values: np.ndarray, order: np.ndarray, starts: np.ndarray,
                       owners: np.ndarray, size: int) -> np.ndarray:
    """log(1 + sum exp(values)) per owner; the 1 is the slack entry (score 0)."""
    v = values[order]
    peak = np.maximum(np.maximum.reduceat(v, starts), 0.0)
    sums = np.add.reduceat(np.exp(v - np.repeat(peak, np.diff(np.append(starts, v.size)))), starts)
    out = np.zeros(size)
    out[owners] = peak + np.log(sums + np.exp(-peak))
    return out


def soft_assignment(P, cfg: SoftassignConfig = SoftassignConfig()) -> np.ndarray:
    """Annealed Sinkhorn relaxation with a slack row and column.

    Works in the log domain on the feasible (P > 0) entries only; each real
    row and column is normalised against its slack entry, whose score is 0.
    Returns the soft assignment for the real entries (zero elsewhere).
    """
    P = _check_matrix(P)
    n = P.shape[0]
    rows, cols = np.nonzero(P > 0)
    soft = np.zeros((n, n))
    if rows.size == 0:
        return soft
    p = P[rows, cols]
    by_row = np.lexsort((cols, rows))
    by_col = np.lexsort((rows, cols))
    row_starts = np.flatnonzero(np.r_[True, np.diff(rows[by_row]) != 0])
    col_starts = np.flatnonzero(np.r_[True, np.diff(cols[by_col]) != 0])
    row_owners = rows[by_row][row_starts]
    col_owners = cols[by_col][col_starts]

    u = np.zeros(n)
    v = np.zeros(n)
    beta = cfg.beta0
    while True:
        base = beta * p
        for _ in range(cfg.sinkhorn_iters):
            u = -_segment_logsumexp(base + v[cols], by_row, row_starts, row_owners, n)
            v = -_segment_logsumexp(base + u[rows], by_col, col_starts, col_owners, n)
            log_q = base + u[rows] + v[cols]
            mass = np.bincount(rows, weights=np.exp(log_q), minlength=n) + np.exp(u)
            if np.abs(mass[row_owners] - 1.0).max() < cfg.convergence_tol:
                break
        if beta >= cfg.beta_max:
            break
        next_beta = min(beta * cfg.beta_growth, cfg.beta_max)
        # dual potentials scale with beta
        u *= next_beta / beta
        v *= next_beta / beta
        beta = next_beta
    soft[rows, cols] = np.exp(beta * p + u[rows] + v[cols])
    return soft


def softassign(P, cfg: SoftassignConfig = SoftassignConfig()) -> AssignmentSolution:
    """Deterministic-annealing softassign followed by binarisation.

    Entries whose soft assignment exceeds ``binarize_threshold`` are accepted
    in order of descending affinity while their row and column are free;
    remaining free rows and columns are then filled greedily by descending
    soft assignment, so the result always satisfies the one-to-one limits.
    """
    P = _check_matrix(P)
    n = P.shape[0]
    X = np.zeros((n, n), dtype=np.int8)
    rows, cols = np.nonzero(P > 0)
    if rows.size == 0:
        return _solution(P, X)
    soft = soft_assignment(P, cfg)

    row_free = np.ones(n, dtype=bool)
    col_free = np.ones(n, dtype=bool)
    accepted = [(i, j) for i, j in zip(rows, cols) if soft[i, j] > cfg.binarize_threshold]
    accepted.sort(key=lambda ij: (-P[ij], ij))
    fill = sorted(zip(rows, cols), key=lambda ij: (-soft[ij], -P[ij], ij))
    for i, j in [*accepted, *fill]:
        if row_free[i] and col_free[j]:
            X[i, j] = 1
            row_free[i] = False
            col_free[j] = False
    return _solution(P, X)


def brute_force_gla(P) -> AssignmentSolution:
    """Exact maximiser over all partial one-to-one matchings (N <= 10).

    Enumerates, row by row, "leave unmatched" or "match to a free column"
    with memoisation on the set of used columns.
    """
    P = _check_matrix(P)
    n = P.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}, got {n}")
    memo = {}

    def best(i: int, used: int) -> tuple:
        if i == n:
            return 0.0, ()
        key = (i, used)
        if key in memo:
            return memo[key]
        value, picks = best(i + 1, used)
        for j in range(n):
            if P[i, j] > 0 and not used >> j & 1:
                sub_value, sub_picks = best(i + 1, used | 1 << j)
                if P[i, j] + sub_value > value:
                    value, picks = P[i, j] + sub_value, ((i, j), *sub_picks)
        memo[key] = (value, picks)
        return memo[key]

    _, picks = best(0, 0)
    X = np.zeros((n, n), dtype=np.int8)
    for i, j in picks:
        X[i, j] = 1
    return _solution(P, X)


def merge_tracklets(tracklets: Sequence[Tracklet], sol: AssignmentSolution) -> list:
    """One trajectory per chain, gaps left open; ids numbered by start frame."""
    if sol.X.shape != (len(tracklets), len(tracklets)):
        raise ConsistencyError("assignment size does not match tracklet count")
    chains = chains_from_links(len(tracklets), sol.X)
    chains.sort(key=lambda ch: (tracklets[ch[0]].start, tracklets[ch[0]].tid))
    trajectories = []
    for track_id, chain in enumerate(chains, start=1):
        members = [tracklets[k] for k in chain]
        for a, b in zip(members, members[1:]):
            if a.end >= b.start:
                raise ConsistencyError(f"tracklets {a.tid} and {b.tid} overlap in time")
        entries = [(d.frame, d.box) for tr in members for d in tr.detections]
        trajectories.append(Trajectory(track_id, entries, [tr.tid for tr in members]))
    return trajectories


def interpolate_gaps(traj: Trajectory) -> Trajectory:
    """Fill missing frames by linear interpolation of box centre and size."""
    entries = list(traj.entries)
    if len(entries) < 2:
        return traj
    out = [entries[0]]
    for (f0, box0), (f1, box1) in zip(entries, entries[1:]):
        if f1 - f0 > 1:
            b0 = np.array(box0)
            b1 = np.array(box1)
            c0 = b0[:2] + b0[2:] / 2
            c1 = b1[:2] + b1[2:] / 2
            for f in range(f0 + 1, f1):
                a = (f - f0) / (f1 - f0)
                size = (1 - a) * b0[2:] + a * b1[2:]
                center = (1 - a) * c0 + a * c1
                out.append((f, tuple((*(center - size / 2), *size))))
        out.append((f1, box1))
    return Trajectory(traj.track_id, out, traj.source_tracklets)


def associate(tracklets: Sequence[Tracklet], P: np.ndarray,
              cfg: Optional[SoftassignConfig] = None) -> tuple:
    """Solve the assignment and build gap-filled trajectories; returns (trajectories, solution)."""
    sol = softassign(P, cfg or SoftassignConfig())
    trajs = [interpolate_gaps(t) for t in merge_tracklets(tracklets, sol)]
    return trajs, sol


class Chain:
    """Temporally ordered, non-overlapping tracklets treated as one unit.

    Exposes the subset of the ``Tracklet`` interface the affinity model
    reads; frames may have gaps between members.
    """

    def __init__(self, members: Sequence[Tracklet]):
        self.members = tuple(members)
        for a, b in zip(self.members, self.members[1:]):
            if a.end >= b.start:
                raise ConsistencyError(f"tracklets {a.tid} and {b.tid} overlap in time")
        self.tid = self.members[0].tid
        self.detections = tuple(d for tr in self.members for d in tr.detections)

    def __len__(self):
        return len(self.detections)

    @property
    def head(self):
        return self.detections[0]

    @property
    def tail(self):
        return self.detections[-1]

    @property
    def start(self) -> int:
        return self.detections[0].frame

    @property
    def end(self) -> int:
        return self.detections[-1].frame

    def features(self) -> np.ndarray:
        return np.stack([d.feature for d in self.detections])

    def centers(self) -> np.ndarray:
        return np.stack([d.center for d in self.detections])


def gap_levels(max_gap: int, first: int = 2) -> list:
    """Doubling gap limits ``first, 2*first, ...`` capped at ``max_gap``."""
    levels = []
    g = max(1, first)
    while g < max_gap:
        levels.append(g)
        g *= 2
    levels.append(max_gap)
    return levels


def hierarchical_associate(tracklets: Sequence[Tracklet], score, levels: Sequence[int],
                           cfg: Optional[SoftassignConfig] = None) -> tuple:
    """Repeated assignment with growing gap limits, merging links between rounds.

    ``score(chains)`` returns ``(P, gaps)`` for the current chains, computed
    over every feasible candidate; each round only keeps the entries whose
    gap is within its limit, so short links are settled first. Returns
    ``(trajectories, solution, matrices)`` where ``solution`` expresses the
    final chains as links between the original tracklets.
    """
    cfg = cfg or SoftassignConfig()
    chains = [Chain([tr]) for tr in tracklets]
    matrices = []
    for max_gap in levels:
        if len(chains) < 2:
            break
        P, gaps = score(chains)
        P = np.where(gaps <= max_gap, P, 0.0)
        matrices.append(P)
        sol = softassign(P, cfg)
        if not sol.links():
            continue
        chains = [Chain([m for k in ch for m in chains[k].members]) for ch in sol.chains()]
        chains.sort(key=lambda c: (c.start, c.tid))

    index = {tr.tid: k for k, tr in enumerate(tracklets)}
    n = len(tracklets)
    X = np.zeros((n, n), dtype=np.int8)
    for ch in chains:
        for a, b in zip(ch.members, ch.members[1:]):
            X[index[a.tid], index[b.tid]] = 1
    P0 = matrices[0] if matrices else np.zeros((n, n))
    solution = _solution(P0, X)
    trajs = [interpolate_gaps(t) for t in merge_tracklets(tracklets, solution)]
    return trajs, solution, matrices
