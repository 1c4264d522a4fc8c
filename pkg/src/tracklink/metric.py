"""Temporally constrained multi-task Mahalanobis metric learning.

A common metric ``M0`` is shared by the whole sequence and every segment ``t``
owns an additive metric ``Mt``; pair distances use ``M0 + Mt``. Adjacent
segment metrics are tied by an ``eta/2 * ||Mt - M(t-1)||_F^2`` penalty and
learning runs online, one segment after another.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Config, SegmentPlan, Tracklet, plan_segments
from .embed import (
    EmbeddingNet,
    add_grads,
    backward,
    forward,
    pair_input_gradient,
    sgd_step,
    zero_grads,
)

PSD_TOL = 1e-9
CHECKPOINT_VERSION = 1


@dataclass
class MetricSet:
    m0: np.ndarray
    per_segment: list = field(default_factory=list)

    @classmethod
    def initial(cls, d_emb: int, n_segments: int = 0) -> "MetricSet":
        return cls(np.eye(d_emb), [np.zeros((d_emb, d_emb)) for _ in range(n_segments)])

    @property
    def d_emb(self) -> int:
        return self.m0.shape[0]

    @property
    def n_segments(self) -> int:
        return len(self.per_segment)

    def segment(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.n_segments:
            raise IndexError(f"segment {t} out of range 1..{self.n_segments}")
        return self.per_segment[t - 1]

    def total(self, t: int) -> np.ndarray:
        return self.m0 + self.segment(t)

    def copy(self) -> "MetricSet":
        return MetricSet(self.m0.copy(), [m.copy() for m in self.per_segment])

    def matrices(self) -> list:
        return [self.m0, *self.per_segment]


@dataclass
class TrainPair:
    x_i: np.ndarray
    x_j: np.ndarray
    label: int
    t: int
    # raw features, kept so the embedding can be recomputed while the net trains
    raw_i: Optional[np.ndarray] = None
    raw_j: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.label}")


def mahalanobis_sq(x_i, x_j, m: np.ndarray) -> float:
    diff = np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)
    if diff.shape != (m.shape[0],) or m.shape[0] != m.shape[1]:
        raise ValueError(f"dimension mismatch: difference {diff.shape}, metric {m.shape}")
    return float(diff @ m @ diff)


def hinge_arg(p: TrainPair, ms: MetricSet, b: float) -> float:
    return b - p.label * (1.0 - mahalanobis_sq(p.x_i, p.x_j, ms.total(p.t)))


def pair_loss(p: TrainPair, ms: MetricSet, b: float) -> float:
    """max(0, b - l [1 - ||x_i - x_j||^2_{M0+Mt}])"""
    return max(0.0, hinge_arg(p, ms, b))


def total_loss(pairs: Sequence[TrainPair], ms: MetricSet, cfg: Config) -> float:
    d = ms.d_emb
    loss = 0.5 * cfg.lambda0 * np.sum((ms.m0 - np.eye(d)) ** 2)
    for t in range(2, ms.n_segments + 1):
        loss += 0.5 * cfg.eta * np.sum((ms.segment(t) - ms.segment(t - 1)) ** 2)
    for m_t in ms.per_segment:
        loss += 0.5 * cfg.lambda_ * np.sum(m_t ** 2)
    for p in pairs:
        loss += cfg.c_weight * pair_loss(p, ms, cfg.margin_b)
    return float(loss)


def _data_gradient(pairs: Sequence[TrainPair], ms: MetricSet, cfg: Config) -> np.ndarray:
    grad = np.zeros((ms.d_emb, ms.d_emb))
    for p in pairs:
        if hinge_arg(p, ms, cfg.margin_b) > 0.0:
            diff = np.asarray(p.x_i) - np.asarray(p.x_j)
            grad += p.label * np.outer(diff, diff)
    return cfg.c_weight * grad


def grad_m0(pairs: Sequence[TrainPair], ms: MetricSet, cfg: Config) -> np.ndarray:
    """lambda0 (M0 - I) + C sum l A [g > 0] over pairs from every segment."""
    return cfg.lambda0 * (ms.m0 - np.eye(ms.d_emb)) + _data_gradient(pairs, ms, cfg)


def grad_mt(t: int, pairs: Sequence[TrainPair], ms: MetricSet, cfg: Config) -> np.ndarray:
    """Gradient w.r.t. the segment metric ``Mt`` using the pairs of segment ``t``.

    The coupling to the following segment is left out: when ``Mt`` is being
    learned the next segment does not exist yet.
    """
    m_t = ms.segment(t)
    grad = cfg.lambda_ * m_t + _data_gradient([p for p in pairs if p.t == t], ms, cfg)
    if t > 1:
        grad = grad + cfg.eta * (m_t - ms.segment(t - 1))
    return grad


def psd_project(m: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) positive semidefinite matrix.

    Symmetric PSD inputs are returned unchanged (after exact symmetrization).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"psd_project needs a square matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise np.linalg.LinAlgError("psd_project: non-finite entries")
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    if w[0] >= 0.0:
        return sym
    out = (v * np.maximum(w, 0.0)) @ v.T
    return 0.5 * (out + out.T)


def is_psd(m: np.ndarray, tol: float = PSD_TOL) -> bool:
    return bool(np.abs(m - m.T).max(initial=0.0) <= tol and np.linalg.eigvalsh(0.5 * (m + m.T))[0] >= -tol)


# ---------------------------------------------------------------------------
# training pair collection
# ---------------------------------------------------------------------------

def strongest_indices(tracklet: Tracklet, kappa: int) -> list:
    """Indices of the ``kappa`` highest-confidence responses.

    Ties go to the earlier frame, which within a tracklet is also the lower
    detection index.
    """
    order = sorted(range(len(tracklet)), key=lambda k: (-tracklet.detections[k].confidence, k))
    return sorted(order[:kappa])


def available_pairs(tracklets: Sequence[Tracklet], kappa: int) -> tuple:
    """All candidate (positive, negative) pairs as (tracklet idx, response idx) tuples."""
    strongest = [strongest_indices(t, kappa) for t in tracklets]
    positives = [
        ((a, ka), (a, kb))
        for a, idx in enumerate(strongest)
        for ka, kb in itertools.combinations(idx, 2)
    ]
    negatives = [
        ((a, ka), (b, kb))
        for a, b in itertools.combinations(range(len(tracklets)), 2)
        if tracklets[a].overlaps(tracklets[b])
        for ka in strongest[a]
        for kb in strongest[b]
    ]
    return positives, negatives


def collect_pairs(tracklets: Sequence[Tracklet], kappa: int, m: Optional[int],
                  net: Optional[EmbeddingNet] = None, t: int = 1, rng=None,
                  max_pairs: int = 64) -> tuple:
    """Sample ``m`` positive and ``m`` negative training pairs for one segment.

    Positives join two of the ``kappa`` strongest responses of one tracklet;
    negatives join strongest responses of two tracklets that overlap in time.
    With ``m=None`` the count is ``min(max_pairs, #positives, #negatives)``
    (negatives ignored when none exist). Returns ``(pairs, deficit)`` where
    ``deficit`` is True when fewer than ``m`` of either polarity were available.
    """
    rng = np.random.default_rng(rng)
    positives, negatives = available_pairs(tracklets, kappa)
    if m is None:
        m = min(max_pairs, len(positives), len(negatives)) if negatives else min(max_pairs, len(positives))
    n_pos = min(m, len(positives))
    n_neg = min(m, len(negatives))
    deficit = n_pos < m or n_neg < m

    chosen = [(positives[k], 1) for k in sorted(rng.choice(len(positives), n_pos, replace=False))] if n_pos else []
    chosen += [(negatives[k], -1) for k in sorted(rng.choice(len(negatives), n_neg, replace=False))] if n_neg else []
    chosen = [chosen[k] for k in rng.permutation(len(chosen))]

    pairs = []
    for ((a, ka), (b, kb)), label in chosen:
        raw_i = tracklets[a].detections[ka].feature
        raw_j = tracklets[b].detections[kb].feature
        if net is not None:
            x_i, x_j = net.embed(np.stack([raw_i, raw_j]))
        else:
            x_i, x_j = raw_i, raw_j
        pairs.append(TrainPair(x_i=x_i, x_j=x_j, label=label, t=t, raw_i=raw_i, raw_j=raw_j))
    return pairs, deficit


# ---------------------------------------------------------------------------
# online learning
# ---------------------------------------------------------------------------

def update_on_pair(ms: MetricSet, t: int, p: TrainPair, cfg: Config) -> str:
    """Apply one online step for pair ``p`` in segment ``t``; mutates ``ms``.

    Returns which branch ran: ``"skip"`` (margin satisfied), ``"negative"``
    (plain gradient step) or ``"positive"`` (projected gradient step).
    """
    d = mahalanobis_sq(p.x_i, p.x_j, ms.total(t))
    if p.label * (1.0 - d) > cfg.margin_b:
        return "skip"
    beta = cfg.learning_rate_beta
    g0 = grad_m0([p], ms, cfg)
    gt = grad_mt(t, [p], ms, cfg) if cfg.use_segment_metrics else None
    new_m0 = ms.m0 - beta * g0
    new_mt = ms.segment(t) - beta * gt if gt is not None else ms.segment(t)
    if p.label < 0:
        ms.m0 = new_m0
        ms.per_segment[t - 1] = new_mt
        return "negative"
    ms.m0 = psd_project(new_m0)
    if gt is not None:
        ms.per_segment[t - 1] = psd_project(new_mt)
    return "positive"


def learn_from_pairs(pairs_by_segment: Sequence[Sequence[TrainPair]], cfg: Config,
                     epochs: int = 1, rng=None) -> MetricSet:
    """Online metric learning on fixed feature pairs, one list per segment.

    Segment ``t`` starts from segment ``t-1``'s metric; pairs are visited in a
    fresh random order each epoch when ``rng`` is given.
    """
    d = len(pairs_by_segment[0][0].x_i) if pairs_by_segment and pairs_by_segment[0] else cfg.d_in
    ms = MetricSet(np.eye(d), [])
    rng = np.random.default_rng(rng) if rng is not None else None
    for t, pairs in enumerate(pairs_by_segment, start=1):
        ms.per_segment.append(ms.segment(t - 1).copy() if t > 1 else np.zeros((d, d)))
        for _ in range(epochs):
            order = rng.permutation(len(pairs)) if rng is not None else range(len(pairs))
            for k in order:
                update_on_pair(ms, t, pairs[k], cfg)
    return ms


def segment_tracklets(tracklets: Sequence[Tracklet], plan: SegmentPlan) -> list:
    """Group tracklets by the segment of their head frame, 1-based."""
    groups = [[] for _ in range(plan.n_segments)]
    for tr in tracklets:
        groups[plan.segment_of(tr.start) - 1].append(tr)
    return groups


def learn_metrics(tracklets: Sequence[Tracklet], net: Optional[EmbeddingNet], cfg: Config,
                  plan: Optional[SegmentPlan] = None, trace: Optional[list] = None) -> tuple:
    """Jointly learn ``M0, M1..Mn`` and fine-tune ``net``, segment by segment.

    Per pair the metric step runs first, then the pair's embedding gradient is
    computed with the updated ``M0 + Mt`` and accumulated into a mini-batch
    update of the net. ``trace`` (if given) receives one dict per segment.
    """
    if plan is None:
        last = max((tr.end for tr in tracklets), default=1)
        plan = plan_segments(last, cfg.segment_length)
    d_emb = net.d_emb if net is not None else cfg.d_in
    rng = np.random.default_rng(cfg.rng_seed)
    ms = MetricSet(np.eye(d_emb), [])
    groups = segment_tracklets(tracklets, plan)
    train_net = net is not None and cfg.net_learning_rate > 0 and cfg.net_epochs > 0

    for t in range(1, plan.n_segments + 1):
        if t == 1 or not cfg.use_segment_metrics:
            ms.per_segment.append(np.zeros((d_emb, d_emb)))
        else:
            ms.per_segment.append(ms.segment(t - 1).copy())
        pairs, deficit = collect_pairs(groups[t - 1], cfg.kappa, None, net, t, rng, cfg.pairs_per_segment)
        branches = {"skip": 0, "negative": 0, "positive": 0}
        n_epochs = max(cfg.metric_epochs, cfg.net_epochs if train_net else 0)
        for epoch in range(n_epochs):
            update_metric = epoch < cfg.metric_epochs
            update_net = train_net and epoch < cfg.net_epochs
            acc, pending = (zero_grads(net), 0) if update_net else (None, 0)
            for p in pairs:
                cache = None
                if update_net:
                    both, cache = forward(net, np.stack([p.raw_i, p.raw_j]))
                    p = TrainPair(both[0], both[1], p.label, t, p.raw_i, p.raw_j)
                if update_metric:
                    branches[update_on_pair(ms, t, p, cfg)] += 1
                if update_net:
                    g = pair_input_gradient(p.x_i, p.x_j, p.label, ms.total(t),
                                            cfg.margin_b, cfg.c_weight)
                    if g.any():
                        acc = add_grads(acc, backward(net, cache, np.stack([0.5 * g, -0.5 * g])))
                    pending += 1
                    if pending == cfg.batch_size:
                        net = sgd_step(net, acc, cfg.net_learning_rate)
                        acc, pending = zero_grads(net), 0
            if update_net and pending:
                net = sgd_step(net, acc, cfg.net_learning_rate)

        # safety net for the unprojected negative branch
        changes = []
        for name, idx in (("m0", None), ("mt", t - 1)):
            before = ms.m0 if idx is None else ms.per_segment[idx]
            after = psd_project(before)
            changes.append(float(np.linalg.norm(after - before)))
            if idx is None:
                ms.m0 = after
            else:
                ms.per_segment[idx] = after
        if trace is not None:
            trace.append({
                "segment": t,
                "n_pairs": len(pairs),
                "deficit": deficit,
                "branches": branches,
                "reprojection_change_m0": changes[0],
                "reprojection_change_mt": changes[1],
            })
    return ms, net


def save_metrics(ms: MetricSet, path) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "n": np.array(ms.n_segments),
        "d_emb": np.array(ms.d_emb),
        "m0": np.ascontiguousarray(ms.m0),
    }
    for t, m in enumerate(ms.per_segment, start=1):
        arrays[f"m{t}"] = np.ascontiguousarray(m)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_metrics(path) -> MetricSet:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported metric checkpoint version {version}")
        n = int(data["n"])
        return MetricSet(data["m0"].copy(), [data[f"m{t}"].copy() for t in range(1, n + 1)])
