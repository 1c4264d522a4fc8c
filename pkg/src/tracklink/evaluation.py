"""CLEAR-MOT evaluation of tracker output against ground truth."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Trajectory

MT_COVERAGE = 0.8
ML_COVERAGE = 0.2


def iou(a, b) -> float:
    al, at, aw, ah = a
    bl, bt, bw, bh = b
    iw = min(al + aw, bl + bw) - max(al, bl)
    ih = min(at + ah, bt + bh) - max(at, bt)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(boxes_a: Sequence, boxes_b: Sequence) -> np.ndarray:
    if not len(boxes_a) or not len(boxes_b):
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.asarray(boxes_a, dtype=np.float64)[:, None, :]
    b = np.asarray(boxes_b, dtype=np.float64)[None, :, :]
    iw = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def match_frame(gt_boxes: Sequence, pred_boxes: Sequence, iou_threshold: float = 0.5,
                gt_ids: Sequence = None, pred_ids: Sequence = None, previous: dict = None) -> list:
    """One-to-one matching as ``[(gt_index, pred_index, iou), ...]``.

    Correspondences carried over from ``previous`` (gt id -> pred id) are kept
    when they still clear the threshold; the rest is a maximum-overlap
    assignment restricted to pairs with IoU >= ``iou_threshold``.
    """
    overlaps = iou_matrix(gt_boxes, pred_boxes)
    matches = []
    used_g, used_p = set(), set()
    if previous and gt_ids is not None and pred_ids is not None:
        pred_pos = {pid: k for k, pid in enumerate(pred_ids)}
        for g, gid in enumerate(gt_ids):
            p = pred_pos.get(previous.get(gid))
            if p is not None and p not in used_p and overlaps[g, p] >= iou_threshold:
                matches.append((g, p, float(overlaps[g, p])))
                used_g.add(g)
                used_p.add(p)
    free_g = [g for g in range(len(gt_boxes)) if g not in used_g]
    free_p = [p for p in range(len(pred_boxes)) if p not in used_p]
    if free_g and free_p:
        sub = overlaps[np.ix_(free_g, free_p)]
        weight = np.where(sub >= iou_threshold, sub, 0.0)
        rows, cols = linear_sum_assignment(weight, maximize=True)
        for r, c in zip(rows, cols):
            if sub[r, c] >= iou_threshold:
                matches.append((free_g[r], free_p[c], float(sub[r, c])))
    return sorted(matches)


@dataclass
class EvalReport:
    mota: float
    motp: float
    recall: float
    precision: float
    faf: float
    fp: int
    fn: int
    ids: int
    frag: int
    gt: int
    mt: int
    pt: int
    ml: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_table(self) -> str:
        fields = list(asdict(self).items())
        header = " ".join(f"{k.upper():>9}" for k, _ in fields)
        cells = []
        for _, v in fields:
            cells.append(f"{v:>9.4f}" if isinstance(v, float) else f"{v:>9d}")
        return header + "\n" + " ".join(cells)


def _by_frame(trajs: Sequence[Trajectory]) -> dict:
    frames = defaultdict(list)
    for tr in trajs:
        for f, box in tr.entries:
            frames[f].append((tr.track_id, box))
    return frames


def evaluate(gt: Sequence[Trajectory], pred: Sequence[Trajectory], iou_threshold: float = 0.5) -> EvalReport:
    gt_frames = _by_frame(gt)
    n_gt_dets = sum(len(v) for v in gt_frames.values())
    if n_gt_dets == 0:
        raise ValueError("ground truth is empty")
    pred_frames = _by_frame(pred)
    all_frames = sorted(set(gt_frames) | set(pred_frames))

    fp = fn = ids = frag = 0
    iou_sum = 0.0
    n_matched = 0
    current = {}  # gt id -> pred id matched in the previous frame
    last_match = {}  # gt id -> last pred id ever matched
    tracked_frames = defaultdict(int)
    total_frames = defaultdict(int)
    status = {}  # gt id -> was tracked at its previous appearance
    interrupted = defaultdict(bool)

    for f in all_frames:
        g_items = gt_frames.get(f, [])
        p_items = pred_frames.get(f, [])
        g_ids = [gid for gid, _ in g_items]
        p_ids = [pid for pid, _ in p_items]
        matches = match_frame([b for _, b in g_items], [b for _, b in p_items], iou_threshold,
                              g_ids, p_ids, current)
        matched_g = {}
        for g, p, ov in matches:
            gid, pid = g_ids[g], p_ids[p]
            matched_g[gid] = pid
            iou_sum += ov
            n_matched += 1
            if gid in last_match and last_match[gid] != pid:
                ids += 1
            last_match[gid] = pid
        fp += len(p_items) - len(matches)
        fn += len(g_items) - len(matches)
        for gid in g_ids:
            total_frames[gid] += 1
            is_tracked = gid in matched_g
            if is_tracked:
                tracked_frames[gid] += 1
                if interrupted[gid]:
                    frag += 1
                    interrupted[gid] = False
            elif status.get(gid, False):
                interrupted[gid] = True
            status[gid] = is_tracked
        current = matched_g

    coverage = [tracked_frames[gid] / total_frames[gid] for gid in total_frames]
    mt = sum(c >= MT_COVERAGE for c in coverage)
    ml = sum(c <= ML_COVERAGE for c in coverage)
    n_pred = n_matched + fp
    return EvalReport(
        mota=1.0 - (fp + fn + ids) / n_gt_dets,
        motp=iou_sum / n_matched if n_matched else 0.0,
        recall=n_matched / n_gt_dets,
        precision=n_matched / n_pred if n_pred else 0.0,
        faf=fp / len(all_frames) if all_frames else 0.0,
        fp=fp,
        fn=fn,
        ids=ids,
        frag=frag,
        gt=len(total_frames),
        mt=mt,
        pt=len(total_frames) - mt - ml,
        ml=ml,
    )
