"""MOT-style CSV files and the feature sidecar."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Detection, Trajectory, Tracklet


class InputError(ValueError):
    """Malformed input file."""


def feature_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".feat")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def load_detections(path, features_path=None, d_in: Optional[int] = None) -> list:
    """Parse ``frame,id,left,top,width,height,conf`` rows plus the feature sidecar.

    The sidecar holds one line of space-separated reals per CSV row, in the
    same order. Without a sidecar every feature is an empty vector. Extra CSV
    columns are ignored.
    """
    path = Path(path)
    if features_path is None:
        candidate = feature_path_for(path)
        features_path = candidate if candidate.exists() else None
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 7:
                raise InputError(f"{path}:{lineno}: expected at least 7 columns, got {len(row)}")
            try:
                frame = int(float(row[0]))
                ident = int(float(row[1]))
                left, top, width, height, conf = (float(v) for v in row[2:7])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if frame < 1:
                raise InputError(f"{path}:{lineno}: field 'frame' must be >= 1, got {frame}")
            if not width > 0:
                raise InputError(f"{path}:{lineno}: field 'width' must be > 0, got {width}")
            if not height > 0:
                raise InputError(f"{path}:{lineno}: field 'height' must be > 0, got {height}")
            rows.append((lineno, frame, ident, (left, top, width, height), conf))

    if features_path is not None:
        lines = [ln for ln in Path(features_path).read_text().splitlines() if ln.strip()]
        if len(lines) != len(rows):
            raise InputError(
                f"{features_path}: {len(lines)} feature lines for {len(rows)} detections"
            )
        features = []
        for k, ln in enumerate(lines, start=1):
            try:
                features.append(np.array([float(v) for v in ln.split()]))
            except ValueError as exc:
                raise InputError(f"{features_path}:{k}: {exc}") from None
    else:
        features = [np.zeros(0) for _ in rows]

    dets = []
    for (lineno, frame, ident, box, conf), feat in zip(rows, features):
        if d_in is not None and feat.shape[0] != d_in:
            raise InputError(f"{path}:{lineno}: feature dimension {feat.shape[0]} != d_in {d_in}")
        dets.append(Detection(frame=frame, box=box, confidence=conf, feature=feat,
                              id_hint=ident if ident >= 0 else None))
    return dets


def write_detections(dets: Sequence[Detection], path, features_path=None) -> None:
    path = Path(path)
    features_path = Path(features_path) if features_path else feature_path_for(path)
    with open(path, "w", newline="") as fh:
        for d in dets:
            ident = d.id_hint if d.id_hint is not None else -1
            fh.write(",".join([str(d.frame), str(ident), *(repr(v) for v in d.box), repr(d.confidence)]) + "\n")
    with open(features_path, "w") as fh:
        for d in dets:
            fh.write(" ".join(repr(float(v)) for v in d.feature) + "\n")


def emit_trajectories(trajs: Sequence[Trajectory], path) -> None:
    """Write ``frame,track_id,left,top,width,height,1,-1,-1,-1`` sorted by frame, id."""
    rows = []
    for tr in trajs:
        for f, box in tr.entries:
            rows.append((f, tr.track_id, box))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        for f, tid, box in rows:
            fh.write(f"{f},{tid},{','.join(_fmt(v) for v in box)},1,-1,-1,-1\n")


def load_trajectories(path) -> list:
    """Read a MOT-style track file (ground truth or tracker output)."""
    per_id = defaultdict(list)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 6:
                raise InputError(f"{path}:{lineno}: expected at least 6 columns, got {len(row)}")
            try:
                frame = int(float(row[0]))
                tid = int(float(row[1]))
                box = tuple(float(v) for v in row[2:6])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            per_id[tid].append((frame, box))
    return [Trajectory(tid, sorted(per_id[tid])) for tid in sorted(per_id)]


def write_tracklets(tracklets: Sequence[Tracklet], path) -> None:
    """``frame,tracklet_id,left,top,width,height,conf,segment`` per response."""
    with open(path, "w", newline="") as fh:
        for tr in tracklets:
            for d in tr.detections:
                fh.write(f"{d.frame},{tr.tid},{','.join(_fmt(v) for v in d.box)},{d.confidence:.4f},{tr.segment}\n")
