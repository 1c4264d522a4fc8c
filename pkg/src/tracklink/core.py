"""Domain types and configuration shared by every stage."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector response.

    ``id_hint`` carries a ground-truth identity for synthesis and evaluation
    only; nothing on the tracking path reads it.
    """

    frame: int
    box: tuple  # (left, top, width, height)
    confidence: float
    feature: np.ndarray
    id_hint: Optional[int] = field(default=None, repr=False)

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4:
            raise ValueError("box must have 4 entries (left, top, width, height)")
        if not box[2] > 0:
            raise ValueError(f"width must be > 0, got {box[2]}")
        if not box[3] > 0:
            raise ValueError(f"height must be > 0, got {box[3]}")
        if int(self.frame) < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        object.__setattr__(self, "frame", int(self.frame))
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "confidence", float(self.confidence))
        object.__setattr__(self, "feature", _frozen_array(self.feature).ravel())

    @property
    def center(self) -> np.ndarray:
        left, top, w, h = self.box
        return np.array([left + w / 2.0, top + h / 2.0])


@dataclass(frozen=True, eq=False)
class Tracklet:
    tid: int
    detections: tuple
    segment: int = 1

    def __post_init__(self):
        dets = tuple(self.detections)
        if not dets:
            raise ValueError("tracklet must contain at least one detection")
        frames = [d.frame for d in dets]
        if any(b - a != 1 for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tracklet {self.tid} frames are not contiguous: {frames}")
        dims = {d.feature.shape[0] for d in dets}
        if len(dims) != 1:
            raise ValueError(f"tracklet {self.tid} mixes feature dimensions {sorted(dims)}")
        object.__setattr__(self, "detections", dets)

    def __len__(self):
        return len(self.detections)

    @property
    def head(self) -> Detection:
        return self.detections[0]

    @property
    def tail(self) -> Detection:
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

    def overlaps(self, other: "Tracklet") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class Trajectory:
    track_id: int
    entries: tuple  # ((frame, (left, top, width, height)), ...)
    source_tracklets: tuple = ()

    def __post_init__(self):
        entries = tuple((int(f), tuple(float(v) for v in box)) for f, box in self.entries)
        frames = [f for f, _ in entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"trajectory {self.track_id} frames not strictly increasing")
        if not all(np.isfinite(box).all() for _, box in entries):
            raise ValueError(f"trajectory {self.track_id} has non-finite boxes")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "source_tracklets", tuple(self.source_tracklets))

    @property
    def frames(self) -> list:
        return [f for f, _ in self.entries]

    def is_contiguous(self) -> bool:
        frames = self.frames
        return all(b - a == 1 for a, b in zip(frames, frames[1:]))


@dataclass(frozen=True)
class SegmentPlan:
    segment_length: int
    boundaries: tuple  # ((start, end), ...) inclusive

    @property
    def n_segments(self) -> int:
        return len(self.boundaries)

    def segment_of(self, frame: int) -> int:
        """1-based index of the segment containing ``frame``."""
        if frame < 1:
            raise ValueError(f"frame must be >= 1, got {frame}")
        t = (frame - 1) // self.segment_length + 1
        return min(t, self.n_segments)


def plan_segments(last_frame: int, segment_length: int) -> SegmentPlan:
    if last_frame < 1:
        raise ValueError(f"last_frame must be >= 1, got {last_frame}")
    if segment_length < 1:
        raise ValueError(f"segment_length must be >= 1, got {segment_length}")
    bounds = tuple(
        (start, min(start + segment_length - 1, last_frame))
        for start in range(1, last_frame + 1, segment_length)
    )
    return SegmentPlan(segment_length=segment_length, boundaries=bounds)


@dataclass(frozen=True)
class TrackGenConfig:
    theta_link: float = 0.3
    theta_margin: float = 0.2
    w_pos: float = 0.6
    w_size: float = 0.2
    w_app: float = 0.2
    min_tracklet_len: int = 2
    # scales (fractions of box size / log-size) at which position and size
    # differences cost one unit of affinity exponent
    pos_sigma: float = 0.15
    size_sigma: float = 0.1


@dataclass(frozen=True)
class SoftassignConfig:
    beta0: float = 1.0
    beta_max: float = 200.0
    beta_growth: float = 1.5
    sinkhorn_iters: int = 60
    convergence_tol: float = 1e-6
    binarize_threshold: float = 0.6


@dataclass(frozen=True)
class Config:
    lambda0: float = 0.01
    lambda_: float = 0.02
    eta: float = 0.02
    c_weight: float = 0.001
    margin_b: float = 0.5
    learning_rate_beta: float = 0.01
    kappa: int = 4
    sigma_motion: tuple = (625.0, 3600.0)
    omega: float = 0.5
    segment_length: int = 60
    max_gap: int = 0  # 0 means 2 * segment_length
    d_in: int = 16
    d_emb: int = 64
    hidden_sizes: tuple = (128,)
    pairs_per_segment: int = 64
    metric_epochs: int = 1
    net_learning_rate: float = 0.01
    batch_size: int = 16
    net_epochs: int = 3
    warmup_epochs: int = 0
    use_segment_metrics: bool = True
    column_norm: str = "max"
    affinity_cap: float = 1e12
    rng_seed: int = 0
    trackgen: TrackGenConfig = field(default_factory=TrackGenConfig)
    solver: SoftassignConfig = field(default_factory=SoftassignConfig)

    @property
    def effective_max_gap(self) -> int:
        return self.max_gap if self.max_gap > 0 else 2 * self.segment_length

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: Config) -> Config:
    """Return ``cfg`` unchanged, or raise ConfigError naming the first bad field."""
    if not 0.0 <= cfg.margin_b <= 1.0:
        raise ConfigError("margin_b", "margin_b out of [0,1]")
    for name in ("lambda0", "lambda_", "eta", "c_weight"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(name, f"{_file_key(name)} must be > 0")
    if cfg.kappa < 2:
        raise ConfigError("kappa", "kappa ≥ 2 required")
    if not cfg.learning_rate_beta > 0:
        raise ConfigError("learning_rate_beta", "learning_rate_beta must be > 0")
    if len(cfg.sigma_motion) != 2 or not all(s > 0 for s in cfg.sigma_motion):
        raise ConfigError("sigma_motion", "sigma_motion must be two positive variances")
    if not 0.0 <= cfg.omega <= 1.0:
        raise ConfigError("omega", "omega out of [0,1]")
    if cfg.segment_length < 1:
        raise ConfigError("segment_length", "segment_length must be >= 1")
    if cfg.max_gap < 0:
        raise ConfigError("max_gap", "max_gap must be >= 0")
    for name in ("d_in", "d_emb", "pairs_per_segment", "batch_size", "metric_epochs"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, f"{name} must be >= 1")
    if cfg.net_epochs < 0 or cfg.warmup_epochs < 0:
        raise ConfigError("net_epochs", "epoch counts must be >= 0")
    if any(h < 1 for h in cfg.hidden_sizes):
        raise ConfigError("hidden_sizes", "hidden layer sizes must be >= 1")
    if cfg.net_learning_rate < 0:
        raise ConfigError("net_learning_rate", "net_learning_rate must be >= 0")
    if cfg.column_norm not in ("max", "sum"):
        raise ConfigError("column_norm", "column_norm must be 'max' or 'sum'")

    tg = cfg.trackgen
    if not 0.0 < tg.theta_link < 1.0:
        raise ConfigError("trackgen.theta_link", "trackgen.theta_link out of (0,1)")
    if tg.theta_margin < 0:
        raise ConfigError("trackgen.theta_margin", "trackgen.theta_margin must be >= 0")
    weights = (tg.w_pos, tg.w_size, tg.w_app)
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError("trackgen.w_pos", "trackgen weights must be nonnegative and sum to 1")
    if tg.min_tracklet_len < 1:
        raise ConfigError("trackgen.min_tracklet_len", "trackgen.min_tracklet_len must be >= 1")

    sv = cfg.solver
    if not sv.beta0 > 0:
        raise ConfigError("solver.beta0", "solver.beta0 must be > 0")
    if not sv.beta_growth > 1:
        raise ConfigError("solver.beta_growth", "solver.beta_growth must be > 1")
    if sv.beta_max < sv.beta0:
        raise ConfigError("solver.beta_max", "solver.beta_max must be >= solver.beta0")
    if not 0.5 < sv.binarize_threshold <= 1.0:
        raise ConfigError("solver.binarize_threshold", "solver.binarize_threshold out of (0.5,1]")
    if sv.sinkhorn_iters < 1:
        raise ConfigError("solver.sinkhorn_iters", "solver.sinkhorn_iters must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

_SUBCONFIGS = {"trackgen": TrackGenConfig, "solver": SoftassignConfig}


def _file_key(attr: str) -> str:
    # ``lambda`` is reserved in Python
    return "lambda" if attr == "lambda_" else attr


def _attr_name(key: str) -> str:
    return "lambda_" if key == "lambda" else key


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        elem = default[0] if default else 0.0
        return tuple(_parse_value(p, elem) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_items(cfg: Config) -> list:
    """Flatten ``cfg`` to (key, text) pairs, sub-configs as ``prefix.field``."""
    items = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SUBCONFIGS:
            for sub in dataclasses.fields(value):
                items.append((f"{f.name}.{sub.name}", _format_value(getattr(value, sub.name))))
        else:
            items.append((_file_key(f.name), _format_value(value)))
    return items


def config_from_mapping(values: dict, base: Optional[Config] = None) -> Config:
    """Apply ``key -> text`` overrides on top of ``base`` (defaults if None)."""
    base = base or Config()
    top = {}
    subs = {name: {} for name in _SUBCONFIGS}
    for key, text in values.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix not in _SUBCONFIGS:
                raise ConfigError(key, f"unknown config key {key!r}")
            sub_default = getattr(base, prefix)
            if not hasattr(sub_default, name):
                raise ConfigError(key, f"unknown config key {key!r}")
            subs[prefix][name] = _parse_value(text, getattr(sub_default, name))
            continue
        attr = _attr_name(key)
        if attr in _SUBCONFIGS or not hasattr(base, attr):
            raise ConfigError(key, f"unknown config key {key!r}")
        top[attr] = _parse_value(text, getattr(base, attr))
    for prefix, changes in subs.items():
        if changes:
            top[prefix] = dataclasses.replace(getattr(base, prefix), **changes)
    return dataclasses.replace(base, **top)


def save_config(cfg: Config, path) -> None:
    lines = [f"{k}={v}" for k, v in config_items(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path, base: Optional[Config] = None) -> Config:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("<file>", f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value
    return config_from_mapping(values, base)


def assign_segments(tracklets: Sequence[Tracklet], plan: SegmentPlan) -> list:
    """Copy tracklets with ``segment`` set to the segment of their head frame."""
    return [
        dataclasses.replace(t, segment=plan.segment_of(t.start)) for t in tracklets
    ]
