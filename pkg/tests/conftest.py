import numpy as np
import pytest

from tracklink.core import Detection, Tracklet


def det(frame, x=0.0, y=0.0, w=10.0, h=20.0, conf=1.0, feature=(1.0, 0.0), id_hint=None):
    """Detection whose box centre is (x, y)."""
    return Detection(frame, (x - w / 2, y - h / 2, w, h), conf, np.asarray(feature, float), id_hint)


def line_tracklet(tid, start, length, x0=0.0, y0=0.0, vx=1.0, vy=0.0, feature=(1.0, 0.0), confs=None):
    dets = []
    for k in range(length):
        conf = confs[k] if confs is not None else 1.0
        dets.append(det(start + k, x0 + vx * k, y0 + vy * k, conf=conf, feature=feature))
    return Tracklet(tid, tuple(dets))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
