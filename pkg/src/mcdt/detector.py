"""Statistical stand-in for a DNN person detector.

The detector is a black box that takes a frame and a region of interest and
returns zero or more noisy boxes. Detection probability depends on the
person's height relative to the ROI; per-side box noise has a constant
variance relative to the ROI dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BBox, DegenerateBox

# Table of per-side variances measured for SSD300, relative to ROI size.
TABLE_VARIANCES = {"top": 0.0014, "bottom": 0.0045, "left": 0.0039, "right": 0.0035}

MIN_ROI_SIDE = 8.0


class InvalidRoi(ValueError):
    pass


@dataclass(frozen=True)
class Roi:
    """Axis-aligned pixel rectangle in full-image coordinates."""

    left: float
    top: float
    right: float
    bottom: float

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @classmethod
    def full(cls, width: float, height: float) -> Roi:
        return cls(0.0, 0.0, float(width), float(height))

    def intersect(self, box: BBox) -> tuple[float, float, float, float] | None:
        """(top, bottom, left, right) of the overlap, or None."""
        t, b = max(box.top, self.top), min(box.bottom, self.bottom)
        l, r = max(box.left, self.left), min(box.right, self.right)
        if t >= b or l >= r:
            return None
        return t, b, l, r


@dataclass(frozen=True)
class SimFrame:
    timestamp: float
    true_person_bbox: BBox | None
    agent_id: int


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    confidence: float
    # per-side variances relative to ROI size: (top, bottom, left, right)
    noise: tuple[float, float, float, float]
    roi: Roi

    def pixel_variances(self) -> tuple[float, float, float, float]:
        h2, w2 = self.roi.height**2, self.roi.width**2
        vt, vb, vl, vr = self.noise
        return vt * h2, vb * h2, vl * w2, vr * w2


@dataclass(frozen=True)
class DetectorNoiseModel:
    var_top: float = TABLE_VARIANCES["top"]
    var_bottom: float = TABLE_VARIANCES["bottom"]
    var_left: float = TABLE_VARIANCES["left"]
    var_right: float = TABLE_VARIANCES["right"]
    p_max: float = 0.9
    knee_low: float = 0.10
    knee_high: float = 0.30
    p_fp: float = 0.0

    def __post_init__(self):
        if min(self.variances) < 0:
            raise ValueError("variances must be non-negative")
        if not 0.0 <= self.knee_low < self.knee_high <= 1.0:
            raise ValueError("need 0 <= knee_low < knee_high <= 1")
        if not (0.0 <= self.p_max <= 1.0 and 0.0 <= self.p_fp <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def variances(self) -> tuple[float, float, float, float]:
        return self.var_top, self.var_bottom, self.var_left, self.var_right


def detection_probability(model: DetectorNoiseModel, relative_height: float) -> float:
    """Chance of detecting a person whose box spans ``relative_height`` of the ROI.

    Zero up to ``knee_low``, linear up to ``p_max`` at ``knee_high``, flat
    until the person fills the ROI, then ramps back to zero at 1.2.
    """
    h = relative_height
    if h <= model.knee_low or h > 1.2:
        return 0.0
    if h < model.knee_high:
        return model.p_max * (h - model.knee_low) / (model.knee_high - model.knee_low)
    if h <= 1.0:
        return model.p_max
    return model.p_max * (1.2 - h) / 0.2


def detect(frame: SimFrame, roi: Roi, model: DetectorNoiseModel, rng: np.random.Generator) -> list[Detection]:
    """Run the simulated detector on ``roi`` of ``frame``.

    Every call consumes the same number of random variates, so two runs that
    share a seed stay aligned even when their ROIs differ.
    """
    if roi.width < MIN_ROI_SIDE or roi.height < MIN_ROI_SIDE:
        raise InvalidRoi(f"degenerate ROI {roi}")
    u = rng.random(7)
    z = rng.standard_normal(4)
    out = []

    box = frame.true_person_bbox
    overlap = roi.intersect(box) if box is not None else None
    if overlap is not None:
        t, b, l, r = overlap
        clip_factor = (b - t) * (r - l) / box.area
        p = detection_probability(model, box.height / roi.height) * clip_factor
        if u[0] < p:
            sd = np.sqrt(model.variances) * np.array([roi.height, roi.height, roi.width, roi.width])
            nt, nb, nl, nr = (np.array([t, b, l, r]) + sd * z).tolist()
            # a detector always reports a proper box; crossed noisy sides collapse to 1 px about their midpoint
            if nb - nt < 1.0:
                nt, nb = 0.5 * (nt + nb) - 0.5, 0.5 * (nt + nb) + 0.5
            if nr - nl < 1.0:
                nl, nr = 0.5 * (nl + nr) - 0.5, 0.5 * (nl + nr) + 0.5
            try:
                out.append(Detection(BBox(nt, nb, nl, nr), 0.6 + 0.4 * float(u[1]), model.variances, roi))
            except DegenerateBox:
                pass

    if u[2] < model.p_fp:
        x0, x1 = sorted(roi.left + roi.width * u[3:5])
        y0, y1 = sorted(roi.top + roi.height * u[5:7])
        if x1 - x0 > 1.0 and y1 - y0 > 1.0:
            out.append(Detection(BBox(float(y0), float(y1), float(x0), float(x1)),
                                 0.6 + 0.4 * float(u[1]), model.variances, roi))
    return out


def detector_timing(busy_until: float, frame_time: float, processing_period: float,
                    frame_interval: float = 0.0) -> tuple[bool, float]:
    """Decide whether the detector takes ``frame``; returns (accepted, new busy_until).

    With ``frame_interval`` > 0 the detector grabs the latest available image:
    a frame is taken when the next one would arrive after the detector frees
    up, and processing starts at ``max(frame_time, busy_until)``.  With the
    default of 0 a frame is accepted only if the detector is already idle.
    """
    if frame_interval > 0:
        accepted = frame_time + frame_interval > busy_until + 1e-12
    else:
        accepted = frame_time >= busy_until
    if not accepted:
        return False, busy_until
    return True, max(frame_time, busy_until) + processing_period


def synthetic_detections(model: DetectorNoiseModel, n: int, relative_height: float,
                         rng: np.random.Generator, roi: Roi | None = None,
                         aspect: float = 0.35) -> list[tuple[BBox, BBox, tuple[float, float]]]:
    """Detect a centered person ``n`` times; returns (true, detected, (roi_w, roi_h)) triples.

    ``aspect`` is person width over height. Misses are skipped, so fewer
    than ``n`` triples may come back.
    """
    roi = roi or Roi(0.0, 0.0, 400.0, 300.0)
    h = relative_height * roi.height
    w = aspect * h
    cu, cv = 0.5 * (roi.left + roi.right), 0.5 * (roi.top + roi.bottom)
    truth = BBox(cv - h / 2, cv + h / 2, cu - w / 2, cu + w / 2)
    frame = SimFrame(0.0, truth, 0)
    out = []
    for _ in range(n):
        for det in detect(frame, roi, model, rng):
            out.append((truth, det.bbox, (roi.width, roi.height)))
            break
    return out
