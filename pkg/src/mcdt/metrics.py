"""Scoring of run logs and detector-noise characterization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .geometry import BBox
from .runlog import RunLog

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


class EmptyInput(MetricsError):
    pass


class DegenerateInput(MetricsError):
    pass


class NoAttempts(MetricsError):
    pass


class InsufficientSamples(MetricsError):
    pass


def mse_stationary(estimates) -> tuple[float, float]:
    """MSE about the mean of all estimates: (ground plane, full 3D)."""
    X = np.asarray(estimates, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise EmptyInput("need at least two estimates")
    d = X - X.mean(axis=0)
    sq = d * d
    return float(np.mean(sq[:, 0] + sq[:, 1])), float(np.mean(sq.sum(axis=1)))


@dataclass(frozen=True)
class ReferenceSquare:
    """Horizontal, north-aligned square outline."""

    center: np.ndarray
    edge: float = 3.0

    def __post_init__(self):
        if self.edge <= 0:
            raise ValueError("edge must be positive")

    def squared_distances(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Per-point squared distance to the outline: (horizontal part, vertical part)."""
        return square_residuals(np.asarray(points, float), np.asarray(self.center, float), self.edge)


def square_residuals(P: np.ndarray, center: np.ndarray, edge: float) -> tuple[np.ndarray, np.ndarray]:
    a = 0.5 * edge
    d = P[:, :2] - center[:2]
    ad = np.abs(d)
    inside = (ad[:, 0] <= a) & (ad[:, 1] <= a)
    gap_in = a - ad.max(axis=1)
    out = np.maximum(ad - a, 0.0)
    h2 = np.where(inside, gap_in**2, (out * out).sum(axis=1))
    v2 = (P[:, 2] - center[2]) ** 2
    return h2, v2


def fit_reference_square(estimates, edge: float = 3.0, max_iter: int = 500,
                         ftol: float = 1e-9) -> tuple[ReferenceSquare, float, float]:
    """Place a fixed-size square so the mean squared 3D distance to its outline is minimal.

    Only the center moves; a Nelder-Mead simplex starts at the centroid.
    Returns the square and its (2D, 3D) MSE.
    """
    P = np.asarray(estimates, dtype=float)
    if P.ndim != 2 or P.shape[0] < 8:
        raise EmptyInput("need at least eight estimates")
    if np.allclose(P, P[0], rtol=0.0, atol=1e-12):
        raise DegenerateInput("all estimates identical")

    def objective(c):
        h2, v2 = square_residuals(P, c, edge)
        return float(np.mean(h2 + v2))

    x0 = P.mean(axis=0)
    simplex = np.vstack([x0, x0 + [0.25 * edge, 0, 0], x0 + [0, 0.25 * edge, 0], x0 + [0, 0, 0.25 * edge]])
    res = optimize.minimize(objective, x0, method="Nelder-Mead",
                            options={"initial_simplex": simplex, "maxiter": max_iter,
                                     "fatol": ftol, "xatol": 1e-7})
    best = res.x if res.fun <= objective(x0) else x0
    square = ReferenceSquare(np.asarray(best, float), edge)
    h2, v2 = square.squared_distances(P)
    return square, float(np.mean(h2)), float(np.mean(h2 + v2))


def detection_rate(runlog: RunLog, agent: int) -> float:
    """Percent of attempted detections that produced a measurement."""
    attempted = runlog.column("attempted", agent).sum()
    if attempted < 1:
        raise NoAttempts(f"agent {agent} never attempted a detection")
    return float(100.0 * runlog.column("succeeded", agent).sum() / attempted)


def _position_covariances(C: np.ndarray) -> np.ndarray:
    xx, xy, xz, yy, yz, zz = C.T
    return np.stack([np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)], 1)


def nees_values(errors, covariances) -> np.ndarray:
    """Per-sample ``e^T S^-1 e``; samples with singular ``S`` are skipped."""
    errors = np.asarray(errors, float).reshape(-1, 3)
    covariances = np.asarray(covariances, float).reshape(-1, 3, 3)
    if len(errors) == 0:
        return np.zeros(0)
    with np.errstate(all="ignore"):
        ok = np.isfinite(covariances).all(axis=(1, 2)) & np.isfinite(errors).all(axis=1)
        ok[ok] &= np.linalg.cond(covariances[ok]) <= 1e12
    if not ok.all():
        log.warning("skipping %d singular covariances in NEES", int((~ok).sum()))
    e, S = errors[ok], covariances[ok]
    return np.einsum("ni,ni->n", e, np.linalg.solve(S, e[..., None])[..., 0])


def nees(runlog: RunLog, agent: int | None = None) -> float:
    """Mean position NEES over all ticks (and agents unless one is given)."""
    err = runlog.columns(("est_x", "est_y", "est_z"), agent) - runlog.columns(("true_x", "true_y", "true_z"), agent)
    cov = _position_covariances(runlog.columns(("cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz"), agent))
    vals = nees_values(err, cov)
    if vals.size == 0:
        raise EmptyInput("no usable ticks")
    return float(vals.mean())


def nees_interval(dof: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided acceptance interval for the average of ``n`` chi-square(dof) values."""
    lo = stats.chi2.ppf(alpha / 2, dof * n) / n
    hi = stats.chi2.ppf(1 - alpha / 2, dof * n) / n
    return float(lo), float(hi)


SIDES = ("top", "bottom", "left", "right")


@dataclass(frozen=True)
class NoiseCharacterization:
    variances: dict[str, float]
    means: dict[str, float]
    skewness: dict[str, float]
    excess_kurtosis: dict[str, float]
    correlations: np.ndarray  # 4x4, order top, bottom, left, right
    n_samples: int

    def max_abs_correlation(self) -> float:
        c = self.correlations.copy()
        np.fill_diagonal(c, 0.0)
        return float(np.max(np.abs(c)))

    def as_model_kwargs(self) -> dict[str, float]:
        return {f"var_{s}": self.variances[s] for s in SIDES}


def relative_errors(samples) -> np.ndarray:
    """(n, 4) side errors scaled by ROI height (top/bottom) or width (left/right)."""
    rows = []
    for true, detected, (roi_w, roi_h) in samples:
        t, d = _as_box(true), _as_box(detected)
        rows.append(((d[0] - t[0]) / roi_h, (d[1] - t[1]) / roi_h, (d[2] - t[2]) / roi_w, (d[3] - t[3]) / roi_w))
    return np.asarray(rows, float)


def _as_box(b) -> np.ndarray:
    return b.as_array() if isinstance(b, BBox) else np.asarray(b, float)


def characterize_noise(samples) -> NoiseCharacterization:
    """Per-side relative error statistics of a detector.

    ``samples`` holds ``(true_box, detected_box, (roi_width, roi_height))``
    triples; boxes are BBox or (top, bottom, left, right).
    """
    samples = list(samples)
    if len(samples) < 30:
        raise InsufficientSamples(f"{len(samples)} samples, need at least 30")
    E = relative_errors(samples)
    var = E.var(axis=0, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.nan_to_num(stats.skew(E, axis=0))
        kurt = np.nan_to_num(stats.kurtosis(E, axis=0))
        std = E.std(axis=0)
        if np.all(std > 0):
            corr = np.corrcoef(E, rowvar=False)
        else:
            corr = np.eye(4)
            ok = std > 0
            if ok.sum() > 1:
                corr[np.ix_(ok, ok)] = np.corrcoef(E[:, ok], rowvar=False)
    return NoiseCharacterization(
        variances=dict(zip(SIDES, map(float, var))),
        means=dict(zip(SIDES, map(float, E.mean(axis=0)))),
        skewness=dict(zip(SIDES, map(float, skew))),
        excess_kurtosis=dict(zip(SIDES, map(float, kurt))),
        correlations=corr,
        n_samples=len(samples),
    )
