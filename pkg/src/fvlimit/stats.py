"""Convergence diagnostics on recorded trajectories, clan statistics and sample comparisons."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _st

from .model import Circle, FiniteSet, Interval, ModelError, PopulationState, Sphere


class DiagnosticError(ValueError):
    pass


# ---------------------------------------------------------------------------
# density and inseparability
# ---------------------------------------------------------------------------


def _window(record, T: float | None = None) -> np.ndarray:
    t_N = record.t_N
    T = record.T_end if T is None else T
    times = np.asarray(record.times)
    eps = 1e-9 * max(1.0, T)
    mask = (times >= t_N - eps) & (times <= t_N + T + eps)
    if not mask.any() or abs(times[mask][0] - t_N) > eps or abs(times[mask][-1] - (t_N + T)) > eps:
        raise DiagnosticError(f"record grid does not cover [t_N, t_N + T] = [{t_N:g}, {t_N + T:g}]")
    return mask


def density_deviation(record, h_eq, T: float | None = None) -> float:
    """sup over the shifted window of ||h^N(t + t_N) - h_eq||_1."""
    mask = _window(record, T)
    h = np.asarray(record.counts, dtype=float)[mask] / record.N
    return float(np.abs(h - np.asarray(h_eq, dtype=float)).sum(axis=1).max())


def _observable(record, f: str) -> np.ndarray:
    if f not in record.observables:
        raise DiagnosticError(f"test function {f!r} was not recorded (have {sorted(record.observables)})")
    return np.asarray(record.observables[f], dtype=float)


def inseparability(record, f: str, T: float | None = None) -> float:
    """sup over the shifted window of max_ij |h_j <f,mu_i> - h_i <f,mu_j>|."""
    mask = _window(record, T)
    h = np.asarray(record.counts, dtype=float)[mask] / record.N
    m = _observable(record, f)[mask]
    diff = h[:, None, :] * m[:, :, None] - h[:, :, None] * m[:, None, :]
    return float(np.abs(diff).max()) if diff.size else 0.0


def yn_paths(record, f: str) -> np.ndarray:
    """Y_i = <f,mu_i> sum_j h_j - h_i sum_j <f,mu_j> at every recorded time; shape (G, q)."""
    h = np.asarray(record.counts, dtype=float) / record.N
    m = _observable(record, f)
    return m * h.sum(axis=1, keepdims=True) - h * m.sum(axis=1, keepdims=True)


def strictly_decreasing(values: Sequence[float]) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


# ---------------------------------------------------------------------------
# clans
# ---------------------------------------------------------------------------


def centroid(domain, points: np.ndarray) -> np.ndarray:
    """Normalised mean vector on the sphere, circular mean on the circle, modal site on a finite set."""
    points = np.asarray(points, dtype=float)
    if isinstance(domain, Sphere):
        m = points.mean(axis=0)
        n = np.linalg.norm(m)
        return m / n if n > 1e-12 else points[0]
    if isinstance(domain, Circle):
        ang = 2 * np.pi * points[:, 0] / domain.circumference
        mean = np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) % (2 * np.pi)
        return np.array([mean * domain.circumference / (2 * np.pi)])
    if isinstance(domain, FiniteSet):
        return np.array([float(np.bincount(points[:, 0].astype(np.int64)).argmax())])
    return points.mean(axis=0)


@dataclass(frozen=True)
class ClanStatistics:
    weights: np.ndarray  # sorted decreasing, sums to one
    largest_share: float
    dispersion: np.ndarray  # per clan, same order as weights
    pair_dispersion: np.ndarray  # mean squared distance between two distinct members
    dominant_share: float
    dominant_dispersion: float  # size-weighted mean over clans at or above dominant_share
    dominant_pair_dispersion: float
    n_dominant: int


def clan_statistics(state: PopulationState, domain, dominant_share: float = 0.1) -> ClanStatistics:
    if state.clans is None:
        raise ModelError("clan statistics need a population with clan tracking")
    ids = np.concatenate(state.clans) if state.clans else np.zeros(0)
    locs = np.concatenate(state.locations) if state.locations else np.zeros((0, domain.dim))
    if ids.size == 0:
        raise ModelError("empty population has no clans")
    labels, inverse, sizes = np.unique(ids, return_inverse=True, return_counts=True)
    order = np.lexsort((labels, -sizes))
    weights = sizes[order] / ids.size
    disp = np.zeros(len(order))
    pair = np.zeros(len(order))
    for r, c in enumerate(order):
        pts = locs[inverse == c]
        if len(pts) < 2:
            continue
        disp[r] = float(domain.sq_distance(pts, centroid(domain, pts)[None, :]).mean())
        d2 = domain.sq_distance(pts[:, None, :], pts[None, :, :])
        pair[r] = float(d2.sum() / (len(pts) * (len(pts) - 1)))
    dom_mask = weights >= dominant_share
    if dom_mask.any():
        w = weights[dom_mask]
        dd = float(np.average(disp[dom_mask], weights=w))
        dp = float(np.average(pair[dom_mask], weights=w))
    else:
        dd = dp = float("nan")
    return ClanStatistics(weights, float(weights[0]), disp, pair, dominant_share, dd, dp, int(dom_mask.sum()))


# ---------------------------------------------------------------------------
# sample comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float
    n_a: int
    n_b: int
    degenerate: bool


def compare_samples(a, b) -> KSResult:
    """Two-sample Kolmogorov-Smirnov test (exact for small samples, asymptotic otherwise)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DiagnosticError("samples must be nonempty")
    res = _st.ks_2samp(a, b, method="auto")
    degenerate = bool(np.ptp(a) == 0 or np.ptp(b) == 0)
    return KSResult(float(res.statistic), float(res.pvalue), a.size, b.size, degenerate)


@dataclass(frozen=True)
class Proportion:
    successes: int
    trials: int
    estimate: float
    low: float
    high: float


def fixation_estimate(outcomes, confidence: float = 0.95) -> Proportion:
    """Fraction of True outcomes with a Wilson score interval."""
    outcomes = np.asarray(outcomes, dtype=bool).ravel()
    n = outcomes.size
    if n == 0:
        raise DiagnosticError("no outcomes")
    k = int(outcomes.sum())
    ci = _st.binomtest(k, n).proportion_ci(confidence_level=confidence, method="wilson")
    return Proportion(k, n, k / n, float(ci.low), float(ci.high))


__all__ = [
    "ClanStatistics", "DiagnosticError", "KSResult", "Proportion", "centroid", "clan_statistics",
    "compare_samples", "density_deviation", "fixation_estimate", "inseparability", "strictly_decreasing",
    "yn_paths",
]
