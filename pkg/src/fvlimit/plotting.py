"""Matplotlib figures for run reports (Agg backend, reproducible PNG bytes)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"figure.figsize": (6.0, 4.0), "figure.dpi": 100, "font.size": 9}


def save(fig, path: str | Path) -> None:
    # no Software/date chunks, so identical figures give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _fig():
    with plt.rc_context(_STYLE):
        return plt.subplots()


def density_paths(records, h_eq: Optional[Sequence[float]] = None, title: str = ""):
    fig, ax = _fig()
    for r, rec in enumerate(records):
        for i in range(rec.q):
            ax.plot(rec.times, rec.counts[:, i] / rec.N, lw=0.8, color=f"C{i}", alpha=0.6,
                    label=f"h_{i + 1}" if r == 0 else None)
    if h_eq is not None:
        for i, v in enumerate(h_eq):
            ax.axhline(v, color=f"C{i}", ls="--", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("density")
    ax.set_title(title)
    if records:
        ax.legend(loc="best")
    return fig


def flow_paths(t, h, h_eq=None):
    fig, ax = _fig()
    for i in range(h.shape[1]):
        ax.plot(t, h[:, i], color=f"C{i}", label=f"psi_{i + 1}")
        if h_eq is not None:
            ax.axhline(h_eq[i], color=f"C{i}", ls="--", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("h")
    ax.legend(loc="best")
    return fig


def residual_profile(radii, worst, slope: float, k_max: int):
    fig, ax = _fig()
    ax.loglog(radii, worst, "o-", label=f"fitted slope {slope:.2f}")
    ref = worst[-1] * (np.asarray(radii) / radii[-1]) ** (k_max + 1)
    ax.loglog(radii, ref, "k--", lw=0.8, label=f"r^{k_max + 1}")
    ax.set_xlabel("radius")
    ax.set_ylabel("max PDE residual")
    ax.legend(loc="best")
    return fig


def scaling(Ns: Sequence[int], series: Mapping[str, Sequence[float]], title: str = ""):
    fig, ax = _fig()
    for k, (name, vals) in enumerate(series.items()):
        ax.loglog(Ns, vals, "o-", color=f"C{k}", label=name)
    ax.set_xlabel("N")
    ax.set_ylabel("median over replicates")
    ax.set_title(title)
    ax.legend(loc="best")
    return fig


def ecdf_compare(samples: Mapping[str, np.ndarray], xlabel: str, title: str = ""):
    fig, ax = _fig()
    for k, (name, s) in enumerate(samples.items()):
        s = np.sort(np.asarray(s, dtype=float))
        ax.step(s, np.arange(1, s.size + 1) / s.size, where="post", color=f"C{k}", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("empirical CDF")
    ax.set_title(title)
    ax.legend(loc="best")
    return fig


def histogram(values, xlabel: str, marks: Optional[Mapping[str, float]] = None, bins: int = 40, title: str = ""):
    fig, ax = _fig()
    ax.hist(np.asarray(values, dtype=float), bins=bins, color="C0", alpha=0.7)
    for k, (name, v) in enumerate((marks or {}).items()):
        ax.axvline(v, color=f"C{k + 1}", ls="--", label=name)
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    if marks:
        ax.legend(loc="best")
    return fig


def sphere_clans(points: np.ndarray, clans: np.ndarray, top: int = 5):
    """Equal-area (Lambert azimuthal, two hemispheres) view of particle positions, coloured by clan rank."""
    labels, inverse, sizes = np.unique(clans, return_inverse=True, return_counts=True)
    rank = np.empty(len(labels), dtype=int)
    rank[np.lexsort((labels, -sizes))] = np.arange(len(labels))
    r = rank[inverse]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 4.0))
    for ax, sign, name in ((axes[0], 1.0, "z > 0"), (axes[1], -1.0, "z < 0")):
        m = points[:, 2] * sign >= 0
        p = points[m]
        k = np.sqrt(2.0 / np.maximum(1.0 + sign * p[:, 2], 1e-12))
        x, y = k * p[:, 0], k * p[:, 1]
        rr = r[m]
        other = rr >= top
        ax.scatter(x[other], y[other], s=2, color="0.7")
        for c in range(top):
            sel = rr == c
            if sel.any():
                ax.scatter(x[sel], y[sel], s=3, color=f"C{c}", label=f"clan {c + 1}")
        ax.set_aspect("equal")
        ax.set_xlim(-1.5, 1.5)
        ax.set_ylim(-1.5, 1.5)
        ax.set_title(name)
    axes[0].legend(loc="lower left", fontsize=7)
    return fig


def wf_paths(times, x, component: int = 0, max_paths: int = 50):
    fig, ax = _fig()
    for p in range(min(x.shape[1], max_paths)):
        ax.plot(times, x[:, p, component], lw=0.6, color="C0", alpha=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel(f"x_{component + 1}")
    return fig
