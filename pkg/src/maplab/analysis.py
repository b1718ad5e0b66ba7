"""Results tables, LOWESS smoothing, power-law scaling fits, gain tables and plots."""
import csv
import logging
import math
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .errors import FitError

log = logging.getLogger(__name__)

CSV_HEADER = (
    "experiment_id,preset,strategy,teacher_acc,student_aug,teacher_aug,ipc,seed,step,top1,"
    "loss_backbone,loss_classifier"
)

SCALING_PRESETS = ("ipc_scaling", "student_aug_scaling")
GRID_PRESETS = ("teacher_student_aug_grid",)


@dataclass(frozen=True)
class ResultRow:
    experiment_id: str
    preset: str
    strategy: str
    teacher_acc: Optional[float]
    student_aug: str
    teacher_aug: Optional[str]
    ipc: Optional[int]
    seed: int
    step: int
    top1: Optional[float]
    loss_backbone: float
    loss_classifier: float


_CONVERTERS = {
    "teacher_acc": float, "ipc": int, "seed": int, "step": int, "top1": float,
    "loss_backbone": float, "loss_classifier": float,
}


def check_table(rows):
    seen = set()
    for r in rows:
        key = (r.experiment_id, r.seed, r.step)
        if key in seen:
            raise ValueError(f"duplicate (experiment_id, seed, step) {key}")
        seen.add(key)
        if r.top1 is not None and not 0.0 <= r.top1 <= 1.0:
            raise ValueError(f"top1 {r.top1} outside [0, 1]")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_results(rows, path):
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to export an empty results table")
    check_table(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for r in rows:
            writer.writerow([_cell(v) for v in astuple(r)])
    return path


def read_results(path):
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        names = [f.name for f in fields(ResultRow)]
        rows = []
        for raw in csv.reader(fh):
            values = {}
            for name, cell in zip(names, raw):
                if cell == "":
                    values[name] = None
                else:
                    values[name] = _CONVERTERS.get(name, str)(cell)
            rows.append(ResultRow(**values))
    return rows


def summarize(rows):
    """Seed mean and std of top1 per (experiment_id, step)."""
    groups = defaultdict(list)
    for r in rows:
        if r.top1 is not None:
            groups[(r.experiment_id, r.step)].append(r.top1)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# LOWESS


def lowess(x, y, fraction=0.1):
    """One-pass locally weighted linear regression with tricube weights.

    Each point is fit on its ``ceil(fraction * n)`` nearest neighbours in x.
    Returns smoothed values at the input positions, in input order. Fewer
    than three points are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(x)
    if n < 3:
        log.warning("lowess needs at least 3 points, got %d; returning input", n)
        return y.copy()
    k = max(2, min(n, math.ceil(fraction * n)))
    order = np.argsort(x, kind="stable")
    smoothed = kernels.lowess_sorted(x[order], y[order], k)
    out = np.empty(n)
    out[order] = smoothed
    return out


# ---------------------------------------------------------------------------
# power law


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    b: float
    c: float
    residual: float

    def __call__(self, n):
        return self.a - self.b * np.asarray(n, dtype=np.float64) ** (-self.c)


def _linear_ab(n, acc, c):
    design = np.column_stack([np.ones_like(n), -(n ** -c)])
    coef, *_ = np.linalg.lstsq(design, acc, rcond=None)
    return coef


def fit_power_law(ipc, accuracies, starts=16, seed=0, c_max=5.0):
    """Least-squares fit of ``acc(n) = a - b n^-c`` with ``c > 0``.

    For fixed c the model is linear in (a, b), so each start solves (a, b)
    exactly and then polishes all three jointly with trust-region least squares.
    """
    n = np.asarray(ipc, dtype=np.float64)
    acc = np.asarray(accuracies, dtype=np.float64)
    if n.shape != acc.shape:
        raise ValueError("ipc and accuracies differ in length")
    if len(np.unique(n)) < 4:
        raise ValueError("need at least 4 distinct ipc values")
    if (n <= 0).any():
        raise ValueError("ipc values must be positive")
    if ((acc < 0) | (acc > 1)).any():
        raise ValueError("accuracies must lie in [0, 1]")

    def resid(p):
        return p[0] - p[1] * n ** (-p[2]) - acc

    def jac(p):
        t = n ** (-p[2])
        return np.column_stack([np.ones_like(n), -t, p[1] * t * np.log(n)])

    rng = np.random.default_rng(seed)
    c_starts = np.concatenate([[0.5], np.exp(rng.uniform(np.log(1e-2), np.log(c_max), starts - 1))])
    best = None
    for c0 in c_starts:
        a0, b0 = _linear_ab(n, acc, c0)
        try:
            sol = least_squares(resid, [a0, b0, c0], jac=jac, bounds=([-np.inf, -np.inf, 1e-8], [np.inf, np.inf, c_max]),
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        except ValueError:
            continue
        norm = float(np.linalg.norm(sol.fun))
        if np.isfinite(norm) and (best is None or norm < best[1]):
            best = (sol.x, norm)
    if best is None:
        raise FitError("power-law fit did not converge from any start")
    (a, b, c), norm = best
    if not np.all(np.isfinite([a, b, c])):
        raise FitError("power-law fit produced non-finite parameters", norm)
    return PowerLawFit(float(a), float(b), float(c), norm)


# ---------------------------------------------------------------------------
# gains


@dataclass(frozen=True)
class GainEntry:
    teacher_acc: float
    step: int
    acc_first: float
    acc_second: float

    @property
    def gain(self):
        return self.acc_second / self.acc_first


def gain_table(rows, first="B", second="C", skipped=None):
    """Ratio of seed-mean top1, ``second / first``, per (teacher_acc, step).

    Keys missing either strategy are skipped and, if ``skipped`` is a list,
    appended to it.
    """
    means = defaultdict(list)
    for r in rows:
        if r.top1 is None or r.strategy not in (first, second):
            continue
        means[(r.teacher_acc, r.step, r.strategy)].append(r.top1)
    keys = sorted({(t, s) for (t, s, _) in means}, key=lambda k: (k[0] is None, k[0] or 0.0, k[1]))
    out = []
    for t, s in keys:
        a, b = means.get((t, s, first)), means.get((t, s, second))
        if not a or not b:
            if skipped is not None:
                skipped.append((t, s))
            continue
        out.append(GainEntry(t, s, float(np.mean(a)), float(np.mean(b))))
    return out


# ---------------------------------------------------------------------------
# plots


def _series(rows, preset):
    groups = defaultdict(list)
    for r in rows:
        if r.top1 is None or r.preset != preset:
            continue
        if preset in SCALING_PRESETS:
            label = (r.strategy, r.teacher_acc, r.student_aug, r.teacher_aug)
            groups[label].append((r.ipc, r.top1))
        else:
            label = (r.strategy, r.teacher_acc, r.student_aug, r.teacher_aug, r.ipc)
            groups[label].append((r.step, r.top1))
    return groups


def _label(key):
    strategy, teacher = key[0], key[1]
    parts = [f"S{strategy}"]
    if teacher is not None:
        parts.append(f"T{teacher:.0%}")
    parts += [str(v) for v in key[2:] if v is not None]
    return " ".join(parts)


def emit_plots(rows, preset, outdir, fraction=0.1):
    """Write one PNG per preset and return ``{path: [series labels]}``.

    Time-series presets show raw points with a LOWESS overlay per series;
    scaling presets show seed-mean accuracy against IPC on a log axis.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if r.preset == preset]
    if not rows:
        raise ValueError(f"no rows for preset {preset!r}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if preset in GRID_PRESETS:
        return _grid_plot(rows, preset, outdir, plt)
    groups = _series(rows, preset)
    scaling = preset in SCALING_PRESETS
    fig, ax = plt.subplots(figsize=(7, 4.5))
    labels = []
    for key in sorted(groups, key=str):
        pts = np.array(sorted(groups[key]), dtype=np.float64)
        label = _label(key)
        labels.append(label)
        xs = np.unique(pts[:, 0])
        means = np.array([pts[pts[:, 0] == v, 1].mean() for v in xs])
        if scaling:
            ax.plot(xs, means, marker="o", label=label)
        else:
            line = ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.35)
            smooth = lowess(xs, means, fraction) if len(xs) >= 3 else means
            ax.plot(xs, smooth, color=line.get_facecolor()[0], label=label)
    if scaling:
        ax.set_xscale("log")
        ax.set_xlabel("images per class")
        axes = "ipc-vs-top1"
    else:
        ax.set_xlabel("training step")
        axes = "step-vs-top1"
    ax.set_ylabel("top-1 accuracy")
    ax.set_title(preset)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = outdir / f"{preset}__{axes}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return {path: labels}


def _grid_plot(rows, preset, outdir, plt):
    """Heatmap of final-step seed-mean top1 over (teacher aug, student aug)."""
    final = max(r.step for r in rows)
    cells = defaultdict(list)
    for r in rows:
        if r.step == final and r.top1 is not None:
            cells[(r.teacher_aug, r.student_aug)].append(r.top1)
    t_augs = sorted({k[0] for k in cells}, key=str)
    s_augs = sorted({k[1] for k in cells}, key=str)
    grid = np.full((len(t_augs), len(s_augs)), np.nan)
    for (t, s), v in cells.items():
        grid[t_augs.index(t), s_augs.index(s)] = np.mean(v)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xticks(range(len(s_augs)), s_augs, rotation=30)
    ax.set_yticks(range(len(t_augs)), [str(t) for t in t_augs])
    ax.set_xlabel("student augmentation")
    ax.set_ylabel("teacher augmentation")
    for i in range(len(t_augs)):
        for j in range(len(s_augs)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label=f"top-1 at step {final}")
    ax.set_title(preset)
    fig.tight_layout()
    path = outdir / f"{preset}__teacher_aug-vs-student_aug.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return {path: [f"{t}/{s}" for (t, s) in sorted(cells, key=str)]}
