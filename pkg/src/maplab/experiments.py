"""Preset study drivers and the scaled-down CIFAR-10 protocols.

A preset fixes the axes of one study (strategies, teacher levels, teacher and
student augmentation, IPC) plus default step budget and eval cadence. Any
:class:`ExperimentConfig` field can still be overridden by the caller.
"""
import itertools
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import ResultRow, summarize
from .errors import ConfigError, DatasetLoadError, UnreachableTargetError
from .mapping import Strategy, build_soft_cache
from .teacherbank import TeacherCheckpoint, find_teacher, load_bank, teacher_config, train_teacher_to_accuracy
from .trainer import ExperimentConfig, load_data, prepare_trainset, train_student

log = logging.getLogger(__name__)

ALL_AUGS = ("NoAug", "Crop", "StdAug", "MixUp", "CutMix")
# validation ten times per CIFAR epoch of 390 steps
TEN_PER_EPOCH = 39


@dataclass(frozen=True)
class Preset:
    name: str
    strategies: tuple
    teachers: tuple = ()
    teacher_augs: tuple = ("StdAug",)
    student_augs: tuple = ("StdAug",)
    ipcs: tuple = (None,)
    seeds: tuple = (0, 1, 2)
    config: dict = field(default_factory=dict)


PRESETS = {
    p.name: p
    for p in (
        Preset("strategy_compare", ("A", "B", "C"), (0.1, 0.3, 0.5, 0.7, 0.9),
               config={"steps": 20000, "eval_every": TEN_PER_EPOCH}),
        Preset("early_stage", ("B",), (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
               config={"steps": 1000, "eval_steps": (10, 20, 50, 100, 200, 500, 1000)}),
        Preset("teacher_aug_grid", ("B",), (0.3, 0.5, 0.7), teacher_augs=("NoAug", "StdAug", "MixUp"),
               config={"steps": 7800, "eval_every": TEN_PER_EPOCH}),
        Preset("teacher_student_aug_grid", ("B",), (0.7,), teacher_augs=ALL_AUGS, student_augs=ALL_AUGS,
               config={"steps": 10000, "eval_every": 10000}),
        Preset("ipc_scaling", ("A", "B", "C"), (0.8,), ipcs=(10, 50, 100, 500),
               config={"steps": 10000, "eval_every": 10000}),
        Preset("extreme_ipc", ("A", "B", "C"), (0.8,), ipcs=(10,),
               config={"steps": 10000, "eval_every": 100}),
        Preset("student_aug_scaling", ("A", "B", "C"), (0.9,),
               student_augs=("NoAug", "ColorJitter", "Crop", "MixUp", "CutMix"), ipcs=(10, 50, 100, 500),
               config={"steps": 10000, "eval_every": 10000}),
    )
}


@dataclass(frozen=True)
class Cell:
    preset: str
    strategy: str
    teacher_acc: Optional[float]
    teacher_aug: Optional[str]
    student_aug: str
    ipc: Optional[int]

    @property
    def experiment_id(self):
        teacher = "none" if self.teacher_acc is None else f"{self.teacher_acc:.2f}"
        ipc = "all" if self.ipc is None else str(self.ipc)
        return f"{self.preset}/{self.strategy}/t{teacher}/{self.teacher_aug or 'none'}/{self.student_aug}/ipc{ipc}"


@dataclass(frozen=True)
class SkippedCell:
    experiment_id: str
    seed: int
    reason: str


@dataclass
class SweepResult:
    rows: list
    skipped: list
    summary: dict


def get_preset(name, **axes):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    unknown = set(axes) - {"strategies", "teachers", "teacher_augs", "student_augs", "ipcs", "seeds"}
    if unknown:
        raise ConfigError(f"unknown preset axes {sorted(unknown)}")
    changes = {k: tuple(v) for k, v in axes.items() if v is not None}
    return Preset(**{**preset.__dict__, **changes})


def plan_cells(preset):
    """Cross product of the preset's axes; Strategy A collapses the teacher axes."""
    cells = []
    for strategy in preset.strategies:
        if Strategy(strategy).needs_teacher:
            teacher_axes = list(itertools.product(preset.teachers, preset.teacher_augs))
        else:
            teacher_axes = [(None, None)]
        for (level, t_aug), s_aug, ipc in itertools.product(teacher_axes, preset.student_augs, preset.ipcs):
            cells.append(Cell(preset.name, strategy, level, t_aug, s_aug, ipc))
    return cells


def plan_runs(preset):
    return [(cell, seed) for cell in plan_cells(preset) for seed in preset.seeds]


def _rows(cell, seed, run):
    return [
        ResultRow(cell.experiment_id, cell.preset, cell.strategy, cell.teacher_acc, cell.student_aug,
                  cell.teacher_aug, cell.ipc, seed, r.step, r.top1, r.loss_backbone, r.loss_classifier)
        for r in run.records
    ]


def run_experiment(preset, base=None, overrides=(), bank=None, progress=None, **axes):
    """Run every (cell, seed) of a preset and return rows, skipped cells and a seed summary.

    ``bank`` is a list of :class:`TeacherCheckpoint` or a directory holding a
    bank manifest. Cells whose teacher level is missing from the bank are
    recorded as skipped and the sweep carries on.
    """
    preset = preset if isinstance(preset, Preset) else get_preset(preset, **axes)
    base = base or ExperimentConfig()
    config = base.replace(**preset.config).with_overrides(overrides)
    if isinstance(bank, (str, os.PathLike)):
        bank = load_bank(bank)
    bank = bank or []
    data = load_data(config)
    rows, skipped = [], []
    caches = {}
    for cell, seed in plan_runs(preset):
        teacher = None
        if cell.teacher_acc is not None:
            teacher = find_teacher(bank, cell.teacher_acc, cell.teacher_aug)
            if teacher is None:
                reason = f"no bank teacher at level {cell.teacher_acc} with {cell.teacher_aug}"
                log.warning("skipping %s seed %d: %s", cell.experiment_id, seed, reason)
                skipped.append(SkippedCell(cell.experiment_id, seed, reason))
                continue
        cfg = config.replace(strategy=cell.strategy, aug_kind=cell.student_aug, ipc=cell.ipc, seed=seed, teacher=None)
        cache = None
        if cell.strategy == "C":
            key = (teacher.teacher_id, cell.ipc, seed)
            if key not in caches:
                caches[key] = build_soft_cache(teacher, prepare_trainset(cfg, data), data.stats, cfg.tau,
                                               teacher.teacher_id)
            cache = caches[key]
        run = train_student(cfg, data, teacher, cache)
        rows.extend(_rows(cell, seed, run))
        if progress:
            progress(cell, seed, run)
    return SweepResult(rows, skipped, summarize(rows))


# ---------------------------------------------------------------------------
# scaled-down CIFAR-10 protocols


def cifar_root():
    """Directory holding ``cifar-10-batches-py``; raises if the batches are absent."""
    root = Path(os.environ.get("MAPLAB_DATA_ROOT", "data"))
    if not (root / "cifar-10-batches-py" / "data_batch_1").exists():
        raise DatasetLoadError(
            "CIFAR-10 python batches not found; set MAPLAB_DATA_ROOT to a directory containing "
            "cifar-10-batches-py", str(root),
        )
    return root


def desk_config(root=None, **changes):
    """convnet-tiny on CIFAR-10 with the standard optimizer and augmentation."""
    root = root or cifar_root()
    base = ExperimentConfig(dataset="cifar10", data_root=str(root), arch="convnet-tiny", aug_kind="StdAug")
    return base.replace(**changes)


def _cache_dir():
    path = Path(os.environ.get("MAPLAB_CACHE_DIR", Path.home() / ".cache" / "maplab"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def desk_teacher_path(level, config):
    return _cache_dir() / f"{config.dataset}_{config.arch}_{config.aug_kind}_{int(round(level * 100)):03d}.pt"


def desk_teacher(level, config, max_steps=20000, keep_best=False):
    """Teacher at ``level`` +- 0.01 on the full train split, trained once and reused from the cache dir."""
    tcfg = teacher_config(config, config.aug_kind).replace(ipc=None, seed=0)
    path = desk_teacher_path(level, tcfg)
    if path.exists():
        return TeacherCheckpoint.load(path)
    try:
        ckpt = train_teacher_to_accuracy(tcfg, level, 0.01, max_steps)
    except UnreachableTargetError as exc:
        if not keep_best:
            raise
        ckpt = exc.best
    ckpt.save(path)
    return ckpt


def _seed_mean_curve(runs):
    steps = [r.step for r in runs[0].records]
    return {s: float(np.mean([run.top1_at(s) for run in runs])) for s in steps}


def decoupled_vs_standard(seeds=(0, 1, 2), steps=5000, ipc=100, level=0.40, root=None):
    """Strategy B students under the decoupled and the coupled loss.

    Returns the per-seed runs of both arms so the early-acceleration check can
    reuse the decoupled ones.
    """
    early = tuple(range(50, 500, 50))
    cfg = desk_config(root, ipc=ipc, steps=steps, strategy="B",
                      eval_steps=early + tuple(range(1000, steps + 1, 1000)))
    teacher = desk_teacher(level, cfg)
    decoupled = [train_student(cfg.replace(seed=s), teacher=teacher) for s in seeds]
    standard = [train_student(cfg.replace(seed=s, loss_mode="standard"), teacher=teacher) for s in seeds]
    acc_d = float(np.mean([r.final_top1 for r in decoupled]))
    acc_s = float(np.mean([r.final_top1 for r in standard]))
    return {"teacher": teacher, "decoupled": decoupled, "standard": standard,
            "acc_decoupled": acc_d, "acc_standard": acc_s, "gain": acc_d / acc_s if acc_s else float("inf")}


def early_acceleration(decoupled_runs, seeds=(0, 1, 2), before=500):
    """Seed-mean top1 of Strategy B (given) and Strategy A at every eval point before ``before``."""
    cfg = decoupled_runs[0].config.replace(strategy="A", teacher=None)
    a_runs = [train_student(cfg.replace(seed=s)) for s in seeds]
    b_curve, a_curve = _seed_mean_curve(decoupled_runs), _seed_mean_curve(a_runs)
    points = [s for s in sorted(b_curve) if s < before]
    return {"points": points, "B": [b_curve[s] for s in points], "A": [a_curve[s] for s in points]}


def extreme_ipc_check(seeds=(0, 1, 2), steps=10000, level=0.40, root=None):
    cfg = desk_config(root, ipc=10, steps=steps, eval_every=steps)
    teacher = desk_teacher(level, cfg)
    b = [train_student(cfg.replace(strategy="B", seed=s), teacher=teacher).final_top1 for s in seeds]
    a = [train_student(cfg.replace(strategy="A", seed=s)).final_top1 for s in seeds]
    return {"teacher_acc": teacher.achieved_acc, "B": b, "A": a}


def teacher_level_sweep(levels=(0.2, 0.4, 0.6, 0.8), seeds=(0, 1, 2), steps=1000, root=None):
    """Final top1 per (seed, level) for Strategy B students at a small budget.

    The top level falls back to the best accuracy reached when it is out of
    reach for the desk architecture.
    """
    cfg = desk_config(root, steps=steps, eval_every=steps, strategy="B")
    teachers = [desk_teacher(lv, cfg, keep_best=(i == len(levels) - 1)) for i, lv in enumerate(levels)]
    table = np.array([[train_student(cfg.replace(seed=s), teacher=t).final_top1 for t in teachers] for s in seeds])
    return {"levels": [t.achieved_acc for t in teachers], "top1": table}

