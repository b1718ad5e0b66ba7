"""Teachers trained to a preset accuracy band, and banks of them.

Teachers use one-hot targets with plain cross-entropy through backbone and
classifier. Validation runs every ``val_every`` steps on a fixed subset; a
subset hit is confirmed on the full split before saving. When one validation
interval jumps clean over the band, training is rewound to the last
below-band snapshot and that interval is replayed with a check after every
step. Replay is exact because the data stream is a function of the step.
"""
import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugKind, AugPolicy
from .datasets import normalize
from .errors import ConfigError, UnreachableTargetError
from .losses import coupled_ce_loss
from .nets import build_model, load_checkpoint, save_checkpoint
from .trainer import ExperimentConfig, StepStream, evaluate_top1_probe, load_data, prepare_trainset

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("path", "target", "achieved", "aug", "seed", "step")


@dataclass
class TeacherCheckpoint:
    model: object
    achieved_acc: float
    target_acc: float
    aug_policy: AugPolicy
    seed: int
    step_reached: int
    path: Optional[str] = None

    @property
    def teacher_id(self):
        if self.path:
            return Path(self.path).stem
        return f"t{self.target_acc:.2f}-{self.aug_policy.kind.value}-s{self.seed}-{self.step_reached}"

    def save(self, path):
        save_checkpoint(
            self.model, path,
            achieved_acc=self.achieved_acc, target_acc=self.target_acc,
            aug_policy=self.aug_policy.to_dict(), seed=self.seed, step_reached=self.step_reached,
        )
        self.path = str(path)
        return Path(path)

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        policy = dict(meta["aug_policy"])
        policy = AugPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in policy.items()})
        return cls(model, meta["achieved_acc"], meta["target_acc"], policy, meta["seed"], meta["step_reached"], str(path))


def _freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def train_teacher_to_accuracy(config, target_acc, tolerance=0.01, max_steps=20000, val_every=50,
                              val_subset=1000, data=None):
    """Train with one-hot CE until validation top-1 is within ``tolerance`` of ``target_acc``.

    ``config`` supplies dataset, arch, augmentation, optimizer and seed; its
    strategy/steps fields are ignored. Raises :class:`UnreachableTargetError`
    carrying the best checkpoint seen if ``max_steps`` pass without a hit.
    """
    data = data or load_data(config)
    k = data.num_classes
    if not (1.0 / k - tolerance < target_acc <= 1.0):
        raise ConfigError(f"target accuracy {target_acc} outside (1/K - tol, 1]")
    train = prepare_trainset(config, data)
    stream = StepStream(train, data.stats, config.policy, config.batch_size, config.seed)
    model = build_model(config.backbone_spec(train.image_shape), k, stream.init_seed, config.tau)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    val_images = normalize(data.test.images, data.stats)
    val_labels = data.test.labels
    if val_subset and val_subset < len(val_labels):
        pick = np.sort(np.random.default_rng([config.seed, 11]).choice(len(val_labels), val_subset, replace=False))
    else:
        pick = np.arange(len(val_labels))
    sub_images, sub_labels = val_images[pick], val_labels[pick]

    def accuracy(full):
        if full:
            return evaluate_top1_probe(model.backbone, model.probe, val_images, val_labels)
        return evaluate_top1_probe(model.backbone, model.probe, sub_images, sub_labels)

    best = {"acc": -1.0, "state": None, "step": 0}

    def check(step):
        """Return the confirmed full-split accuracy on a hit, else None; also the subset accuracy."""
        acc = accuracy(full=False)
        if acc > best["acc"]:
            best.update(acc=acc, state=copy.deepcopy(model.state_dict()), step=step)
        if abs(acc - target_acc) <= tolerance:
            full = acc if len(pick) == len(val_labels) else accuracy(full=True)
            if abs(full - target_acc) <= tolerance:
                return full, acc
        return None, acc

    def finish(acc, step):
        log.info("teacher hit %.4f (target %.2f) at step %d", acc, target_acc, step)
        return TeacherCheckpoint(_freeze(model), acc, target_acc, config.policy, config.seed, step)

    hit, acc = check(0)
    if hit is not None:
        return finish(hit, 0)
    snapshot = (0, copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict())) if acc < target_acc else None
    replay_until = 0

    def train_step(step):
        views = stream.views(step)
        model.train()
        loss, _ = coupled_ce_loss(model, views.images, views.labels, views.partner_labels, views.lams)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    step = 0
    while step < max_steps:
        step += 1
        train_step(step)
        fine = step <= replay_until
        if not fine and step % val_every and step != max_steps:
            continue
        hit, acc = check(step)
        if hit is not None:
            return finish(hit, step)
        if fine:
            continue
        if acc < target_acc - tolerance:
            snapshot = (step, copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()))
        elif acc > target_acc + tolerance and snapshot is not None:
            # overshot within one interval: rewind and step through it one update at a time
            replay_until = step
            step, model_state, opt_state = snapshot
            model.load_state_dict(model_state)
            opt.load_state_dict(opt_state)
            snapshot = None
            log.debug("overshoot at step %d; replaying from %d", replay_until, step)

    model.load_state_dict(best["state"])
    best_full = accuracy(full=True)
    best_ckpt = TeacherCheckpoint(_freeze(model), best_full, target_acc, config.policy, config.seed, best["step"])
    raise UnreachableTargetError(target_acc, best_full, max_steps, best_ckpt)


def build_bank(levels, config, outdir, tolerance=0.01, max_steps=20000, val_every=50, val_subset=1000,
               data=None, keep_best=False):
    """Train one teacher per accuracy level and write ``bank.csv`` in ``outdir``.

    Returns ``(checkpoints, failures)`` where ``failures`` maps level to the
    error message. With ``keep_best`` an unreachable level contributes its
    best-accuracy checkpoint instead of nothing (still recorded as a failure).
    """
    levels = list(levels)
    if levels != sorted(levels):
        raise ConfigError("bank levels must be sorted ascending")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data = data or load_data(config)
    bank, failures = [], {}
    for level in levels:
        try:
            ckpt = train_teacher_to_accuracy(config, level, tolerance, max_steps, val_every, val_subset, data)
        except UnreachableTargetError as exc:
            failures[level] = str(exc)
            log.warning("bank level %.2f: %s", level, exc)
            if not (keep_best and exc.best is not None):
                continue
            ckpt = exc.best
        ckpt.save(outdir / f"teacher_{ckpt.aug_policy.kind.value}_{int(round(level * 100)):03d}_s{config.seed}.pt")
        bank.append(ckpt)
    write_bank_manifest(bank, outdir / "bank.csv", failures)
    return bank, failures


def write_bank_manifest(bank, path, failures=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for c in bank:
            writer.writerow([Path(c.path).name, c.target_acc, c.achieved_acc, c.aug_policy.kind.value, c.seed, c.step_reached])
    if failures:
        Path(path).with_name("bank_failures.csv").write_text(
            "target,error\n" + "".join(f"{lvl},\"{msg}\"\n" for lvl, msg in failures.items())
        )


def load_bank(directory):
    directory = Path(directory)
    bank = []
    with open(directory / "bank.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            bank.append(TeacherCheckpoint.load(directory / row["path"]))
    return bank


def find_teacher(bank, level, aug=AugKind.StdAug):
    """Checkpoint whose target level matches ``level`` for augmentation ``aug``, else None."""
    aug = AugKind(aug)
    for c in bank:
        if abs(c.target_acc - level) <= 1e-9 and c.aug_policy.kind is aug:
            return c
    return None


def teacher_config(config: ExperimentConfig, aug_kind):
    return dataclasses.replace(config, aug_kind=AugKind(aug_kind).value, strategy="A", teacher=None)
