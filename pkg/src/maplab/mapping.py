"""Target construction for the three sample-to-target mappings.

* ``A``: one-hot class target; mixed views mix the two one-hots.
* ``B``: teacher soft target of the view's actual pixels, recomputed per view.
* ``C``: one cached teacher soft target per original sample, shared by all
  of its views; mixed views mix the two cached vectors.
"""
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .datasets import normalize
from .errors import CacheIntegrityError, StrategyConfigError
from .nets import as_input

SOFT_CACHE_FORMAT = "maplab-softcache/1"


class Strategy(str, Enum):
    A = "A"
    B = "B"
    C = "C"

    @property
    def needs_teacher(self):
        return self is not Strategy.A


def _teacher_model(teacher):
    return getattr(teacher, "model", teacher)


def teacher_logits(teacher, images, batch_size=1024):
    """Class logits of a frozen teacher for normalized NHWC images."""
    model = _teacher_model(teacher)
    expected = tuple(model.spec.input_shape)
    if tuple(np.shape(images)[1:]) != expected:
        raise ValueError(f"images have shape {tuple(np.shape(images)[1:])}, teacher expects {expected}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(as_input(images[start : start + batch_size], dtype)))
    model.train(was_training)
    return torch.cat(out).numpy()


def teacher_soft(teacher, images, tau):
    """Temperature softmax of teacher logits, one row per image."""
    logits = np.asarray(teacher_logits(teacher, images), dtype=np.float64) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class SoftCache:
    indices: np.ndarray
    probs: np.ndarray
    teacher_id: str
    tau: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise CacheIntegrityError("duplicate sample index in soft cache")
        self._row = {int(i): r for r, i in enumerate(self.indices)}

    def __len__(self):
        return len(self.indices)

    @property
    def entries(self):
        return {int(i): self.probs[r] for r, i in enumerate(self.indices)}

    def lookup(self, origins):
        try:
            rows = [self._row[int(o)] for o in np.asarray(origins).ravel()]
        except KeyError as exc:
            raise CacheIntegrityError(f"no cached target for sample index {exc.args[0]}") from None
        return self.probs[rows]

    def save(self, path):
        """Binary ``.npz``: int64 index column, float64 (N, K) rows, JSON header."""
        header = json.dumps({"format": SOFT_CACHE_FORMAT, "teacher_id": self.teacher_id, "tau": self.tau})
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(header), index=self.indices, probs=self.probs)
        return Path(path)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != SOFT_CACHE_FORMAT:
                raise CacheIntegrityError(f"{path}: unsupported cache format {header.get('format')!r}")
            return cls(data["index"], data["probs"], header["teacher_id"], header["tau"])


def build_soft_cache(teacher, trainset, stats, tau, teacher_id=None):
    """One soft target per original sample, from its normalized un-augmented image."""
    probs = teacher_soft(teacher, normalize(trainset.images, stats), tau)
    if teacher_id is None:
        teacher_id = str(getattr(teacher, "teacher_id", "") or id(_teacher_model(teacher)))
    return SoftCache(trainset.indices.copy(), probs, teacher_id, float(tau))


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _mix_rows(first, second, lams):
    lams = np.asarray(lams, dtype=np.float64)[:, None]
    return lams * first + (1.0 - lams) * second


def map_targets(strategy, views, num_classes, teacher=None, cache=None, tau=2.0):
    """Targets (B, K) float64 for a :class:`~maplab.augment.ViewBatch`."""
    strategy = Strategy(strategy)
    if strategy is Strategy.A:
        targets = one_hot(views.labels, num_classes)
        if views.is_mixed:
            targets = _mix_rows(targets, one_hot(views.partner_labels, num_classes), views.lams)
        return targets
    if strategy is Strategy.B:
        if teacher is None:
            raise StrategyConfigError("strategy B needs a teacher")
        return teacher_soft(teacher, views.images, tau)
    if cache is None:
        raise StrategyConfigError("strategy C needs a soft-target cache")
    targets = cache.lookup(views.origins)
    if views.is_mixed:
        targets = _mix_rows(targets, cache.lookup(views.partners), views.lams)
    return targets
