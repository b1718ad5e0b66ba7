"""Student training: fixed step budget, decoupled (or coupled) loss, chosen mapping.

Every source of randomness is derived from one master seed. Batches and
augmentation draws are pure functions of ``(seed, step)``, which makes runs
bit-reproducible and lets the teacher bank replay any stretch of training.
"""
import dataclasses
import functools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .augment import AugKind, AugPolicy, apply_policy
from .datasets import DataBundle, DatasetSpec, make_batches, normalize, subsample_ipc
from .errors import CacheIntegrityError, ConfigError, StrategyConfigError
from .losses import coupled_kl_loss, ce_classifier_loss, mixed_ce_loss, total_step_loss
from .mapping import Strategy, build_soft_cache, map_targets
from .nets import BackboneSpec, as_input, build_model

log = logging.getLogger(__name__)

LOSS_MODES = ("decoupled", "standard")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic-blobs"
    data_root: str = "data"
    blobs_classes: int = 10
    blobs_n: int = 2000
    blobs_test_n: int = 1000
    blobs_size: int = 8
    blobs_spread: float = 0.05
    blobs_seed: int = 0
    arch: str = "convnet-tiny"
    mlp_hidden: tuple = ()
    feature_dim: Optional[int] = None
    ipc: Optional[int] = None
    strategy: str = "A"
    teacher: Optional[str] = None
    aug_kind: str = "StdAug"
    tau: float = 2.0
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 128
    steps: int = 1000
    eval_every: int = 100
    eval_steps: Optional[tuple] = None
    eval_subset: Optional[int] = None
    loss_mode: str = "decoupled"
    loss_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("A", "B", "C"):
            raise ConfigError(f"strategy must be A, B or C, got {self.strategy!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.optimizer != "adamw":
            raise ConfigError("only the adamw optimizer is supported")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eval_every < 1 or (self.steps and self.eval_steps is None and self.eval_every > self.steps):
            raise ConfigError("need total steps >= eval_every >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        AugPolicy(self.aug_kind)
        if self.eval_steps is not None:
            self.eval_steps = tuple(int(s) for s in self.eval_steps)
        self.mlp_hidden = tuple(int(v) for v in self.mlp_hidden)

    # --- flat key/value documents -------------------------------------------

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping):
        known = set(cls.keys())
        kwargs = {}
        for key, value in mapping.items():
            name = key.replace(".", "_").replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(cls.__dataclass_fields__[name].type, key, value)
        return cls(**kwargs)

    def to_mapping(self):
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        changes = {}
        for pair in pairs or ():
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            changes[key.strip()] = yaml.safe_load(raw)
        merged = self.to_mapping()
        for key, value in changes.items():
            name = key.replace(".", "_").replace("-", "_")
            if name not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            merged[name] = value
        return type(self).from_mapping(merged)

    # --- derived --------------------------------------------------------------

    @property
    def policy(self):
        return AugPolicy(AugKind(self.aug_kind))

    def dataset_spec(self):
        if self.dataset == "synthetic-blobs":
            s = self.blobs_size
            return DatasetSpec(
                "synthetic-blobs", num_classes=self.blobs_classes, image_shape=(s, s, 3),
                n=self.blobs_n, seed=self.blobs_seed, spread=self.blobs_spread,
            )
        return DatasetSpec(self.dataset, root=self.data_root)

    def backbone_spec(self, input_shape):
        return BackboneSpec(self.arch, tuple(input_shape), self.feature_dim, self.mlp_hidden)

    def eval_points(self):
        if self.steps == 0:
            return []
        if self.eval_steps is not None:
            points = {s for s in self.eval_steps if 0 < s <= self.steps}
        else:
            points = set(range(self.eval_every, self.steps + 1, self.eval_every))
        points.add(self.steps)
        return sorted(points)


def _coerce(annotation, key, value):
    # YAML 1.1 reads "1e-4" as a string, so numeric fields are converted explicitly
    if value is None:
        return None
    kinds = [t for t in getattr(annotation, "__args__", (annotation,)) if t is not type(None)]
    kind = kinds[0]
    try:
        if kind is float:
            return float(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is tuple:
            return tuple(value) if isinstance(value, (list, tuple)) else (value,)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None
    return value


def load_config(path, overrides=()):
    text = Path(path).read_text()
    mapping = yaml.safe_load(text) or {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: config must be a flat key/value mapping")
    return ExperimentConfig.from_mapping(mapping).with_overrides(overrides)


@functools.lru_cache(maxsize=4)
def _load_bundle(spec, test_n):
    from dataclasses import replace

    from .datasets import load_dataset

    train = load_dataset(replace(spec, split="train"))
    test_spec = replace(spec, split="test", n=test_n) if spec.name == "synthetic-blobs" else replace(spec, split="test")
    return DataBundle(train, load_dataset(test_spec))


def load_data(config):
    """Train/test bundle for a config; repeated calls share one in-memory copy."""
    return _load_bundle(config.dataset_spec(), config.blobs_test_n)


# ---------------------------------------------------------------------------
# deterministic step stream


class StepStream:
    """Batches and augmented views as pure functions of the step index."""

    def __init__(self, train, stats, policy, batch_size, seed):
        self.train = train
        self.stats = stats
        self.policy = policy
        if len(train) < batch_size:
            log.warning("training set of %d samples is smaller than batch size %d; using %d",
                        len(train), batch_size, len(train))
            batch_size = len(train)
        self.batch_size = batch_size
        root = np.random.SeedSequence(seed)
        init, shuffle, aug, pair = root.spawn(4)
        self.init_seed = int(init.generate_state(1)[0])
        self._shuffle = int(shuffle.generate_state(1)[0])
        self._aug = int(aug.generate_state(1)[0])
        self._pair = int(pair.generate_state(1)[0])
        self.batches_per_epoch = len(train) // batch_size
        if self.batches_per_epoch == 0:
            raise ConfigError("empty training set")
        self._epoch = None
        self._epoch_batches = None

    def positions(self, step):
        """Dataset positions used at 1-based ``step``."""
        epoch, slot = divmod(step - 1, self.batches_per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._epoch_batches = make_batches(len(self.train), self.batch_size, [self._shuffle, epoch])
        return self._epoch_batches[slot]

    def views(self, step):
        pos = self.positions(step)
        rng = np.random.default_rng([self._aug, step])
        pairing = None
        if self.policy.kind.is_mix:
            pairing = np.random.default_rng([self._pair, step]).permutation(len(pos))
        return apply_policy(
            self.train.images[pos], self.train.labels[pos], self.train.indices[pos],
            self.policy, rng, self.stats, pairing,
        )


# ---------------------------------------------------------------------------
# evaluation


def _argmax_lowest(logits):
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return torch.argmax(logits, dim=1)


def evaluate_top1_probe(backbone, h, images, labels, batch_size=1000):
    """Top-1 of probe ``h`` on frozen-forward backbone features.

    ``images`` are normalized NHWC. Module train/eval flags are restored.
    """
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    modes = (backbone.training, h.training)
    backbone.eval()
    h.eval()
    dtype = next(backbone.parameters()).dtype
    correct = 0
    labels = np.asarray(labels)
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            x = as_input(images[start : start + batch_size], dtype)
            pred = _argmax_lowest(h(backbone(x))).numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    backbone.train(modes[0])
    h.train(modes[1])
    return correct / len(labels)


def validate_top1(model, dataset, stats, batch_size=1000):
    """Top-1 of a model's classifier head on a raw [0, 1] dataset."""
    return evaluate_top1_probe(model.backbone, model.probe, normalize(dataset.images, stats), dataset.labels, batch_size)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunRecord:
    step: int
    top1: float
    loss_backbone: float
    loss_classifier: float
    wall_seconds: float


@dataclass
class StudentRun:
    config: ExperimentConfig
    records: list
    model: object
    losses: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    train_size: int = 0

    def top1_at(self, step):
        for r in self.records:
            if r.step == step:
                return r.top1
        raise KeyError(step)

    @property
    def final_top1(self):
        return self.records[-1].top1 if self.records else float("nan")


def _optimizer(params, config):
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def _teacher_from_config(config):
    from .teacherbank import TeacherCheckpoint

    return TeacherCheckpoint.load(config.teacher)


def prepare_trainset(config, data):
    if config.ipc is None:
        return data.train
    return subsample_ipc(data.train, config.ipc, config.seed)


def train_student(config, data=None, teacher=None, cache=None, progress=None):
    """Train one student and return its eval-point log and final model."""
    strategy = Strategy(config.strategy)
    if teacher is None and config.teacher and strategy.needs_teacher:
        teacher = _teacher_from_config(config)
    if strategy is Strategy.A and (teacher is not None or config.teacher):
        raise StrategyConfigError("strategy A does not take a teacher")
    if strategy.needs_teacher and teacher is None:
        raise StrategyConfigError(f"strategy {strategy.value} needs a teacher")
    data = data or load_data(config)
    train = prepare_trainset(config, data)
    stream = StepStream(train, data.stats, config.policy, config.batch_size, config.seed)
    model = build_model(config.backbone_spec(train.image_shape), train.num_classes, stream.init_seed, config.tau)

    if strategy is Strategy.C and cache is None:
        cache = build_soft_cache(teacher, train, data.stats, config.tau)
    if strategy is Strategy.C and not np.isin(train.indices, cache.indices).all():
        raise CacheIntegrityError("soft cache does not cover the training set")

    test = data.test
    if config.eval_subset and config.eval_subset < len(test):
        pick = np.random.default_rng([config.seed, 7]).choice(len(test), config.eval_subset, replace=False)
        test = test.take(np.sort(pick))
    test_images = normalize(test.images, data.stats)

    decoupled = config.loss_mode == "decoupled"
    if decoupled:
        optimizers = [_optimizer(model.main_parameters(), config), _optimizer(model.probe.parameters(), config)]
    else:
        optimizers = [_optimizer(list(model.backbone.parameters()) + list(model.probe.parameters()), config)]

    eval_points = set(config.eval_points())
    records = []
    losses = np.zeros((config.steps, 3))
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        views = stream.views(step)
        targets = map_targets(strategy, views, train.num_classes, teacher, cache, config.tau)
        model.train()
        if decoupled:
            bd = total_step_loss(model, views.images, targets, views.labels, views.partner_labels, views.lams,
                                 config.loss_reduction)
            lb, lh, total = bd.backbone_loss, bd.classifier_loss, bd.total
        else:
            lb, logits = coupled_kl_loss(model, views.images, targets, config.loss_reduction)
            with torch.no_grad():
                if views.is_mixed:
                    lh = mixed_ce_loss(views.labels, views.partner_labels, views.lams, logits, config.loss_reduction)
                else:
                    lh = ce_classifier_loss(views.labels, logits, config.loss_reduction)
            total = lb
        for opt in optimizers:
            opt.zero_grad(set_to_none=True)
        total.backward()
        for opt in optimizers:
            opt.step()
        lb, lh = lb.item(), lh.item()
        losses[step - 1] = (lb, lh, lb + lh)
        if step in eval_points:
            acc = evaluate_top1_probe(model.backbone, model.probe, test_images, test.labels)
            records.append(RunRecord(step, acc, lb, lh, time.perf_counter() - start))
            if progress:
                progress(records[-1])
    model.eval()
    return StudentRun(config, records, model, losses, len(train))

