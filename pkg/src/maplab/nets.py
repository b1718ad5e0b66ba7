"""Backbones, the temperature-softmax projection head and the linear probe.

Images enter the package as NHWC arrays; :func:`as_input` converts them to
the NCHW tensors the torch modules expect.
"""
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

ARCHS = ("resnet18-small", "convnet-tiny", "mlp-tiny")
CHECKPOINT_FORMAT = "maplab-checkpoint/1"


@dataclass(frozen=True)
class BackboneSpec:
    arch: str
    input_shape: tuple = (32, 32, 3)
    feature_dim: int = None
    hidden: tuple = ()

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        default = {"resnet18-small": 512, "convnet-tiny": 128, "mlp-tiny": 32}[self.arch]
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", default)
        elif self.arch != "mlp-tiny" and self.feature_dim != default:
            raise ConfigError(f"{self.arch} has fixed feature_dim {default}")


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18Small(nn.Module):
    """ResNet-18 for small inputs: 3x3/stride-1 stem, no max-pool, no fc."""

    def __init__(self, in_channels=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        layers = []
        in_planes = 64
        for planes, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers.append(nn.Sequential(BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)))
            in_planes = planes
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.feature_dim = 512

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)


class ConvNetTiny(nn.Module):
    def __init__(self, in_channels=3):
        super().__init__()
        blocks = []
        for c_in, c_out in ((in_channels, 32), (32, 64), (64, 128)):
            blocks += [nn.Conv2d(c_in, c_out, 3, 1, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
        self.features = nn.Sequential(*blocks)
        self.feature_dim = 128

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.features(x), 1), 1)


class MLPTiny(nn.Module):
    def __init__(self, in_features, hidden, feature_dim):
        super().__init__()
        dims = (in_features, *hidden, feature_dim)
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.net(torch.flatten(x, 1))


class ProjectionHead(nn.Module):
    """g: learnable linear map to K logits followed by softmax(logits / tau)."""

    def __init__(self, feature_dim, num_classes, tau=2.0):
        super().__init__()
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        self.linear = nn.Linear(feature_dim, num_classes)
        self.tau = float(tau)

    def logits(self, features):
        return self.linear(features)

    def log_probs(self, features):
        return F.log_softmax(self.linear(features) / self.tau, dim=1)

    def forward(self, features):
        return F.softmax(self.linear(features) / self.tau, dim=1)


class ClassifierHead(nn.Module):
    """h: linear probe producing raw logits."""

    def __init__(self, feature_dim, num_classes):
        super().__init__()
        self.linear = nn.Linear(feature_dim, num_classes)

    def forward(self, features):
        return self.linear(features)


class MapNet(nn.Module):
    """Backbone phi with projection head g and classifier probe h."""

    def __init__(self, spec, num_classes, tau=2.0):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.backbone = _make_backbone(spec)
        self.proj = ProjectionHead(spec.feature_dim, num_classes, tau)
        self.probe = ClassifierHead(spec.feature_dim, num_classes)

    def forward(self, x):
        return self.probe(self.backbone(x))

    def main_parameters(self):
        return list(self.backbone.parameters()) + list(self.proj.parameters())


def _make_backbone(spec):
    h, w, c = spec.input_shape
    if spec.arch == "resnet18-small":
        return ResNet18Small(c)
    if spec.arch == "convnet-tiny":
        return ConvNetTiny(c)
    return MLPTiny(h * w * c, spec.hidden, spec.feature_dim)


def build_backbone(spec, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _make_backbone(spec)


def build_model(spec, num_classes, seed, tau=2.0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MapNet(spec, num_classes, tau)


def as_input(images, dtype=torch.float32):
    """NHWC array or tensor -> NCHW float tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.from_numpy(np.ascontiguousarray(images))
    if t.ndim != 4:
        raise ValueError(f"expected NHWC batch, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).to(dtype)


def _param_dtype(module):
    return next(module.parameters()).dtype


def backbone_forward(backbone, images, mode="eval", input_shape=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if input_shape is not None and tuple(np.shape(images)[1:]) != tuple(input_shape):
        raise ValueError(f"images have shape {tuple(np.shape(images)[1:])}, expected {tuple(input_shape)}")
    backbone.train(mode == "train")
    x = as_input(images, _param_dtype(backbone))
    if mode == "eval":
        with torch.no_grad():
            return backbone(x)
    return backbone(x)


def project_soft(g, features):
    return g(features)


def classify(h, features):
    return h(features)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, **meta):
    """Write parameters (canonical state-dict keys) and a metadata record."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(model.spec),
        "num_classes": model.num_classes,
        "tau": model.proj.tau,
        "meta": meta,
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(record, path)
    return Path(path)


def load_checkpoint(path):
    """Return ``(model, meta)``; the model is in eval mode with grads disabled."""
    record = torch.load(path, map_location="cpu", weights_only=False)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {record.get('format')!r}")
    spec = BackboneSpec(**record["spec"])
    model = MapNet(spec, record["num_classes"], record["tau"])
    first = next(iter(record["state"].values()))
    model.to(first.dtype)
    model.load_state_dict(record["state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, record["meta"]


def softmax_temperature(logits, tau):
    """Numerically stable temperature softmax on a numpy array (rowwise)."""
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)

