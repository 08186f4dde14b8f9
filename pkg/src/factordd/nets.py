"""Downstream / adversary network zoo with functional parameter handling.

Parameters live outside the modules as named tensors (:class:`ModelParams`),
and :func:`forward` runs them through a cached architecture template via
``torch.func.functional_call``.  That keeps every forward differentiable with
respect to both the parameters and the input images, which is what lets
distillation losses backpropagate through unrolled SGD updates into the
synthetic data.

Architectures
-------------
``convnet`` (the evaluation protocol): ``depth`` blocks of
Conv3x3(width) - InstanceNorm - ReLU - AvgPool2, then a linear head.
InstanceNorm carries no affine parameters, so the parameter vector is the
convolution/linear stack only.

The reduced cross-architecture variants are fixed stand-ins sized for 32x32
inputs (their exact published counterparts are not pinned anywhere, so these
tables are frozen here and used only for evaluation):

``resnet_s``   stem Conv3x3(64); three residual units at 64/128/256 channels
               (two Conv3x3 each, 1x1 projection when widening), AvgPool2
               after each unit; global average pool -> linear head.
``vgg_s``      Conv3x3(64) P Conv3x3(128) P Conv3x3(256) Conv3x3(256) P,
               each conv followed by InstanceNorm-ReLU; flatten -> head.
``alexnet_s``  Conv5x5(64) P Conv5x5(192) P Conv3x3(256) P with
               InstanceNorm-ReLU; flatten -> head.
"""

import functools
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import UsageError
from .rng import generator

ARCHS = ("convnet", "resnet_s", "vgg_s", "alexnet_s")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, int, int]  # (h, w, c)
    class_count: int
    depth: int = 3
    width: int = 128
    norm: str = "instance"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise UsageError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.norm != "instance":
            raise UsageError(f"unsupported norm {self.norm!r}")
        if self.depth < 1 or self.width < 1 or self.class_count < 2:
            raise UsageError("depth/width must be >= 1 and class_count >= 2")


class ModelParams:
    """An ordered name -> tensor mapping with exact flatten/unflatten."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = dict(tensors)

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])

    def unflatten(self, vec: torch.Tensor) -> "ModelParams":
        if vec.numel() != self.total_count:
            raise UsageError(f"vector length {vec.numel()} != parameter count {self.total_count}")
        out, offset = {}, 0
        for name, t in self.tensors.items():
            out[name] = vec[offset : offset + t.numel()].reshape(t.shape)
            offset += t.numel()
        return ModelParams(out)

    def detach(self) -> "ModelParams":
        return ModelParams({k: v.detach() for k, v in self.tensors.items()})

    def clone(self) -> "ModelParams":
        return ModelParams({k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams({k: v.to(dtype) for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self


@dataclass
class FeatureOutput:
    """Logits plus the last hidden activation feeding the output layer."""

    logits: torch.Tensor
    penult: torch.Tensor


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)


class _ConvNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        h, w, c = spec.input_shape
        layers: list[nn.Module] = []
        in_ch = c
        for _ in range(spec.depth):
            if h < 2 or w < 2:
                raise UsageError(
                    f"input {spec.input_shape} too small for a depth-{spec.depth} convnet"
                )
            layers += [nn.Conv2d(in_ch, spec.width, 3, padding=1), _norm(spec.width),
                       nn.ReLU(), nn.AvgPool2d(2)]
            in_ch = spec.width
            h, w = h // 2, w // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(spec.width * h * w, spec.class_count)

    def forward(self, x):
        penult = self.features(x).flatten(1)
        return self.head(penult), penult


class _ResidualUnit(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.project = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x):
        skip = x if self.project is None else self.project(x)
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(y + skip)


class _ResNetS(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        _, _, c = spec.input_shape
        self.stem = nn.Sequential(nn.Conv2d(c, 64, 3, padding=1), _norm(64), nn.ReLU())
        self.unit1 = _ResidualUnit(64, 64)
        self.unit2 = _ResidualUnit(64, 128)
        self.unit3 = _ResidualUnit(128, 256)
        self.pool = nn.AvgPool2d(2)
        self.head = nn.Linear(256, spec.class_count)

    def forward(self, x):
        y = self.stem(x)
        y = self.pool(self.unit1(y))
        y = self.pool(self.unit2(y))
        y = self.pool(self.unit3(y))
        penult = y.mean(dim=(2, 3))
        return self.head(penult), penult


class _VGGS(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        h, w, c = spec.input_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, 64, 3, padding=1), _norm(64), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), _norm(128), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(128, 256, 3, padding=1), _norm(256), nn.ReLU(),
            nn.Conv2d(256, 256, 3, padding=1), _norm(256), nn.ReLU(), nn.AvgPool2d(2),
        )
        self.head = nn.Linear(256 * (h // 8) * (w // 8), spec.class_count)

    def forward(self, x):
        penult = self.features(x).flatten(1)
        return self.head(penult), penult


class _AlexNetS(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        h, w, c = spec.input_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, 64, 5, padding=2), _norm(64), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(64, 192, 5, padding=2), _norm(192), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(192, 256, 3, padding=1), _norm(256), nn.ReLU(), nn.AvgPool2d(2),
        )
        self.head = nn.Linear(256 * (h // 8) * (w // 8), spec.class_count)

    def forward(self, x):
        penult = self.features(x).flatten(1)
        return self.head(penult), penult


_TEMPLATES = {"convnet": _ConvNet, "resnet_s": _ResNetS, "vgg_s": _VGGS, "alexnet_s": _AlexNetS}


@functools.lru_cache(maxsize=32)
def build_template(spec: ModelSpec) -> nn.Module:
    h, w, _ = spec.input_shape
    if spec.arch != "convnet" and (h < 8 or w < 8):
        raise UsageError(f"{spec.arch} requires inputs of at least 8x8, got {spec.input_shape}")
    with torch.no_grad():
        template = _TEMPLATES[spec.arch](spec)
    template.eval()
    for p in template.parameters():
        p.requires_grad_(False)
    return template


def param_count(spec: ModelSpec) -> int:
    """Total parameter count, a pure function of the spec."""
    return sum(p.numel() for p in build_template(spec).parameters())


def build_model(spec: ModelSpec, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Deterministically initialize parameters for ``spec``.

    Weights are normal with fan-in scaling (std = 1/sqrt(fan_in)); biases are
    zero.  The same (spec, seed) pair always yields bit-identical tensors.
    """
    template = build_template(spec)
    gen = generator("model_init", spec, seed)
    tensors = {}
    for name, p in template.named_parameters():
        if p.ndim > 1:
            fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
            t = torch.randn(p.shape, generator=gen, dtype=dtype) / fan_in**0.5
        else:
            t = torch.zeros(p.shape, dtype=dtype)
        tensors[name] = t
    return ModelParams(tensors)


def forward(params: ModelParams, spec: ModelSpec, images: torch.Tensor) -> FeatureOutput:
    """Run images of shape [n, h, w, c] through the network for ``spec``."""
    if images.ndim != 4 or tuple(images.shape[1:]) != spec.input_shape:
        raise UsageError(
            f"images shape {tuple(images.shape)} does not match spec input {spec.input_shape}"
        )
    template = build_template(spec)
    x = images.permute(0, 3, 1, 2)
    logits, penult = functional_call(template, params.tensors, (x,))
    return FeatureOutput(logits=logits, penult=penult)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """One plain gradient step, ``out = params - lr * grads``, as new tensors."""
    if params.names() != grads.names():
        raise UsageError("params and grads carry different tensor names")
    out = {}
    for name, p in params.items():
        g = grads.tensors[name]
        if g.shape != p.shape:
            raise UsageError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(g.shape)}")
        out[name] = p - lr * g
    return ModelParams(out)
