"""Layered classifiers with a feature-extractor / head split.

A model is an ordered list of layer descriptors. Every layer except the last
belongs to the feature extractor ``g``; the last layer is the affine head
``f_L``. Perturbed forwards scale each output neuron's incoming weights and
bias without touching the stored parameters.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from bannoise.errors import ConfigurationError, InputError, TrainingError

log = logging.getLogger(__name__)

WEIGHTED_KINDS = ("conv", "linear", "bn")
LAYER_KINDS = WEIGHTED_KINDS + ("relu", "maxpool", "avgpool", "flatten")


@dataclass(frozen=True)
class ParamSelection:
    """Which layers receive neuron noise."""

    include_conv: bool = True
    include_affine: bool = True
    include_norm_affine: bool = False

    def selects(self, kind: str) -> bool:
        return {
            "conv": self.include_conv,
            "linear": self.include_affine,
            "bn": self.include_norm_affine,
        }.get(kind, False)

    def to_dict(self) -> dict:
        return {
            "include_conv": self.include_conv,
            "include_affine": self.include_affine,
            "include_norm_affine": self.include_norm_affine,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSelection":
        return cls(**d)


class NoiseSlot(NamedTuple):
    layer: int
    kind: str
    neurons: int
    has_bias: bool


@dataclass
class Batch:
    """Images in [0, 1] with integer labels."""

    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise InputError(f"inputs must be N x C x H x W, got shape {tuple(self.inputs.shape)}")
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise InputError("labels must be a vector with one entry per input")
        if not torch.isfinite(self.inputs).all():
            raise InputError("inputs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def check_labels(self, num_classes: int) -> None:
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise InputError(f"labels outside [0, {num_classes})")

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(self.inputs[idx], self.labels[idx])

    def batches(self, batch_size: int) -> Iterable["Batch"]:
        for start in range(0, len(self), batch_size):
            yield Batch(self.inputs[start:start + batch_size], self.labels[start:start + batch_size])


def _build_layer(spec: dict) -> nn.Module | None:
    kind = spec["kind"]
    if kind == "conv":
        return nn.Conv2d(spec["in_channels"], spec["out_channels"], spec["kernel_size"],
                         stride=spec.get("stride", 1), padding=spec.get("padding", 0),
                         bias=spec.get("bias", True))
    if kind == "linear":
        return nn.Linear(spec["in_features"], spec["out_features"], bias=spec.get("bias", True))
    if kind == "bn":
        return nn.BatchNorm2d(spec["num_features"])
    if kind in LAYER_KINDS:
        return nn.Identity()
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def _is_head_prefix(spec: dict) -> bool:
    return spec["kind"] == "flatten" or (spec["kind"] == "avgpool" and spec.get("global", False))


class LayeredClassifier(nn.Module):
    """Classifier ``f = f_L o g`` built from layer descriptors.

    ``layers[:split_index]`` form ``g``; the rest is the head ``f_L``: any
    trailing global average pool / flatten layers followed by the final
    affine layer, which flattens its input. With a global pool in the head
    the latent feature keeps its spatial layout.
    """

    def __init__(self, layers: Sequence[dict], num_classes: int, input_shape: Sequence[int],
                 arch: str = "custom", seed: int | None = None):
        super().__init__()
        self.layer_specs = [dict(s) for s in layers]
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.arch = arch
        if not self.layer_specs:
            raise ConfigurationError("model needs at least a head layer")
        head = self.layer_specs[-1]
        if head["kind"] != "linear" or head["out_features"] != self.num_classes:
            raise ConfigurationError("the last layer must be affine with num_classes outputs")
        split = len(self.layer_specs) - 1
        while split > 0 and _is_head_prefix(self.layer_specs[split - 1]):
            split -= 1
        self.split_index = split
        self.layers = nn.ModuleList(_build_layer(s) for s in self.layer_specs)
        if seed is not None:
            self.reset_parameters(seed)
        with torch.no_grad():
            probe = self.features(torch.zeros(1, *self.input_shape))
            self.latent_shape = tuple(probe.shape[1:])
            for i in range(self.split_index, len(self.layers) - 1):
                probe = self._run_layer(i, probe)
        if math.prod(probe.shape[1:]) != head["in_features"]:
            raise ConfigurationError(
                f"latent size {math.prod(probe.shape[1:])} does not match head input {head['in_features']}")

    # -- construction helpers -------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for spec, layer in zip(self.layer_specs, self.layers):
                if spec["kind"] in ("conv", "linear"):
                    nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5), generator=gen)
                    if layer.bias is not None:
                        fan_in = layer.weight[0].numel()
                        bound = 1 / math.sqrt(fan_in)
                        nn.init.uniform_(layer.bias, -bound, bound, generator=gen)
                elif spec["kind"] == "bn":
                    layer.reset_parameters()
                    layer.reset_running_stats()

    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "layers": copy.deepcopy(self.layer_specs),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "split_index": self.split_index,
            "latent_shape": list(self.latent_shape),
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "LayeredClassifier":
        model = cls(desc["layers"], desc["num_classes"], desc["input_shape"], arch=desc.get("arch", "custom"))
        if desc.get("split_index", model.split_index) != model.split_index:
            raise ConfigurationError("descriptor split_index disagrees with layer list")
        return model

    def param_name(self, layer: int, role: str) -> str:
        return f"layers.{layer}.{role}"

    # -- noise bookkeeping ----------------------------------------------------

    def noise_slots(self, selection: ParamSelection) -> list[NoiseSlot]:
        slots = []
        for i, (spec, layer) in enumerate(zip(self.layer_specs, self.layers)):
            kind = spec["kind"]
            if kind in WEIGHTED_KINDS and selection.selects(kind):
                slots.append(NoiseSlot(i, kind, layer.weight.shape[0], layer.bias is not None))
        return slots

    def noise_sizes(self, selection: ParamSelection) -> tuple[int, int]:
        slots = self.noise_slots(selection)
        return sum(s.neurons for s in slots), sum(s.neurons for s in slots if s.has_bias)

    def _scales(self, delta, xi, selection) -> dict[int, tuple[torch.Tensor, torch.Tensor | None]]:
        slots = self.noise_slots(selection)
        n_delta, n_xi = sum(s.neurons for s in slots), sum(s.neurons for s in slots if s.has_bias)
        if delta.numel() != n_delta or xi.numel() != n_xi:
            raise ConfigurationError(
                f"noise sizes ({delta.numel()}, {xi.numel()}) do not match model ({n_delta}, {n_xi})")
        scales = {}
        d_at = x_at = 0
        for s in slots:
            w_scale = 1 + delta[d_at:d_at + s.neurons]
            d_at += s.neurons
            b_scale = None
            if s.has_bias:
                b_scale = 1 + xi[x_at:x_at + s.neurons]
                x_at += s.neurons
            scales[s.layer] = (w_scale, b_scale)
        return scales

    # -- forwards -------------------------------------------------------------

    def _run_layer(self, i: int, x: torch.Tensor, scale=None) -> torch.Tensor:
        spec, layer = self.layer_specs[i], self.layers[i]
        kind = spec["kind"]
        if kind in ("conv", "linear"):
            w, b = layer.weight, layer.bias
            if scale is not None:
                w_scale, b_scale = scale
                w = w * w_scale.view(-1, *([1] * (w.ndim - 1)))
                if b is not None and b_scale is not None:
                    b = b * b_scale
            if kind == "conv":
                return F.conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
            return F.linear(x.flatten(1), w, b)
        if kind == "bn":
            w, b = layer.weight, layer.bias
            if scale is not None:
                w = w * scale[0]
                if scale[1] is not None:
                    b = b * scale[1]
            return F.batch_norm(x, layer.running_mean, layer.running_var, w, b,
                                training=layer.training, momentum=layer.momentum, eps=layer.eps)
        if kind == "relu":
            return F.relu(x)
        if kind == "maxpool":
            return F.max_pool2d(x, spec.get("kernel_size", 2))
        if kind == "avgpool":
            if spec.get("global", False):
                return F.adaptive_avg_pool2d(x, 1)
            return F.avg_pool2d(x, spec.get("kernel_size", 2))
        if kind == "flatten":
            return x.flatten(1)
        raise ConfigurationError(f"unknown layer kind {kind!r}")

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise InputError(f"expected input N x {self.input_shape}, got {tuple(x.shape)}")

    def features(self, x: torch.Tensor, scales: dict | None = None) -> torch.Tensor:
        scales = scales or {}
        for i in range(self.split_index):
            x = self._run_layer(i, x, scales.get(i))
        return x

    def head(self, features: torch.Tensor, scales: dict | None = None) -> torch.Tensor:
        scales = scales or {}
        x = features
        for i in range(self.split_index, len(self.layers)):
            x = self._run_layer(i, x, scales.get(i))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.head(self.features(x))

    def forward_split(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.check_input(x)
        feats = self.features(x)
        return feats, self.head(feats)

    def perturbed_features(self, x, delta, xi, selection) -> tuple[torch.Tensor, dict]:
        self.check_input(x)
        scales = self._scales(delta, xi, selection)
        return self.features(x, scales), scales

    def perturbed_forward(self, x, delta, xi, selection) -> torch.Tensor:
        feats, scales = self.perturbed_features(x, delta, xi, selection)
        return self.head(feats, scales)


# -- functional API ---------------------------------------------------------


def forward(model: LayeredClassifier, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def forward_split(model: LayeredClassifier, x: torch.Tensor):
    return model.forward_split(x)


def noised_forward(model: LayeredClassifier, x: torch.Tensor, noise) -> torch.Tensor:
    """Logits with each selected neuron's weights scaled by ``1 + delta`` and bias by ``1 + xi``."""
    return model.perturbed_forward(x, noise.delta, noise.xi, noise.selection)


def masked_head(model: LayeredClassifier, features: torch.Tensor, mask) -> torch.Tensor:
    m = getattr(mask, "m", mask)
    if tuple(m.shape) != tuple(model.latent_shape):
        raise ConfigurationError(f"mask shape {tuple(m.shape)} != latent shape {model.latent_shape}")
    return model.head(features * m)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise InputError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError("labels outside the logit range")
    return F.cross_entropy(logits, labels)


@torch.no_grad()
def predict(model: LayeredClassifier, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


@torch.no_grad()
def mean_loss(model: LayeredClassifier, data: Batch, batch_size: int = 512) -> float:
    was_training = model.training
    model.eval()
    total = sum(F.cross_entropy(model(b.inputs), b.labels, reduction="sum").item()
                for b in data.batches(batch_size))
    model.train(was_training)
    return total / max(len(data), 1)


# -- training ---------------------------------------------------------------


@dataclass
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    batch_size: int = 64
    augment_shift: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        return cls(**d)


# Reference schedule for ResNet18 on CIFAR-10.
PAPER_TRAIN_HYPER = TrainHyper(lr=0.01, momentum=0.9, weight_decay=5e-4, epochs=200,
                               milestones=(100, 150), gamma=0.1, batch_size=128)


def random_shift(x: torch.Tensor, max_shift: int, gen: torch.Generator) -> torch.Tensor:
    """Translate each image by up to ``max_shift`` pixels, zero padded."""
    if max_shift <= 0:
        return x
    n = x.shape[0]
    offsets = torch.randint(-max_shift, max_shift + 1, (n, 2), generator=gen)
    padded = F.pad(x, [max_shift] * 4)
    h, w = x.shape[-2:]
    out = torch.empty_like(x)
    for (dy, dx) in offsets.unique(dim=0).tolist():
        sel = ((offsets[:, 0] == dy) & (offsets[:, 1] == dx)).nonzero().squeeze(1)
        out[sel] = padded[sel, :, max_shift + dy:max_shift + dy + h, max_shift + dx:max_shift + dx + w]
    return out


def make_sgd(params, hyper: TrainHyper) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)


def train(model: LayeredClassifier, data: Batch, hyper: TrainHyper) -> LayeredClassifier:
    """Minimise mean cross-entropy on ``data`` with SGD. Updates ``model`` in place."""
    if len(data) == 0:
        raise InputError("training data is empty")
    data.check_labels(model.num_classes)
    if hyper.epochs <= 0:
        return model
    gen = torch.Generator().manual_seed(hyper.seed)
    opt = make_sgd(model.parameters(), hyper)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(hyper.milestones), gamma=hyper.gamma)
    model.train()
    for epoch in range(hyper.epochs):
        perm = torch.randperm(len(data), generator=gen)
        running = 0.0
        for start in range(0, len(data), hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            x = random_shift(data.inputs[idx], hyper.augment_shift, gen)
            loss = F.cross_entropy(model(x), data.labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        sched.step()
        log.debug("epoch %d loss %.4f", epoch, running / len(data))
    model.eval()
    return model


# -- registry ---------------------------------------------------------------


def cnn_layers(input_shape, num_classes, channels=(16, 32), kernel_size=3, norm=False,
               global_pool=False, hidden=()) -> list[dict]:
    """Conv blocks (conv, optional batch norm, relu, 2x2 max pool), optional dense layers, affine head.

    With ``global_pool`` the last block ends in a global average pool instead.
    ``hidden`` adds fully connected relu layers between the conv stack and the head.
    """
    c, h, w = input_shape
    layers = []
    for i, out in enumerate(channels):
        layers.append({"kind": "conv", "in_channels": c, "out_channels": out,
                       "kernel_size": kernel_size, "padding": kernel_size // 2})
        if norm:
            layers.append({"kind": "bn", "num_features": out})
        layers.append({"kind": "relu"})
        if global_pool and i == len(channels) - 1:
            layers.append({"kind": "avgpool", "global": True})
            c, h, w = out, 1, 1
        else:
            layers.append({"kind": "maxpool", "kernel_size": 2})
            c, h, w = out, h // 2, w // 2
    width = c * h * w
    if hidden:
        layers.append({"kind": "flatten"})
    for units in hidden:
        layers += [{"kind": "linear", "in_features": width, "out_features": units}, {"kind": "relu"}]
        width = units
    layers.append({"kind": "linear", "in_features": width, "out_features": num_classes})
    return layers


def mlp_layers(input_shape, num_classes, hidden=(256, 128, 64)) -> list[dict]:
    width = math.prod(input_shape)
    layers: list[dict] = [{"kind": "flatten"}]
    for h in hidden:
        layers += [{"kind": "linear", "in_features": width, "out_features": h}, {"kind": "relu"}]
        width = h
    layers.append({"kind": "linear", "in_features": width, "out_features": num_classes})
    return layers


def linear_layers(input_shape, num_classes) -> list[dict]:
    return [{"kind": "flatten"},
            {"kind": "linear", "in_features": math.prod(input_shape), "out_features": num_classes}]


REGISTRY = {"cnn": cnn_layers, "mlp": mlp_layers, "linear": linear_layers}


def build_model(arch: str, num_classes: int, input_shape: Sequence[int], seed: int = 0,
                **options) -> LayeredClassifier:
    if arch not in REGISTRY:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(REGISTRY)}")
    layers = REGISTRY[arch](tuple(input_shape), num_classes, **options)
    return LayeredClassifier(layers, num_classes, input_shape, arch=arch, seed=seed)


def clone(model: LayeredClassifier) -> LayeredClassifier:
    return copy.deepcopy(model)
