"""Trigger generators, dataset poisoning and attack evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np
import torch
import torch.nn.functional as F

from bannoise.errors import ConfigurationError, EvaluationError, InputError
from bannoise.model import Batch, LayeredClassifier, TrainHyper, predict, train

PHASES = ("train", "test")


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise InputError(f"expected C x H x W or N x C x H x W image, got {tuple(x.shape)}")


def load_pattern(path: str | Path, shape: tuple[int, int, int]) -> torch.Tensor:
    """Read a trigger pattern from a PNG or a raw little-endian float32 blob."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"trigger pattern not found: {path}")
    if path.suffix.lower() == ".png":
        from PIL import Image

        c, h, w = shape
        img = Image.open(path).convert("RGB" if c == 3 else "L").resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr.reshape(h, w, c).transpose(2, 0, 1)
        return torch.from_numpy(np.ascontiguousarray(arr))
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != math.prod(shape):
        raise InputError(f"pattern blob {path} holds {arr.size} values, need {math.prod(shape)}")
    return torch.from_numpy(arr.reshape(shape).copy()).clamp(0, 1)


def gaussian_pattern(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return (0.5 + 0.5 * torch.randn(shape, generator=gen)).clamp(0, 1)


@dataclass
class Trigger:
    """Base class; subclasses implement ``_apply`` on N x C x H x W batches."""

    variant: ClassVar[str] = ""

    def apply(self, x: torch.Tensor, phase: str = "test", gen: torch.Generator | None = None) -> torch.Tensor:
        if phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}")
        xb, single = _as_batch(x)
        if xb.numel() and (xb.min() < 0 or xb.max() > 1):
            raise InputError("trigger input must lie in [0, 1]")
        out = self._apply(xb, phase, gen).clamp(0, 1)
        return out[0] if single else out

    def _apply(self, x, phase, gen):
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {k: (v.tolist() if isinstance(v, torch.Tensor) else v) for k, v in asdict(self).items()}
        return {"variant": self.variant, **d}


@dataclass
class PatchTrigger(Trigger):
    """Stamp a k x k pattern into a corner (BadNets)."""

    variant: ClassVar[str] = "patch"
    size: int = 3
    pattern: list | None = None  # k x k values in [0,1]; default checkerboard
    location: str = "bottom-right"
    margin: int = 1

    def pattern_tensor(self) -> torch.Tensor:
        if self.pattern is None:
            idx = torch.arange(self.size)
            return ((idx[:, None] + idx[None, :]) % 2 == 0).float()
        p = torch.as_tensor(self.pattern, dtype=torch.float32)
        if p.shape != (self.size, self.size):
            raise ConfigurationError(f"patch pattern must be {self.size} x {self.size}")
        return p

    def _apply(self, x, phase, gen):
        h, w = x.shape[-2:]
        k, m = self.size, self.margin
        if k + m > min(h, w):
            raise ConfigurationError(f"{k}x{k} patch does not fit a {h}x{w} image")
        rows = slice(h - m - k, h - m) if "bottom" in self.location else slice(m, m + k)
        cols = slice(w - m - k, w - m) if "right" in self.location else slice(m, m + k)
        out = x.clone()
        out[..., rows, cols] = self.pattern_tensor().to(x.dtype)
        return out


@dataclass
class BlendTrigger(Trigger):
    """Alpha-blend a full-size pattern (defaults to seeded Gaussian noise)."""

    variant: ClassVar[str] = "blend"
    alpha: float = 0.2
    pattern_path: str | None = None
    seed: int = 0

    def pattern_tensor(self, shape) -> torch.Tensor:
        if self.pattern_path:
            return load_pattern(self.pattern_path, shape)
        return gaussian_pattern(shape, self.seed)

    def _apply(self, x, phase, gen):
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.alpha == 0:
            return x.clone()
        p = self.pattern_tensor(tuple(x.shape[1:])).to(x.dtype)
        return (1 - self.alpha) * x + self.alpha * p


def floyd_steinberg(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Error-diffusion quantisation of N x C x H x W images to ``levels`` grey levels."""
    q = float(levels - 1)
    img = x.clone().double()
    h, w = img.shape[-2:]
    for i in range(h):
        for j in range(w):
            old = img[..., i, j]
            new = torch.round(old.clamp(0, 1) * q) / q
            err = old - new
            img[..., i, j] = new
            if j + 1 < w:
                img[..., i, j + 1] += err * 7 / 16
            if i + 1 < h:
                if j > 0:
                    img[..., i + 1, j - 1] += err * 3 / 16
                img[..., i + 1, j] += err * 5 / 16
                if j + 1 < w:
                    img[..., i + 1, j + 1] += err * 1 / 16
    return img.to(x.dtype)


@dataclass
class QuantDitherTrigger(Trigger):
    """Colour-depth reduction with optional dithering (BppAttack)."""

    variant: ClassVar[str] = "quant_dither"
    bits: int = 3
    dither: bool = True

    def _apply(self, x, phase, gen):
        levels = 2 ** self.bits
        if self.dither:
            return floyd_steinberg(x, levels)
        q = levels - 1
        return torch.round(x * q) / q


@dataclass
class WarpTrigger(Trigger):
    """Smooth elastic warp from a seeded random control grid (WaNet)."""

    variant: ClassVar[str] = "warp"
    k: int = 4
    s: float = 0.5
    grid_seed: int = 0

    def flow_grid(self, h: int, w: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(self.grid_seed)
        ins = torch.rand(1, 2, self.k, self.k, generator=gen) * 2 - 1
        ins = ins / ins.abs().mean()
        noise = F.interpolate(ins, size=(h, w), mode="bicubic", align_corners=True).permute(0, 2, 3, 1)
        ys, xs = torch.meshgrid(torch.linspace(-1, 1, h), torch.linspace(-1, 1, w), indexing="ij")
        identity = torch.stack((xs, ys), dim=-1)[None]
        return (identity + self.s * noise / h).clamp(-1, 1)

    def _apply(self, x, phase, gen):
        if self.k < 2:
            raise ConfigurationError("warp control grid needs k >= 2")
        grid = self.flow_grid(*x.shape[-2:]).to(x.dtype).expand(x.shape[0], -1, -1, -1)
        return F.grid_sample(x, grid, mode="bilinear", align_corners=True)


@dataclass
class AdaptiveBlendTrigger(Trigger):
    """Blend split into a pieces x pieces grid; training applies a random subset (Adap-Blend)."""

    variant: ClassVar[str] = "adaptive_blend"
    alpha: float = 0.2
    pattern_path: str | None = None
    pieces: int = 4
    train_ratio: float = 0.5
    seed: int = 0

    def _apply(self, x, phase, gen):
        n, c, h, w = x.shape
        if self.pieces > min(h, w):
            raise ConfigurationError("more trigger pieces than pixels")
        p = (load_pattern(self.pattern_path, (c, h, w)) if self.pattern_path
             else gaussian_pattern((c, h, w), self.seed)).to(x.dtype)
        total = self.pieces ** 2
        if phase == "test":
            keep = torch.ones(n, total, dtype=torch.bool)
        else:
            gen = gen if gen is not None else torch.Generator().manual_seed(self.seed)
            k = int(round(self.train_ratio * total))
            order = torch.argsort(torch.rand(n, total, generator=gen), dim=1)
            keep = torch.zeros(n, total, dtype=torch.bool).scatter_(1, order[:, :k], True)
        ri = torch.arange(h) * self.pieces // h
        ci = torch.arange(w) * self.pieces // w
        piece_of = (ri[:, None] * self.pieces + ci[None, :]).flatten()
        region = keep[:, piece_of].view(n, 1, h, w).to(x.dtype)
        return x + region * self.alpha * (p - x)


TRIGGERS = {t.variant: t for t in (PatchTrigger, BlendTrigger, QuantDitherTrigger, WarpTrigger,
                                   AdaptiveBlendTrigger)}


def trigger_from_dict(d: dict) -> Trigger:
    d = dict(d)
    variant = d.pop("variant", None)
    if variant not in TRIGGERS:
        raise ConfigurationError(f"unknown trigger variant {variant!r}")
    return TRIGGERS[variant](**d)


def apply_trigger(x: torch.Tensor, trigger: Trigger, phase: str = "test",
                  gen: torch.Generator | None = None) -> torch.Tensor:
    return trigger.apply(x, phase, gen)


@dataclass(frozen=True)
class LabelMap:
    mode: str = "all_to_one"
    target: int = 0

    def __post_init__(self):
        if self.mode not in ("all_to_one", "all_to_all"):
            raise ConfigurationError(f"unknown label map mode {self.mode!r}")

    def __call__(self, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if self.mode == "all_to_one":
            return torch.full_like(labels, self.target)
        return (labels + 1) % num_classes


@dataclass
class PoisonSpec:
    trigger: Trigger
    label_map: LabelMap = field(default_factory=LabelMap)
    rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ConfigurationError("poisoning rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"trigger": self.trigger.to_dict(), "label_map": asdict(self.label_map),
                "rate": self.rate, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonSpec":
        return cls(trigger_from_dict(d["trigger"]), LabelMap(**d.get("label_map", {})),
                   d.get("rate", 0.05), d.get("seed", 0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PoisonSpec":
        return cls.from_dict(json.loads(text))


def poison_count(rate: float, n: int) -> int:
    return int(math.floor(rate * n + 0.5))


@dataclass
class PoisonedData:
    data: Batch
    poisoned: torch.Tensor  # bool per row of ``data``
    source_index: torch.Tensor  # row of the original dataset each sample came from


def poison_dataset(dataset: Batch, spec: PoisonSpec, num_classes: int) -> PoisonedData:
    """Dirty-label poisoning: trigger and relabel ``round(rate * N)`` samples chosen without replacement."""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot poison an empty dataset")
    gen = torch.Generator().manual_seed(spec.seed)
    chosen = torch.randperm(n, generator=gen)[:poison_count(spec.rate, n)]
    x, y = dataset.inputs.clone(), dataset.labels.clone()
    if len(chosen):
        x[chosen] = spec.trigger.apply(x[chosen], "train", gen)
        y[chosen] = spec.label_map(y[chosen], num_classes)
    flag = torch.zeros(n, dtype=torch.bool)
    flag[chosen] = True
    order = torch.randperm(n, generator=gen)
    return PoisonedData(Batch(x[order], y[order]), flag[order], order)


@dataclass
class SplitRecord:
    train_index: list[int]
    val_index: list[int]
    val_accuracy: float


def train_backdoor(model: LayeredClassifier, poisoned: Batch, hyper: TrainHyper,
                   val_fraction: float = 0.1) -> tuple[LayeredClassifier, SplitRecord]:
    """Train on 90% of the (poisoned) data, keeping 10% aside for validation."""
    n = len(poisoned)
    gen = torch.Generator().manual_seed(hyper.seed + 7919)
    perm = torch.randperm(n, generator=gen)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train(model, poisoned.subset(train_idx), hyper)
    val_acc = benign_accuracy(model, poisoned.subset(val_idx)) if n_val else float("nan")
    return model, SplitRecord(sorted(train_idx.tolist()), sorted(val_idx.tolist()), val_acc)


def benign_accuracy(model: LayeredClassifier, data: Batch) -> float:
    if len(data) == 0:
        raise EvaluationError("benign accuracy on an empty set")
    return (predict(model, data.inputs) == data.labels).float().mean().item()


def asr(model: LayeredClassifier, data: Batch, spec: PoisonSpec) -> float:
    """Fraction of eligible triggered test inputs classified as the attacker's label."""
    lm = spec.label_map
    eligible = data.labels != lm.target if lm.mode == "all_to_one" else torch.ones(len(data), dtype=torch.bool)
    if not eligible.any():
        raise EvaluationError("no samples eligible for attack success rate")
    x = spec.trigger.apply(data.inputs[eligible], "test")
    wanted = lm(data.labels[eligible], model.num_classes)
    return (predict(model, x) == wanted).float().mean().item()
