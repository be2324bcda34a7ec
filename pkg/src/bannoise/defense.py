"""Backdoor removal by fine-tuning against adversarial neuron noise.

The defended model minimises ``CE(f(x), y) + lambda2 * CE(f_noised(x), y)``
on a small clean set, where the noise is re-optimised by PGD at a fixed
cadence. ``plain_finetune`` is the same loop without the noise term.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from bannoise.attacks import PoisonSpec, asr, benign_accuracy
from bannoise.errors import ConfigurationError, DefenseError, InputError, OptimizationError
from bannoise.model import Batch, LayeredClassifier, ParamSelection, clone, random_shift
from bannoise.noise import NeuronNoise, pgd_maximize

log = logging.getLogger(__name__)

REFRESH = ("epoch", "step")


@dataclass
class DefenseConfig:
    lambda2: float = 0.5
    learning_rate: float = 0.005
    epochs: int = 25
    data_fraction: float = 0.05
    epsilon: float = 0.3
    noise_refresh: str = "epoch"
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    augment_shift: int = 1
    pgd_steps: int = 30
    signed: bool = True
    selection: ParamSelection = field(default_factory=ParamSelection)

    def __post_init__(self):
        if self.lambda2 < 0:
            raise ConfigurationError("lambda2 must be non-negative")
        if not 0 < self.data_fraction <= 1:
            raise ConfigurationError("data_fraction must be in (0, 1]")
        if self.noise_refresh not in REFRESH:
            raise ConfigurationError(f"noise_refresh must be one of {REFRESH}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = self.selection.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        d = dict(d)
        if "selection" in d:
            d["selection"] = ParamSelection.from_dict(d["selection"])
        return cls(**d)


@dataclass
class FinetuneTrace:
    """What happened during one fine-tuning run."""

    epochs_run: int = 0
    pgd_calls: int = 0
    epoch_loss: list[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0


@dataclass
class DefenseResult:
    ba_before: float
    asr_before: float
    ba_after: float
    asr_after: float
    epochs_run: int = 0
    wall_clock_seconds: float = 0.0

    def __post_init__(self):
        for name in ("ba_before", "asr_before", "ba_after", "asr_after"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a rate")

    @property
    def ba_drop(self) -> float:
        return self.ba_before - self.ba_after

    def to_dict(self) -> dict:
        return asdict(self)


def _refresh_noise(model, data, cfg: DefenseConfig, index: int, epoch: int) -> NeuronNoise:
    # each refresh gets its own generator seed, so no global RNG is consumed
    try:
        return pgd_maximize(model, data, cfg.epsilon, steps=cfg.pgd_steps, seed=cfg.seed * 1_000_003 + index,
                            selection=cfg.selection, signed=cfg.signed)
    except OptimizationError as exc:
        raise DefenseError(f"noise refresh failed: {exc}", epoch=epoch) from exc


def _finetune(model: LayeredClassifier, data: Batch, cfg: DefenseConfig, use_noise: bool,
              trace: FinetuneTrace | None) -> LayeredClassifier:
    if len(data) == 0:
        raise InputError("fine-tuning data is empty")
    data.check_labels(model.num_classes)
    trace = trace if trace is not None else FinetuneTrace()
    t0 = time.perf_counter()
    model = clone(model)
    if cfg.epochs <= 0:
        model.eval()
        return model
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    noise = None
    for epoch in range(cfg.epochs):
        if use_noise and cfg.noise_refresh == "epoch":
            noise = _refresh_noise(model, data, cfg, trace.pgd_calls, epoch)
            trace.pgd_calls += 1
        model.train()
        perm = torch.randperm(len(data), generator=gen)
        running = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = random_shift(data.inputs[idx], cfg.augment_shift, gen)
            y = data.labels[idx]
            loss = F.cross_entropy(model(x), y)
            if use_noise:
                if cfg.noise_refresh == "step":
                    noise = _refresh_noise(model, data, cfg, trace.pgd_calls, epoch)
                    trace.pgd_calls += 1
                    model.train()
                noised = model.perturbed_forward(x, noise.delta, noise.xi, noise.selection)
                loss = loss + cfg.lambda2 * F.cross_entropy(noised, y)
            if not torch.isfinite(loss):
                raise DefenseError("non-finite fine-tuning loss", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        trace.epoch_loss.append(running / len(data))
        trace.epochs_run += 1
    model.eval()
    trace.wall_clock_seconds = time.perf_counter() - t0
    return model


def noise_finetune(model: LayeredClassifier, clean_data: Batch, cfg: DefenseConfig,
                   trace: FinetuneTrace | None = None) -> LayeredClassifier:
    """Fine-tune a copy of ``model`` with the noise-consistency term; the input model is untouched.

    With ``lambda2 == 0`` the noise branch is skipped entirely, so the run is
    identical to ``plain_finetune`` with the same seed.
    """
    return _finetune(model, clean_data, cfg, cfg.lambda2 > 0, trace)


def plain_finetune(model: LayeredClassifier, clean_data: Batch, cfg: DefenseConfig,
                   trace: FinetuneTrace | None = None) -> LayeredClassifier:
    """Cross-entropy fine-tuning with the same optimiser settings; ``lambda2`` is ignored."""
    return _finetune(model, clean_data, cfg, False, trace)


def evaluate_defense(before_model: LayeredClassifier, after_model: LayeredClassifier, test_data: Batch,
                     spec: PoisonSpec, epochs_run: int = 0, wall_clock_seconds: float = 0.0) -> DefenseResult:
    return DefenseResult(
        ba_before=benign_accuracy(before_model, test_data),
        asr_before=asr(before_model, test_data, spec),
        ba_after=benign_accuracy(after_model, test_data),
        asr_after=asr(after_model, test_data, spec),
        epochs_run=epochs_run,
        wall_clock_seconds=wall_clock_seconds,
    )
