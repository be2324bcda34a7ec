"""Feature-mask decoupling of benign and backdoor features.

The mask ``m`` lives on the latent feature. Minimising
``CE(f_L(g(x) * m)) - CE(f_L(g(x) * (1 - m))) + lambda1 * mean(m)`` keeps the
benign features in ``m`` and pushes what is left into ``1 - m``. The penalty
is the mean of ``m`` rather than its sum so that ``lambda1`` is on the same
scale as the cross-entropy terms regardless of latent size.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from bannoise.errors import ConfigurationError, OptimizationError
from bannoise.model import Batch, LayeredClassifier
from bannoise.noise import NeuronNoise, frozen

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(10))


@dataclass
class FeatureMask:
    m: torch.Tensor
    lambda1: float = 0.75

    @property
    def l1_norm(self) -> float:
        return self.m.abs().sum().item()

    @property
    def l1_fraction(self) -> float:
        return self.l1_norm / self.m.numel()


@dataclass
class MaskDiagnostics:
    l1_norm: float
    l1_fraction: float
    pos_loss: float
    neg_loss: float


@torch.no_grad()
def _latent(model: LayeredClassifier, data: Batch, batch_size: int = 512) -> torch.Tensor:
    with frozen(model):
        return torch.cat([model.features(b.inputs) for b in data.batches(batch_size)])


def mask_objective(model: LayeredClassifier, feats: torch.Tensor, labels: torch.Tensor, m: torch.Tensor,
                   lambda1: float) -> torch.Tensor:
    """Positive-branch loss minus negative-branch loss plus the mean-L1 penalty."""
    return (F.cross_entropy(model.head(feats * m), labels)
            - F.cross_entropy(model.head(feats * (1 - m)), labels)
            + lambda1 * m.abs().mean())


def optimize_mask(model: LayeredClassifier, clean_data: Batch, lambda1: float = 0.75, epochs: int = 20,
                  lr: float = 0.01, batch_size: int = 32, seed: int = 0, init: float = 0.5) -> FeatureMask:
    """Adam search for the decoupling mask; entries are clamped to [0, 1] after every step."""
    if lambda1 < 0:
        raise ConfigurationError("lambda1 must be non-negative")
    feats = _latent(model, clean_data)
    labels = clean_data.labels
    m = torch.full(model.latent_shape, float(init), dtype=feats.dtype, requires_grad=True)
    opt = torch.optim.Adam([m], lr=lr)
    gen = torch.Generator().manual_seed(seed)
    step = 0
    with frozen(model):
        for _ in range(epochs):
            perm = torch.randperm(len(feats), generator=gen)
            for start in range(0, len(feats), batch_size):
                idx = perm[start:start + batch_size]
                f, y = feats[idx], labels[idx]
                loss = mask_objective(model, f, y, m, lambda1)
                if not torch.isfinite(loss):
                    raise OptimizationError("non-finite mask loss", step=step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    m.clamp_(0, 1)
                step += 1
    return FeatureMask(m.detach(), lambda1)


def btidbf_mask(model: LayeredClassifier, clean_data: Batch, **kwargs) -> FeatureMask:
    """Unregularised decoupling: the objective with ``lambda1 = 0``, which drives the mask dense."""
    kwargs.pop("lambda1", None)
    return optimize_mask(model, clean_data, lambda1=0.0, **kwargs)


def _check_mask(model: LayeredClassifier, mask: FeatureMask) -> torch.Tensor:
    m = mask.m
    if tuple(m.shape) != tuple(model.latent_shape):
        raise ConfigurationError(f"mask shape {tuple(m.shape)} != latent shape {model.latent_shape}")
    return m


def masked_noised_predict(model: LayeredClassifier, noise: NeuronNoise, mask: FeatureMask,
                          x: torch.Tensor) -> torch.Tensor:
    """Logits of the noised network when only the negative-mask features reach the head."""
    m = _check_mask(model, mask)
    noise.check(model)
    with frozen(model), torch.no_grad():
        feats, scales = model.perturbed_features(x, noise.delta, noise.xi, noise.selection)
        return model.head(feats * (1 - m), scales)


@torch.no_grad()
def feature_loss_diagnostics(model: LayeredClassifier, mask: FeatureMask, clean_data: Batch) -> MaskDiagnostics:
    m = _check_mask(model, mask)
    feats = _latent(model, clean_data)
    with frozen(model):
        pos = F.cross_entropy(model.head(feats * m), clean_data.labels).item()
        neg = F.cross_entropy(model.head(feats * (1 - m)), clean_data.labels).item()
    return MaskDiagnostics(mask.l1_norm, mask.l1_fraction, pos, neg)


@dataclass
class SweepRow:
    attack: str
    lambda1: float
    l1_norm: float
    l1_fraction: float
    pos_loss: float
    neg_loss: float


def select_lambda1(model: LayeredClassifier, clean_data: Batch, grid: Sequence[float] = DEFAULT_GRID,
                   attack: str = "", collapse_below: float = 0.5, **mask_kwargs) -> tuple[float, list[SweepRow]]:
    """Sweep ``lambda1`` and return a value just past the mask-collapse knee.

    The knee is the first grid point whose mask keeps less than
    ``collapse_below`` of the latent; the returned value is the midpoint
    between it and the previous grid point. Without a collapse the largest
    grid value is returned with a warning.
    """
    grid = list(grid)
    if grid != sorted(grid):
        raise ConfigurationError("lambda1 grid must be ascending")
    rows = []
    for lam in grid:
        mask = optimize_mask(model, clean_data, lambda1=lam, **mask_kwargs)
        d = feature_loss_diagnostics(model, mask, clean_data)
        rows.append(SweepRow(attack, lam, d.l1_norm, d.l1_fraction, d.pos_loss, d.neg_loss))
        log.info("lambda1 %.2f: l1 %.2f (%.3f) pos %.3f neg %.3f", lam, d.l1_norm, d.l1_fraction,
                 d.pos_loss, d.neg_loss)
    for i, row in enumerate(rows):
        if row.l1_fraction < collapse_below:
            chosen = grid[0] if i == 0 else (grid[i - 1] + grid[i]) / 2
            return round(chosen, 6), rows
    warnings.warn("mask never collapsed over the lambda1 grid; returning the largest value", stacklevel=2)
    return grid[-1], rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["attack", "lambda1", "l1_norm", "pos_loss", "neg_loss"]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            d = asdict(r)
            w.writerow({k: (f"{d[k]:.4f}" if isinstance(d[k], float) else d[k]) for k in fields})
    tmp.replace(path)
    return path
