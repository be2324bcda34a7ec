"""Figures: latent projections under noise, accuracy under noise, lambda1 sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from bannoise.decouple import SweepRow, masked_noised_predict, optimize_mask  # noqa: E402
from bannoise.detect import DetectSettings  # noqa: E402
from bannoise.errors import PlottingError  # noqa: E402
from bannoise.model import Batch, LayeredClassifier, predict  # noqa: E402
from bannoise.noise import frozen, pgd_maximize, zero_noise  # noqa: E402

KINDS = ("feature_projection", "accuracy_vs_noise", "lambda1_sweep")


@dataclass
class PlotResult:
    kind: str
    paths: list[Path] = field(default_factory=list)
    panels: int = 0
    values: dict = field(default_factory=dict)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, dpi=100)
    plt.close(fig)
    tmp.replace(path)
    return path


def principal_projection(feats: torch.Tensor, dims: int = 2) -> np.ndarray:
    """Project rows onto their top principal components (sign fixed so the largest loading is positive)."""
    x = feats.reshape(len(feats), -1).double().numpy()
    x = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:dims]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])
    flip[flip == 0] = 1
    return x @ (comps * flip[:, None]).T


def _noise_at(model, data, level, settings: DetectSettings, seed):
    if level == 0:
        return zero_noise(model, settings.selection)
    return pgd_maximize(model, data, level, steps=settings.pgd_steps, seed=seed,
                        selection=settings.selection, signed=settings.signed)


def feature_projection(models: Sequence[tuple[str, LayeredClassifier]], data: Batch, epsilon: float,
                       out_dir: str | Path, settings: DetectSettings | None = None, seed: int = 0) -> PlotResult:
    """One row per model, one panel per noise level in {0, eps/2, eps}, points coloured by predicted class."""
    if not models:
        raise PlottingError("feature_projection needs at least one model")
    if len(data) < 3:
        raise PlottingError("feature_projection needs at least three samples")
    s = settings or DetectSettings()
    levels = (0.0, epsilon / 2, epsilon)
    fig, axes = plt.subplots(len(models), len(levels), figsize=(3.2 * len(levels), 3 * len(models)),
                             squeeze=False)
    panels = 0
    for r, (name, model) in enumerate(models):
        for c, level in enumerate(levels):
            noise = _noise_at(model, data, level, s, seed)
            with frozen(model), torch.no_grad():
                feats, scales = model.perturbed_features(data.inputs, noise.delta, noise.xi, noise.selection)
                pred = model.head(feats, scales).argmax(1).numpy()
            xy = principal_projection(feats)
            ax = axes[r][c]
            ax.scatter(xy[:, 0], xy[:, 1], c=pred, cmap="tab10", s=6, vmin=0, vmax=max(9, model.num_classes - 1))
            ax.set_title(f"{name}  noise {level:.3g}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
            panels += 1
    fig.tight_layout()
    path = _save(fig, Path(out_dir) / "feature_projection.png")
    return PlotResult("feature_projection", [path], panels)


def accuracy_vs_noise(models: Sequence[tuple[str, LayeredClassifier, bool]], data: Batch, out_dir: str | Path,
                      settings: DetectSettings | None = None) -> PlotResult:
    """Clean accuracy of each model with no noise, with noise, and with noise plus the negative mask."""
    if not models:
        raise PlottingError("accuracy_vs_noise needs at least one model")
    s = settings or DetectSettings()
    values = {}
    for name, model, backdoored in models:
        noise = pgd_maximize(model, data, s.epsilon, steps=s.pgd_steps, seed=s.seed, selection=s.selection,
                             signed=s.signed)
        mask = optimize_mask(model, data, lambda1=s.lambda1, epochs=s.mask_epochs, lr=s.mask_lr, seed=s.seed)
        with frozen(model), torch.no_grad():
            noised = model.perturbed_forward(data.inputs, noise.delta, noise.xi, noise.selection).argmax(1)
        masked = masked_noised_predict(model, noise, mask, data.inputs).argmax(1)
        y = data.labels
        values[name] = {
            "backdoored": bool(backdoored),
            "clean": (predict(model, data.inputs) == y).float().mean().item(),
            "noise": (noised == y).float().mean().item(),
            "noise_mask": (masked == y).float().mean().item(),
        }
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(values) + 2), 3.5))
    xs = np.arange(len(values))
    names = list(values)
    ax.scatter(xs, [values[n]["noise"] for n in names], color="tab:blue", label="noise")
    ax.scatter(xs, [values[n]["noise_mask"] for n in names], color="tab:red", label="noise + mask")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("clean accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = _save(fig, Path(out_dir) / "accuracy_vs_noise.png")
    return PlotResult("accuracy_vs_noise", [path], 1, values)


def lambda1_sweep(rows: Sequence[SweepRow], out_dir: str | Path) -> PlotResult:
    if not rows:
        raise PlottingError("lambda1_sweep needs sweep rows; run select_lambda1 first")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    by_attack: dict[str, list[SweepRow]] = {}
    for r in rows:
        by_attack.setdefault(r.attack or "model", []).append(r)
    for attack, rs in by_attack.items():
        ax.plot([r.lambda1 for r in rs], [r.l1_norm for r in rs], marker="o", label=attack)
    ax.set_xlabel("lambda1")
    ax.set_ylabel("mask L1 norm")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = _save(fig, Path(out_dir) / "lambda1_sweep.png")
    return PlotResult("lambda1_sweep", [path], 1, {"rows": [r.__dict__ for r in rows]})
