"""Backdoor verdicts from adversarial neuron noise plus a decoupling mask.

Also holds the trigger-inversion baseline (per-class input-space masks
scored with a median-absolute-deviation anomaly index).
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from bannoise.decouple import feature_loss_diagnostics, masked_noised_predict, optimize_mask
from bannoise.errors import ConfigurationError, EvaluationError, OptimizationError
from bannoise.model import Batch, LayeredClassifier, ParamSelection
from bannoise.noise import frozen, pgd_maximize

log = logging.getLogger(__name__)

MODES = ("all_to_one", "all_to_all")
MODE_ALIASES = {"a2o": "all_to_one", "a2a": "all_to_all", "all_to_one": "all_to_one", "all_to_all": "all_to_all"}
MAD_SCALE = 1.4826
MAD_FLOOR = 1e-9
NC_THRESHOLD = 2.0


def canonical_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ConfigurationError(f"unknown detection mode {mode!r}") from None


def concentration_all_to_one(pred: torch.Tensor, labels: torch.Tensor, num_classes: int) -> tuple[float, int]:
    """Largest share of other-class samples that land on a single class, and that class."""
    best, target = 0.0, 0
    for c in range(num_classes):
        others = labels != c
        n = int(others.sum())
        if n == 0:
            continue
        rate = (pred[others] == c).sum().item() / n
        if rate > best:
            best, target = rate, c
    return best, target


def per_class_shift_rates(pred: torch.Tensor, labels: torch.Tensor, num_classes: int) -> dict[int, float]:
    """For each class y, the fraction of its samples predicted as (y + 1) mod C."""
    rates = {}
    for y in range(num_classes):
        sel = labels == y
        n = int(sel.sum())
        if n == 0:
            raise EvaluationError(f"class {y} has no samples in the validation data")
        rates[y] = (pred[sel] == (y + 1) % num_classes).sum().item() / n
    return rates


@dataclass
class DetectionVerdict:
    backdoored: bool
    mode: str
    target_estimate: int | dict
    concentration: float
    tau: float
    diagnostics: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.target_estimate, dict):
            d["target_estimate"] = {str(k): v for k, v in self.target_estimate.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionVerdict":
        d = dict(d)
        if isinstance(d["target_estimate"], dict):
            d["target_estimate"] = {int(k): int(v) for k, v in d["target_estimate"].items()}
        return cls(**d)


def verdict_from_predictions(pred: torch.Tensor, labels: torch.Tensor, num_classes: int, tau: float,
                             mode: str) -> DetectionVerdict:
    mode = canonical_mode(mode)
    if mode == "all_to_one":
        conc, target = concentration_all_to_one(pred, labels, num_classes)
        diag = {}
    else:
        rates = per_class_shift_rates(pred, labels, num_classes)
        conc = sum(rates.values()) / num_classes
        target = {y: (y + 1) % num_classes for y in range(num_classes)}
        diag = {"per_class_rates": {str(k): v for k, v in rates.items()}, "min_rate": min(rates.values())}
    return DetectionVerdict(conc >= tau, mode, target, conc, tau, diag)


@dataclass
class DetectSettings:
    epsilon: float = 0.3
    tau: float = 0.5
    mode: str = "all_to_one"
    seed: int = 0
    lambda1: float = 0.75
    pgd_steps: int = 30
    signed: bool = False
    mask_epochs: int = 20
    mask_lr: float = 0.01
    selection: ParamSelection = field(default_factory=ParamSelection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = self.selection.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectSettings":
        d = dict(d)
        if "selection" in d:
            d["selection"] = ParamSelection.from_dict(d["selection"])
        return cls(**d)


def detect(model: LayeredClassifier, clean_val_data: Batch, epsilon: float = 0.3, tau: float = 0.5,
           mode: str = "all_to_one", seed: int = 0, settings: DetectSettings | None = None) -> DetectionVerdict:
    """Noise, then mask, then score the masked noised predictions on ``clean_val_data``.

    The explicit arguments override the matching fields of ``settings``.
    """
    s = settings or DetectSettings()
    mode = canonical_mode(mode)
    if len(clean_val_data) == 0:
        raise ConfigurationError("clean validation data is empty")
    clean_val_data.check_labels(model.num_classes)
    if mode == "all_to_all":
        # fail before spending time on optimisation
        present = set(clean_val_data.labels.tolist())
        for y in range(model.num_classes):
            if y not in present:
                raise EvaluationError(f"class {y} has no samples in the validation data")

    t0 = time.perf_counter()
    noise = pgd_maximize(model, clean_val_data, epsilon, steps=s.pgd_steps, seed=seed,
                         selection=s.selection, signed=s.signed)
    mask = optimize_mask(model, clean_val_data, lambda1=s.lambda1, epochs=s.mask_epochs, lr=s.mask_lr, seed=seed)
    logits = torch.cat([masked_noised_predict(model, noise, mask, b.inputs)
                        for b in clean_val_data.batches(512)])
    pred = logits.argmax(1)
    verdict = verdict_from_predictions(pred, clean_val_data.labels, model.num_classes, tau, mode)
    verdict.wall_clock_seconds = time.perf_counter() - t0

    diag = asdict(feature_loss_diagnostics(model, mask, clean_val_data))
    diag["noise_gain"] = noise.gain
    diag["noise_loss"] = noise.loss_trace[-1] if noise.loss_trace else float("nan")
    diag.update(verdict.diagnostics)
    verdict.diagnostics = diag
    log.info("detect: mode %s concentration %.3f tau %.2f -> %s", mode, verdict.concentration, tau,
             "backdoored" if verdict.backdoored else "clean")
    return verdict


def calibrate_tau(clean_models: Sequence[LayeredClassifier], clean_val_data: Batch, margin: float = 0.1,
                  **detect_kwargs) -> float:
    """Threshold just above the highest concentration seen on known-clean models."""
    if not clean_models:
        raise ConfigurationError("calibration needs at least one known-clean model")
    detect_kwargs.pop("tau", None)
    highest = max(detect(m, clean_val_data, tau=1.0, **detect_kwargs).concentration for m in clean_models)
    return highest + margin


# zoo-level reporting

@dataclass
class ZooEntry:
    name: str
    attack: str
    backdoored: bool
    verdict: DetectionVerdict | None = None
    error: str | None = None


@dataclass
class ZooRow:
    attack: str
    models: int
    models_flagged: int
    correct: int
    detection_accuracy: float
    mean_wall_clock: float


@dataclass
class ZooReport:
    method: str
    rows: list[ZooRow]
    entries: list[ZooEntry] = field(default_factory=list)

    @property
    def average_accuracy(self) -> float:
        return sum(r.detection_accuracy for r in self.rows) / len(self.rows) if self.rows else 0.0

    def row(self, attack: str) -> ZooRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "average_accuracy": self.average_accuracy,
            "rows": [asdict(r) for r in self.rows],
            "entries": [{"name": e.name, "attack": e.attack, "backdoored": e.backdoored, "error": e.error,
                         "verdict": e.verdict.to_dict() if e.verdict else None} for e in self.entries],
        }

    def to_csv(self) -> str:
        """One line per method, two columns (flagged count, accuracy) per attack, then the average."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["method"]
        for r in self.rows:
            header += [f"{r.attack}_Bd", f"{r.attack}_Acc"]
        w.writerow(header + ["Avg_Acc"])
        line = [self.method]
        for r in self.rows:
            line += [r.models_flagged, f"{100 * r.detection_accuracy:.2f}"]
        w.writerow(line + [f"{100 * self.average_accuracy:.2f}"])
        return buf.getvalue()


def summarize_zoo(entries: Sequence[ZooEntry], method: str = "BAN") -> ZooReport:
    groups: dict[str, list[ZooEntry]] = defaultdict(list)
    for e in entries:
        groups[e.attack].append(e)
    rows = []
    for attack, group in groups.items():
        judged = [e for e in group if e.verdict is not None]
        flagged = sum(e.verdict.backdoored for e in judged)
        # a model whose detection failed counts as a wrong verdict
        correct = sum(e.verdict.backdoored == e.backdoored for e in judged)
        times = [e.verdict.wall_clock_seconds for e in judged]
        rows.append(ZooRow(attack, len(group), flagged, correct, correct / len(group),
                           statistics.fmean(times) if times else 0.0))
    return ZooReport(method, rows, list(entries))


def detect_zoo(models: Sequence[tuple[str, str, bool, LayeredClassifier]], clean_val_data: Batch,
               settings: DetectSettings | None = None, method: str = "BAN") -> ZooReport:
    """Run ``detect`` on (name, attack, is_backdoored, model) tuples and group rows by attack."""
    s = settings or DetectSettings()
    if not models:
        raise ConfigurationError("detect_zoo needs at least one model")
    entries = []
    for name, attack, truth, model in models:
        try:
            v = detect(model, clean_val_data, s.epsilon, s.tau, s.mode, s.seed, settings=s)
            entries.append(ZooEntry(name, attack, truth, v))
        except OptimizationError as exc:
            log.error("detection failed for %s: %s", name, exc)
            entries.append(ZooEntry(name, attack, truth, None, str(exc)))
    return summarize_zoo(entries, method)


# trigger-inversion baseline

@dataclass
class InvertedTrigger:
    target: int
    mask: torch.Tensor
    pattern: torch.Tensor
    inverted_asr: float
    mask_l1: float


def _stamp(x: torch.Tensor, mask: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
    return (1 - mask) * x + mask * pattern


def nc_invert(model: LayeredClassifier, clean_data: Batch, target_class: int, lambda_nc: float = 0.01,
              epochs: int = 30, lr: float = 0.1, batch_size: int = 64, seed: int = 0) -> InvertedTrigger:
    """Smallest input mask and pattern that send ``clean_data`` to ``target_class``.

    Mask (H x W, shared over channels) and pattern are parametrised through
    ``tanh`` so both stay inside [0, 1]; the loss is the mean cross-entropy
    to the target plus ``lambda_nc`` times the mask's L1 norm.
    """
    if not 0 <= target_class < model.num_classes:
        raise ConfigurationError(f"target class {target_class} out of range")
    if lambda_nc < 0:
        raise ConfigurationError("lambda_nc must be non-negative")
    c, h, w = model.input_shape
    gen = torch.Generator().manual_seed(seed)
    mask_raw = (torch.rand(1, h, w, generator=gen) * 2 - 1).requires_grad_(True)
    pattern_raw = (torch.rand(c, h, w, generator=gen) * 2 - 1).requires_grad_(True)
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))
    x_all = clean_data.inputs
    step = 0
    with frozen(model):
        for _ in range(epochs):
            perm = torch.randperm(len(x_all), generator=gen)
            for start in range(0, len(x_all), batch_size):
                xb = x_all[perm[start:start + batch_size]]
                m = (torch.tanh(mask_raw) + 1) / 2
                p = (torch.tanh(pattern_raw) + 1) / 2
                logits = model(_stamp(xb, m, p))
                target = torch.full((len(xb),), target_class, dtype=torch.long)
                loss = F.cross_entropy(logits, target) + lambda_nc * m.sum()
                if not torch.isfinite(loss):
                    raise OptimizationError(f"trigger inversion diverged for class {target_class}", step=step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
        with torch.no_grad():
            m = (torch.tanh(mask_raw) + 1) / 2
            p = (torch.tanh(pattern_raw) + 1) / 2
            pred = torch.cat([model(_stamp(b.inputs, m, p)).argmax(1) for b in clean_data.batches(512)])
    others = clean_data.labels != target_class
    hit = pred[others] == target_class if others.any() else pred == target_class
    return InvertedTrigger(target_class, m.detach(), p.detach(), hit.float().mean().item(), m.sum().item())


def anomaly_indices(l1_norms: Sequence[float], mad_floor: float = MAD_FLOOR) -> list[float]:
    """|median - x| / (1.4826 * MAD) for each value; MAD is floored to avoid division by zero."""
    med = statistics.median(l1_norms)
    mad = statistics.median([abs(v - med) for v in l1_norms])
    scale = MAD_SCALE * max(mad, mad_floor)
    return [abs(med - v) / scale for v in l1_norms]


@dataclass
class NCVerdict:
    backdoored: bool
    target_estimate: int | None
    anomaly_index: list[float]
    mask_l1: list[float]
    inverted_asr: list[float]
    threshold: float = NC_THRESHOLD
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def nc_verdict(l1_norms: Sequence[float], inverted_asr: Sequence[float] = (),
               threshold: float = NC_THRESHOLD) -> NCVerdict:
    idx = anomaly_indices(l1_norms)
    worst = max(range(len(idx)), key=idx.__getitem__)
    flagged = idx[worst] > threshold
    return NCVerdict(flagged, worst if flagged else None, idx, list(l1_norms), list(inverted_asr), threshold)


def nc_detect(model: LayeredClassifier, clean_data: Batch, lambda_nc: float = 0.01, epochs: int = 30,
              seed: int = 0, threshold: float = NC_THRESHOLD) -> NCVerdict:
    t0 = time.perf_counter()
    inv = [nc_invert(model, clean_data, c, lambda_nc, epochs, seed=seed + c) for c in range(model.num_classes)]
    v = nc_verdict([t.mask_l1 for t in inv], [t.inverted_asr for t in inv], threshold)
    v.wall_clock_seconds = time.perf_counter() - t0
    return v
