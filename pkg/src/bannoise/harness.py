"""Model zoo orchestration, zoo-level detection and timing tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from bannoise.attacks import PoisonSpec, asr, benign_accuracy, poison_dataset, train_backdoor
from bannoise.checkpoint import atomic_write_bytes, atomic_write_json, load_checkpoint, save_checkpoint
from bannoise.config import ExperimentConfig, derive_seed
from bannoise.data import DatasetHandle
from bannoise.detect import DetectSettings, ZooEntry, ZooReport, detect, nc_detect, summarize_zoo
from bannoise.errors import BanError, ConfigurationError, IngestionError
from bannoise.model import LayeredClassifier, build_model

log = logging.getLogger(__name__)

ZOO_MANIFEST = "zoo.json"
CLEAN = "clean"


def _seed32(root: int, *names) -> int:
    return derive_seed(root, *names) % (2 ** 31)


def train_one(cfg: ExperimentConfig, data: DatasetHandle, name: str, spec: PoisonSpec | None):
    """Train one model named ``name``; every random stream is derived from the root seed and the name."""
    root = cfg.root_seed
    model = build_model(cfg.arch, data.num_classes, data.image_shape, seed=_seed32(root, name, "init"),
                        **cfg.arch_options)
    hyper = replace(cfg.train, seed=_seed32(root, name, "train"))
    train_set = data.train
    if spec is not None:
        spec = replace(spec, seed=_seed32(root, name, "poison"))
        train_set = poison_dataset(data.train, spec, data.num_classes).data
    model, split = train_backdoor(model, train_set, hyper, cfg.val_fraction)
    return model, spec, hyper, split


def build_zoo(cfg: ExperimentConfig, data: DatasetHandle, out_dir: str | Path, n_clean: int | None = None,
              n_per_attack: int | None = None, attacks: Sequence[str] | None = None) -> dict:
    """Train and checkpoint clean and backdoored models; returns (and writes) the zoo manifest.

    A model whose training fails is recorded with its error and the zoo moves on.
    """
    n_clean = cfg.n_clean if n_clean is None else n_clean
    n_per_attack = cfg.n_per_attack if n_per_attack is None else n_per_attack
    names = list(cfg.attacks) if attacks is None else list(attacks)
    for a in names:
        if a not in cfg.attacks:
            raise ConfigurationError(f"attack {a!r} is not defined in the config")
    if n_clean < 0 or n_per_attack < 0 or (n_clean == 0 and (n_per_attack == 0 or not names)):
        raise ConfigurationError("zoo needs at least one model")
    out = Path(out_dir)
    jobs = [(f"{CLEAN}-{i}", CLEAN, None) for i in range(n_clean)]
    for a in names:
        jobs += [(f"{a}-{i}", a, cfg.attacks[a]) for i in range(n_per_attack)]

    models = []
    for name, attack, spec in jobs:
        entry = {"name": name, "attack": attack, "backdoored": spec is not None, "path": f"models/{name}"}
        t0 = time.perf_counter()
        try:
            model, used_spec, hyper, split = train_one(cfg, data, name, spec)
            entry["ba"] = benign_accuracy(model, data.test)
            entry["asr"] = asr(model, data.test, used_spec) if used_spec is not None else None
            entry["poison_spec"] = used_spec.to_dict() if used_spec is not None else None
            provenance = {"root_seed": cfg.root_seed, "name": name, "init": _seed32(cfg.root_seed, name, "init"),
                          "train": hyper.seed,
                          "poison": used_spec.seed if used_spec is not None else None}
            save_checkpoint(model, out / entry["path"], provenance,
                            extra={k: entry[k] for k in ("attack", "backdoored", "ba", "asr", "poison_spec")}
                            | {"train_hyper": hyper.to_dict(), "val_accuracy": split.val_accuracy})
        except BanError as exc:
            log.error("training %s failed: %s", name, exc)
            entry["error"] = str(exc)
        entry["train_seconds"] = time.perf_counter() - t0
        log.info("zoo: %s ba=%s asr=%s", name, entry.get("ba"), entry.get("asr"))
        models.append(entry)
    manifest = {"config": cfg.to_dict(), "models": models}
    atomic_write_json(out / ZOO_MANIFEST, manifest)
    return manifest


def read_zoo(zoo_dir: str | Path) -> dict:
    p = Path(zoo_dir) / ZOO_MANIFEST
    if not p.exists():
        raise IngestionError("zoo manifest not found", p)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError("corrupt zoo manifest", p) from exc


def load_zoo_models(zoo_dir: str | Path) -> list[tuple[dict, LayeredClassifier]]:
    """(manifest entry, model) for every successfully trained zoo member."""
    root = Path(zoo_dir)
    out = []
    for entry in read_zoo(root)["models"]:
        if entry.get("error"):
            continue
        model, _ = load_checkpoint(root / entry["path"])
        out.append((entry, model))
    return out


def detect_zoo_dir(zoo_dir: str | Path, data: DatasetHandle, settings: DetectSettings,
                   with_nc: bool = False) -> dict[str, ZooReport]:
    """Run detection (and optionally the inversion baseline) over a stored zoo."""
    members = load_zoo_models(zoo_dir)
    val = data.val
    ours, nc = [], []
    for entry, model in members:
        truth = bool(entry["backdoored"])
        try:
            v = detect(model, val, settings.epsilon, settings.tau, settings.mode, settings.seed, settings=settings)
            ours.append(ZooEntry(entry["name"], entry["attack"], truth, v))
        except BanError as exc:
            ours.append(ZooEntry(entry["name"], entry["attack"], truth, None, str(exc)))
        if with_nc:
            try:
                nv = nc_detect(model, val, seed=settings.seed)
                nc.append(ZooEntry(entry["name"], entry["attack"], truth, _nc_as_verdict(nv, settings)))
            except BanError as exc:
                nc.append(ZooEntry(entry["name"], entry["attack"], truth, None, str(exc)))
    reports = {"BAN": summarize_zoo(ours, "BAN")}
    if with_nc:
        reports["NC"] = summarize_zoo(nc, "NC")
    return reports


def _nc_as_verdict(nv, settings):
    from bannoise.detect import DetectionVerdict

    top = max(nv.anomaly_index)
    return DetectionVerdict(nv.backdoored, "all_to_one", nv.target_estimate if nv.target_estimate is not None else -1,
                            min(1.0, top / (2 * nv.threshold)), 0.5,
                            {"anomaly_index": nv.anomaly_index, "mask_l1": nv.mask_l1}, nv.wall_clock_seconds)


def table_csv(reports: Mapping[str, ZooReport]) -> str:
    """Methods as rows, (flagged, accuracy) column pairs per attack; attack order follows the first report."""
    reports = list(reports.values())
    if not reports:
        return ""
    attacks = [r.attack for r in reports[0].rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"{a}_{k}" for a in attacks for k in ("Bd", "Acc")] + ["Avg_Acc"])
    for rep in reports:
        line = [rep.method]
        for a in attacks:
            row = rep.row(a)
            line += [row.models_flagged, f"{100 * row.detection_accuracy:.2f}"]
        w.writerow(line + [f"{100 * rep.average_accuracy:.2f}"])
    return buf.getvalue()


def timing_report(times: Mapping[str, Sequence[float]], path: str | Path | None = None) -> str:
    """Mean seconds per model for each method, fastest first."""
    rows = [(m, len(v), statistics.fmean(v)) for m, v in times.items() if len(v)]
    rows.sort(key=lambda r: (r[2], r[0]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "models", "mean_seconds"])
    for m, n, mean in rows:
        w.writerow([m, n, f"{mean:.4f}"])
    text = buf.getvalue()
    if path is not None:
        atomic_write_bytes(Path(path), text.encode())
    return text


def zoo_times(reports: Mapping[str, ZooReport]) -> dict[str, list[float]]:
    return {name: [e.verdict.wall_clock_seconds for e in rep.entries if e.verdict is not None]
            for name, rep in reports.items()}


def write_reports(reports: Mapping[str, ZooReport], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"json": out / "zoo_report.json", "csv": out / "table1.csv", "timing": out / "timing.csv"}
    atomic_write_json(paths["json"], {k: v.to_dict() for k, v in reports.items()})
    atomic_write_bytes(paths["csv"], table_csv(reports).encode())
    timing_report(zoo_times(reports), paths["timing"])
    return paths
