"""Experiment configuration and named seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from bannoise.attacks import PoisonSpec
from bannoise.data import DatasetHandle, load_directory_dataset, make_synthetic_dataset
from bannoise.defense import DefenseConfig
from bannoise.detect import DetectSettings
from bannoise.errors import ConfigurationError, IngestionError
from bannoise.model import ParamSelection, TrainHyper


def derive_seed(root: int, *names: object) -> int:
    """Stable 63-bit seed for a named stream under ``root`` (e.g. root -> "zoo" -> "clean-0" -> "train")."""
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    classes: int = 10
    per_class: int = 200
    image_size: int = 16
    hue_jitter: float = 0.1
    path: str | None = None
    layout: str = "folders"
    seed: int | None = None

    def build(self, root_seed: int) -> DatasetHandle:
        seed = self.seed if self.seed is not None else derive_seed(root_seed, "dataset") % (2 ** 32)
        if self.source == "synthetic":
            return make_synthetic_dataset(self.classes, self.per_class, self.image_size, seed=seed,
                                          hue_jitter=self.hue_jitter)
        if self.source == "directory":
            if not self.path:
                raise ConfigurationError("directory dataset needs a path")
            return load_directory_dataset(self.path, self.layout, seed=seed)
        raise ConfigurationError(f"unknown dataset source {self.source!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: str = "cnn"
    arch_options: dict = field(default_factory=dict)
    attacks: dict[str, PoisonSpec] = field(default_factory=dict)
    train: TrainHyper = field(default_factory=TrainHyper)
    val_fraction: float = 0.1
    detect: DetectSettings = field(default_factory=DetectSettings)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    n_clean: int = 4
    n_per_attack: int = 4
    root_seed: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "arch": self.arch,
            "arch_options": self.arch_options,
            "attacks": {k: v.to_dict() for k, v in self.attacks.items()},
            "train": self.train.to_dict(),
            "val_fraction": self.val_fraction,
            "detect": self.detect.to_dict(),
            "defense": self.defense.to_dict(),
            "n_clean": self.n_clean,
            "n_per_attack": self.n_per_attack,
            "root_seed": self.root_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "dataset" in d:
                d["dataset"] = DatasetConfig(**d["dataset"])
            if "attacks" in d:
                d["attacks"] = {k: PoisonSpec.from_dict(v) for k, v in d["attacks"].items()}
            if "train" in d:
                d["train"] = TrainHyper.from_dict(d["train"])
            if "detect" in d:
                d["detect"] = DetectSettings.from_dict(d["detect"])
            if "defense" in d:
                d["defense"] = DefenseConfig.from_dict(d["defense"])
        except TypeError as exc:
            raise ConfigurationError(f"bad config section: {exc}") from exc
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise IngestionError("config file not found", p)
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise IngestionError(f"config is not valid JSON ({exc.msg})", p) from exc


def desk_config(root_seed: int = 0) -> ExperimentConfig:
    """Small CPU-scale experiment: 10-class 16x16 shapes, BN CNN, BadNets / Blend / all-to-all BadNets."""
    from bannoise.attacks import BlendTrigger, LabelMap, PatchTrigger

    return ExperimentConfig(
        dataset=DatasetConfig(classes=10, per_class=200, image_size=16, hue_jitter=0.1),
        arch="cnn",
        arch_options={"channels": [32, 64, 128], "norm": True, "global_pool": True},
        attacks={
            "badnets": PoisonSpec(PatchTrigger(size=3), LabelMap("all_to_one", 0), rate=0.05),
            "blend": PoisonSpec(BlendTrigger(alpha=0.2, seed=9), LabelMap("all_to_one", 0), rate=0.05),
            "badnets_a2a": PoisonSpec(PatchTrigger(size=3), LabelMap("all_to_all"), rate=0.1),
        },
        train=TrainHyper(lr=0.05, momentum=0.9, weight_decay=5e-4, epochs=40, milestones=(30,), batch_size=64),
        # BN-only raw-step noise separated the desk zoo best; conv noise tends to
        # collapse clean models onto one class.
        detect=DetectSettings(
            epsilon=0.3, tau=0.5, lambda1=0.9, signed=False,
            selection=ParamSelection(include_conv=False, include_affine=False, include_norm_affine=True),
        ),
        defense=DefenseConfig(),
        n_clean=4,
        n_per_attack=4,
        root_seed=root_seed,
    )
