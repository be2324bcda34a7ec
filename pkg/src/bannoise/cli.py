"""Command line entry point: train, zoo, detect, defend, report, plot.

Exit status: 0 on success, 2 for bad input or configuration, 3 when an
optimisation or training run fails.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from bannoise.attacks import PoisonSpec
from bannoise.checkpoint import atomic_write_json, load_checkpoint, read_manifest, save_checkpoint
from bannoise.config import ExperimentConfig, derive_seed
from bannoise.data import DatasetHandle, dataset_from_path_or_synthetic
from bannoise.decouple import select_lambda1, write_sweep_csv
from bannoise.defense import DefenseConfig, FinetuneTrace, evaluate_defense, noise_finetune, plain_finetune
from bannoise.detect import MODE_ALIASES, DetectSettings, detect
from bannoise.errors import BanError, InputError
from bannoise.harness import build_zoo, detect_zoo_dir, load_zoo_models, train_one, write_reports
from bannoise.model import ParamSelection
from bannoise.plots import KINDS, accuracy_vs_noise, feature_projection, lambda1_sweep

log = logging.getLogger("bannoise")


def _data(spec: str) -> DatasetHandle:
    """A dataset directory, ``synthetic[:seed]``, or an experiment config whose dataset is rebuilt."""
    p = Path(spec)
    if p.suffix == ".json" and p.is_file():
        cfg = ExperimentConfig.load(p)
        return cfg.dataset.build(cfg.root_seed)
    return dataset_from_path_or_synthetic(spec)


NOISE_PARAMS = {
    "weights": ParamSelection(),
    "norm": ParamSelection(include_conv=False, include_affine=False, include_norm_affine=True),
}

noise_params_option = click.option(
    "--noise-params", type=click.Choice(sorted(NOISE_PARAMS)), default="weights", show_default=True,
    help="Noise conv/linear weights and biases, or batch-norm scales and shifts only.")


def _settings(epsilon, tau, mode, seed, lambda1, pgd_step, noise_params) -> DetectSettings:
    return DetectSettings(epsilon=epsilon, tau=tau, mode=MODE_ALIASES[mode], seed=seed, lambda1=lambda1,
                          signed=pgd_step == "signed", selection=NOISE_PARAMS[noise_params])


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Backdoor detection and removal with adversarial neuron noise."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--attack", default=None, help="Attack name from the config; omit for a clean model.")
@click.option("--name", default=None, help="Model name; seeds are derived from it.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train(config_path, attack, name, out):
    """Train a single (optionally poisoned) model and write its checkpoint."""
    cfg = ExperimentConfig.load(config_path)
    data = cfg.dataset.build(cfg.root_seed)
    if attack is not None and attack not in cfg.attacks:
        raise InputError(f"attack {attack!r} is not defined in the config")
    spec = cfg.attacks[attack] if attack else None
    name = name or (f"{attack}-0" if attack else "clean-0")
    from bannoise.attacks import asr, benign_accuracy

    model, used, hyper, split = train_one(cfg, data, name, spec)
    ba = benign_accuracy(model, data.test)
    rate = asr(model, data.test, used) if used else None
    save_checkpoint(model, out, {"root_seed": cfg.root_seed, "name": name, "train": hyper.seed},
                    extra={"attack": attack or "clean", "backdoored": used is not None, "ba": ba, "asr": rate,
                           "poison_spec": used.to_dict() if used else None, "train_hyper": hyper.to_dict()})
    _echo_json({"checkpoint": str(out), "ba": ba, "asr": rate})


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-clean", type=int, default=None)
@click.option("--n-per-attack", type=int, default=None)
@click.option("--attacks", default=None, help="Comma separated subset of the config's attacks.")
def zoo(config_path, out, n_clean, n_per_attack, attacks):
    """Train a zoo of clean and backdoored models with a manifest."""
    cfg = ExperimentConfig.load(config_path)
    data = cfg.dataset.build(cfg.root_seed)
    names = attacks.split(",") if attacks else None
    manifest = build_zoo(cfg, data, out, n_clean, n_per_attack, names)
    failed = [m["name"] for m in manifest["models"] if m.get("error")]
    _echo_json({"zoo": str(out), "models": len(manifest["models"]), "failed": failed})


@main.command("detect")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_spec", required=True, help="Dataset directory, synthetic[:seed] or a config JSON.")
@click.option("--epsilon", type=float, default=0.3, show_default=True)
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--mode", type=click.Choice(["a2o", "a2a"]), default="a2o", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--lambda1", type=float, default=0.75, show_default=True)
@click.option("--pgd-step", type=click.Choice(["signed", "raw"]), default="signed", show_default=True)
@noise_params_option
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--save-noise", is_flag=True, help="Store the optimised noise next to the checkpoint.")
def detect_cmd(checkpoint, data_spec, epsilon, tau, mode, seed, lambda1, pgd_step, noise_params, out, save_noise):
    """Detect a backdoor in one checkpoint using the dataset's held-out split."""
    model, _ = load_checkpoint(checkpoint)
    data = _data(data_spec)
    s = _settings(epsilon, tau, mode, seed, lambda1, pgd_step, noise_params)
    verdict = detect(model, data.val, s.epsilon, s.tau, s.mode, s.seed, settings=s)
    report = {"checkpoint": str(checkpoint), "settings": s.to_dict(), "verdict": verdict.to_dict()}
    atomic_write_json(Path(out), report)
    if save_noise:
        from bannoise.checkpoint import save_noise as store
        from bannoise.noise import pgd_maximize

        store(pgd_maximize(model, data.val, s.epsilon, steps=s.pgd_steps, seed=s.seed, selection=s.selection,
                           signed=s.signed), checkpoint)
    _echo_json(verdict.to_dict())


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_spec", required=True, help="Dataset directory, synthetic[:seed] or a config JSON.")
@click.option("--lambda2", type=float, default=0.5, show_default=True)
@click.option("--lr", type=float, default=0.005, show_default=True)
@click.option("--epochs", type=int, default=25, show_default=True)
@click.option("--refresh", type=click.Choice(["epoch", "step"]), default="epoch", show_default=True)
@click.option("--epsilon", type=float, default=0.3, show_default=True)
@click.option("--fraction", type=float, default=0.05, show_default=True, help="Share of the training-set size.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pgd-step", type=click.Choice(["signed", "raw"]), default="signed", show_default=True)
@noise_params_option
@click.option("--plain", is_flag=True, help="Plain fine-tuning baseline (no noise term).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def defend(checkpoint, data_spec, lambda2, lr, epochs, refresh, epsilon, fraction, seed, pgd_step, noise_params,
           plain, out):
    """Fine-tune a checkpoint against neuron noise and report before/after BA and ASR."""
    model, manifest = load_checkpoint(checkpoint)
    spec_dict = manifest.get("extra", {}).get("poison_spec")
    if not spec_dict:
        raise InputError(f"checkpoint {checkpoint} records no poison spec; ASR cannot be evaluated")
    spec = PoisonSpec.from_dict(spec_dict)
    data = _data(data_spec)
    cfg = DefenseConfig(lambda2=lambda2, learning_rate=lr, epochs=epochs, data_fraction=fraction, epsilon=epsilon,
                        noise_refresh=refresh, seed=seed, signed=pgd_step == "signed",
                        selection=NOISE_PARAMS[noise_params])
    clean, ids = data.defender_subset(data.fraction_count(fraction), derive_seed(seed, "defender") % 2 ** 31)
    trace = FinetuneTrace()
    tune = plain_finetune if plain else noise_finetune
    defended = tune(model, clean, cfg, trace)
    result = evaluate_defense(model, defended, data.test, spec, trace.epochs_run, trace.wall_clock_seconds)
    save_checkpoint(defended, out, provenance={"defended_from": str(checkpoint), "seed": seed},
                    extra={**manifest.get("extra", {}), "defense": cfg.to_dict(),
                           "defender_ids": ids.tolist()})
    atomic_write_json(Path(out) / "defense_result.json",
                      {"config": cfg.to_dict(), "method": "plain" if plain else "noise", "result": result.to_dict(),
                       "pgd_calls": trace.pgd_calls})
    _echo_json(result.to_dict())


@main.command()
@click.option("--zoo", "zoo_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_spec", required=True, help="Dataset directory, synthetic[:seed] or a config JSON.")
@click.option("--epsilon", type=float, default=0.3, show_default=True)
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--mode", type=click.Choice(["a2o", "a2a"]), default="a2o", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--lambda1", type=float, default=0.75, show_default=True)
@click.option("--pgd-step", type=click.Choice(["signed", "raw"]), default="signed", show_default=True)
@noise_params_option
@click.option("--with-nc", is_flag=True, help="Also run the trigger-inversion baseline.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def report(zoo_dir, data_spec, epsilon, tau, mode, seed, lambda1, pgd_step, noise_params, with_nc, out):
    """Detect every model of a zoo; writes zoo_report.json, table1.csv and timing.csv."""
    data = _data(data_spec)
    s = _settings(epsilon, tau, mode, seed, lambda1, pgd_step, noise_params)
    reports = detect_zoo_dir(zoo_dir, data, s, with_nc)
    paths = write_reports(reports, out)
    _echo_json({k: str(v) for k, v in paths.items()} | {"average_accuracy": reports["BAN"].average_accuracy})


@main.command()
@click.option("--kind", type=click.Choice(KINDS), required=True)
@click.option("--checkpoint", type=click.Path(file_okay=False), multiple=True)
@click.option("--zoo", "zoo_dir", type=click.Path(file_okay=False), default=None)
@click.option("--data", "data_spec", required=True, help="Dataset directory, synthetic[:seed] or a config JSON.")
@click.option("--epsilon", type=float, default=0.3, show_default=True)
@click.option("--lambda1", type=float, default=0.75, show_default=True)
@click.option("--pgd-step", type=click.Choice(["signed", "raw"]), default="signed", show_default=True)
@noise_params_option
@click.option("--samples", type=int, default=500, show_default=True, help="Held-out samples to use.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def plot(kind, checkpoint, zoo_dir, data_spec, epsilon, lambda1, pgd_step, noise_params, samples, out):
    """Emit a figure for checkpoints or a zoo."""
    data = _data(data_spec)
    val = data.val.subset(range(min(samples, len(data.val))))
    members = []
    if zoo_dir:
        for entry, model in load_zoo_models(zoo_dir):
            members.append((entry["name"], model, bool(entry["backdoored"]), entry["attack"]))
    for path in checkpoint:
        model, manifest = load_checkpoint(path)
        extra = manifest.get("extra", {})
        members.append((Path(path).name, model, bool(extra.get("backdoored", False)), extra.get("attack", "")))
    if not members:
        raise InputError("plot needs --checkpoint or --zoo")
    s = DetectSettings(epsilon=epsilon, lambda1=lambda1, signed=pgd_step == "signed",
                       selection=NOISE_PARAMS[noise_params])
    if kind == "feature_projection":
        res = feature_projection([(n, m) for n, m, _, _ in members], val, epsilon, out, s)
    elif kind == "accuracy_vs_noise":
        res = accuracy_vs_noise([(n, m, b) for n, m, b, _ in members], val, out, s)
    else:
        rows = []
        for n, m, _, attack in members:
            _, r = select_lambda1(m, val, attack=attack or n)
            rows += r
        write_sweep_csv(rows, Path(out) / "lambda1_sweep.csv")
        res = lambda1_sweep(rows, out)
    _echo_json({"kind": res.kind, "paths": [str(p) for p in res.paths], "panels": res.panels})


def run(argv=None) -> int:
    """Invoke the CLI and map library errors onto exit codes."""
    try:
        main.main(args=argv, prog_name="bannoise", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except BanError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
