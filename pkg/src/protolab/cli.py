"""Pipeline driver: train, attack, evaluate, analyze, sweep.

Every command reads one JSON config, writes its artifacts into the output
directory, and finishes with a manifest listing each produced file exactly
once. Digests come in two flavors: the raw file hash and a stable hash with
wall-clock fields stripped, so re-runs can be compared number-for-number.
Invalid configs exit with status 2 and a single-line error on stderr.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .analysis import global_analysis, local_analysis, render_global, render_local
from .attacks import backdoor_finetune, partial_substitution, substitute_prototypes
from .checkpoint import load_checkpoint, save_checkpoint
from .configs import (
    DESK_OOD_DATA,
    DESK_TEST_DATA,
    DESK_TRAIN_DATA,
    make_dataset,
    parse_data_config,
    parse_poison_config,
    parse_train_config,
    parse_weights,
    _take,
)
from .data import dataset_manifest
from .errors import ConfigurationError, InvariantViolation, ProtolabError
from .evaluation import abstention_curve, accuracy, build_report
from .training import finetune_last_layer, train_pipnet, train_protovit

COMMANDS = ("train", "attack-substitute", "attack-backdoor", "evaluate", "analyze", "sweep-fraction")


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _strip_volatile(obj):
    """Remove wall-clock fields so digests compare across runs."""
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k != "seconds"}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def _stable_digest(path: Path) -> str:
    raw = path.read_bytes()
    if path.suffix == ".jsonl":
        rows = [_strip_volatile(json.loads(line)) for line in raw.decode().splitlines() if line]
        return _sha256_bytes(json.dumps(rows, sort_keys=True).encode())
    if path.suffix == ".json":
        return _sha256_bytes(json.dumps(_strip_volatile(json.loads(raw)), sort_keys=True).encode())
    return _sha256_bytes(raw)


class Emitter:
    """Writes artifacts under one root and remembers every path written."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(rel)
        return p

    def write_json(self, rel: str, obj) -> None:
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_trainlog(self, rel: str, log) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in log.records]
        self.path(rel).write_text("\n".join(lines) + ("\n" if lines else ""))

    def finish(self, command: str, config: dict, seed: int) -> dict:
        files = sorted(
            str(p.relative_to(self.root)).replace("\\", "/")
            for p in self.root.rglob("*")
            if p.is_file() and p.name != "manifest.json"
        )
        registered = sorted(set(self.written))
        if files != registered:
            raise InvariantViolation(
                f"artifact registry mismatch: on disk {files} vs registered {registered}"
            )
        manifest = {
            "command": command,
            "package_version": __version__,
            "seed": seed,
            "config_sha256": _sha256_bytes(json.dumps(config, sort_keys=True).encode()),
            "files": [
                {
                    "path": rel,
                    "sha256": _sha256_bytes((self.root / rel).read_bytes()),
                    "stable_sha256": _stable_digest(self.root / rel),
                }
                for rel in files
            ],
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _seeded(config: dict, seed: int | None) -> tuple[dict, int]:
    cfg = dict(config)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg, int(cfg.get("seed", 0))


def _load_model(path_value, what: str):
    if not path_value:
        raise ConfigurationError(f"{what}: missing checkpoint path")
    p = Path(path_value)
    if not p.exists():
        raise ConfigurationError(f"{what}: checkpoint {p} does not exist")
    return load_checkpoint(str(p))


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _run_train(config: dict, em: Emitter, seed: int) -> None:
    cfg = parse_train_config(config)
    data_cfg = parse_data_config(config.get("data", {}), defaults=DESK_TRAIN_DATA)
    dataset = make_dataset(data_cfg)
    trainer = train_pipnet if cfg.model.variant == "pipnet" else train_protovit
    model, log = trainer(dataset, cfg)
    save_checkpoint(model, str(em.path("checkpoint.bin")))
    em.write_trainlog("trainlog.jsonl", log)
    em.write_json("dataset.json", dataset_manifest(dataset))
    em.write_json(
        "summary.json",
        {
            "variant": cfg.model.variant,
            "final_train_accuracy": log.records[-1]["train_accuracy"] if log.records else None,
            "epochs": len(log.records),
            "stages": log.stage_boundaries,
        },
    )


def _run_attack_substitute(config: dict, em: Emitter, seed: int) -> None:
    merged = _take(
        "attack-substitute",
        config,
        {
            "checkpoint": "",
            "ood": {},
            "train": {},
            "fraction": 1.0,
            "finetune_epochs": 0,
            "finetune_lr": 2e-3,
            "l1_weight": 1e-2,
            "batch_size": 16,
            "seed": seed,
        },
    )
    model = _load_model(merged["checkpoint"], "attack-substitute")
    ood = make_dataset(parse_data_config(merged["ood"], "ood", defaults=DESK_OOD_DATA))
    fraction = float(merged["fraction"])
    if fraction >= 1.0:
        attacked, approx_error = substitute_prototypes(model, ood)
    else:
        attacked = partial_substitution(model, ood, fraction, seed=seed)
        from .evaluation import approximation_error

        approx_error = approximation_error(model, attacked)
    save_checkpoint(attacked, str(em.path("checkpoint_raw.bin")))
    finetune_epochs = int(merged["finetune_epochs"])
    if finetune_epochs > 0:
        train_set = make_dataset(
            parse_data_config(merged["train"], "train", defaults=DESK_TRAIN_DATA)
        )
        attacked, ft_log = finetune_last_layer(
            attacked,
            train_set,
            finetune_epochs,
            lr=float(merged["finetune_lr"]),
            l1_weight=float(merged["l1_weight"]),
            batch_size=int(merged["batch_size"]),
            seed=seed,
        )
        em.write_trainlog("trainlog.jsonl", ft_log)
    save_checkpoint(attacked, str(em.path("checkpoint.bin")))
    em.write_json(
        "attack.json",
        {
            "type": "substitute",
            "fraction": fraction,
            "approx_error": approx_error,
            "finetune_epochs": finetune_epochs,
            "seed": seed,
            "pool_split": ood.split,
            "provenance": attacked.bank.provenance,
        },
    )


def _run_attack_backdoor(config: dict, em: Emitter, seed: int) -> None:
    merged = _take(
        "attack-backdoor",
        config,
        {
            "checkpoint": "",
            "data": {},
            "weights": "disguise",
            "poison": {},
            "epochs": 3,
            "lr_f": 5e-4,
            "lr_h": 5e-3,
            "batch_size": 16,
            "seed": seed,
        },
    )
    model = _load_model(merged["checkpoint"], "attack-backdoor")
    dataset = make_dataset(parse_data_config(merged["data"], defaults=DESK_TRAIN_DATA))
    weights = parse_weights(merged["weights"])
    poison = parse_poison_config(merged["poison"], default_seed=seed)
    lr_f, lr_h = float(merged["lr_f"]), float(merged["lr_h"])
    state, log = backdoor_finetune(
        model,
        dataset,
        poison,
        weights,
        epochs=int(merged["epochs"]),
        lrs={"patch_embed": lr_f, "mixing": lr_f, "output": lr_f, "head": lr_h},
        batch_size=int(merged["batch_size"]),
        seed=seed,
    )
    save_checkpoint(state.attacked, str(em.path("checkpoint.bin")))
    save_checkpoint(state.ref, str(em.path("reference.bin")))
    em.write_trainlog("trainlog.jsonl", log)
    em.write_json(
        "attack.json",
        {
            "type": "backdoor",
            "weights": asdict(weights),
            "preset": merged["weights"] if isinstance(merged["weights"], str) else None,
            "poison": {
                "triggers": list(poison.triggers),
                "corners": list(poison.corners),
                "poison_ratio": poison.poison_ratio,
                "seed": poison.seed,
            },
            "epochs": int(merged["epochs"]),
            "lrs": {"encoder": lr_f, "head": lr_h},
            "seed": seed,
        },
    )


def _run_evaluate(config: dict, em: Emitter, seed: int) -> None:
    merged = _take(
        "evaluate",
        config,
        {
            "checkpoint": "",
            "reference": "",
            "data": {},
            "ood": None,
            "poison": {},
            "threshold": 0.5,
            "seed": seed,
        },
    )
    attacked = _load_model(merged["checkpoint"], "evaluate")
    ref = _load_model(merged["reference"], "evaluate") if merged["reference"] else attacked
    test_set = make_dataset(parse_data_config(merged["data"], defaults=DESK_TEST_DATA))
    ood_set = (
        make_dataset(parse_data_config(merged["ood"], "ood", defaults=DESK_OOD_DATA))
        if merged["ood"] is not None
        else None
    )
    poison = parse_poison_config(merged["poison"], default_seed=seed)
    report = build_report(
        ref,
        attacked,
        test_set,
        poison,
        seed,
        ood_set=ood_set,
        abstention_threshold=float(merged["threshold"]),
    )
    em.path("report.json").write_text(report.to_json() + "\n")
    if ood_set is not None:
        em.write_json("abstention_curve.json", abstention_curve(attacked, ood_set))


def _run_analyze(config: dict, em: Emitter, seed: int) -> None:
    merged = _take(
        "analyze",
        config,
        {
            "checkpoint": "",
            "data": {},
            "mode": "both",
            "k_global": 5,
            "k_local": 3,
            "samples": [0],
            "seed": seed,
        },
    )
    if merged["mode"] not in ("both", "global", "local"):
        raise ConfigurationError("analyze: mode must be both, global, or local")
    model = _load_model(merged["checkpoint"], "analyze")
    dataset = make_dataset(parse_data_config(merged["data"], defaults=DESK_TEST_DATA))
    if merged["mode"] in ("both", "global"):
        artifact = global_analysis(model, dataset, k=int(merged["k_global"]))
        png = em.path("analysis/global.png")
        render_global(artifact, dataset, str(png))
        artifact.image_paths = ["analysis/global.png"]
        em.path("analysis/global.json").write_text(artifact.to_json() + "\n")
    if merged["mode"] in ("both", "local"):
        for idx in merged["samples"]:
            idx = int(idx)
            if not 0 <= idx < len(dataset):
                raise ConfigurationError(f"analyze: sample index {idx} out of range")
            x = dataset.samples[idx]
            artifact = local_analysis(model, x, k=int(merged["k_local"]))
            png = em.path(f"analysis/local_{idx}.png")
            render_local(artifact, x, str(png))
            artifact.image_paths = [f"analysis/local_{idx}.png"]
            em.path(f"analysis/local_{idx}.json").write_text(artifact.to_json() + "\n")


def _run_sweep_fraction(config: dict, em: Emitter, seed: int) -> None:
    merged = _take(
        "sweep-fraction",
        config,
        {
            "checkpoint": "",
            "ood": {},
            "test": {},
            "train": {},
            "fractions": [0.0, 0.25, 0.5, 0.75, 1.0],
            "finetune_epochs": 8,
            "finetune_lr": 2e-3,
            "l1_weight": 1e-2,
            "batch_size": 16,
            "seed": seed,
        },
    )
    model = _load_model(merged["checkpoint"], "sweep-fraction")
    ood = make_dataset(parse_data_config(merged["ood"], "ood", defaults=DESK_OOD_DATA))
    test_set = make_dataset(parse_data_config(merged["test"], "test", defaults=DESK_TEST_DATA))
    train_set = make_dataset(parse_data_config(merged["train"], "train", defaults=DESK_TRAIN_DATA))
    from .evaluation import approximation_error

    rows = []
    for fraction in [float(f) for f in merged["fractions"]]:
        attacked = partial_substitution(model, ood, fraction, seed=seed)
        acc_before = accuracy(attacked, test_set)
        tuned, _ = finetune_last_layer(
            attacked,
            train_set,
            int(merged["finetune_epochs"]),
            lr=float(merged["finetune_lr"]),
            l1_weight=float(merged["l1_weight"]),
            batch_size=int(merged["batch_size"]),
            seed=seed,
        )
        rows.append(
            {
                "fraction": fraction,
                "accuracy_before": acc_before,
                "accuracy_after": accuracy(tuned, test_set),
                "approx_error": approximation_error(model, attacked),
            }
        )
    em.write_json("sweep.json", {"rows": rows, "seed": seed})
    csv_lines = ["fraction,accuracy_before,accuracy_after,approx_error"] + [
        f"{r['fraction']},{r['accuracy_before']},{r['accuracy_after']},{r['approx_error']}"
        for r in rows
    ]
    em.path("sweep.csv").write_text("\n".join(csv_lines) + "\n")


_RUNNERS = {
    "train": _run_train,
    "attack-substitute": _run_attack_substitute,
    "attack-backdoor": _run_attack_backdoor,
    "evaluate": _run_evaluate,
    "analyze": _run_analyze,
    "sweep-fraction": _run_sweep_fraction,
}


def run_command(command: str, config: dict, out_dir: str | Path, seed: int | None = None) -> dict:
    """Execute one pipeline command; returns the manifest dictionary."""
    if command not in _RUNNERS:
        raise ConfigurationError(f"unknown command {command!r}")
    config, effective_seed = _seeded(config, seed)
    em = Emitter(out_dir)
    _RUNNERS[command](config, em, effective_seed)
    return em.finish(command, config, effective_seed)


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _invoke(command: str, config_path: str, out_dir: str, seed: int | None) -> None:
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        click.echo(f"error: cannot read config {config_path}: {exc}", err=True)
        sys.exit(2)
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        click.echo(f"error: config {config_path} is not valid JSON: {exc}", err=True)
        sys.exit(2)
    if not isinstance(config, dict):
        click.echo(f"error: config {config_path} must contain a JSON object", err=True)
        sys.exit(2)
    try:
        manifest = run_command(command, config, out_dir, seed)
    except ProtolabError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {len(manifest['files'])} files to {out_dir}")


@click.group()
@click.version_option(__version__, prog_name="proto-lab")
def main() -> None:
    """Prototype-classifier lab: training, attacks, evaluation, analysis."""


def _add(command: str) -> None:
    @main.command(command)
    @click.option("--config", "config_path", required=True, type=click.Path(), help="JSON config file")
    @click.option("--out", "out_dir", required=True, type=click.Path(), help="output directory")
    @click.option("--seed", type=int, default=None, help="override the config seed")
    def _cmd(config_path: str, out_dir: str, seed: int | None, _command=command) -> None:
        _invoke(_command, config_path, out_dir, seed)

    _cmd.__name__ = command.replace("-", "_")


for _name in COMMANDS:
    _add(_name)


if __name__ == "__main__":
    main()
