"""Command-line entry point.

Every command of one experiment plan works inside
``<output_root>/runs/<plan-hash>/`` and writes a manifest to
``manifests/<command>.json`` (config snapshot, value provenance, seeds,
artifact hashes, timings). Artifacts are created exclusively, so a run
directory is append-only; rerunning a finished command is an error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import torch
import yaml

from . import __version__
from .archive import canonical_json, sha256_bytes, sha256_file
from .attacks import AttackConfig, PerturbationRecord, run_attack
from .config import COMMANDS, ConfigError, RunConfig, parse_config
from .data import Dataset, SyntheticSpec, generate_synthetic, load_image_folder, load_split_spec, split_dataset
from .experiments import (
    ResultsTable,
    aggregate_accuracy,
    aggregate_asr,
    aggregate_auroc,
    render_report,
    run_baseline,
    run_detection_suite,
    run_transferability,
    threshold_table,
    write_rows,
)
from .filters import AEConfig, FPAModel, make_filter, train_autoencoder
from .models import FewShotModel, TrainConfig, load_model, model_hash, save_model, train_episodic

log = logging.getLogger("fsdetect")

OWNER = {
    "gen-data": "data",
    "train-model": "models",
    "train-ae": "filters",
    "attack": "attacks",
    "evaluate": "experiments",
    "detect": "detection",
    "report": "experiments",
}
UPSTREAM = {
    "gen-data": (),
    "train-model": ("gen-data",),
    "train-ae": ("gen-data", "train-model"),
    "attack": ("gen-data", "train-model"),
    "evaluate": ("gen-data", "train-model", "attack"),
    "detect": ("gen-data", "train-model", "train-ae", "attack"),
    "report": (),
}


class CommandError(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    return int(sha256_bytes(canonical_json([str(p) for p in parts]))[:8], 16)


def attack_names(cfg: RunConfig) -> list[str]:
    kinds = [a.kind for a in cfg.attack.attacks]
    return [k if kinds.count(k) == 1 else f"{k}-{i}" for i, k in enumerate(kinds)]


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir()

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def manifest_path(self, command):
        return self.path("manifests", f"{command}.json")

    def read_manifest(self, command):
        p = self.manifest_path(command)
        if not p.is_file():
            raise CommandError(f"run '{command}' first with the same configuration (no manifest in {self.dir})")
        m = json.loads(p.read_text())
        if m.get("status") != "complete":
            raise CommandError(f"'{command}' did not complete (status {m.get('status')!r}); start a fresh run")
        if m["plan_hash"] != self.cfg.plan_hash():
            raise CommandError(f"'{command}' manifest belongs to plan {m['plan_hash']}")
        return m

    def verify(self, command):
        """Abort if any artifact of ``command`` changed since it was written."""
        m = self.read_manifest(command)
        for rel, digest in m["artifacts"].items():
            p = self.path(rel)
            if not p.is_file() or sha256_file(p) != digest:
                raise CommandError(f"artifact {rel} is missing or does not match the hash recorded by '{command}'")
        return m

    def init_dir(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        plan = self.path("plan.json")
        body = json.dumps(self.cfg.plan(), indent=2, sort_keys=True)
        if plan.exists():
            if plan.read_text() != body:
                raise CommandError(f"{plan} does not match this configuration")
        else:
            with open(plan, "x") as fh:
                fh.write(body)

    def write_manifest(self, command, data, exclusive=False):
        p = self.manifest_path(command)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "x" if exclusive else "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=str)


def load_datasets(run) -> dict[str, Dataset]:
    return {s: Dataset.load(run.path("data", f"{s}.npz")) for s in ("train", "val", "test")}


def load_models(run, cfg):
    out = {}
    for head in cfg.model.heads:
        model, header = load_model(run.path("checkpoints", f"model-{head}.npz"))
        out[head] = model
    return out


def load_records(run, cfg, head):
    out = {}
    for name in attack_names(cfg):
        d = run.path("perturbations", head, name)
        out[name] = [PerturbationRecord.load(p) for p in sorted(d.glob("*.npz"))]
    return out


def _target_classes(cfg, test: Dataset):
    if cfg.attack.target_classes is None:
        return list(test.classes)
    missing = [c for c in cfg.attack.target_classes if c not in test.classes]
    if missing:
        raise ValueError(f"attack.target_classes not in the test split: {missing}")
    return list(cfg.attack.target_classes)


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(run, cfg, seeds):
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec(d.n_classes, d.samples_per_class, (d.channels, d.image_size, d.image_size),
                             d.signal, d.noise_std, cfg.seed, d.template_grid)
        seeds["data"] = cfg.seed
        splits = split_dataset(generate_synthetic(spec), d.split.model_dump())
    else:
        if not Path(d.root).is_dir():
            raise FileNotFoundError(f"data.root does not exist: {d.root}")
        need = cfg.episode.shots + cfg.episode.n_query // cfg.episode.ways
        splits = load_image_folder(d.root, load_split_spec(d.split_file), min_samples=need,
                                   channels=d.channels, size=(d.image_size, d.image_size))
    for s in ("train", "val", "test"):
        if s not in splits:
            raise ValueError(f"split {s!r} is empty")
        splits[s].save(run.path("data", f"{s}.npz"))
    return {f"{s}_classes": len(ds.classes) for s, ds in splits.items()}


def cmd_train_model(run, cfg, seeds):
    data = load_datasets(run)
    info = {}
    for head in cfg.model.heads:
        seed = derive_seed(cfg.seed, "train", head)
        seeds[f"train/{head}"] = seed
        torch.manual_seed(seed)
        model = FewShotModel(data["train"].image_shape, head, cfg.model.hidden)
        tc = TrainConfig(cfg.model.episodes_per_epoch, cfg.model.epochs, cfg.episode.ways, cfg.episode.shots,
                         cfg.model.train_n_query, cfg.model.learning_rate, cfg.model.val_episodes, seed)
        model, history = train_episodic(model, data["train"], data["val"], tc)
        save_model(model, run.path("checkpoints", f"model-{head}.npz"), tc, history)
        info[head] = {"model_hash": model_hash(model), "best_val_acc": max((h["val_acc"] for h in history), default=None)}
    return info


def cmd_train_ae(run, cfg, seeds):
    data = load_datasets(run)
    models = load_models(run, cfg)
    a = cfg.autoencoder
    info = {}
    for head, model in models.items():
        seed = derive_seed(cfg.seed, "autoencoder", head)
        seeds[f"autoencoder/{head}"] = seed
        ae_cfg = AEConfig(a.hidden, a.epochs_standard, a.epochs_finetune, a.batch_size, a.learning_rate,
                          a.finetune_learning_rate, a.weight_decay, a.step_size, a.gamma,
                          cfg.episode.ways, cfg.episode.shots, seed)
        std = train_autoencoder(data["train"], data["val"], model, "standard_ae", ae_cfg)
        std.save(run.path("checkpoints", f"ae-{head}-standard_ae.npz"))
        info[f"{head}/standard_ae"] = std.history[-1] if std.history else None
        for variant in a.variants:
            fpa = train_autoencoder(data["train"], data["val"], model, variant, ae_cfg, init=std)
            fpa.save(run.path("checkpoints", f"ae-{head}-{variant}.npz"))
            info[f"{head}/{variant}"] = fpa.history[-1] if fpa.history else None
    return info


def cmd_attack(run, cfg, seeds):
    data = load_datasets(run)
    test = data["test"]
    models = load_models(run, cfg)
    classes = _target_classes(cfg, test)
    e = cfg.episode
    count = 0
    for head, model in models.items():
        for name, entry in zip(attack_names(cfg), cfg.attack.attacks):
            for ci, cls in enumerate(classes):
                for s in range(cfg.attack.n_perturbation_sets):
                    seed = derive_seed(cfg.seed, "attack", head, name, cls, s)
                    seeds[f"attack/{head}/{name}/{cls}/{s}"] = seed
                    ac = AttackConfig(seed=seed, **entry.model_dump())
                    rec = run_attack(model, test, cls, e.ways, e.shots, e.n_query, ac)
                    rec.save(run.path("perturbations", head, name, f"{ci:04d}-{s:04d}.npz"))
                    count += 1
    return {"records": count}


def cmd_evaluate(run, cfg, seeds):
    data = load_datasets(run)
    models = load_models(run, cfg)
    e = cfg.episode
    seeds["baseline"] = derive_seed(cfg.seed, "baseline")
    _, acc_raw = run_baseline(models, data["test"], cfg.evaluate.n_eval_episodes, e.ways, e.shots, e.n_query,
                              seeds["baseline"])
    asr_raw = []
    for head, model in models.items():
        seeds[f"transfer/{head}"] = derive_seed(cfg.seed, "transfer", head)
        _, raw = run_transferability(head, model, load_records(run, cfg, head), data["test"],
                                     cfg.evaluate.n_asr_episodes, seeds[f"transfer/{head}"])
        asr_raw += raw
    write_rows(acc_raw, run.path("scores", "accuracy.csv"))
    write_rows(asr_raw, run.path("scores", "asr.csv"))
    aggregate_accuracy(acc_raw).to_csv(run.path("tables", "baseline.csv"))
    aggregate_asr(asr_raw).to_csv(run.path("tables", "transferability.csv"))
    return {}


def cmd_detect(run, cfg, seeds):
    data = load_datasets(run)
    models = load_models(run, cfg)
    all_raw = []
    for head, model in models.items():
        filters = {}
        for kind in cfg.detect.filters:
            fpa = None
            if kind in ("fpa", "fpa_prime"):
                fpa = FPAModel.load(run.path("checkpoints", f"ae-{head}-{kind}.npz"))
                if fpa.model_hash != model_hash(model):
                    raise ValueError(f"autoencoder {kind} for {head} was trained against a different model")
            filters[kind] = make_filter(kind, fpa, seed=derive_seed(cfg.seed, "noise", head),
                                        noise_scale=cfg.detect.noise_scale)
        seeds[f"detect/{head}"] = derive_seed(cfg.seed, "detect", head)
        _, raw = run_detection_suite(head, model, load_records(run, cfg, head), data["test"], filters,
                                     cfg.detect.statistics, cfg.detect.repeats, seeds[f"detect/{head}"])
        all_raw += raw
    write_rows(all_raw, run.path("scores", "detection.csv"))
    aggregate_auroc(all_raw, "test").to_csv(run.path("tables", "detection.csv"))
    if cfg.detect.repeats > 1 and "logits_l1" in cfg.detect.statistics:
        write_rows(threshold_table(all_raw, cfg.detect.fpr), run.path("tables", "thresholds.csv"))
    return {}


def cmd_report(run, cfg, seeds):
    tables = sorted(p for p in run.path("tables").glob("*.csv") if p.name != "thresholds.csv") \
        if run.path("tables").is_dir() else []
    if not tables:
        raise FileNotFoundError(f"no result tables in {run.path('tables')}; run evaluate/detect first")
    table = ResultsTable()
    for p in tables:
        table.extend(ResultsTable.from_csv(p))
    render_report(table, run.path("figures"))
    return {"tables": [p.name for p in tables]}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "train-ae": cmd_train_ae,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "report": cmd_report,
}


def _snapshot(root: Path, before: set[Path]) -> dict[str, str]:
    files = {p for p in root.rglob("*") if p.is_file() and "manifests" not in p.relative_to(root).parts}
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in sorted(files - before)}


def execute(cfg: RunConfig) -> Path:
    """Run ``cfg.command`` in the plan's run directory; return the manifest path."""
    command = cfg.command
    if command not in HANDLERS:
        raise ConfigError(f"command: expected one of {COMMANDS}, got {command!r}")
    run = Run(cfg)
    if command == "report" and not run.dir.is_dir():
        raise CommandError(f"experiments: no run directory {run.dir}; nothing to report")
    run.init_dir()
    for up in UPSTREAM[command]:
        run.verify(up)
    torch.use_deterministic_algorithms(True, warn_only=True)

    before = {p for p in run.dir.rglob("*") if p.is_file()}
    manifest = {
        "command": command,
        "plan_hash": cfg.plan_hash(),
        "config": cfg.model_dump(mode="json", exclude={"provenance"}),
        "provenance": cfg.provenance,
        "versions": {"fsdetect": __version__, "torch": torch.__version__, "python": platform.python_version()},
        "status": "running",
        "started": time.time(),
    }
    try:
        run.write_manifest(command, manifest, exclusive=True)
    except FileExistsError:
        raise CommandError(f"'{command}' already ran in {run.dir}; run directories are append-only") from None

    seeds: dict[str, int] = {}
    t0 = time.perf_counter()
    try:
        info = HANDLERS[command](run, cfg, seeds)
    except Exception as exc:
        manifest.update(status="incomplete", error=f"{type(exc).__name__}: {exc}", seeds=seeds,
                        artifacts=_snapshot(run.dir, before), seconds=time.perf_counter() - t0)
        run.write_manifest(command, manifest)
        raise CommandError(f"{OWNER[command]}: {exc}") from exc
    manifest.update(status="complete", seeds=seeds, info=info, artifacts=_snapshot(run.dir, before),
                    seconds=time.perf_counter() - t0, finished=time.time())
    run.write_manifest(command, manifest)
    return run.manifest_path(command)


# --- argument parsing ---------------------------------------------------------------

def _parse_value(text):
    return yaml.safe_load(text)


def build_parser():
    p = argparse.ArgumentParser(prog="fsdetect", description="Adversarial support-set attacks and detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "all"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-root")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set model.epochs=3")
        if name in ("attack", "all"):
            sp.add_argument("--kind", choices=["pgd", "cw_sgd"])
            sp.add_argument("--epsilon", help="l-inf bound in [0,1] units; fractions like 12/255 allowed")
            sp.add_argument("--eta", type=float)
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--kappa", type=float)
            sp.add_argument("--const", type=float)
        if name in ("train-model", "all"):
            sp.add_argument("--head", action="append", choices=["relation", "cross_attention"])
    return p


def overrides_from_args(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.output_root is not None:
        out["output_root"] = args.output_root
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    if args.command in ("attack", "all"):
        entry = {k: getattr(args, k) for k in ("kind", "epsilon", "eta", "iterations", "kappa", "const")
                 if getattr(args, k) is not None}
        if entry:
            out["attack.attacks"] = [entry]
    if args.command in ("train-model", "all") and args.head:
        out["model.heads"] = args.head
    return out


def config_from_args(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    command = None if args.command == "all" else args.command
    return parse_config(args.config, overrides_from_args(args), command=command), args


def main(argv=None) -> int:
    try:
        cfg, args = config_from_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    commands = COMMANDS if args.command == "all" else (args.command,)
    try:
        for command in commands:
            path = execute(cfg.model_copy(update={"command": command}))
            print(f"{command}: ok ({path})")
    except (CommandError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
