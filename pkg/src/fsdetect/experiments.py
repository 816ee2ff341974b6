"""Experiment suites and result tables.

Every suite returns raw per-unit rows (per episode, per perturbation set,
per scored support set). Summary rows are always produced by the
``aggregate_*`` functions from those raw rows, so persisted raw scores
reproduce every table entry exactly.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .attacks import PerturbationRecord, evaluate_asr
from .data import Dataset, as_rng
from .detection import auroc, context_sampler, score_support_set, threshold_at_fpr
from .models import confidence_half_width, evaluate_accuracy


@dataclass(frozen=True)
class ResultRow:
    model: str
    dataset: str
    attack: str
    scenario: str
    filter: str
    statistic: str
    metric: str
    mean: float
    dispersion: float
    n: int

    def __post_init__(self):
        if self.metric in ("accuracy", "ASR", "AUROC") and not 0 <= self.mean <= 1:
            raise ValueError(f"{self.metric} {self.mean} outside [0, 1]")


class ResultsTable(list):
    """A list of :class:`ResultRow` with CSV round-tripping."""

    columns = tuple(f.name for f in fields(ResultRow))

    def select(self, **match):
        return ResultsTable(r for r in self if all(getattr(r, k) == v for k, v in match.items()))

    def to_csv(self, path, exclusive=True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "x" if exclusive else "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            w.writeheader()
            for row in self:
                d = asdict(row)
                d["mean"], d["dispersion"] = repr(row.mean), repr(row.dispersion)
                w.writerow(d)
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return cls(ResultRow(**{**r, "mean": float(r["mean"]), "dispersion": float(r["dispersion"]),
                                    "n": int(r["n"])}) for r in csv.DictReader(fh))


def write_rows(rows: Sequence[dict], path, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or list(rows[0])
    with open(path, "x", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_rows(path, floats=(), ints=()):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in floats:
            r[k] = float(r[k])
        for k in ints:
            r[k] = int(r[k])
    return rows


# --- baseline accuracy -------------------------------------------------------

def run_baseline(models: Mapping[str, torch.nn.Module], ds: Dataset, n_episodes, ways, shots, n_query, seed=0):
    raw = []
    for name, model in models.items():
        res = evaluate_accuracy(model, ds, n_episodes, ways, shots, n_query, seed)
        raw += [{"model": name, "dataset": ds.split, "episode": i, "accuracy": float(a)}
                for i, a in enumerate(res.per_episode)]
    return aggregate_accuracy(raw), raw


def aggregate_accuracy(raw):
    groups = defaultdict(list)
    for r in raw:
        groups[(r["model"], r["dataset"])].append(r["accuracy"])
    return ResultsTable(
        ResultRow(m, d, "none", "none", "none", "none", "accuracy", float(np.mean(v)), confidence_half_width(v), len(v))
        for (m, d), v in groups.items()
    )


# --- transferability -----------------------------------------------------------

def zero_delta(record: PerturbationRecord) -> PerturbationRecord:
    return PerturbationRecord(**{**record.__dict__, "deltas": torch.zeros_like(record.deltas)})


def run_transferability(model_name, model, records: Mapping[str, Sequence[PerturbationRecord]], ds: Dataset,
                        n_episodes=50, seed=0, control=True):
    """ASR of every record under both transfer scenarios.

    With ``control`` the first attack's records are also evaluated with
    their deltas zeroed (attack name ``control``), giving the clean error.
    """
    raw = []
    todo = [(a, recs) for a, recs in records.items()]
    if control and todo:
        todo.append(("control", [zero_delta(r) for r in todo[0][1]]))
    for attack, recs in todo:
        for i, rec in enumerate(recs):
            for scenario in ("fixed_supports", "new_supports"):
                res = evaluate_asr(model, rec, ds, scenario, n_episodes, seed=(seed, i))
                raw.append({"model": model_name, "dataset": ds.split, "attack": attack, "scenario": scenario,
                            "class": rec.target_class, "set": i, "asr": res.mean})
    return aggregate_asr(raw), raw


def aggregate_asr(raw):
    groups = defaultdict(list)
    for r in raw:
        groups[(r["model"], r["dataset"], r["attack"], r["scenario"])].append(r["asr"])
    return ResultsTable(
        ResultRow(m, d, a, s, "none", "none", "ASR", float(np.mean(v)), float(np.std(v)), len(v))
        for (m, d, a, s), v in groups.items()
    )


# --- detection -------------------------------------------------------------------

def run_detection_suite(model_name, model, records: Mapping[str, Sequence[PerturbationRecord]], ds: Dataset,
                        filters: Mapping[str, object], statistics=("logits_l1", "hard_label"), repeats=5, seed=0):
    """Score adversarial and clean support sets under every filter and statistic.

    For each record the adversarial set is its attacked support; the clean
    population is one freshly drawn support of the same class per record.
    Each repetition redraws clean supports, scoring contexts and splits.
    """
    raw = []
    for attack, recs in records.items():
        for rep in range(repeats):
            rng = as_rng((seed, rep))
            sets = []
            for i, rec in enumerate(recs):
                idx = rng.choice(ds.n_samples(rec.target_class), size=rec.shots, replace=False)
                sets.append((rec.target_class, i, "adversarial", rec.adversarial_support, rec.ways))
                sets.append((rec.target_class, i, "clean", ds.images[rec.target_class][idx], rec.ways))
            for cls, i, truth, s_c, ways in sets:
                sampler = context_sampler(ds, cls, ways, len(s_c) - 1)
                score_seed = int(rng.integers(2**31))
                for kind, r in filters.items():
                    for stat in statistics:
                        sc = score_support_set(model, r, s_c, sampler, stat, seed=score_seed, ground_truth=truth)
                        raw.append({"model": model_name, "attack": attack, "class": cls, "seed": score_seed,
                                    "repeat": rep, "filter_kind": kind, "statistic_kind": stat,
                                    "split_mode": sc.split_mode, "value": sc.value, "ground_truth": truth})
    return aggregate_auroc(raw, ds.split), raw


def auroc_by_repeat(raw, model, attack, filter_kind, statistic):
    groups = defaultdict(lambda: {"clean": [], "adversarial": []})
    for r in raw:
        if (r["model"], r["attack"], r["filter_kind"], r["statistic_kind"]) == (model, attack, filter_kind, statistic):
            groups[int(r["repeat"])][r["ground_truth"]].append(float(r["value"]))
    return [auroc(g["clean"], g["adversarial"]) for _, g in sorted(groups.items())]


def aggregate_auroc(raw, dataset="test"):
    keys = dict.fromkeys((r["model"], r["attack"], r["filter_kind"], r["statistic_kind"]) for r in raw)
    rows = ResultsTable()
    for m, a, f, s in keys:
        v = auroc_by_repeat(raw, m, a, f, s)
        rows.append(ResultRow(m, dataset, a, "fixed_supports", f, s, "AUROC", float(np.mean(v)), float(np.std(v)), len(v)))
    return rows


def threshold_table(raw, fpr=0.05, statistic="logits_l1"):
    """Per (model, attack, filter): threshold at ``fpr`` on repeat-0 clean scores,
    applied to the remaining repeats."""
    out = []
    keys = dict.fromkeys((r["model"], r["attack"], r["filter_kind"]) for r in raw if r["statistic_kind"] == statistic)
    for m, a, f in keys:
        sel = [r for r in raw if (r["model"], r["attack"], r["filter_kind"], r["statistic_kind"]) == (m, a, f, statistic)]
        calib = [r["value"] for r in sel if r["repeat"] == 0 and r["ground_truth"] == "clean"]
        held_clean = np.array([r["value"] for r in sel if r["repeat"] != 0 and r["ground_truth"] == "clean"])
        held_adv = np.array([r["value"] for r in sel if r["repeat"] != 0 and r["ground_truth"] == "adversarial"])
        t = threshold_at_fpr(calib, fpr)
        out.append({"model": m, "attack": a, "filter_kind": f, "statistic_kind": statistic, "target_fpr": fpr,
                    "threshold": t,
                    "heldout_fpr": float(np.mean(held_clean > t)) if len(held_clean) else float("nan"),
                    "heldout_tpr": float(np.mean(held_adv > t)) if len(held_adv) else float("nan")})
    return out


# --- report --------------------------------------------------------------------------

def _bar_chart(ax, groups, series, values, errors, title, ylabel):
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(groups))
    for j, s in enumerate(series):
        ax.bar(x + j * width - 0.4 + width / 2, values[j], width, yerr=errors[j], capsize=3, label=s)
    ax.set_xticks(x, groups, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})


def render_report(table: ResultsTable, out_dir) -> list[Path]:
    """Bar charts (with dispersion whiskers) and a CSV next to each figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not table:
        raise ValueError("nothing to report: results table is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, rows, groups, series, key, title, ylabel):
        values = [[next((r.mean for r in rows if key(r) == (g, s)), np.nan) for g in groups] for s in series]
        errors = [[next((r.dispersion for r in rows if key(r) == (g, s)), 0.0) for g in groups] for s in series]
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(groups) + 2), 3.5))
        _bar_chart(ax, groups, series, values, errors, title, ylabel)
        png = out_dir / f"{name}.png"
        _save(fig, png)
        plt.close(fig)
        csv_path = ResultsTable(rows).to_csv(out_dir / f"{name}.csv")
        written.extend([png, csv_path])

    acc = table.select(metric="accuracy")
    if acc:
        models = sorted({r.model for r in acc})
        emit("baseline_accuracy", acc, models, ["accuracy"], lambda r: (r.model, "accuracy"),
             "Baseline 5-shot accuracy (95% CI)", "accuracy")

    asr = table.select(metric="ASR")
    if asr:
        models = sorted({r.model for r in asr})
        series = sorted({f"{r.attack}/{r.scenario}" for r in asr})
        emit("transferability_asr", asr, models, series, lambda r: (r.model, f"{r.attack}/{r.scenario}"),
             "Transfer ASR: fixed vs new supports", "ASR")

    det = table.select(metric="AUROC")
    for stat in sorted({r.statistic for r in det}):
        rows = det.select(statistic=stat)
        filters_ = sorted({r.filter for r in rows})
        series = sorted({f"{r.model}/{r.attack}" for r in rows})
        emit(f"detection_auroc_{stat}", rows, filters_, series, lambda r: (r.filter, f"{r.model}/{r.attack}"),
             f"Detection AUROC by filter ({stat})", "AUROC")
    return written
