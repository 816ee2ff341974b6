"""Self-similarity scores for support sets.

A class's support set ``S_c`` is split into ``N - 1`` auxiliary supports and
one auxiliary query. The auxiliary query is classified in a K-way episode
twice, once with the auxiliary supports as they are and once after passing
them through a filter. Clean supports keep agreeing with themselves under
filtering; adversarial ones do not.

Two statistics are provided:

``logits_l1``
    L1 distance between the two logit vectors of the auxiliary query.
``hard_label``
    Fraction of splits whose auxiliary query is *not* predicted as ``c``
    when the filtered auxiliary supports are used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Dataset, as_rng
from .filters import FilterFunction, apply_filter

STATISTICS = ("logits_l1", "hard_label")
SPLIT_MODES = ("single_random", "all_splits_mean")
SCORE_FIELDS = ("model", "attack", "class", "seed", "repeat", "filter_kind", "statistic_kind",
                "split_mode", "value", "ground_truth")


@dataclass(frozen=True)
class AuxiliarySplit:
    s_aux: torch.Tensor
    q_aux: torch.Tensor
    index: int


@dataclass(frozen=True)
class ScoringContext:
    """The other ``K - 1`` classes of a scoring episode and the slot of class ``c``."""

    other_support: torch.Tensor  # (K-1, n, C, H, W)
    slot: int

    @property
    def ways(self):
        return self.other_support.shape[0] + 1

    def episode_support(self, class_support):
        o = self.other_support
        if class_support.shape[0] != o.shape[1]:
            raise ValueError(f"context has {o.shape[1]}-shot classes, class support has {class_support.shape[0]}")
        return torch.cat([o[:self.slot], class_support.unsqueeze(0), o[self.slot:]])


@dataclass(frozen=True)
class DetectionScore:
    value: float
    statistic_kind: str
    filter_kind: str
    split_mode: str
    ground_truth: str | None = None


def enumerate_splits(s_c) -> list[AuxiliarySplit]:
    """All ``N`` ways of holding out one support as the auxiliary query."""
    n = len(s_c)
    if n < 2:
        raise ValueError("self-similarity needs at least 2 supports per class")
    return [AuxiliarySplit(torch.cat([s_c[:i], s_c[i + 1:]]), s_c[i:i + 1], i) for i in range(n)]


def random_split(s_c, seed=None) -> AuxiliarySplit:
    splits = enumerate_splits(s_c)
    return splits[int(as_rng(seed).integers(len(splits)))]


def context_sampler(ds: Dataset, class_id, ways, shots) -> Callable[[np.random.Generator], ScoringContext]:
    """Draws random other classes (and their ``shots`` supports) around ``class_id``."""
    others = [c for c in ds.classes if c != class_id]
    if len(others) < ways - 1:
        raise ValueError(f"need {ways - 1} other classes, dataset has {len(others)}")

    def draw(rng):
        rng = as_rng(rng)
        chosen = [others[i] for i in rng.choice(len(others), size=ways - 1, replace=False)]
        support = torch.stack([ds.images[c][rng.choice(ds.n_samples(c), size=shots, replace=False)]
                               for c in chosen])
        return ScoringContext(support, int(rng.integers(ways)))

    return draw


def logits_l1(before, after):
    return float(torch.as_tensor(after, dtype=torch.float64).sub(torch.as_tensor(before, dtype=torch.float64))
                 .abs().sum())


def _check_context(context: ScoringContext, ways=None):
    if context is None or context.other_support.dim() != 5 or len(context.other_support) == 0:
        raise ValueError("scoring context must provide the K-1 other classes' supports")
    if ways is not None and context.ways != ways:
        raise ValueError(f"context gives {context.ways - 1} other classes, expected {ways - 1}")


@torch.no_grad()
def aux_logits(model, r: FilterFunction | None, split: AuxiliarySplit, context: ScoringContext, filter_seed=None):
    s = split.s_aux if r is None else apply_filter(r, split.s_aux, seed=filter_seed)
    return model(context.episode_support(s), split.q_aux)[0]


@torch.no_grad()
def u_adv(model, r: FilterFunction, split: AuxiliarySplit, context: ScoringContext, filter_seed=None, ways=None):
    """L1 change of the auxiliary query's logits when its supports are filtered."""
    _check_context(context, ways)
    before = aux_logits(model, None, split, context)
    after = aux_logits(model, r, split, context, filter_seed)
    return logits_l1(before, after)


def hard_label_rate(predictions, label):
    predictions = np.asarray(predictions)
    return float(np.mean(predictions != label))


@torch.no_grad()
def u_adv_prime(model, r: FilterFunction, s_c, context: ScoringContext, filter_seed=None, ways=None):
    """Fraction of the ``N`` splits whose held-out support is not predicted as its own class."""
    _check_context(context, ways)
    preds = [int(aux_logits(model, r, split, context, filter_seed).argmax())
             for split in enumerate_splits(s_c)]
    return hard_label_rate(preds, context.slot)


def score_support_set(model, r: FilterFunction, s_c, sampler, statistic_kind="logits_l1",
                      split_mode=None, seed=0, ground_truth=None) -> DetectionScore:
    """Score one class support set.

    ``sampler(rng)`` returns the :class:`ScoringContext`. ``split_mode``
    defaults to ``single_random`` for ``logits_l1`` and ``all_splits_mean``
    for ``hard_label``.
    """
    if statistic_kind not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic_kind!r}")
    if split_mode is None:
        split_mode = "single_random" if statistic_kind == "logits_l1" else "all_splits_mean"
    if split_mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {split_mode!r}")
    model.eval()
    rng = as_rng(seed)
    context = sampler(rng)
    filter_seed = int(rng.integers(2**31))
    if split_mode == "single_random":
        splits = [random_split(s_c, rng)]
    else:
        splits = enumerate_splits(s_c)
    if statistic_kind == "logits_l1":
        value = float(np.mean([u_adv(model, r, sp, context, filter_seed) for sp in splits]))
    else:
        with torch.no_grad():
            preds = [int(aux_logits(model, r, sp, context, filter_seed).argmax()) for sp in splits]
        value = hard_label_rate(preds, context.slot)
    return DetectionScore(value, statistic_kind, getattr(r, "kind", "custom"), split_mode, ground_truth)


def flag(score: DetectionScore | float, threshold: float) -> str:
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    value = score.value if isinstance(score, DetectionScore) else float(score)
    return "adversarial" if value > threshold else "clean"


def threshold_at_fpr(clean_scores: Sequence[float], fpr=0.05) -> float:
    """Smallest observed clean score with at most ``fpr`` of clean scores above it."""
    clean = np.sort(np.asarray(clean_scores, dtype=float))
    if len(clean) == 0:
        raise ValueError("need clean scores to calibrate a threshold")
    k = int(np.ceil((1 - fpr) * len(clean))) - 1
    return float(clean[min(max(k, 0), len(clean) - 1)])


def auroc(clean_scores: Sequence[float], adv_scores: Sequence[float]) -> float:
    """P(adversarial score > clean score), ties counted one half (Mann-Whitney form)."""
    clean = np.asarray(clean_scores, dtype=float)
    adv = np.asarray(adv_scores, dtype=float)
    if len(clean) == 0 or len(adv) == 0:
        raise ValueError("auroc needs non-empty clean and adversarial score lists")
    ranks = rankdata(np.concatenate([adv, clean]))
    n_a, n_c = len(adv), len(clean)
    return float((ranks[:n_a].sum() - n_a * (n_a + 1) / 2) / (n_a * n_c))


def write_scores_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in SCORE_FIELDS})
    return path


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["value"] = float(row["value"])
        row["seed"] = int(row["seed"])
        row["repeat"] = int(row["repeat"])
    return rows
