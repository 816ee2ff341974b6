import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fsdetect.detection import (
    DetectionScore,
    ScoringContext,
    auroc,
    context_sampler,
    enumerate_splits,
    flag,
    logits_l1,
    read_scores_csv,
    score_support_set,
    threshold_at_fpr,
    u_adv,
    u_adv_prime,
    write_scores_csv,
)
from fsdetect.filters import IdentityFilter, NoiseFilter

from helpers import ConstantFilter, InterpolatingModel, PixelLabelModel


def pairwise_auroc(clean, adv):
    wins = [1.0 if a > c else 0.5 if a == c else 0.0 for a, c in itertools.product(adv, clean)]
    return float(np.mean(wins))


def _context(ways=3, shots=4, slot=1, value=0.0):
    return ScoringContext(torch.full((ways - 1, shots, 3, 4, 4), value), slot)


def test_enumerate_splits():
    s = torch.arange(5.0).view(5, 1, 1, 1)
    splits = enumerate_splits(s)
    assert len(splits) == 5
    for i, sp in enumerate(splits):
        assert sp.q_aux.item() == i and len(sp.s_aux) == 4
        assert i not in sp.s_aux.flatten().tolist()
    with pytest.raises(ValueError, match="at least 2"):
        enumerate_splits(s[:1])


def test_logits_l1_fixture():
    assert logits_l1([0.2, 0.5, 0.3], [0.1, 0.7, 0.2]) == pytest.approx(0.4, abs=1e-9)


def test_u_adv_three_logit_fixture():
    model = InterpolatingModel([0.2, 0.5, 0.3], [0.1, 0.7, 0.2], slot=1)
    split = enumerate_splits(torch.zeros(5, 3, 4, 4))[0]
    value = u_adv(model, ConstantFilter(1.0), split, _context(), ways=3)
    assert value == pytest.approx(0.4, abs=1e-9)


def test_u_adv_identity_is_zero(trained_models, toy_splits):
    test = toy_splits["test"]
    c = test.classes[0]
    draw = context_sampler(test, c, 5, 4)
    for head, model in trained_models.items():
        for s in range(5):
            split = enumerate_splits(test.images[c][s * 5:(s + 1) * 5])[s]
            assert u_adv(model, IdentityFilter(), split, draw(np.random.default_rng(s)), ways=5) == 0.0


def test_u_adv_prime_fixtures():
    model = PixelLabelModel()
    ctx = _context(slot=1)
    own = torch.full((5, 3, 4, 4), 0.5)
    assert u_adv_prime(model, IdentityFilter(), own, ctx) == 0.0
    assert u_adv_prime(model, ConstantFilter(0.0), torch.ones(5, 3, 4, 4), ctx) == 1.0
    mixed = own.clone()
    mixed[3], mixed[4] = 0.0, 1.0
    assert u_adv_prime(model, IdentityFilter(), mixed, ctx) == pytest.approx(0.4, abs=1e-12)


def test_context_errors():
    model = PixelLabelModel()
    split = enumerate_splits(torch.zeros(5, 3, 4, 4))[0]
    with pytest.raises(ValueError, match="other classes"):
        u_adv(model, IdentityFilter(), split, _context(ways=3), ways=5)
    with pytest.raises(ValueError, match="2-shot classes"):
        u_adv(model, IdentityFilter(), split, _context(shots=2))


def test_score_deterministic_and_seed_sensitive(trained_models, toy_splits):
    test = toy_splits["test"]
    c = test.classes[1]
    model = trained_models["relation"]
    s_c = test.images[c][:5]
    sampler = context_sampler(test, c, 5, 4)
    r = NoiseFilter()
    a = score_support_set(model, r, s_c, sampler, seed=3)
    b = score_support_set(model, r, s_c, sampler, seed=3)
    assert a == b and a.split_mode == "single_random" and a.filter_kind == "noise"
    values = {score_support_set(model, r, s_c, sampler, seed=s).value for s in range(5)}
    assert len(values) > 1
    h = score_support_set(model, r, s_c, sampler, "hard_label", seed=3)
    assert h.split_mode == "all_splits_mean" and 0 <= h.value <= 1
    with pytest.raises(ValueError):
        score_support_set(model, r, s_c, sampler, "entropy")


def test_flag():
    assert flag(0.3, 0.2) == "adversarial"
    assert flag(DetectionScore(0.2, "logits_l1", "fpa", "single_random"), 0.2) == "clean"
    with pytest.raises(ValueError):
        flag(0.1, float("nan"))


def test_auroc_cases():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([0.5, 0.5], [0.5, 0.5]) == 0.5
    assert auroc([0.1, 0.5], [0.3, 0.9]) == 0.75
    with pytest.raises(ValueError):
        auroc([], [1.0])


@settings(max_examples=100, deadline=None)
@given(clean=st.lists(st.integers(0, 6), min_size=1, max_size=15),
       adv=st.lists(st.integers(0, 6), min_size=1, max_size=15))
def test_auroc_matches_pairwise_with_ties(clean, adv):
    assert auroc(clean, adv) == pytest.approx(pairwise_auroc(clean, adv), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.integers(-1000, 1000), min_size=4, max_size=20, unique=True),
       cut=st.integers(1, 3), scale=st.floats(0.01, 100))
def test_auroc_invariant_to_scaling(values, cut, scale):
    clean, adv = values[:cut], values[cut:]
    assert auroc(clean, adv) == auroc([scale * c for c in clean], [scale * v for v in adv])


def test_threshold_at_fpr():
    clean = np.arange(1, 101, dtype=float)
    t = threshold_at_fpr(clean, 0.05)
    assert t == 95.0 and np.mean(clean > t) == pytest.approx(0.05)
    assert threshold_at_fpr([3.0], 0.05) == 3.0
    with pytest.raises(ValueError):
        threshold_at_fpr([], 0.05)


@settings(max_examples=50, deadline=None)
@given(scores=st.lists(st.floats(0, 1), min_size=20, max_size=200), fpr=st.floats(0.01, 0.5))
def test_threshold_never_exceeds_target_fpr(scores, fpr):
    t = threshold_at_fpr(scores, fpr)
    assert np.mean(np.asarray(scores) > t) <= fpr + 1e-12


def test_scores_csv_roundtrip(tmp_path):
    rows = [dict(model="relation", attack="pgd", **{"class": "class_001"}, seed=1, repeat=0, filter_kind="fpa",
                 statistic_kind="logits_l1", split_mode="single_random", value=0.1 + 0.2, ground_truth="clean")]
    path = write_scores_csv(rows, tmp_path / "s.csv")
    back = read_scores_csv(path)
    assert back[0]["value"] == 0.1 + 0.2 and back[0]["class"] == "class_001"
    with pytest.raises(FileExistsError):
        write_scores_csv(rows, path)
