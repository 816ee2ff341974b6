import numpy as np
import pytest
import torch

from fsdetect.attacks import attack_loss
from fsdetect.data import sample_episode_with_fixed_target
from fsdetect.models import (
    FewShotModel,
    TrainConfig,
    TrainingDiverged,
    classify,
    confidence_half_width,
    evaluate_accuracy,
    load_model,
    model_hash,
    save_model,
    train_episodic,
)

from helpers import as_double, central_difference, double_copy, relative_errors

HEADS = ["relation", "cross_attention"]


@pytest.fixture(params=HEADS)
def fresh_model(request):
    torch.manual_seed(1)
    return FewShotModel(head_kind=request.param).eval()


def test_encode_shape_and_determinism(fresh_model):
    x = torch.rand(25, 3, 16, 16)
    f = fresh_model.encode(x)
    assert f.shape == (25, *fresh_model.feature_shape)
    g = fresh_model.encode(torch.stack([x[0], x[0]]))
    assert torch.equal(g[0], g[1])


def test_encode_rejects_wrong_shape(fresh_model):
    with pytest.raises(ValueError, match="shape"):
        fresh_model.encode(torch.rand(2, 3, 8, 8))


def test_unknown_head():
    with pytest.raises(ValueError):
        FewShotModel(head_kind="prototype")


def test_classify_output(fresh_model):
    support = torch.rand(5, 3, 3, 16, 16)
    logits = classify(fresh_model, support, torch.rand(3, 16, 16), ways=5, shots=3)
    assert logits.shape == (5,) and torch.isfinite(logits).all()
    with pytest.raises(ValueError):
        classify(fresh_model, support, torch.rand(3, 16, 16), ways=4)


def test_class_permutation_equivariance(fresh_model):
    support, query = torch.rand(5, 2, 3, 16, 16), torch.rand(4, 3, 16, 16)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        a = fresh_model(support, query)
        b = fresh_model(support[perm], query)
    torch.testing.assert_close(b, a[:, perm], rtol=1e-5, atol=1e-5)


def test_duplicating_supports_keeps_logits(fresh_model):
    support, query = torch.rand(5, 3, 3, 16, 16), torch.rand(4, 3, 16, 16)
    with torch.no_grad():
        a = fresh_model(support, query)
        b = fresh_model(torch.cat([support, support], dim=1), query)
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-5)


def test_cross_attention_position_scores_are_cosines():
    torch.manual_seed(0)
    model = FewShotModel(head_kind="cross_attention").eval()
    with torch.no_grad():
        protos = model.prototypes(torch.rand(5, 2, 3, 16, 16))
        cos, weights = model.head.position_scores(protos, model.encode(torch.rand(3, 3, 16, 16)))
    assert cos.min() >= -1 - 1e-6 and cos.max() <= 1 + 1e-6
    torch.testing.assert_close(weights.sum(-1), torch.ones(3, 5))


@pytest.mark.parametrize("head", HEADS)
def test_input_gradient_matches_finite_differences(head, toy_splits):
    torch.manual_seed(2)
    model = double_copy(FewShotModel(head_kind=head))
    test = toy_splits["test"]
    target = test.classes[0]
    ep = as_double(sample_episode_with_fixed_target(test, 5, 5, 25, target, None, seed=4))
    x = ep.support[ep.label_of(target)].clone()
    _, grad = attack_loss(model, x, ep, target, "pgd")
    coords = np.random.default_rng(0).choice(x.numel(), size=10, replace=False)

    def f(z):
        return attack_loss(model, z, ep, target, "pgd")[0]

    numeric = central_difference(f, x, coords)
    analytic = grad.view(-1)[coords].numpy()
    assert relative_errors(analytic, numeric).max() < 1e-3


def test_training_reaches_high_accuracy(trained_models, toy_splits):
    for head, model in trained_models.items():
        res = evaluate_accuracy(model, toy_splits["val"], 50, 5, 5, 75, seed=9)
        assert res.mean > 0.8, head


def test_identical_query_recognised(trained_models, toy_splits):
    test = toy_splits["test"]
    rng = np.random.default_rng(0)
    for head, model in trained_models.items():
        hits = 0
        for _ in range(100):
            c = test.classes[rng.integers(len(test.classes))]
            img = test.images[c][rng.integers(test.n_samples(c))]
            support = torch.rand(5, 1, 3, 16, 16)
            support[0, 0] = img
            with torch.no_grad():
                hits += int(classify(model, support, img).argmax() == 0)
        assert hits >= 95, head


def test_zero_epochs_is_noop(toy_splits):
    torch.manual_seed(0)
    model = FewShotModel()
    before = model_hash(model)
    out, history = train_episodic(model, toy_splits["train"], toy_splits["val"], TrainConfig(epochs=0))
    assert out is model and history == [] and model_hash(out) == before


def test_history_length_and_determinism(toy_splits):
    cfg = TrainConfig(episodes_per_epoch=5, epochs=2, n_query=25, val_episodes=3, seed=5)
    hashes = []
    for _ in range(2):
        torch.manual_seed(0)
        model, history = train_episodic(FewShotModel(), toy_splits["train"], toy_splits["val"], cfg)
        assert len(history) == 2
        hashes.append(model_hash(model))
    assert hashes[0] == hashes[1]


def test_divergence_aborts(toy_splits):
    torch.manual_seed(0)
    model = FewShotModel()
    with torch.no_grad():
        model.head.fc2.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train_episodic(model, toy_splits["train"], toy_splits["val"], TrainConfig(episodes_per_epoch=2, epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ways=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


class _Oracle(torch.nn.Module):
    """Perfect or random classifier wrapped as a few-shot model."""

    def __init__(self, mode, ways):
        super().__init__()
        self.mode, self.ways = mode, ways
        self.gen = torch.Generator().manual_seed(0)

    def forward(self, support, query):
        if self.mode == "random":
            return torch.rand(len(query), self.ways, generator=self.gen)
        # images of one class in the toy set share a template: nearest class mean wins
        protos = support.mean(1).flatten(1)
        return -torch.cdist(query.flatten(1), protos)


def test_accuracy_perfect_classifier(toy_splits):
    clean = toy_splits["test"]
    res = evaluate_accuracy(_Oracle("nearest", 5), clean, 50, 5, 5, 75, seed=0)
    assert res.mean == pytest.approx(1.0) and res.half_width == pytest.approx(0.0)


def test_accuracy_chance_level(toy_splits):
    res = evaluate_accuracy(_Oracle("random", 5), toy_splits["test"], 200, 5, 5, 75, seed=0)
    se = np.sqrt(0.2 * 0.8 / (200 * 75))
    assert abs(res.mean - 0.2) < 3 * se + 1e-9


def test_half_width_formula():
    v = np.array([0.5, 0.7, 0.9, 0.6])
    assert confidence_half_width(v) == pytest.approx(1.96 * v.std(ddof=1) / 2)


def test_checkpoint_roundtrip(tmp_path, trained_models):
    model = trained_models["cross_attention"]
    save_model(model, tmp_path / "m.npz", TrainConfig())
    back, header = load_model(tmp_path / "m.npz")
    assert header["model"]["head_kind"] == "cross_attention"
    assert header["model"]["image_shape"] == [3, 16, 16]
    assert "train_config_hash" in header
    assert model_hash(back) == model_hash(model)
    with pytest.raises(FileExistsError):
        save_model(model, tmp_path / "m.npz")
