import pytest
import torch

from fsdetect.data import SyntheticSpec, generate_synthetic, split_dataset
from fsdetect.models import FewShotModel, TrainConfig, train_episodic

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_splits():
    ds = generate_synthetic(SyntheticSpec(n_classes=40, samples_per_class=40, seed=0))
    return split_dataset(ds, {"train": 24, "val": 8, "test": 8})


@pytest.fixture(scope="session")
def trained_models(toy_splits):
    out = {}
    for head in ("relation", "cross_attention"):
        torch.manual_seed(0)
        model = FewShotModel(head_kind=head)
        cfg = TrainConfig(episodes_per_epoch=60, epochs=3, n_query=50, val_episodes=30, seed=0)
        out[head], _ = train_episodic(model, toy_splits["train"], toy_splits["val"], cfg)
    return out


@pytest.fixture
def record_acceptance():
    def record(name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
