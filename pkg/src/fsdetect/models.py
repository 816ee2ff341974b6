"""Toy-scale metric-based few-shot classifiers.

Both heads share a small convolutional encoder. A class is represented by
the element-wise mean of its support feature maps, so duplicating supports
never changes a prediction.

``relation``
    RelationNet-style head: query and class features are concatenated along
    channels and scored by a small conv + MLP relation module.
``cross_attention``
    CAN-style head: a correlation map between class and query positions
    yields spatial attention for both sides; the attended class vector is
    compared to every query position by cosine similarity and the
    per-position scores are averaged (attention-weighted) and scaled by a
    learnable temperature.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import hash_config, hash_tensors, read_archive, write_archive
from .data import Dataset, as_rng, sample_episode

log = logging.getLogger(__name__)

HEAD_KINDS = ("relation", "cross_attention")


class TrainingDiverged(RuntimeError):
    pass


def conv_block(c_in, c_out, pool):
    layers = [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Four conv blocks; the first ``n_pool`` halve the resolution."""

    def __init__(self, in_channels=3, hidden=32, n_pool=2):
        super().__init__()
        self.blocks = nn.Sequential(
            *[conv_block(in_channels if i == 0 else hidden, hidden, pool=i < n_pool) for i in range(4)]
        )

    def forward(self, x):
        return self.blocks(x)


class RelationHead(nn.Module):
    def __init__(self, d_f, hidden=8):
        super().__init__()
        self.convs = nn.Sequential(conv_block(2 * d_f, d_f, pool=False), conv_block(d_f, d_f, pool=False))
        self.fc1 = nn.Linear(d_f, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, protos, qf):
        # protos (K, d, h, w), qf (B, d, h, w) -> (B, K)
        k, b = protos.shape[0], qf.shape[0]
        pairs = torch.cat(
            [protos.unsqueeze(0).expand(b, -1, -1, -1, -1), qf.unsqueeze(1).expand(-1, k, -1, -1, -1)], dim=2
        )
        z = self.convs(pairs.flatten(0, 1)).mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(z))).view(b, k)


class CrossAttentionHead(nn.Module):
    def __init__(self, n_positions, attn_temperature=0.1, init_scale=10.0):
        super().__init__()
        self.fusion = nn.Parameter(torch.full((n_positions,), 1.0 / n_positions))
        self.attn_temperature = attn_temperature
        self.log_scale = nn.Parameter(torch.tensor(math.log(init_scale)))

    def position_scores(self, protos, qf):
        """Per-position cosine scores ``(B, K, m)`` and their attention weights."""
        p = protos.flatten(2)  # (K, d, m)
        q = qf.flatten(2)  # (B, d, m)
        pn = F.normalize(p, dim=1)
        qn = F.normalize(q, dim=1)
        corr = torch.einsum("kdi,bdj->bkij", pn, qn)  # (B, K, m_p, m_q)
        attn_p = torch.softmax(corr @ self.fusion / self.attn_temperature, dim=-1)
        attn_q = torch.softmax(corr.transpose(2, 3) @ self.fusion / self.attn_temperature, dim=-1)
        p_att = (p.unsqueeze(0) * (1 + attn_p).unsqueeze(2)).mean(-1)  # (B, K, d)
        cos = torch.einsum("bkd,bdj->bkj", F.normalize(p_att, dim=-1), qn)
        weights = (1 + attn_q) / (1 + attn_q).sum(-1, keepdim=True)
        return cos, weights

    def forward(self, protos, qf):
        cos, weights = self.position_scores(protos, qf)
        return self.log_scale.exp() * (cos * weights).sum(-1)


class FewShotModel(nn.Module):
    def __init__(self, image_shape=(3, 16, 16), head_kind="relation", hidden=32, n_pool=2):
        super().__init__()
        if head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head_kind!r}; expected one of {HEAD_KINDS}")
        self.image_shape = tuple(image_shape)
        self.head_kind = head_kind
        self.hidden = hidden
        self.n_pool = n_pool
        self.encoder = Encoder(image_shape[0], hidden, n_pool)
        d, h, w = self.feature_shape
        if head_kind == "relation":
            self.head = RelationHead(d)
        else:
            self.head = CrossAttentionHead(h * w)

    @property
    def feature_shape(self):
        _, h, w = self.image_shape
        return (self.hidden, h >> self.n_pool, w >> self.n_pool)

    def _check(self, images):
        if tuple(images.shape[-3:]) != self.image_shape:
            raise ValueError(f"expected images of shape {self.image_shape}, got {tuple(images.shape[-3:])}")

    def encode(self, images):
        self._check(images)
        return self.encoder(images)

    def prototypes(self, support):
        """Mean feature map per class for ``support`` of shape (K, N, C, H, W)."""
        if support.dim() != 5:
            raise ValueError(f"support must be (K, N, C, H, W), got {tuple(support.shape)}")
        k, n = support.shape[:2]
        feats = self.encode(support.flatten(0, 1))
        return feats.view(k, n, *feats.shape[1:]).mean(1)

    def logits_from_features(self, protos, qf):
        return self.head(protos, qf)

    def forward(self, support, query):
        """Logits ``(B, K)`` for a query batch against a per-class support."""
        return self.head(self.prototypes(support), self.encode(query))

    def config(self):
        return {"image_shape": list(self.image_shape), "head_kind": self.head_kind,
                "hidden": self.hidden, "n_pool": self.n_pool}


def classify(model, support, query, ways=None, shots=None):
    """K logits for a single query image."""
    if ways is not None and support.shape[0] != ways or shots is not None and support.shape[1] != shots:
        raise ValueError(f"support shape {tuple(support.shape[:2])} inconsistent with {ways}-way {shots}-shot")
    return model(support, query.unsqueeze(0))[0]


def model_hash(model):
    return hash_tensors(model.state_dict(), extra=model.config())


@dataclass(frozen=True)
class TrainConfig:
    episodes_per_epoch: int = 100
    epochs: int = 10
    ways: int = 5
    shots: int = 5
    n_query: int = 75
    learning_rate: float = 1e-3
    val_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name in ("seed", "epochs"):
                if value < 0:
                    raise ValueError(f"{name} must be non-negative")
            elif value <= 0:
                raise ValueError(f"{name} must be positive")


@torch.no_grad()
def episode_accuracy(model, episode):
    logits = model(episode.support, episode.query)
    return (logits.argmax(1) == episode.query_labels).float().mean().item()


def train_episodic(model, ds_train: Dataset, ds_val: Dataset, cfg: TrainConfig):
    """Minimise query cross-entropy over episodes; keep the best validation checkpoint.

    Returns the model (best weights loaded, eval mode) and a per-epoch history.
    """
    history = []
    if cfg.epochs == 0:
        return model, history
    torch.manual_seed(cfg.seed)
    rng = as_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    val_seeds = as_rng(cfg.seed + 1).integers(2**31, size=cfg.val_episodes)
    best_acc, best_state = -1.0, None

    for epoch in range(cfg.epochs):
        model.train()
        losses, accs = [], []
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(ds_train, cfg.ways, cfg.shots, cfg.n_query, rng)
            logits = model(ep.support, ep.query)
            loss = F.cross_entropy(logits, ep.query_labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}; lower the learning rate")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append((logits.argmax(1) == ep.query_labels).float().mean().item())

        model.eval()
        val_acc = float(np.mean([
            episode_accuracy(model, sample_episode(ds_val, cfg.ways, cfg.shots, cfg.n_query, int(s)))
            for s in val_seeds
        ]))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "train_acc": float(np.mean(accs)), "val_acc": val_acc})
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f", epoch, history[-1]["train_loss"],
                 history[-1]["train_acc"], val_acc)
        if val_acc > best_acc:
            best_acc, best_state = val_acc, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, history


@dataclass(frozen=True)
class AccuracyResult:
    mean: float
    half_width: float
    per_episode: np.ndarray


def confidence_half_width(values):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


def evaluate_accuracy(model, ds, n_episodes, ways, shots, n_query, seed=0) -> AccuracyResult:
    """Mean query accuracy over ``n_episodes`` with a 95% normal CI half-width."""
    model.eval()
    rng = as_rng(seed)
    accs = np.array([episode_accuracy(model, sample_episode(ds, ways, shots, n_query, rng))
                     for _ in range(n_episodes)])
    return AccuracyResult(float(accs.mean()), confidence_half_width(accs), accs)


def save_model(model, path, train_config: TrainConfig | None = None, history=None):
    cfg = asdict(train_config) if train_config is not None else None
    header = {
        "kind": "fewshot_model",
        "model": model.config(),
        "train_config": cfg,
        "train_config_hash": hash_config(cfg),
        "model_hash": model_hash(model),
        "history": history or [],
    }
    return write_archive(path, model.state_dict(), header)


def load_model(path):
    arrays, header = read_archive(path)
    if header.get("kind") != "fewshot_model":
        raise ValueError(f"{path} is not a few-shot model checkpoint")
    mc = header["model"]
    model = FewShotModel(tuple(mc["image_shape"]), mc["head_kind"], mc["hidden"], mc["n_pool"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    if model_hash(model) != header["model_hash"]:
        raise ValueError(f"checkpoint {path} failed its hash check")
    return model, header
