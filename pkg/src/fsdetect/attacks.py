"""White-box poisoning of one class's support set.

The attacker perturbs the ``N`` support images of a target class ``t`` so that
queries of ``t`` are misclassified whatever the other classes are. Every
optimisation step sees a freshly drawn episode: new non-target classes, new
non-target supports and new queries. Only the target supports receive
gradients; model parameters are never updated.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .archive import read_archive, write_archive
from .data import Dataset, Episode, as_rng, sample_episode_with_fixed_target
from .models import model_hash

log = logging.getLogger(__name__)

ATTACK_KINDS = ("pgd", "cw_sgd")
SCENARIOS = ("fixed_supports", "new_supports")


def parse_fraction(value) -> float:
    """Accept floats or fraction strings such as ``"12/255"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 12 / 255
    eta: float = 0.05
    iterations: int = 100
    kappa: float = 0.1
    const: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1] pixel units, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.eta < 0 or self.const < 0:
            raise ValueError("eta and const must be >= 0")


@dataclass
class PerturbationRecord:
    target_class: str
    deltas: torch.Tensor
    base_support: torch.Tensor
    base_indices: np.ndarray
    config: AttackConfig
    model_hash: str
    ways: int
    shots: int
    n_query: int
    trace: list = field(default_factory=list)

    @property
    def adversarial_support(self):
        return (self.base_support + self.deltas).clamp(0, 1)

    def save(self, path):
        header = {
            "kind": "perturbation_record",
            "target_class": self.target_class,
            "config": asdict(self.config),
            "model_hash": self.model_hash,
            "episode": {"ways": self.ways, "shots": self.shots, "n_query": self.n_query},
            "trace": self.trace,
        }
        arrays = {"deltas": self.deltas, "base_support": self.base_support,
                  "base_indices": np.asarray(self.base_indices, dtype=np.int64)}
        return write_archive(path, arrays, header)

    @classmethod
    def load(cls, path):
        arrays, header = read_archive(path)
        if header.get("kind") != "perturbation_record":
            raise ValueError(f"{path} is not a perturbation record")
        return cls(
            target_class=header["target_class"],
            deltas=torch.from_numpy(arrays["deltas"]),
            base_support=torch.from_numpy(arrays["base_support"]),
            base_indices=arrays["base_indices"],
            config=AttackConfig(**header["config"]),
            model_hash=header["model_hash"],
            trace=header["trace"],
            **header["episode"],
        )


def cw_margin(logits, target, kappa, targeted=True):
    """Carlini-Wagner hinge on logits ``(..., K)``.

    ``targeted=True`` is ``max(-kappa, max_{i != t} h_i - h_t)``, pushing
    class ``t`` up. ``targeted=False`` swaps the sign of the difference so
    that minimising it pushes ``t`` below the best other class.
    """
    logits = torch.as_tensor(logits, dtype=torch.float64 if not torch.is_tensor(logits) else None)
    h_t = logits[..., target]
    others = logits.clone()
    others[..., target] = -torch.inf
    gap = others.max(-1).values - h_t
    if not targeted:
        gap = -gap
    return torch.clamp(gap, min=-kappa)


def _target_logits(model, adv_support, episode, slot):
    """Logits of the target-class queries with ``adv_support`` in ``slot``."""
    mask = episode.query_labels == slot
    if not mask.any():
        raise ValueError("episode has no queries of the target class")
    with torch.no_grad():
        others = [i for i in range(episode.ways) if i != slot]
        other_protos = model.prototypes(episode.support[others])
    target_proto = model.encode(adv_support).mean(0, keepdim=True)
    protos = torch.cat([other_protos[:slot], target_proto, other_protos[slot:]])
    with torch.no_grad():
        qf = model.encode(episode.query[mask])
    return model.logits_from_features(protos, qf)


def attack_loss(model, adv_support, episode: Episode, target_class, kind="pgd", kappa=0.1):
    """Attack loss on the target queries of ``episode`` and its gradient w.r.t. ``adv_support``.

    PGD uses cross-entropy (to be ascended); CW-SGD uses the untargeted
    margin with ``t`` the true class (to be descended). Non-target supports
    are treated as constants.
    """
    if target_class not in episode.class_ids:
        raise ValueError(f"target class {target_class!r} absent from episode")
    slot = episode.label_of(target_class)
    x = adv_support.detach().clone().requires_grad_(True)
    loss = _loss_on(model, x, episode, slot, kind, kappa)
    (grad,) = torch.autograd.grad(loss, x)
    return loss.item(), grad


def _loss_on(model, x, episode, slot, kind, kappa):
    logits = _target_logits(model, x, episode, slot)
    if kind == "pgd":
        return F.cross_entropy(logits, torch.full((len(logits),), slot, dtype=torch.long))
    if kind == "cw_sgd":
        return cw_margin(logits, slot, kappa, targeted=False).mean()
    raise ValueError(f"unknown attack kind {kind!r}")


def _draw_base(ds, target_class, shots, rng):
    idx = np.sort(rng.choice(ds.n_samples(target_class), size=shots, replace=False))
    return ds.images[target_class][idx].clone(), idx


def _uniform(shape, eps, rng):
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return (torch.rand(shape, generator=gen) * 2 - 1) * eps


def run_pgd(model, ds: Dataset, target_class, ways, shots, n_query, cfg: AttackConfig,
            base_support=None, base_indices=None, check_invariant=True, callback=None):
    """Projected sign-gradient ascent on the target supports.

    ``x_0 = x + U(-eps, eps)``, then per step (on a fresh episode)
    ``x <- clip_{x, eps}(x + eta * sign(grad))`` followed by a clip to
    ``[0, 1]``. ``callback(i, x)`` sees every iterate.
    """
    if cfg.kind != "pgd":
        raise ValueError(f"run_pgd needs kind='pgd', got {cfg.kind!r}")
    model.eval()
    rng = as_rng(cfg.seed)
    if base_support is None:
        base_support, base_indices = _draw_base(ds, target_class, shots, rng)
    base_indices = np.asarray(base_indices if base_indices is not None else [], dtype=np.int64)
    eps = cfg.epsilon
    if eps == 0:
        warnings.warn("epsilon is 0: PGD cannot move; emitting zero perturbation", RuntimeWarning, stacklevel=2)
        return PerturbationRecord(target_class, torch.zeros_like(base_support), base_support, base_indices,
                                  cfg, model_hash(model), ways, shots, n_query)

    lo, hi = (base_support - eps).clamp(0, 1), (base_support + eps).clamp(0, 1)
    x = (base_support + _uniform(base_support.shape, eps, rng)).clamp(0, 1)
    trace = []
    for i in range(cfg.iterations):
        ep = sample_episode_with_fixed_target(ds, ways, shots, n_query, target_class, x, rng, exclude=base_indices)
        loss, grad = attack_loss(model, x, ep, target_class, "pgd")
        x = torch.max(torch.min(x + cfg.eta * grad.sign(), hi), lo)
        trace.append(loss)
        if check_invariant:
            assert (x - base_support).abs().max() <= eps + 1e-6 and x.min() >= 0 and x.max() <= 1
        if callback is not None:
            callback(i, x)
    return PerturbationRecord(target_class, x - base_support, base_support, base_indices,
                              cfg, model_hash(model), ways, shots, n_query, trace)


def run_cw_sgd(model, ds: Dataset, target_class, ways, shots, n_query, cfg: AttackConfig,
               base_support=None, base_indices=None, callback=None):
    """Plain gradient descent on ``||delta||_2 + const * margin``.

    No sign and no epsilon projection; ``delta`` starts at ``U(-eps, eps)``
    (zero when ``eps == 0``) and the final image is clipped to ``[0, 1]``.
    """
    if cfg.kind != "cw_sgd":
        raise ValueError(f"run_cw_sgd needs kind='cw_sgd', got {cfg.kind!r}")
    model.eval()
    rng = as_rng(cfg.seed)
    if base_support is None:
        base_support, base_indices = _draw_base(ds, target_class, shots, rng)
    base_indices = np.asarray(base_indices if base_indices is not None else [], dtype=np.int64)
    delta = _uniform(base_support.shape, cfg.epsilon, rng)
    trace = []
    for i in range(cfg.iterations):
        ep = sample_episode_with_fixed_target(ds, ways, shots, n_query, target_class,
                                              (base_support + delta).detach(), rng, exclude=base_indices)
        slot = ep.label_of(target_class)
        d = delta.detach().clone().requires_grad_(True)
        norm = torch.sqrt((d ** 2).sum() + 1e-12)
        objective = norm
        if cfg.const > 0:
            objective = objective + cfg.const * _loss_on(model, base_support + d, ep, slot, "cw_sgd", cfg.kappa)
        (grad,) = torch.autograd.grad(objective, d)
        delta = delta - cfg.eta * grad
        trace.append(objective.item())
        if callback is not None:
            callback(i, base_support + delta)
    deltas = (base_support + delta).clamp(0, 1) - base_support
    return PerturbationRecord(target_class, deltas, base_support, base_indices,
                              cfg, model_hash(model), ways, shots, n_query, trace)


def run_attack(model, ds, target_class, ways, shots, n_query, cfg: AttackConfig, **kwargs):
    fn = run_pgd if cfg.kind == "pgd" else run_cw_sgd
    return fn(model, ds, target_class, ways, shots, n_query, cfg, **kwargs)


@dataclass(frozen=True)
class ASRResult:
    mean: float
    std: float
    per_episode: np.ndarray


@torch.no_grad()
def evaluate_asr(model, record: PerturbationRecord, ds: Dataset, scenario="fixed_supports",
                 n_episodes=100, seed=0) -> ASRResult:
    """Fraction of target-class queries not predicted as the target, per fresh episode.

    ``fixed_supports`` reuses the attacked support verbatim; ``new_supports``
    adds the stored deltas to a freshly drawn target support.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if record.model_hash != model_hash(model):
        raise ValueError("perturbation record was crafted against a different model")
    model.eval()
    rng = as_rng(seed)
    t = record.target_class
    rates = []
    for _ in range(n_episodes):
        if scenario == "fixed_supports":
            ep = sample_episode_with_fixed_target(ds, record.ways, record.shots, record.n_query, t,
                                                  record.adversarial_support, rng, exclude=record.base_indices)
            support = ep.support
        else:
            ep = sample_episode_with_fixed_target(ds, record.ways, record.shots, record.n_query, t, None, rng)
            slot = ep.label_of(t)
            fresh = ep.support[slot]
            if fresh.shape != record.deltas.shape:
                raise ValueError(f"deltas {tuple(record.deltas.shape)} do not fit support {tuple(fresh.shape)}")
            support = ep.support.clone()
            support[slot] = (fresh + record.deltas).clamp(0, 1)
        slot = ep.label_of(t)
        mask = ep.query_labels == slot
        pred = model(support, ep.query[mask]).argmax(1)
        rates.append((pred != slot).float().mean().item())
    rates = np.asarray(rates)
    return ASRResult(float(rates.mean()), float(rates.std()), rates)
