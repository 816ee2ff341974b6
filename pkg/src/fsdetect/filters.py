"""Filtering functions applied to auxiliary support sets.

A filter maps a stack of images ``(n, C, H, W)`` in ``[0, 1]`` to a stack of
the same shape and range. The autoencoder filters are trained to preserve
the few-shot model's backbone features (and optionally its logits) rather
than only pixels.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import read_archive, write_archive
from .data import Dataset, as_rng, sample_episode
from .models import model_hash

log = logging.getLogger(__name__)

FILTER_KINDS = ("identity", "noise", "median_2x2", "fpa", "fpa_prime")
LOSS_VARIANTS = ("standard_ae", "fpa", "fpa_prime")


class FilterFunction:
    kind = "base"

    def __call__(self, images, seed=None):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(kind={self.kind!r})"


class IdentityFilter(FilterFunction):
    kind = "identity"

    def __call__(self, images, seed=None):
        return images


class NoiseFilter(FilterFunction):
    """Additive Gaussian noise whose per-channel variance is the channel
    variance of the images being filtered (times ``scale``)."""

    kind = "noise"

    def __init__(self, seed=0, scale=1.0):
        self.seed = seed
        self.scale = scale

    def __call__(self, images, seed=None):
        var = images.transpose(0, 1).flatten(1).var(dim=1, unbiased=False)
        std = (self.scale * var).sqrt().view(1, -1, 1, 1)
        gen = torch.Generator().manual_seed(int(self.seed if seed is None else seed))
        noise = torch.randn(images.shape, generator=gen, dtype=images.dtype)
        return (images + std * noise).clamp(0, 1)


def median_filter_2x2(image):
    """Median over the 2x2 window anchored at each pixel (reflect padding on
    the bottom/right edge). With four values the median is the mean of the
    two middle ones. Accepts ``(C, H, W)`` or ``(B, C, H, W)``."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("median filter needs images of at least 2x2 pixels")
    x = F.pad(x, (0, 1, 0, 1), mode="reflect")
    windows = x.unfold(2, 2, 1).unfold(3, 2, 1).flatten(-2)  # (B, C, H, W, 4)
    s = windows.sort(dim=-1).values
    out = 0.5 * (s[..., 1] + s[..., 2])
    return out[0] if squeeze else out


class MedianFilter(FilterFunction):
    kind = "median_2x2"

    def __call__(self, images, seed=None):
        return median_filter_2x2(images)


class ConvAutoencoder(nn.Module):
    def __init__(self, channels=3, hidden=32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(2 * hidden, hidden, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(hidden, channels, 4, stride=2, padding=1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))


def _sq_norm_scaled(a, b):
    diff = (a - b).flatten(1)
    return (diff ** 2).sum(1) / math.sqrt(diff.shape[1])


def fpa_loss(x, x_hat, f, f_hat, z=None, z_hat=None, image_weight=0.01):
    """Feature-preserving reconstruction loss, averaged over the batch.

    Per sample: ``0.01 * ||x - x_hat||^2 / sqrt(dim x) + ||f - f_hat||^2 / sqrt(dim f)``,
    plus ``||z - z_hat||^2 / sqrt(dim z)`` when logits are given.
    """
    per = image_weight * _sq_norm_scaled(x, x_hat) + _sq_norm_scaled(f, f_hat)
    if z is not None:
        per = per + _sq_norm_scaled(z, z_hat)
    return per.mean()


@dataclass(frozen=True)
class AEConfig:
    hidden: int = 32
    epochs_standard: int = 30
    epochs_finetune: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    step_size: int = 10
    gamma: float = 0.1
    ref_ways: int = 5
    ref_shots: int = 5
    seed: int = 0


@dataclass
class FPAModel:
    autoencoder: ConvAutoencoder
    loss_variant: str
    model_hash: str
    config: AEConfig
    history: list = field(default_factory=list)

    def save(self, path):
        header = {"kind": "autoencoder", "loss_variant": self.loss_variant, "model_hash": self.model_hash,
                  "config": asdict(self.config), "channels": self.autoencoder.encoder[0].in_channels,
                  "history": self.history}
        return write_archive(path, self.autoencoder.state_dict(), header)

    @classmethod
    def load(cls, path):
        arrays, header = read_archive(path)
        if header.get("kind") != "autoencoder":
            raise ValueError(f"{path} is not an autoencoder checkpoint")
        cfg = AEConfig(**header["config"])
        ae = ConvAutoencoder(header["channels"], cfg.hidden)
        ae.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        ae.eval()
        return cls(ae, header["loss_variant"], header["model_hash"], cfg, header["history"])


class AutoencoderFilter(FilterFunction):
    def __init__(self, fpa: FPAModel | None):
        if fpa is None:
            raise ValueError("autoencoder filter needs trained weights")
        self.fpa = fpa
        self.kind = "fpa_prime" if fpa.loss_variant == "fpa_prime" else "fpa"
        fpa.autoencoder.eval()

    @torch.no_grad()
    def __call__(self, images, seed=None):
        return self.fpa.autoencoder(images)


def make_filter(kind, fpa: FPAModel | None = None, seed=0, noise_scale=1.0) -> FilterFunction:
    if kind == "identity":
        return IdentityFilter()
    if kind == "noise":
        return NoiseFilter(seed, noise_scale)
    if kind == "median_2x2":
        return MedianFilter()
    if kind in ("fpa", "fpa_prime"):
        if fpa is None:
            raise ValueError(f"filter {kind!r} needs trained autoencoder weights")
        if fpa.loss_variant != kind:
            raise ValueError(f"filter {kind!r} given an autoencoder trained with {fpa.loss_variant!r}")
        return AutoencoderFilter(fpa)
    raise ValueError(f"unknown filter kind {kind!r}")


def apply_filter(r: FilterFunction, s_aux, seed=None):
    if len(s_aux) == 0:
        raise ValueError("cannot filter an empty support subset")
    out = r(s_aux, seed=seed)
    assert out.shape == s_aux.shape
    return out


def _all_images(ds: Dataset):
    return torch.cat([ds.images[c] for c in ds.classes])


def _ae_loss(ae, x, variant, fs_model, ref_support):
    x_hat = ae(x)
    if variant == "standard_ae":
        return F.mse_loss(x_hat, x)
    with torch.no_grad():
        f = fs_model.encode(x)
    f_hat = fs_model.encode(x_hat)
    z = z_hat = None
    if variant == "fpa_prime":
        with torch.no_grad():
            protos = fs_model.prototypes(ref_support)
            z = fs_model.logits_from_features(protos, f)
        z_hat = fs_model.logits_from_features(protos, f_hat)
    return fpa_loss(x, x_hat, f, f_hat, z, z_hat)


def train_autoencoder(ds_train: Dataset, ds_val: Dataset, few_shot_model, loss_variant="fpa",
                      cfg: AEConfig = AEConfig(), init: FPAModel | None = None) -> FPAModel:
    """Train the standard autoencoder, or fine-tune a feature-preserving one from it.

    For ``fpa``/``fpa_prime`` the weights start from ``init`` (a standard
    autoencoder); one is trained first when ``init`` is missing. The
    few-shot model stays frozen. ``fpa_prime`` scores logits against a
    reference episode drawn from the training split for every batch. The
    returned weights are those with the lowest validation loss.
    """
    if loss_variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {loss_variant!r}")
    few_shot_model.eval()
    for p in few_shot_model.parameters():
        p.requires_grad_(False)
    try:
        if loss_variant != "standard_ae" and init is None:
            init = train_autoencoder(ds_train, ds_val, few_shot_model, "standard_ae", cfg)
        torch.manual_seed(cfg.seed)
        rng = as_rng(cfg.seed)
        channels = ds_train.image_shape[0]
        ae = ConvAutoencoder(channels, cfg.hidden)
        if init is not None and loss_variant != "standard_ae":
            ae.load_state_dict(init.autoencoder.state_dict())
        epochs = cfg.epochs_standard if loss_variant == "standard_ae" else cfg.epochs_finetune
        lr = cfg.learning_rate if loss_variant == "standard_ae" else cfg.finetune_learning_rate
        opt = torch.optim.Adam(ae.parameters(), lr=lr, weight_decay=cfg.weight_decay)
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.step_size, gamma=cfg.gamma)

        x_train, x_val = _all_images(ds_train), _all_images(ds_val)
        val_ref = sample_episode(ds_train, cfg.ref_ways, cfg.ref_shots, cfg.ref_ways, cfg.seed + 1).support
        gen = torch.Generator().manual_seed(cfg.seed)

        def val_loss():
            ae.eval()
            with torch.no_grad():
                return float(sum(_ae_loss(ae, x_val[i:i + 256], loss_variant, few_shot_model, val_ref).item()
                                 * len(x_val[i:i + 256]) for i in range(0, len(x_val), 256)) / len(x_val))

        best, best_state, history = val_loss(), copy.deepcopy(ae.state_dict()), []
        for epoch in range(epochs):
            ae.train()
            order = torch.randperm(len(x_train), generator=gen)
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                ref = None
                if loss_variant == "fpa_prime":
                    ref = sample_episode(ds_train, cfg.ref_ways, cfg.ref_shots, cfg.ref_ways, rng).support
                loss = _ae_loss(ae, x_train[order[i:i + cfg.batch_size]], loss_variant, few_shot_model, ref)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"autoencoder loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            sched.step()
            v = val_loss()
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": v})
            log.info("%s epoch %d train %.5f val %.5f", loss_variant, epoch, history[-1]["train_loss"], v)
            if v < best:
                best, best_state = v, copy.deepcopy(ae.state_dict())
        ae.load_state_dict(best_state)
        ae.eval()
        return FPAModel(ae, loss_variant, model_hash(few_shot_model), cfg, history)
    finally:
        for p in few_shot_model.parameters():
            p.requires_grad_(True)
