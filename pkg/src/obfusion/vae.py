"""Variational autoencoder over flattened segments.

The encoder maps a [channels, window] segment to a diagonal Gaussian
posterior (mu, logvar); the decoder mirrors it back. Downstream diffusion
work uses only the deterministic posterior mean, so the latent space is a
plain compressed representation once training ends.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .checkpoints import expect_kind, load_checkpoint, save_checkpoint
from .data import Dataset
from .errors import ConfigError, NumericError, ShapeError

DESK_WIDTHS = (256, 256, 128, 64)
LARGE_WIDTHS = (2048, 2048, 1024, 512)


@dataclass
class VaePosterior:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class VaeConfig:
    widths: tuple[int, ...] = DESK_WIDTHS
    latent_dim: int = 16
    kl_weight: float = 1e-6
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 1 or not self.widths:
            raise ConfigError("latent_dim >= 1 and at least one width required")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


class VaeModel(nn.Module):
    """Symmetric MLP encoder/decoder pair over flattened segments."""

    def __init__(self, channels: int, window_len: int, cfg: VaeConfig,
                 rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.channels, self.window_len = channels, window_len
        self.latent_dim = cfg.latent_dim
        self.kl_weight = cfg.kl_weight
        self.widths = tuple(cfg.widths)
        in_dim = channels * window_len
        self.add_child("enc", nn.MLP([in_dim, *cfg.widths, 2 * cfg.latent_dim], rng))
        self.add_child("dec", nn.MLP([cfg.latent_dim, *reversed(cfg.widths), in_dim], rng))

    def _flatten(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1:] != (self.channels, self.window_len):
            raise ShapeError(f"expected [B, {self.channels}, {self.window_len}], "
                             f"got {x.shape}")
        return x.reshape(x.shape[0], -1)

    def encode(self, x: np.ndarray) -> VaePosterior:
        h = self._children["enc"].predict(self._flatten(x))
        return VaePosterior(mu=h[:, :self.latent_dim],
                            logvar=h[:, self.latent_dim:])

    def deterministic_latent(self, x: np.ndarray) -> np.ndarray:
        """Posterior mean only; the sole encoder path later stages consume."""
        return self.encode(x).mu

    def decode(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected [B, {self.latent_dim}], got {z.shape}")
        flat = self._children["dec"].predict(z)
        return flat.reshape(z.shape[0], self.channels, self.window_len)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.deterministic_latent(x))

    def meta(self) -> dict:
        return {"channels": self.channels, "window_len": self.window_len,
                "latent_dim": self.latent_dim, "widths": list(self.widths),
                "kl_weight": self.kl_weight}


def reparameterize(post: VaePosterior, noise: np.ndarray) -> np.ndarray:
    """z = mu + noise * exp(logvar / 2)."""
    return post.mu + noise * np.exp(0.5 * post.logvar)


def kl_divergence(post: VaePosterior) -> float:
    """KL(q || N(0, I)): -1/2 sum_i (1 + logvar_i - mu_i^2 - exp(logvar_i)).

    Batched posteriors are averaged over the batch after the per-sample sum
    over latent dimensions.
    """
    mu = np.atleast_2d(post.mu)
    logvar = np.atleast_2d(post.logvar)
    per_sample = -0.5 * (1.0 + logvar - mu * mu - np.exp(logvar)).sum(axis=-1)
    return float(per_sample.mean())


@dataclass
class VaeTrainResult:
    model: VaeModel
    loss_history: list[float] = field(default_factory=list)


def vae_train(dataset: Dataset, cfg: VaeConfig | None = None,
              rng: np.random.Generator | None = None) -> VaeTrainResult:
    """Minimize per-element reconstruction MSE + kl_weight * KL with AdamW."""
    cfg = cfg or VaeConfig()
    cfg.validate()
    rng = rng or np.random.default_rng(cfg.seed)
    model = VaeModel(dataset.channels, dataset.window_len, cfg, rng)
    params = model.params()
    opt = nn.make_optimizer(params, "adamw", lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    enc, dec = model._children["enc"], model._children["dec"]
    x_all = dataset.values.reshape(len(dataset), -1).astype(np.float32)
    n, d = x_all.shape
    ld = cfg.latent_dim

    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            xb = x_all[order[start:start + cfg.batch_size]]
            b = xb.shape[0]

            h, c_enc = enc.forward(xb)
            mu, logvar = h[:, :ld], h[:, ld:]
            eps = rng.standard_normal((b, ld)).astype(np.float32)
            sig = np.exp(0.5 * logvar)
            z = mu + eps * sig
            recon, c_dec = dec.forward(z)

            diff = recon - xb
            recon_loss = float((diff * diff).mean())
            kl = -0.5 * (1.0 + logvar - mu * mu - np.exp(logvar)).sum(axis=1)
            loss = recon_loss + cfg.kl_weight * float(kl.mean())
            if not np.isfinite(loss):
                raise NumericError(f"vae training diverged at epoch {epoch}: "
                                   f"loss={loss}")

            d_recon = (2.0 / diff.size) * diff
            (dz,), g_dec = dec.backward(c_dec, d_recon.astype(np.float32))
            d_mu = dz + cfg.kl_weight * mu / b
            d_logvar = (dz * eps * sig * 0.5
                        + cfg.kl_weight * (-0.5) * (1.0 - np.exp(logvar)) / b)
            dh = np.concatenate([d_mu, d_logvar], axis=1).astype(np.float32)
            _, g_enc = enc.backward(c_enc, dh)

            grads = {f"enc.{k}": v for k, v in g_enc.items()}
            grads.update({f"dec.{k}": v for k, v in g_dec.items()})
            nn.optimizer_step(opt, params, grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return VaeTrainResult(model=model, loss_history=history)


def reconstruction_mse(model: VaeModel, dataset: Dataset) -> float:
    """Per-element MSE through the deterministic path."""
    recon = model.reconstruct(dataset.values.astype(np.float32))
    return float(((recon - dataset.values) ** 2).mean())


def save_vae(path: str | os.PathLike, model: VaeModel,
             extra_meta: dict | None = None) -> str:
    meta = model.meta()
    meta.update(extra_meta or {})
    return save_checkpoint(path, "vae", model.params(), meta)


def load_vae(path: str | os.PathLike) -> VaeModel:
    ckpt = expect_kind(load_checkpoint(path), "vae")
    m = ckpt.meta
    cfg = VaeConfig(widths=tuple(m["widths"]), latent_dim=m["latent_dim"],
                    kl_weight=m["kl_weight"])
    model = VaeModel(m["channels"], m["window_len"], cfg,
                     np.random.default_rng(0))
    model.set_params(ckpt.params)
    return model
