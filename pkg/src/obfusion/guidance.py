"""Guided sampling: conditioned noise prediction plus class negation.

The sampler steers twice. Conditioning contrast amplifies what the public
embedding asks for:

    eps_bar = (1 + w_u) * eps(z_t, t, z_U) - w_u * eps(z_t, t, 0)

and each negation pushes the trajectory away from a true private class by
differentiating an auxiliary classifier evaluated on the predicted clean
latent:

    eps_bar += w_s * sqrt(1 - alpha_bar_t) * grad_{z_t} log p(s_true | z_U, z0_hat)

z0_hat treats eps_bar as constant (stop-gradient), so the chain factor
through z_t is exactly 1/sqrt(alpha_bar_t). Reductions (w_u = 0, w_s = 0,
empty negation lists) return the reduced branch bitwise, not approximately.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .checkpoints import expect_kind, load_checkpoint, save_checkpoint
from .contrastive import PublicEncoder, embed_public
from .data import Dataset
from .diffusion import NoiseSchedule, UNet1d, ddim_sample, predict_z0
from .errors import ConfigError, NumericError, ShapeError
from .vae import VaeModel

W_U_PLAIN_RANGE = (0.0, 9.0)
W_S_PLAIN_RANGE = (0.0, 0.1)


# ---------------------------------------------------------------------------
# guidance request types


@dataclass
class Negation:
    """One private attribute to steer away from.

    s_true identifies the requester's actual class; batch paths fill it per
    segment from the dataset labels, single requests must set it explicitly.
    """

    attribute: str
    weight: float
    s_true: int | None = None


@dataclass
class GuidanceSpec:
    w_u: float = 0.0
    negations: list[Negation] = field(default_factory=list)

    def validate(self) -> None:
        if self.w_u < 0:
            raise ConfigError(f"w_u must be >= 0, got {self.w_u}")
        names = [n.attribute for n in self.negations]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate attribute in negations")
        for n in self.negations:
            if n.weight < 0:
                raise ConfigError(f"negation weight must be >= 0, got {n.weight}")
        if self.w_u > W_U_PLAIN_RANGE[1]:
            warnings.warn(f"w_u={self.w_u} outside the studied range "
                          f"{W_U_PLAIN_RANGE}; results unvalidated")
        for n in self.negations:
            if n.weight > W_S_PLAIN_RANGE[1]:
                warnings.warn(f"w_s={n.weight} for {n.attribute!r} outside the "
                              f"studied range {W_S_PLAIN_RANGE}; results "
                              f"unvalidated")

    def describe(self) -> dict:
        return {"w_u": self.w_u,
                "negations": [{"attribute": n.attribute, "weight": n.weight,
                               "s_true": n.s_true} for n in self.negations]}


# ---------------------------------------------------------------------------
# auxiliary privacy classifier


class PrivacyClassifier(nn.Module):
    """Five stacked FC layers mapping (z_U ++ latent) to class log-probs."""

    def __init__(self, cond_dim: int, latent_dim: int, n_classes: int,
                 rng: np.random.Generator,
                 widths: tuple[int, ...] = (64, 64, 32, 16)):
        super().__init__()
        self.cond_dim, self.latent_dim = cond_dim, latent_dim
        self.n_classes = n_classes
        self.widths = tuple(widths)
        self.add_child("mlp", nn.MLP([cond_dim + latent_dim, *widths, n_classes],
                                     rng))

    def forward(self, z_u: np.ndarray, z: np.ndarray):
        if z_u.shape[1] != self.cond_dim or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected cond {self.cond_dim} + latent "
                             f"{self.latent_dim}, got {z_u.shape} and {z.shape}")
        h = np.concatenate([z_u, z], axis=1)
        logits, c_mlp = self._children["mlp"].forward(h)
        logp = nn.log_softmax(logits)
        return logp, (c_mlp, logp)

    def backward(self, cache, grad_out):
        c_mlp, logp = cache
        p = np.exp(logp)
        dlogits = grad_out - p * grad_out.sum(axis=1, keepdims=True)
        (dh,), grads = self._children["mlp"].backward(c_mlp, dlogits)
        return (dh[:, :self.cond_dim], dh[:, self.cond_dim:]), \
            nn.prefix_grads("mlp", grads)

    def log_prob(self, z_u: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.predict(z_u, z)

    def meta(self) -> dict:
        return {"cond_dim": self.cond_dim, "latent_dim": self.latent_dim,
                "n_classes": self.n_classes, "widths": list(self.widths)}


@dataclass
class AuxConfig:
    widths: tuple[int, ...] = (64, 64, 32, 16)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-4
    holdout: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must be in (0, 1)")


@dataclass
class AuxTrainResult:
    model: PrivacyClassifier
    holdout_accuracy: float
    loss_history: list[float] = field(default_factory=list)


def train_aux_privacy(latents: np.ndarray, embeddings: np.ndarray,
                      labels: np.ndarray, cfg: AuxConfig | None = None,
                      rng: np.random.Generator | None = None) -> AuxTrainResult:
    """Cross-entropy training of the privacy head on clean working latents."""
    cfg = cfg or AuxConfig()
    cfg.validate()
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("aux training needs >= 2 private classes")
    n_classes = int(labels.max()) + 1
    rng = rng or np.random.default_rng(cfg.seed)
    n = latents.shape[0]
    if embeddings.shape[0] != n or labels.shape[0] != n:
        raise ShapeError("latents, embeddings, labels must align")

    model = PrivacyClassifier(embeddings.shape[1], latents.shape[1],
                              n_classes, rng, cfg.widths)
    opt = nn.make_optimizer(model.params(), "adam", lr=cfg.lr)

    perm = rng.permutation(n)
    n_hold = max(1, int(round(cfg.holdout * n)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    z_u = embeddings.astype(np.float32)
    z = latents.astype(np.float32)

    history = []
    for epoch in range(cfg.epochs):
        order = fit[rng.permutation(fit.size)]
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logp, cache = model.forward(z_u[idx], z[idx])
            b = idx.size
            loss = -float(logp[np.arange(b), labels[idx]].mean())
            if not np.isfinite(loss):
                raise NumericError(f"aux training diverged at epoch {epoch}")
            seed = np.zeros_like(logp)
            seed[np.arange(b), labels[idx]] = -1.0 / b
            _, grads = model.backward(cache, seed)
            nn.optimizer_step(opt, model.params(), grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)

    pred = model.log_prob(z_u[hold], z[hold]).argmax(axis=1)
    acc = float((pred == labels[hold]).mean())
    return AuxTrainResult(model=model, holdout_accuracy=acc,
                          loss_history=history)


def save_aux(path: str | os.PathLike, model: PrivacyClassifier,
             attribute: str, extra_meta: dict | None = None) -> str:
    meta = model.meta()
    meta["attribute"] = attribute
    meta.update(extra_meta or {})
    return save_checkpoint(path, "aux-privacy", model.params(), meta)


def load_aux(path: str | os.PathLike) -> tuple[PrivacyClassifier, str]:
    ckpt = expect_kind(load_checkpoint(path), "aux-privacy")
    m = ckpt.meta
    model = PrivacyClassifier(m["cond_dim"], m["latent_dim"], m["n_classes"],
                              np.random.default_rng(0), tuple(m["widths"]))
    model.set_params(ckpt.params)
    return model, m["attribute"]


# ---------------------------------------------------------------------------
# guided noise prediction


def ccfg_eps(model: UNet1d, z_t: np.ndarray, t, z_U: np.ndarray,
             w_u: float) -> np.ndarray:
    """Contrast the conditioned branch against the zero-conditioned one."""
    eps_c = model.predict(z_t, t, z_U)
    if w_u == 0.0:
        return eps_c
    eps_u = model.predict(z_t, t, np.zeros_like(z_U))
    if w_u == -1.0:
        return eps_u
    return (1.0 + w_u) * eps_c - w_u * eps_u


def privacy_grad(eta: PrivacyClassifier, z_t: np.ndarray, t: int,
                 z_U: np.ndarray, s_true, eps_bar: np.ndarray,
                 schedule: NoiseSchedule) -> np.ndarray:
    """grad_{z_t} log p(s_true | z_U, z0_hat) under the stop-gradient rule.

    eps_bar is held constant, so the only z_t dependence is the affine
    z0_hat map and the chain factor is 1/sqrt(alpha_bar_t).
    """
    a = float(schedule.alpha_bars[t])
    if a <= 0.0:
        raise NumericError(f"alpha_bar[{t}] = {a}: guidance singular")
    z0_hat = predict_z0(z_t, eps_bar, t, schedule)
    logp, cache = eta.forward(z_U.astype(np.float32),
                              z0_hat.astype(np.float32))
    b = z_t.shape[0]
    s = np.broadcast_to(np.asarray(s_true, dtype=np.int64), (b,))
    seed = np.zeros_like(logp)
    seed[np.arange(b), s] = 1.0
    (_, d_z0), _ = eta.backward(cache, seed)
    return d_z0 / np.sqrt(a)


def guided_eps_multi(model: UNet1d, negations, z_t: np.ndarray, t: int,
                     z_U: np.ndarray, w_u: float,
                     schedule: NoiseSchedule) -> np.ndarray:
    """CCFG plus summed negation terms.

    negations: iterable of (eta, s_true, w_s); zero-weight entries are
    skipped so they cannot perturb the float result.
    """
    eps_bar = ccfg_eps(model, z_t, t, z_U, w_u)
    active = [(eta, s, w) for eta, s, w in negations if w != 0.0]
    if not active:
        return eps_bar
    total = None
    for eta, s_true, w_s in active:
        g = w_s * privacy_grad(eta, z_t, t, z_U, s_true, eps_bar, schedule)
        total = g if total is None else total + g
    a = float(schedule.alpha_bars[t])
    return eps_bar + np.sqrt(1.0 - a) * total


def guided_eps(model: UNet1d, eta: PrivacyClassifier, z_t: np.ndarray, t: int,
               z_U: np.ndarray, s_true, w_u: float, w_s: float,
               schedule: NoiseSchedule) -> np.ndarray:
    """Single-negation form; delegates so the K=1 reduction is exact."""
    return guided_eps_multi(model, [(eta, s_true, w_s)], z_t, t, z_U, w_u,
                            schedule)


# ---------------------------------------------------------------------------
# end-to-end obfuscation


@dataclass
class ObfuscationRequest:
    x: np.ndarray
    spec: GuidanceSpec
    seed: int


@dataclass
class ModelBundle:
    """Frozen models wired together for sampling."""

    vae: VaeModel
    phi: PublicEncoder
    unet: UNet1d
    schedule: NoiseSchedule
    latent_scale: float
    aux: dict[str, PrivacyClassifier] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.phi.embed_dim != self.unet.cond_dim:
            raise ConfigError(f"embedding dim {self.phi.embed_dim} != "
                              f"denoiser cond dim {self.unet.cond_dim}")
        if self.vae.latent_dim != self.unet.latent_dim:
            raise ConfigError(f"autoencoder latent {self.vae.latent_dim} != "
                              f"denoiser latent {self.unet.latent_dim}")
        if (self.vae.channels, self.vae.window_len) != \
                (self.phi.channels, self.phi.window_len):
            raise ConfigError("autoencoder and public encoder expect "
                              "different segment shapes")
        for name, eta in self.aux.items():
            if eta.latent_dim != self.unet.latent_dim or \
                    eta.cond_dim != self.phi.embed_dim:
                raise ConfigError(f"aux classifier {name!r} shape-incompatible")
        if not np.isfinite(self.latent_scale) or self.latent_scale <= 0:
            raise ConfigError(f"latent_scale must be positive, "
                              f"got {self.latent_scale}")


def request_noise(seed: int, index: int, latent_dim: int) -> np.ndarray:
    """Initial z_T for one request, independent of batch composition."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    return rng.standard_normal(latent_dim).astype(np.float32)


def _resolve_negations(spec: GuidanceSpec, bundle: ModelBundle,
                       s_lookup) -> list:
    out = []
    for neg in spec.negations:
        if neg.attribute not in bundle.aux:
            raise ConfigError(f"no aux classifier for attribute "
                              f"{neg.attribute!r}")
        out.append((bundle.aux[neg.attribute], s_lookup(neg), neg.weight))
    return out


def _sample_batch(bundle: ModelBundle, x: np.ndarray, z_T: np.ndarray,
                  negations, w_u: float) -> np.ndarray:
    z_U = embed_public(bundle.phi, x)

    def eps_fn(z, t):
        return guided_eps_multi(bundle.unet, negations, z.astype(np.float32),
                                t, z_U, w_u, bundle.schedule)

    z0_scaled = ddim_sample(bundle.schedule, z_T, eps_fn)
    z0 = (z0_scaled / bundle.latent_scale).astype(np.float32)
    return bundle.vae.decode(z0)


def obfuscate(request: ObfuscationRequest, bundle: ModelBundle) -> np.ndarray:
    """Transform one segment; returns x' with the input's shape."""
    bundle.validate()
    request.spec.validate()
    x = np.asarray(request.x, dtype=np.float32)
    if x.shape != (bundle.vae.channels, bundle.vae.window_len):
        raise ConfigError(f"segment shape {x.shape} does not match trained "
                          f"({bundle.vae.channels}, {bundle.vae.window_len})")

    def s_lookup(neg: Negation) -> int:
        if neg.s_true is None:
            raise ConfigError(f"negation {neg.attribute!r} needs s_true for "
                              f"single-request obfuscation")
        return neg.s_true

    negations = _resolve_negations(request.spec, bundle, s_lookup)
    z_T = request_noise(request.seed, 0, bundle.vae.latent_dim)[None]
    return _sample_batch(bundle, x[None], z_T, negations, request.spec.w_u)[0]


def obfuscate_batch(dataset: Dataset, bundle: ModelBundle, spec: GuidanceSpec,
                    seed: int, batch_size: int = 128
                    ) -> tuple[Dataset, dict]:
    """Transform a whole dataset; private labels are read only where a
    negation names their attribute.

    Returns the obfuscated dataset (labels carried over for evaluation) and
    a sidecar dict recording the guidance spec, seed, and model digests.
    """
    bundle.validate()
    spec.validate()
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if (dataset.channels, dataset.window_len) != \
            (bundle.vae.channels, bundle.vae.window_len):
        raise ConfigError(f"dataset segments {dataset.channels}x"
                          f"{dataset.window_len} do not match trained shapes")

    n = len(dataset)
    out = np.empty_like(dataset.values)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = dataset.values[idx].astype(np.float32)
        z_T = np.stack([request_noise(seed, int(i), bundle.vae.latent_dim)
                        for i in idx])

        def s_lookup(neg: Negation, idx=idx):
            return dataset.labels[neg.attribute][idx]

        negations = _resolve_negations(spec, bundle, s_lookup)
        out[idx] = _sample_batch(bundle, x, z_T, negations, spec.w_u)

    sidecar = {"guidance": spec.describe(), "seed": seed,
               "n_segments": n, "batch_size": batch_size,
               "latent_scale": bundle.latent_scale,
               "checkpoint_digests": dict(bundle.digests)}
    return dataset.with_values(out), sidecar
