"""Public-attribute encoder trained with InfoNCE over explicit negatives.

Positives share the anchor's public class; negatives differ in it. The
sampler's signature takes only the public label array, so private labels
cannot influence pair selection even by accident. Per-epoch embedding
snapshots are written in the dataset file format for downstream
information-leakage audits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .checkpoints import expect_kind, load_checkpoint, save_checkpoint
from .data import AttributeSpec, Dataset, save_dataset
from .errors import ConfigError, NumericError, SamplingError, ShapeError


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    negatives: int = 16
    embed_dim: int = 8
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-4
    conv_channels: tuple[int, int] = (16, 32)
    fc_widths: tuple[int, int] = (64, 32)
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.embed_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("embed_dim, epochs, batch_size must be >= 1")


class PublicEncoder(nn.Module):
    """Two strided conv layers then a three-layer FC head, unit-norm output.

    The cosine InfoNCE objective is scale invariant, so embedding magnitude
    is never trained; left free, it tracks signal energy and leaks exactly
    the private attributes the encoder is meant to drop. Projecting onto
    the unit sphere keeps z_U restricted to the geometry the loss shapes.
    """

    def __init__(self, channels: int, window_len: int, embed_dim: int,
                 rng: np.random.Generator,
                 conv_channels: tuple[int, int] = (16, 32),
                 fc_widths: tuple[int, int] = (64, 32)):
        super().__init__()
        self.channels, self.window_len = channels, window_len
        self.embed_dim = embed_dim
        self.conv_channels = tuple(conv_channels)
        self.fc_widths = tuple(fc_widths)
        c1, c2 = conv_channels
        self.add_child("conv1", nn.Conv1d(channels, c1, 3, rng, stride=2))
        l1 = (window_len - 1) // 2 + 1
        self.add_child("conv2", nn.Conv1d(c1, c2, 3, rng, stride=2))
        l2 = (l1 - 1) // 2 + 1
        self.flat_dim = c2 * l2
        self.add_child("fc", nn.MLP([self.flat_dim, *fc_widths, embed_dim], rng))
        self.act = nn.SiLU()

    def forward(self, x: np.ndarray):
        if x.ndim != 3 or x.shape[1:] != (self.channels, self.window_len):
            raise ShapeError(f"expected [B, {self.channels}, {self.window_len}], "
                             f"got {x.shape}")
        h, c1 = self._children["conv1"].forward(x)
        h, a1 = self.act.forward(h)
        h, c2 = self._children["conv2"].forward(h)
        h, a2 = self.act.forward(h)
        shape = h.shape
        h, cf = self._children["fc"].forward(h.reshape(h.shape[0], -1))
        norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        z = h / norm
        return z, (c1, a1, c2, a2, shape, cf, norm, z)

    def backward(self, cache, grad_out):
        c1, a1, c2, a2, shape, cf, norm, z = cache
        grads: dict[str, np.ndarray] = {}
        g_h = (grad_out - (grad_out * z).sum(axis=1, keepdims=True) * z) / norm
        (dh,), g = self._children["fc"].backward(cf, g_h)
        grads.update(nn.prefix_grads("fc", g))
        dh = dh.reshape(shape)
        (dh,), _ = self.act.backward(a2, dh)
        (dh,), g = self._children["conv2"].backward(c2, dh)
        grads.update(nn.prefix_grads("conv2", g))
        (dh,), _ = self.act.backward(a1, dh)
        (dx,), g = self._children["conv1"].backward(c1, dh)
        grads.update(nn.prefix_grads("conv1", g))
        return (dx,), grads

    def meta(self) -> dict:
        return {"channels": self.channels, "window_len": self.window_len,
                "embed_dim": self.embed_dim,
                "conv_channels": list(self.conv_channels),
                "fc_widths": list(self.fc_widths)}


def embed_public(model: PublicEncoder, x: np.ndarray) -> np.ndarray:
    """Deterministic conditioning vectors for a batch of segments."""
    return model.predict(x.astype(np.float32))


# ---------------------------------------------------------------------------
# similarity and loss


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine similarity undefined for a zero vector")
    return float(u @ v) / (nu * nv)


def info_nce_loss(z: np.ndarray, z_pos: np.ndarray, z_negs: np.ndarray,
                  tau: float) -> float:
    """Single-anchor loss: -log softmax over [positive, negatives] at 1/tau."""
    loss, _, _, _ = info_nce_batch(z[None], z_pos[None], z_negs[None], tau)
    return loss


def info_nce_batch(Z: np.ndarray, P: np.ndarray, N: np.ndarray, tau: float):
    """Mean InfoNCE over a batch, with gradients.

    Z [B, d] anchors, P [B, d] positives, N [B, K, d] negatives.
    Returns (loss, dZ, dP, dN). Cosine similarities feed a softmax over
    K+1 candidates; log-sum-exp uses max subtraction.
    """
    if tau <= 0:
        raise ConfigError("temperature must be > 0")
    b, d = Z.shape
    k = N.shape[1]
    cand = np.concatenate([P[:, None, :], N], axis=1)

    zn = np.linalg.norm(Z, axis=1)
    cn = np.linalg.norm(cand, axis=2)
    if (zn == 0).any() or (cn == 0).any():
        raise NumericError("cosine similarity undefined for a zero vector")
    zu = Z / zn[:, None]
    cu = cand / cn[:, :, None]
    sims = np.einsum("bd,bkd->bk", zu, cu)

    logits = sims / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float((lse - logits[:, 0]).mean())

    soft = np.exp(logits - m)
    soft /= soft.sum(axis=1, keepdims=True)
    dsims = soft.copy()
    dsims[:, 0] -= 1.0
    dsims /= tau * b

    # d cos(z, c) / dz = c_u/|z| - cos * z_u/|z|;  symmetric in c
    dZ = (np.einsum("bk,bkd->bd", dsims, cu)
          - np.einsum("bk,bk->b", dsims, sims)[:, None] * zu) / zn[:, None]
    dcand = (dsims[:, :, None] * zu[:, None, :]
             - (dsims * sims)[:, :, None] * cu) / cn[:, :, None]
    return loss, dZ, dcand[:, 0, :], dcand[:, 1:, :]


# ---------------------------------------------------------------------------
# sampling


def sample_contrastive_batch(u_labels: np.ndarray, anchor: int, k: int,
                             rng: np.random.Generator) -> tuple[int, int, np.ndarray]:
    """Pick a positive and k distinct negatives for one anchor, by index.

    Receives only the public label array, so selection cannot condition on
    anything else. Uniform over each eligibility set.
    """
    u_anchor = u_labels[anchor]
    pos_pool = np.flatnonzero(u_labels == u_anchor)
    pos_pool = pos_pool[pos_pool != anchor]
    if pos_pool.size == 0:
        raise SamplingError(f"anchor class {u_anchor} has no other members")
    neg_pool = np.flatnonzero(u_labels != u_anchor)
    if neg_pool.size < k:
        raise SamplingError(f"need {k} negatives, only {neg_pool.size} "
                            f"segments differ from class {u_anchor}")
    pos = int(rng.choice(pos_pool))
    negs = rng.choice(neg_pool, size=k, replace=False)
    return anchor, pos, negs


# ---------------------------------------------------------------------------
# training


@dataclass
class ContrastiveTrainResult:
    model: PublicEncoder
    loss_history: list[float] = field(default_factory=list)
    snapshot_paths: list[str] = field(default_factory=list)


def _snapshot_dataset(model: PublicEncoder, dataset: Dataset) -> Dataset:
    emb = embed_public(model, dataset.values)
    return Dataset(values=emb[:, :, None].astype(np.float32),
                   labels={k: v.copy() for k, v in dataset.labels.items()},
                   schema=[AttributeSpec(a.name, a.cardinality, a.role)
                           for a in dataset.schema])


def train_contrastive(dataset: Dataset, cfg: ContrastiveConfig | None = None,
                      rng: np.random.Generator | None = None,
                      snapshot_dir: str | os.PathLike | None = None
                      ) -> ContrastiveTrainResult:
    """Adam on InfoNCE over stratified (anchor, positive, negatives) draws.

    With snapshot_dir set, writes one dataset-format embedding file per epoch
    (epoch 0 = untrained encoder) for leakage audits.
    """
    cfg = cfg or ContrastiveConfig()
    cfg.validate()
    dataset.validate()
    u = dataset.labels[dataset.public_attribute]
    if len(np.unique(u)) < 2:
        raise ConfigError("contrastive training needs >= 2 public classes")
    rng = rng or np.random.default_rng(cfg.seed)
    if snapshot_dir is not None:
        os.makedirs(snapshot_dir, exist_ok=True)
    model = PublicEncoder(dataset.channels, dataset.window_len, cfg.embed_dim,
                          rng, cfg.conv_channels, cfg.fc_widths)
    opt = nn.make_optimizer(model.params(), "adam", lr=cfg.lr)
    x_all = dataset.values.astype(np.float32)
    n, k = len(dataset), cfg.negatives

    result = ContrastiveTrainResult(model=model)

    def snapshot(epoch: int):
        if snapshot_dir is None:
            return
        path = os.path.join(os.fspath(snapshot_dir),
                            f"embeddings-epoch-{epoch:03d}.clk")
        save_dataset(path, _snapshot_dataset(model, dataset))
        result.snapshot_paths.append(path)

    snapshot(0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            anchors = order[start:start + cfg.batch_size]
            b = anchors.size
            pos = np.empty(b, dtype=np.int64)
            negs = np.empty((b, k), dtype=np.int64)
            for j, a in enumerate(anchors):
                _, pos[j], negs[j] = sample_contrastive_batch(u, int(a), k, rng)

            stacked = np.concatenate([x_all[anchors], x_all[pos],
                                      x_all[negs.reshape(-1)]])
            z_all, cache = model.forward(stacked)
            Z, P = z_all[:b], z_all[b:2 * b]
            Ng = z_all[2 * b:].reshape(b, k, -1)
            loss, dZ, dP, dN = info_nce_batch(Z, P, Ng, cfg.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"contrastive training diverged at epoch "
                                   f"{epoch}: loss={loss}")
            d_all = np.concatenate([dZ, dP, dN.reshape(b * k, -1)])
            _, grads = model.backward(cache, d_all.astype(np.float32))
            nn.optimizer_step(opt, model.params(), grads)
            epoch_loss += loss
            n_batches += 1
        result.loss_history.append(epoch_loss / n_batches)
        snapshot(epoch)
    return result


def save_contrastive(path: str | os.PathLike, model: PublicEncoder,
                     extra_meta: dict | None = None) -> str:
    meta = model.meta()
    meta.update(extra_meta or {})
    return save_checkpoint(path, "contrastive", model.params(), meta)


def load_contrastive(path: str | os.PathLike) -> PublicEncoder:
    ckpt = expect_kind(load_checkpoint(path), "contrastive")
    m = ckpt.meta
    model = PublicEncoder(m["channels"], m["window_len"], m["embed_dim"],
                          np.random.default_rng(0),
                          tuple(m["conv_channels"]), tuple(m["fc_widths"]))
    model.set_params(ckpt.params)
    return model
