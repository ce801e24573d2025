"""Mutual information estimation via the Donsker-Varadhan bound.

A statistics network T(a, b) is trained to maximize

    E_joint[T] - log E_marginal[exp T]

where marginal pairs are built by shuffling b against a. The reported value
is the bound on held-out pairs, smoothed over the last few evaluations and
clamped at zero; all values are in nats.

The gradient of the log-term uses an exponential moving average of the
denominator (tracked in log space so large T cannot overflow), which removes
most of the small-batch bias of the naive estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import ConfigError, NumericError

MIN_PAIRS = 1000


@dataclass
class MineConfig:
    width: int = 128
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    ema_decay: float = 0.99
    holdout: float = 0.2
    eval_every: int = 25
    smooth_evals: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.width < 1 or self.steps < 1 or self.batch_size < 2:
            raise ConfigError("width, steps >= 1 and batch_size >= 2 required")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must be in (0, 1)")
        if self.eval_every < 1 or self.smooth_evals < 1:
            raise ConfigError("eval_every and smooth_evals must be >= 1")


class MineNet(nn.Module):
    """Three stacked FC layers scoring a candidate pair."""

    def __init__(self, dim_a: int, dim_b: int, width: int,
                 rng: np.random.Generator):
        super().__init__()
        self.dim_a, self.dim_b = dim_a, dim_b
        self.add_child("mlp", nn.MLP([dim_a + dim_b, width, width, 1], rng))

    def forward(self, a: np.ndarray, b: np.ndarray):
        h = np.concatenate([a, b], axis=1)
        t, cache = self._children["mlp"].forward(h)
        return t[:, 0], cache

    def backward(self, cache, grad_out):
        (dh,), grads = self._children["mlp"].backward(cache,
                                                      grad_out[:, None])
        return (dh[:, :self.dim_a], dh[:, self.dim_a:]), \
            nn.prefix_grads("mlp", grads)


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x[:, None] if x.ndim == 1 else x


def _log_mean_exp(t: np.ndarray) -> float:
    m = float(t.max())
    return m + float(np.log(np.mean(np.exp(t - m))))


def dv_bound(net: MineNet, a: np.ndarray, b: np.ndarray,
             rng: np.random.Generator) -> float:
    """Bound value on the given pairs, marginals from one fresh shuffle."""
    t_joint = net.predict(a, b)
    t_marg = net.predict(a, b[rng.permutation(a.shape[0])])
    return float(t_joint.mean()) - _log_mean_exp(t_marg)


def mine_estimate(samples_a: np.ndarray, samples_b: np.ndarray,
                  cfg: MineConfig | None = None,
                  rng: np.random.Generator | None = None) -> float:
    cfg = cfg or MineConfig()
    cfg.validate()
    a = _as_matrix(samples_a)
    b = _as_matrix(samples_b)
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"paired samples required, got {a.shape[0]} "
                          f"vs {b.shape[0]}")
    n = a.shape[0]
    if n < MIN_PAIRS:
        raise ConfigError(f"mine_estimate needs >= {MIN_PAIRS} pairs, got {n}")
    rng = rng or np.random.default_rng(cfg.seed)

    net = MineNet(a.shape[1], b.shape[1], cfg.width, rng)
    opt = nn.make_optimizer(net.params(), "adam", lr=cfg.lr)

    order = rng.permutation(n)
    n_hold = max(2, int(round(cfg.holdout * n)))
    hold, fit = order[:n_hold], order[n_hold:]
    batch = min(cfg.batch_size, fit.size)

    log_ema = None
    evals: list[float] = []
    for step in range(cfg.steps):
        idx = fit[rng.integers(0, fit.size, size=batch)]
        midx = fit[rng.integers(0, fit.size, size=batch)]
        t_joint, c_joint = net.forward(a[idx], b[idx])
        t_marg, c_marg = net.forward(a[idx], b[midx])
        lme = _log_mean_exp(t_marg)
        if not np.isfinite(lme) or not np.isfinite(t_joint.mean()):
            raise NumericError(f"MINE diverged at step {step}")
        if log_ema is None:
            log_ema = lme
        # ascend the bound: joint term pushes T up, log-term pulls down
        g_joint = np.full(batch, -1.0 / batch)
        g_marg = np.exp(t_marg - log_ema) / batch
        _, grads_j = net.backward(c_joint, g_joint)
        _, grads_m = net.backward(c_marg, g_marg)
        grads = {k: grads_j[k] + grads_m[k] for k in grads_j}
        nn.optimizer_step(opt, net.params(), grads)
        log_ema = np.logaddexp(np.log(cfg.ema_decay) + log_ema,
                               np.log1p(-cfg.ema_decay) + lme)
        if (step + 1) % cfg.eval_every == 0:
            evals.append(dv_bound(net, a[hold], b[hold], rng))

    if not evals:
        evals.append(dv_bound(net, a[hold], b[hold], rng))
    tail = evals[-cfg.smooth_evals:]
    return max(0.0, float(np.mean(tail)))
