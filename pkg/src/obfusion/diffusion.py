"""Latent diffusion: noise schedule, forward process, 1-D UNet, DDIM sampling.

The latent vector is treated as a one-channel sequence so 1-D convolutions
apply. Conditioning (a public-attribute embedding) and the timestep embedding
enter every residual block through adaptive group normalization; the
unconditional branch is the all-zero conditioning vector.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .checkpoints import expect_kind, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_DDIM_STEPS = 50


# ---------------------------------------------------------------------------
# schedule


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    ddim_steps: np.ndarray
    n_ddim: int

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            raise ConfigError(f"timestep out of range [0, {self.T})")
        return t


def make_linear_schedule(T: int = DEFAULT_T,
                         beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END,
                         n_ddim: int = DEFAULT_DDIM_STEPS) -> NoiseSchedule:
    """Linearly spaced betas (endpoints inclusive) and derived tables.

    The DDIM sub-sequence is n_ddim uniformly spaced timesteps rounded to
    integers, always containing 0 and T-1.
    """
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, "
                          f"got {beta_start}, {beta_end}")
    if n_ddim < 2:
        raise ConfigError(f"n_ddim must be >= 2, got {n_ddim}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    steps = np.unique(np.round(np.linspace(0, T - 1, min(n_ddim, T))).astype(np.int64))
    return NoiseSchedule(T=T, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, ddim_steps=steps,
                         n_ddim=n_ddim)


def mix_signal_noise(z0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """sqrt(a)*z0 + sqrt(1-a)*eps with a broadcast over the batch."""
    a = np.asarray(alpha_bar, dtype=np.float64)
    while a.ndim < z0.ndim:
        a = a[..., None]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward process z_t given explicit noise."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    t = schedule.check_t(t)
    return mix_signal_noise(z0, eps, schedule.alpha_bars[t])


def predict_z0(z_t: np.ndarray, eps_bar: np.ndarray, t: int,
               schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward process under a noise estimate.

    z0_hat = (z_t - sqrt(1 - a_bar_t) * eps_bar) / sqrt(a_bar_t)
    """
    schedule.check_t(t)
    a = float(schedule.alpha_bars[t])
    if a <= 0.0:
        raise NumericError(f"alpha_bar[{t}] = {a}: clean-data estimate singular")
    return (z_t - np.sqrt(1.0 - a) * eps_bar) / np.sqrt(a)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM update; t_prev = -1 returns the clean estimate."""
    if t_prev != -1 and t_prev >= t:
        raise ConfigError(f"t_prev {t_prev} must be < t {t} (or -1)")
    z0_hat = predict_z0(z_t, eps_hat, t, schedule)
    if t_prev == -1:
        return z0_hat
    a_prev = float(schedule.alpha_bars[t_prev])
    return np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * eps_hat


def ddim_sample(schedule: NoiseSchedule, z_T: np.ndarray, eps_fn) -> np.ndarray:
    """Run the full reverse chain from z_T.

    eps_fn(z_t, t) -> noise estimate for the whole batch; guidance wrappers
    slot in here. The last step uses the -1 sentinel, so the return value is
    the clean-data estimate at the smallest timestep.
    """
    steps = schedule.ddim_steps
    z = z_T
    for i in range(len(steps) - 1, -1, -1):
        t = int(steps[i])
        t_prev = int(steps[i - 1]) if i > 0 else -1
        z = ddim_step(z, eps_fn(z, t), t, t_prev, schedule)
    return z


# ---------------------------------------------------------------------------
# noise-prediction UNet


class ResBlock1d(nn.Module):
    """AdaGN -> SiLU -> conv, twice, with a learned or identity skip."""

    def __init__(self, c_in: int, c_out: int, t_dim: int, cond_dim: int,
                 rng: np.random.Generator, groups: int = 8):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.add_child("norm1", nn.AdaGN(c_in, t_dim, cond_dim, rng, groups))
        self.add_child("conv1", nn.Conv1d(c_in, c_out, 3, rng))
        self.add_child("norm2", nn.AdaGN(c_out, t_dim, cond_dim, rng, groups))
        self.add_child("conv2", nn.Conv1d(c_out, c_out, 3, rng, zero_init=True))
        self.act = nn.SiLU()
        if c_in != c_out:
            self.add_child("skip", nn.Conv1d(c_in, c_out, 1, rng))

    def forward(self, h, t_emb, cond):
        n1, c_n1 = self._children["norm1"].forward(h, t_emb, cond)
        a1, c_a1 = self.act.forward(n1)
        h1, c_c1 = self._children["conv1"].forward(a1)
        n2, c_n2 = self._children["norm2"].forward(h1, t_emb, cond)
        a2, c_a2 = self.act.forward(n2)
        h2, c_c2 = self._children["conv2"].forward(a2)
        if "skip" in self._children:
            s, c_s = self._children["skip"].forward(h)
        else:
            s, c_s = h, None
        return s + h2, (c_n1, c_a1, c_c1, c_n2, c_a2, c_c2, c_s)

    def backward(self, cache, grad_out):
        c_n1, c_a1, c_c1, c_n2, c_a2, c_c2, c_s = cache
        grads: dict[str, np.ndarray] = {}
        (da2,), g = self._children["conv2"].backward(c_c2, grad_out)
        grads.update(nn.prefix_grads("conv2", g))
        (dn2,), _ = self.act.backward(c_a2, da2)
        (dh1, dt2, dc2), g = self._children["norm2"].backward(c_n2, dn2)
        grads.update(nn.prefix_grads("norm2", g))
        (da1,), g = self._children["conv1"].backward(c_c1, dh1)
        grads.update(nn.prefix_grads("conv1", g))
        (dn1,), _ = self.act.backward(c_a1, da1)
        (dh, dt1, dc1), g = self._children["norm1"].backward(c_n1, dn1)
        grads.update(nn.prefix_grads("norm1", g))
        if "skip" in self._children:
            (ds,), g = self._children["skip"].backward(c_s, grad_out)
            grads.update(nn.prefix_grads("skip", g))
            dh = dh + ds
        else:
            dh = dh + grad_out
        return (dh, dt1 + dt2, dc1 + dc2), grads


class UNet1d(nn.Module):
    """Two-scale-down/up conditioned noise predictor over [B, latent_dim].

    Latents ride as one-channel sequences; every residual block reads the
    concatenated (timestep embedding, conditioning vector) through AdaGN.
    The head convolution starts at zero, so an untrained net predicts zero
    noise.
    """

    def __init__(self, latent_dim: int, cond_dim: int,
                 channels: tuple[int, int, int] = (32, 64, 128),
                 t_dim: int = 32, groups: int = 8,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if latent_dim % 4 != 0:
            raise ConfigError(f"latent_dim must be divisible by 4, got {latent_dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim, self.cond_dim = latent_dim, cond_dim
        self.channels, self.t_dim, self.groups = tuple(channels), t_dim, groups
        c0, c1, c2 = channels
        a = dict(t_dim=t_dim, cond_dim=cond_dim, rng=rng, groups=groups)
        self.add_child("stem", nn.Conv1d(1, c0, 3, rng))
        self.add_child("res0", ResBlock1d(c0, c0, **a))
        self.add_child("down0", nn.Conv1d(c0, c1, 3, rng, stride=2))
        self.add_child("res1", ResBlock1d(c1, c1, **a))
        self.add_child("down1", nn.Conv1d(c1, c2, 3, rng, stride=2))
        self.add_child("mid", ResBlock1d(c2, c2, **a))
        self.add_child("upc1", nn.Conv1d(c2, c1, 3, rng))
        self.add_child("res_up1", ResBlock1d(2 * c1, c1, **a))
        self.add_child("upc0", nn.Conv1d(c1, c0, 3, rng))
        self.add_child("res_up0", ResBlock1d(2 * c0, c0, **a))
        self.add_child("head_norm", nn.GroupNorm(c0, groups))
        self.add_child("head", nn.Conv1d(c0, 1, 3, rng, zero_init=True))
        self.up = nn.Upsample1d(2)
        self.act = nn.SiLU()

    def forward(self, z_t: np.ndarray, t, cond: np.ndarray):
        if z_t.ndim != 2 or z_t.shape[1] != self.latent_dim:
            raise ShapeError(f"expected [B, {self.latent_dim}], got {z_t.shape}")
        if cond.shape != (z_t.shape[0], self.cond_dim):
            raise ShapeError(f"cond must be [B, {self.cond_dim}], got {cond.shape}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64),
                                (z_t.shape[0],))
        t_emb = nn.time_embedding(t_arr, self.t_dim)
        if t_emb.dtype != z_t.dtype:
            t_emb = t_emb.astype(z_t.dtype)
        cond = cond.astype(z_t.dtype, copy=False)
        x = z_t[:, None, :]

        ch = self._children
        h, c_stem = ch["stem"].forward(x)
        h0, c_r0 = ch["res0"].forward(h, t_emb, cond)
        h, c_d0 = ch["down0"].forward(h0)
        h1, c_r1 = ch["res1"].forward(h, t_emb, cond)
        h, c_d1 = ch["down1"].forward(h1)
        h, c_mid = ch["mid"].forward(h, t_emb, cond)
        h, c_u1 = self.up.forward(h)
        h, c_uc1 = ch["upc1"].forward(h)
        h = np.concatenate([h, h1], axis=1)
        h, c_ru1 = ch["res_up1"].forward(h, t_emb, cond)
        h, c_u0 = self.up.forward(h)
        h, c_uc0 = ch["upc0"].forward(h)
        h = np.concatenate([h, h0], axis=1)
        h, c_ru0 = ch["res_up0"].forward(h, t_emb, cond)
        h, c_hn = ch["head_norm"].forward(h)
        h, c_ha = self.act.forward(h)
        out, c_head = ch["head"].forward(h)
        cache = (c_stem, c_r0, c_d0, c_r1, c_d1, c_mid, c_u1, c_uc1, c_ru1,
                 c_u0, c_uc0, c_ru0, c_hn, c_ha, c_head)
        return out[:, 0, :], cache

    def backward(self, cache, grad_out):
        (c_stem, c_r0, c_d0, c_r1, c_d1, c_mid, c_u1, c_uc1, c_ru1,
         c_u0, c_uc0, c_ru0, c_hn, c_ha, c_head) = cache
        ch = self._children
        c0, c1, _ = self.channels
        grads: dict[str, np.ndarray] = {}

        def bw(name, c, g):
            outs, gp = ch[name].backward(c, g)
            grads.update(nn.prefix_grads(name, gp))
            return outs

        (dh,) = bw("head", c_head, grad_out[:, None, :])
        (dh,), _ = self.act.backward(c_ha, dh)
        (dh,) = bw("head_norm", c_hn, dh)
        dh, dt, dc = bw("res_up0", c_ru0, dh)
        dh, dskip0 = dh[:, :c0], dh[:, c0:]
        (dh,) = bw("upc0", c_uc0, dh)
        (dh,), _ = self.up.backward(c_u0, dh)
        dh2, dt2, dc2 = bw("res_up1", c_ru1, dh)
        dt, dc = dt + dt2, dc + dc2
        dh2, dskip1 = dh2[:, :c1], dh2[:, c1:]
        (dh2,) = bw("upc1", c_uc1, dh2)
        (dh2,), _ = self.up.backward(c_u1, dh2)
        dh2, dt2, dc2 = bw("mid", c_mid, dh2)
        dt, dc = dt + dt2, dc + dc2
        (dh2,) = bw("down1", c_d1, dh2)
        dh2, dt2, dc2 = bw("res1", c_r1, dh2 + dskip1)
        dt, dc = dt + dt2, dc + dc2
        (dh2,) = bw("down0", c_d0, dh2)
        dh2, dt2, dc2 = bw("res0", c_r0, dh2 + dskip0)
        dt, dc = dt + dt2, dc + dc2
        (dx,) = bw("stem", c_stem, dh2)
        return (dx[:, 0, :], dt, dc), grads

    def meta(self) -> dict:
        return {"latent_dim": self.latent_dim, "cond_dim": self.cond_dim,
                "channels": list(self.channels), "t_dim": self.t_dim,
                "groups": self.groups}


# ---------------------------------------------------------------------------
# training


@dataclass
class LdmConfig:
    steps: int = 1500
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    channels: tuple[int, int, int] = (32, 64, 128)
    t_dim: int = 32
    groups: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must be in [0, 1]")


def ldm_loss(model: UNet1d, z0: np.ndarray, cond: np.ndarray, t: np.ndarray,
             eps: np.ndarray, schedule: NoiseSchedule):
    """Noise-prediction objective: mean over batch of ||eps - eps_hat||^2.

    Returns (loss, cache, d_eps_hat) so a training step can reuse the
    forward pass.
    """
    z_t = forward_diffuse(z0, t, eps, schedule).astype(np.float32)
    eps_hat, cache = model.forward(z_t, t, cond)
    diff = eps_hat - eps
    loss = float((diff * diff).sum(axis=1).mean())
    d_eps_hat = (2.0 / z0.shape[0]) * diff
    return loss, cache, d_eps_hat


def ldm_train_step(model: UNet1d, opt: nn.OptimizerState, z0: np.ndarray,
                   cond: np.ndarray, schedule: NoiseSchedule,
                   p_uncond: float, rng: np.random.Generator,
                   lr: float | None = None) -> float:
    """One minibatch update with conditioning dropout."""
    b = z0.shape[0]
    t = rng.integers(0, schedule.T, size=b)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    cond = cond.copy()
    drop = rng.random(b) < p_uncond
    cond[drop] = 0.0
    loss, cache, d_eps_hat = ldm_loss(model, z0, cond, t, eps, schedule)
    if not np.isfinite(loss):
        raise NumericError(f"ldm training diverged: loss={loss}")
    _, grads = model.backward(cache, d_eps_hat.astype(np.float32))
    nn.optimizer_step(opt, model.params(), grads, lr=lr)
    return loss


@dataclass
class LdmTrainResult:
    model: UNet1d
    schedule: NoiseSchedule
    loss_history: list[float] = field(default_factory=list)


def ldm_train(z0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule,
              cfg: LdmConfig | None = None,
              rng: np.random.Generator | None = None) -> LdmTrainResult:
    """Train a UNet noise predictor with AdamW and cosine-annealed lr."""
    cfg = cfg or LdmConfig()
    cfg.validate()
    if z0.shape[0] != cond.shape[0]:
        raise ShapeError(f"{z0.shape[0]} latents vs {cond.shape[0]} conditions")
    rng = rng or np.random.default_rng(cfg.seed)
    model = UNet1d(z0.shape[1], cond.shape[1], channels=cfg.channels,
                   t_dim=cfg.t_dim, groups=cfg.groups, rng=rng)
    opt = nn.make_optimizer(model.params(), "adamw", lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    z0 = z0.astype(np.float32)
    cond = cond.astype(np.float32)
    n = z0.shape[0]
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        lr = nn.cosine_lr(step, cfg.steps, cfg.lr)
        loss = ldm_train_step(model, opt, z0[idx], cond[idx], schedule,
                              cfg.p_uncond, rng, lr=lr)
        history.append(loss)
    return LdmTrainResult(model=model, schedule=schedule, loss_history=history)


# ---------------------------------------------------------------------------
# persistence


def save_ldm(path: str | os.PathLike, result_model: UNet1d,
             schedule: NoiseSchedule, extra_meta: dict | None = None) -> str:
    meta = result_model.meta()
    meta["schedule"] = {"T": schedule.T,
                        "beta_start": float(schedule.betas[0]),
                        "beta_end": float(schedule.betas[-1]),
                        "n_ddim": schedule.n_ddim}
    meta.update(extra_meta or {})
    return save_checkpoint(path, "ldm", result_model.params(), meta)


def load_ldm(path: str | os.PathLike) -> tuple[UNet1d, NoiseSchedule, dict]:
    ckpt = expect_kind(load_checkpoint(path), "ldm")
    m = ckpt.meta
    model = UNet1d(m["latent_dim"], m["cond_dim"],
                   channels=tuple(m["channels"]), t_dim=m["t_dim"],
                   groups=m["groups"], rng=np.random.default_rng(0))
    model.set_params(ckpt.params)
    s = m["schedule"]
    schedule = make_linear_schedule(s["T"], s["beta_start"], s["beta_end"],
                                    s["n_ddim"])
    return model, schedule, m
