"""Minimal neural substrate: layers with explicit forward/backward passes.

Every layer and model follows one convention:

    out, cache = module.forward(*inputs)
    grad_inputs, grad_params = module.backward(cache, grad_out)

``forward`` never mutates the module, so concurrent forward passes over
frozen parameters are safe; all per-call state lives in the returned cache.
Parameters are named float32 arrays in a flat, insertion-ordered dict
(``module.params()``); optimizers update them in place. A float64 clone of
any module (``module.cast``) backs the finite-difference checker, which is
the ground truth for every backward pass in this repository.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray


# ---------------------------------------------------------------------------
# module base


class Module:
    """A differentiable parameterized function."""

    def __init__(self):
        self._p: dict[str, Array] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: Array) -> Array:
        self._p[name] = value
        return value

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def params(self) -> dict[str, Array]:
        """Flat name -> array mapping, stable insertion order."""
        out: dict[str, Array] = {}
        for k, v in self._p.items():
            out[k] = v
        for cname, child in self._children.items():
            for k, v in child.params().items():
                out[f"{cname}.{k}"] = v
        return out

    def set_params(self, flat: dict[str, Array]) -> None:
        own = self.params()
        missing = set(own) - set(flat)
        extra = set(flat) - set(own)
        if missing or extra:
            raise ShapeError(
                f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, arr in flat.items():
            tgt = self._resolve(name)
            if tgt.shape != arr.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {tgt.shape}")
            tgt[...] = arr

    def _resolve(self, name: str) -> Array:
        if "." in name:
            head, rest = name.split(".", 1)
            return self._children[head]._resolve(rest)
        return self._p[name]

    def cast(self, dtype) -> "Module":
        """Deep copy with parameters cast to dtype (float64 for grad checks)."""
        clone = copy.deepcopy(self)
        for mod in clone._walk():
            for k in mod._p:
                mod._p[k] = mod._p[k].astype(dtype)
        return clone

    def _walk(self):
        yield self
        for child in self._children.values():
            yield from child._walk()

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params().values())

    # subclasses implement forward(self, *inputs) -> (out, cache)
    # and backward(self, cache, grad_out) -> (grad_inputs, grad_params)

    def predict(self, *inputs):
        """Forward pass discarding the cache (inference convenience)."""
        out, _ = self.forward(*inputs)
        return out


def prefix_grads(name: str, grads: dict[str, Array]) -> dict[str, Array]:
    return {f"{name}.{k}": v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# dense / activations


class Dense(Module):
    """Affine map [B, n_in] -> [B, n_out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 scale: float | None = None, zero_init: bool = False,
                 dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            s = scale if scale is not None else 1.0 / math.sqrt(n_in)
            w = rng.normal(0.0, s, size=(n_in, n_out))
        self.add_param("w", w.astype(dtype))
        self.add_param("b", np.zeros(n_out, dtype=dtype))

    def forward(self, x: Array):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Dense expects last dim {self.n_in}, got {x.shape}")
        return x @ self._p["w"] + self._p["b"], x

    def backward(self, cache, grad_out):
        x = cache
        dw = x.T @ grad_out
        db = grad_out.sum(axis=0)
        dx = grad_out @ self._p["w"].T
        return (dx,), {"w": dw, "b": db}


def sigmoid(x: Array) -> Array:
    """Branch on sign so neither exp can overflow."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class SiLU(Module):
    """x * sigmoid(x); smooth, so finite differences behave everywhere."""

    def forward(self, x: Array):
        s = sigmoid(x)
        return x * s, (x, s)

    def backward(self, cache, grad_out):
        x, s = cache
        return (grad_out * (s * (1.0 + x * (1.0 - s))),), {}


class Tanh(Module):
    def forward(self, x: Array):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, grad_out):
        y = cache
        return (grad_out * (1.0 - y * y),), {}


class MLP(Module):
    """Dense stack with SiLU between layers and a linear final layer."""

    def __init__(self, widths: list[int], rng: np.random.Generator,
                 final_zero: bool = False, dtype=np.float32):
        super().__init__()
        if len(widths) < 2:
            raise ConfigError("MLP needs at least input and output widths")
        self.n_layers = len(widths) - 1
        self.act = SiLU()
        for i in range(self.n_layers):
            zero = final_zero and i == self.n_layers - 1
            self.add_child(f"fc{i}", Dense(widths[i], widths[i + 1], rng,
                                           zero_init=zero, dtype=dtype))

    def forward(self, x: Array):
        caches = []
        h = x
        for i in range(self.n_layers):
            h, c_fc = self._children[f"fc{i}"].forward(h)
            c_act = None
            if i < self.n_layers - 1:
                h, c_act = self.act.forward(h)
            caches.append((c_fc, c_act))
        return h, caches

    def backward(self, cache, grad_out):
        grads: dict[str, Array] = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            c_fc, c_act = cache[i]
            if c_act is not None:
                (g,), _ = self.act.backward(c_act, g)
            (g,), gp = self._children[f"fc{i}"].backward(c_fc, g)
            grads.update(prefix_grads(f"fc{i}", gp))
        return (g,), grads


# ---------------------------------------------------------------------------
# 1-D convolution


def _conv_out_len(length: int, k: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - k) // stride + 1


class Conv1d(Module):
    """1-D convolution [B, C_in, L] -> [B, C_out, L_out] via im2col.

    padding is "same" (stride-1 length preserved) or "valid"; kernel width
    must be odd so "same" is symmetric.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same",
                 zero_init: bool = False, dtype=np.float32):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"kernel width must be odd, got {k}")
        if padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.pad = (k - 1) // 2 if padding == "same" else 0
        if zero_init:
            w = np.zeros((c_out, c_in, k))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(c_in * k), size=(c_out, c_in, k))
        self.add_param("w", w.astype(dtype))
        self.add_param("b", np.zeros(c_out, dtype=dtype))

    def forward(self, x: Array):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"Conv1d expects [B, {self.c_in}, L], got {x.shape}")
        b, _, length = x.shape
        if self.pad:
            xp = np.zeros((b, self.c_in, length + 2 * self.pad), dtype=x.dtype)
            xp[:, :, self.pad:self.pad + length] = x
        else:
            xp = x
        l_out = _conv_out_len(length, self.k, self.stride, self.pad)
        if l_out < 1:
            raise ShapeError(f"input length {length} too short for kernel {self.k}")
        # cols: [B, C_in, k, L_out]
        win = np.lib.stride_tricks.sliding_window_view(xp, self.k, axis=2)
        cols = win[:, :, ::self.stride, :].transpose(0, 1, 3, 2)
        cols2 = cols.reshape(b, self.c_in * self.k, l_out)
        w2 = self._p["w"].reshape(self.c_out, self.c_in * self.k)
        y = np.einsum("oi,bil->bol", w2, cols2, optimize=True)
        y += self._p["b"][None, :, None]
        return y, (cols2, xp.shape, x.shape)

    def backward(self, cache, grad_out):
        cols2, xp_shape, x_shape = cache
        b, _, l_out = grad_out.shape
        w2 = self._p["w"].reshape(self.c_out, self.c_in * self.k)
        dw2 = np.einsum("bol,bil->oi", grad_out, cols2, optimize=True)
        db = grad_out.sum(axis=(0, 2))
        # scatter column grads back to the padded input
        dcols = np.einsum("oi,bol->bil", w2, grad_out, optimize=True)
        dcols = dcols.reshape(b, self.c_in, self.k, l_out)
        dxp = np.zeros(xp_shape, dtype=grad_out.dtype)
        for j in range(self.k):
            idx = j + self.stride * np.arange(l_out)
            np.add.at(dxp, (slice(None), slice(None), idx), dcols[:, :, j, :])
        if self.pad:
            dx = dxp[:, :, self.pad:self.pad + x_shape[2]]
        else:
            dx = dxp
        return (dx,), {"w": dw2.reshape(self._p["w"].shape), "b": db}


def conv1d_forward(x: Array, kernels: Array, stride: int = 1,
                   padding: str = "same") -> Array:
    """Functional convolution for a single segment [C_in, L] or batch.

    Thin wrapper over Conv1d with the given kernels and zero bias.
    """
    single = x.ndim == 2
    xb = x[None] if single else x
    c_out, c_in, k = kernels.shape
    conv = Conv1d(c_in, c_out, k, np.random.default_rng(0), stride=stride,
                  padding=padding, dtype=kernels.dtype)
    conv._p["w"] = kernels
    conv._p["b"] = np.zeros(c_out, dtype=kernels.dtype)
    y = conv.predict(xb)
    return y[0] if single else y


class Upsample1d(Module):
    """Nearest-neighbor upsampling by an integer factor (no parameters)."""

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x: Array):
        return np.repeat(x, self.factor, axis=2), x.shape

    def backward(self, cache, grad_out):
        b, c, l_in = cache
        g = grad_out.reshape(b, c, l_in, self.factor).sum(axis=3)
        return (g,), {}


# ---------------------------------------------------------------------------
# normalization and conditioning


class GroupNorm(Module):
    """Per-(sample, group) normalization over [B, C, L]; no affine params."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        if channels % groups != 0:
            raise ConfigError(f"channels {channels} not divisible by groups {groups}")
        self.channels, self.groups, self.eps = channels, groups, eps

    def forward(self, x: Array):
        b, c, length = x.shape
        g = self.groups
        xg = x.reshape(b, g, c // g * length)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xg - mean) * inv
        return xhat.reshape(b, c, length), (xhat, inv, x.shape)

    def backward(self, cache, grad_out):
        xhat, inv, shape = cache
        b, c, length = shape
        g = self.groups
        dy = grad_out.reshape(b, g, c // g * length)
        m1 = dy.mean(axis=2, keepdims=True)
        m2 = (dy * xhat).mean(axis=2, keepdims=True)
        dx = inv * (dy - m1 - xhat * m2)
        return (dx.reshape(b, c, length),), {}


class AdaGN(Module):
    """Group normalization with conditioned per-channel scale and shift.

    out = (1 + scale(cat(t_emb, cond))) * groupnorm(h) + shift(cat(t_emb, cond))

    Both projections start at zero, so an untrained block is plain group
    normalization and conditioning fades in during training.
    """

    def __init__(self, channels: int, t_dim: int, cond_dim: int,
                 rng: np.random.Generator, groups: int = 8, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.t_dim, self.cond_dim = t_dim, cond_dim
        self.norm = self.add_child("norm", GroupNorm(channels, groups))
        self.add_child("scale", Dense(t_dim + cond_dim, channels, rng,
                                      zero_init=True, dtype=dtype))
        self.add_child("shift", Dense(t_dim + cond_dim, channels, rng,
                                      zero_init=True, dtype=dtype))

    def forward(self, h: Array, t_emb: Array, cond: Array):
        u = np.concatenate([t_emb, cond], axis=1)
        xhat, c_norm = self.norm.forward(h)
        gamma, c_s = self._children["scale"].forward(u)
        beta, c_b = self._children["shift"].forward(u)
        out = (1.0 + gamma)[:, :, None] * xhat + beta[:, :, None]
        return out, (c_norm, c_s, c_b, xhat, gamma)

    def backward(self, cache, grad_out):
        c_norm, c_s, c_b, xhat, gamma = cache
        dgamma = (grad_out * xhat).sum(axis=2)
        dbeta = grad_out.sum(axis=2)
        dxhat = grad_out * (1.0 + gamma)[:, :, None]
        (dh,), _ = self.norm.backward(c_norm, dxhat)
        (du_s,), g_s = self._children["scale"].backward(c_s, dgamma)
        (du_b,), g_b = self._children["shift"].backward(c_b, dbeta)
        du = du_s + du_b
        dt = du[:, :self.t_dim]
        dcond = du[:, self.t_dim:]
        grads = prefix_grads("scale", g_s)
        grads.update(prefix_grads("shift", g_b))
        return (dh, dt, dcond), grads


# ---------------------------------------------------------------------------
# timestep embedding


def time_embedding(t, dim: int) -> Array:
    """Sinusoidal embedding with interleaved sin/cos per frequency.

    e[2i] = sin(t * f_i), e[2i+1] = cos(t * f_i) with f_i = 10000**(-i/half).
    Accepts a scalar timestep or an int array [B]; returns [dim] or [B, dim].
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.empty((t_arr.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    emb = emb.astype(np.float32)
    return emb[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else emb


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: Array) -> Array:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Array, labels: Array):
    """Mean NLL over the batch; returns (loss, grad wrt logits)."""
    logp = log_softmax(logits)
    b = logits.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """Adam/AdamW state over a named parameter set."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def make_optimizer(params: dict[str, Array], kind: str = "adam",
                   lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, weight_decay: float = 0.0) -> OptimizerState:
    if kind not in ("adam", "adamw"):
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2,
                           eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def optimizer_step(state: OptimizerState, params: dict[str, Array],
                   grads: dict[str, Array], lr: float | None = None) -> None:
    """One bias-corrected Adam(W) update, in place.

    AdamW applies decoupled weight decay; with weight_decay=0 the two kinds
    coincide. NaN/inf gradients abort the step before touching any moment.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    step_lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.kind == "adamw" and state.weight_decay:
            update = update + state.weight_decay * p
        p -= step_lr * update


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_init at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        return lr_init
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(module: Module, inputs, eps: float = 1e-5,
               rng: np.random.Generator | None = None,
               dtype=np.float64, check_inputs: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    The module output (array or tuple of arrays) is reduced to a scalar with
    a fixed random projection; the projection vector doubles as the seed
    gradient for the analytic backward pass. Error per array is
    ||fd - an|| / max(||fd||, ||an||, 1e-12); the max over all parameter and
    input arrays is returned.
    """
    rng = rng or np.random.default_rng(0)
    m = module.cast(dtype)
    inputs = [np.asarray(x).astype(dtype) if np.issubdtype(np.asarray(x).dtype, np.floating)
              else np.asarray(x) for x in inputs]

    out, cache = m.forward(*inputs)
    outs = out if isinstance(out, tuple) else (out,)
    seeds = tuple(rng.normal(size=o.shape).astype(dtype) for o in outs)

    def objective() -> float:
        o, _ = m.forward(*inputs)
        os_ = o if isinstance(o, tuple) else (o,)
        return float(sum(np.sum(s * oo) for s, oo in zip(seeds, os_)))

    grad_seed = seeds if isinstance(out, tuple) else seeds[0]
    grad_inputs, grad_params = m.backward(cache, grad_seed)

    def fd_array(arr: Array) -> Array:
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective()
            flat[i] = orig - eps
            fm = objective()
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * eps)
        return fd

    def rel_err(an: Array, fd: Array) -> float:
        na = float(np.linalg.norm(an))
        nf = float(np.linalg.norm(fd))
        return float(np.linalg.norm(an - fd)) / max(na, nf, 1e-12)

    worst = 0.0
    p = m.params()
    for name, arr in p.items():
        fd = fd_array(arr)
        worst = max(worst, rel_err(np.asarray(grad_params[name], dtype=dtype), fd))
    if check_inputs:
        for arr, an in zip(inputs, grad_inputs):
            if an is None or not np.issubdtype(arr.dtype, np.floating):
                continue
            fd = fd_array(arr)
            worst = max(worst, rel_err(np.asarray(an, dtype=dtype), fd))
    return worst
