"""Differentiable layers, Adam, plateau schedule and checkpoints for the autoencoders.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch's
recorded graph. The layer functions here add the shape contracts the models
rely on. The optimiser, the schedule and the checkpoint format are
implemented directly.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

Padding = Union[int, tuple[int, int]]


class ShapeError(ValueError):
    pass


def _check_rank(name, t, rank):
    if t.dim() != rank:
        raise ShapeError(f"{name}: expected a rank-{rank} tensor, got shape {tuple(t.shape)}")


def _pad_pair(padding: Padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: Padding = 0) -> int:
    lo, hi = _pad_pair(padding)
    return (size + lo + hi - kernel) // stride + 1


def conv2d(x, kernels, bias=None, stride: int = 1, padding: Padding = 0):
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernels`` [F,C,k,k]."""
    _check_rank("conv2d input", x, 4)
    _check_rank("conv2d kernels", kernels, 4)
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernels expect {kc} input channels, got {c}")
    if bias is not None and tuple(bias.shape) != (f,):
        raise ShapeError(f"conv2d: bias shape expected ({f},), got {tuple(bias.shape)}")
    lo, hi = _pad_pair(padding)
    if h + lo + hi < kh or w + lo + hi < kw:
        raise ShapeError(f"conv2d: padded input {h + lo + hi}x{w + lo + hi} smaller than kernel {kh}x{kw}")
    if lo == hi:
        return F.conv2d(x, kernels, bias, stride=stride, padding=lo)
    return F.conv2d(F.pad(x, (lo, hi, lo, hi)), kernels, bias, stride=stride)


def transposed_conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0, output_padding: int = 0):
    """Adjoint of :func:`conv2d`; ``kernels`` are [C_in, F, k, k]."""
    _check_rank("transposed_conv2d input", x, 4)
    _check_rank("transposed_conv2d kernels", kernels, 4)
    if kernels.shape[0] != x.shape[1]:
        raise ShapeError(
            f"transposed_conv2d: kernels expect {kernels.shape[0]} input channels, got {x.shape[1]}"
        )
    if bias is not None and tuple(bias.shape) != (kernels.shape[1],):
        raise ShapeError(f"transposed_conv2d: bias shape expected ({kernels.shape[1]},)")
    return F.conv_transpose2d(x, kernels, bias, stride=stride, padding=padding,
                              output_padding=output_padding)


def transposed_output_size(size, kernel, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def max_pool2d(x, size: int = 2):
    _check_rank("max_pool2d input", x, 4)
    if x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"max_pool2d: spatial dims {tuple(x.shape[2:])} not divisible by {size}")
    return F.max_pool2d(x, size)


def upsample_nearest(x, factor: int = 2):
    _check_rank("upsample_nearest input", x, 4)
    return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)


def dense(x, weight, bias=None):
    """Affine map; ``weight`` is [out, in]."""
    _check_rank("dense input", x, 2)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: weight expects {weight.shape[1]} inputs, got {x.shape[1]}")
    y = x @ weight.T
    return y if bias is None else y + bias


def relu(x):
    return torch.clamp(x, min=0.0)


def sigmoid(x):
    return torch.sigmoid(x)


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {tuple(pred.shape)} and {tuple(target.shape)} differ")
    return torch.mean((pred - target) ** 2)


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over latent dims, averaged over the batch."""
    return torch.mean(-0.5 * torch.sum(1.0 + logvar - mu ** 2 - torch.exp(logvar), dim=1))


# ---------------------------------------------------------------------------
# Initialisation

def kaiming_uniform(shape: Sequence[int], fan_in: int, generator: torch.Generator,
                    dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    u = torch.rand(tuple(shape), generator=generator, dtype=torch.float64)
    return ((2.0 * u - 1.0) * bound).to(dtype)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: gradient for {name} has shape {tuple(g.shape)}, "
                                 f"parameter has {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# ---------------------------------------------------------------------------
# Plateau schedule

@dataclass(frozen=True)
class TrainSchedule:
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.2
    max_epochs: int = 200
    initial_lr: float = 3e-4

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patiences must be at least 1")
        if self.max_epochs < 1 or self.initial_lr <= 0:
            raise ValueError("max_epochs and initial_lr must be positive")


@dataclass(frozen=True)
class ScheduleDecision:
    new_lr: float
    stop: bool
    reduced: bool


def best_epoch(history: Sequence[float]) -> int:
    """Index of the first epoch that set the running minimum last (strict improvement)."""
    best, idx = math.inf, 0
    for i, loss in enumerate(history):
        if loss < best:
            best, idx = loss, i
    return idx


def schedule_update(history: Sequence[float], sched: TrainSchedule, lr: float,
                    last_reduction: int = -1) -> ScheduleDecision:
    """Decide learning-rate reduction and early stopping after the latest epoch.

    ``last_reduction`` is the epoch index at which the rate was last
    reduced, so the plateau counter restarts after each reduction.
    """
    if not history:
        raise ValueError("history must be nonempty")
    current = len(history) - 1
    best = best_epoch(history)
    stop = current - best >= sched.early_stop_patience
    reduce = current - max(best, last_reduction) >= sched.plateau_patience
    return ScheduleDecision(lr * sched.plateau_factor if reduce else lr, stop, reduce)


# ---------------------------------------------------------------------------
# Finite differences

def numerical_gradient(fn: Callable[[], torch.Tensor], t: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t`` (modified in place, restored)."""
    grad = torch.zeros_like(t)
    flat = t.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = analytic.detach().double()
    n = numeric.detach().double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max())


def gradcheck(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences over all inputs.

    ``fn`` maps the inputs to a tensor; it is reduced against a fixed random
    projection so every output entry contributes to the check.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(1234)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar():
        return torch.sum(fn(*inputs) * proj)

    loss = torch.sum(out * proj)
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        if g is None:
            g = torch.zeros_like(x)
        worst = max(worst, relative_error(g, numerical_gradient(scalar, x, h)))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"VIMPCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, config: dict, params: Mapping[str, torch.Tensor]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<HI", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            t = params[name].detach().cpu().numpy().astype("<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<HI", data[8:14])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 14
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack("<B", data[pos:pos + 1])
        pos += 1
        shape = struct.unpack(f"<{ndim}I", data[pos:pos + 4 * ndim])
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = torch.from_numpy(arr.astype(np.float32))
    return config, params
