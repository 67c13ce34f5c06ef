"""Convolutional autoencoders (baseline and proposed, optionally label-conditioned)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from . import tensornet as tn
from .dataio import DRUM_TYPES, SOUND_TYPES
from .dsp import N_BANDS, N_FRAMES, Normalizer
from .heurfeat import FeatureVector

log = logging.getLogger(__name__)

ARCHS = ("cae_b", "cae")
CONDITIONINGS = {"none": 0, "sl": 2, "dl": 4, "sdl": 8}
DECODER_MODES = ("upsample_conv", "transposed_conv")
DOWNSAMPLE_MODES = ("stride2", "maxpool")
BOTTLENECK = 8


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "cae"
    conditioning: str = "none"
    variational: bool = False
    decoder_mode: str = "upsample_conv"
    encoder_downsample: str = "maxpool"
    filters: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 9
    latent: int = 32
    # width of the pre-adapter latent (cae_b only)
    hidden: Optional[int] = None
    kl_weight: float = 1.0

    @classmethod
    def preset(cls, arch: str, **overrides) -> "ModelConfig":
        if arch == "cae_b":
            base = cls(arch="cae_b", filters=(8, 16, 24, 32), kernel=10,
                       encoder_downsample="stride2", decoder_mode="upsample_conv", hidden=128)
        elif arch == "cae":
            base = cls()
        else:
            raise ConfigError(f"unknown arch {arch!r}")
        if "filters" in overrides:
            overrides["filters"] = tuple(int(f) for f in overrides["filters"])
        return replace(base, **overrides)

    @property
    def label_size(self) -> int:
        return CONDITIONINGS[self.conditioning]

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"unknown decoder_mode {self.decoder_mode!r}")
        if self.encoder_downsample not in DOWNSAMPLE_MODES:
            raise ConfigError(f"unknown encoder_downsample {self.encoder_downsample!r}")
        if len(self.filters) != 4 or min(self.filters) < 1:
            raise ConfigError(f"need 4 positive filter counts, got {self.filters}")
        if self.kernel < 1:
            raise ConfigError("kernel must be positive")
        if self.latent < 1:
            raise ConfigError("latent must be positive")
        if self.arch == "cae_b" and not self.hidden:
            raise ConfigError("cae_b needs a hidden latent width")
        size = N_BANDS
        for _ in range(4):
            if self.encoder_downsample == "maxpool":
                size = tn.conv_output_size(size, self.kernel, 1, same_padding(self.kernel))
                if size % 2:
                    raise ConfigError("odd feature map before pooling")
                size //= 2
            else:
                size = tn.conv_output_size(size, self.kernel, 2, stride2_padding(self.kernel))
        if size != BOTTLENECK:
            raise ConfigError(f"encoder maps {N_BANDS} to {size}, expected {BOTTLENECK}")
        size = BOTTLENECK
        for _ in range(4):
            if self.decoder_mode == "upsample_conv":
                size = tn.conv_output_size(2 * size, self.kernel, 1, same_padding(self.kernel))
            else:
                p, op = transposed_padding(self.kernel)
                size = tn.transposed_output_size(size, self.kernel, 2, p, op)
        if size != N_BANDS:
            raise ConfigError(f"decoder maps {BOTTLENECK} to {size}, expected {N_BANDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["filters"] = tuple(d["filters"])
        return cls(**d)


def same_padding(k: int):
    return (k - 1) // 2 if k % 2 else (k // 2 - 1, k // 2)


def stride2_padding(k: int) -> int:
    return (k - 1) // 2 if k % 2 else k // 2 - 1


def transposed_padding(k: int) -> tuple[int, int]:
    p = (k - 1) // 2
    return p, 2 + 2 * p - k


# ---------------------------------------------------------------------------
# Labels

def condition_index(conditioning: str, sound_type: str, drum_type: str) -> int:
    if conditioning == "sl":
        return SOUND_TYPES.index(sound_type)
    if conditioning == "dl":
        return DRUM_TYPES.index(drum_type)
    if conditioning == "sdl":
        return SOUND_TYPES.index(sound_type) * len(DRUM_TYPES) + DRUM_TYPES.index(drum_type)
    raise UsageError(f"conditioning {conditioning!r} takes no label")


def condition_label(conditioning: str, sound_type: str, drum_type: str) -> np.ndarray:
    """One-hot label vector for a sound."""
    onehot = np.zeros(CONDITIONINGS[conditioning])
    onehot[condition_index(conditioning, sound_type, drum_type)] = 1.0
    return onehot


# ---------------------------------------------------------------------------
# Model

class CAE:
    """Encoder/decoder parameters plus the forward pass built from tensornet ops."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        gen = torch.Generator().manual_seed(seed)
        f = cfg.filters
        k = cfg.kernel
        p: dict[str, torch.Tensor] = {}

        def add(name, shape, fan_in):
            p[name + ".w"] = tn.kaiming_uniform(shape, fan_in, gen, dtype)
            p[name + ".b"] = torch.zeros(shape[0] if not name.startswith("dec_t") else shape[1], dtype=dtype)

        chans = [1, *f]
        for i in range(4):
            add(f"enc{i}", (chans[i + 1], chans[i], k, k), chans[i] * k * k)
        flat = f[3] * BOTTLENECK * BOTTLENECK
        self.flat_size = flat
        n_lab = cfg.label_size
        head_out = cfg.latent * (2 if cfg.variational else 1)
        if cfg.arch == "cae_b":
            add("hidden", (cfg.hidden, flat + n_lab), flat + n_lab)
            add("latent", (head_out, cfg.hidden), cfg.hidden)
            add("dec_hidden", (cfg.hidden, cfg.latent + n_lab), cfg.latent + n_lab)
            add("dec_in", (flat, cfg.hidden), cfg.hidden)
        else:
            add("latent", (head_out, flat + n_lab), flat + n_lab)
            add("dec_in", (flat, cfg.latent + n_lab), cfg.latent + n_lab)
        out_chans = [f[3], f[2], f[1], f[0], 1]
        for i in range(4):
            cin, cout = out_chans[i], out_chans[i + 1]
            if cfg.decoder_mode == "upsample_conv":
                add(f"dec{i}", (cout, cin, k, k), cin * k * k)
            else:
                add(f"dec_t{i}", (cin, cout, k, k), cin * k * k)
        for t in p.values():
            t.requires_grad_(True)
        self.params = p

    # -- passes ------------------------------------------------------------
    def _label_tensor(self, labels, n):
        if self.cfg.label_size == 0:
            if labels is not None:
                raise UsageError("unconditional model given a label")
            return None
        if labels is None:
            raise UsageError(f"{self.cfg.conditioning} model requires a label")
        lab = torch.as_tensor(np.asarray(labels), dtype=self.dtype).reshape(n, -1)
        if lab.shape[1] != self.cfg.label_size:
            raise UsageError(f"label length {lab.shape[1]}, expected {self.cfg.label_size}")
        return lab

    def encode(self, x, labels=None):
        """Return (mean, logvar-or-None) of the latent code for images ``x`` [N,1,128,128]."""
        cfg, p = self.cfg, self.params
        h = x
        for i in range(4):
            w, b = p[f"enc{i}.w"], p[f"enc{i}.b"]
            if cfg.encoder_downsample == "maxpool":
                h = tn.max_pool2d(tn.relu(tn.conv2d(h, w, b, 1, same_padding(cfg.kernel))), 2)
            else:
                h = tn.relu(tn.conv2d(h, w, b, 2, stride2_padding(cfg.kernel)))
        h = h.reshape(h.shape[0], -1)
        lab = self._label_tensor(labels, h.shape[0])
        if lab is not None:
            h = torch.cat([h, lab], dim=1)
        if cfg.arch == "cae_b":
            h = tn.dense(h, p["hidden.w"], p["hidden.b"])
        z = tn.dense(h, p["latent.w"], p["latent.b"])
        if cfg.variational:
            return z[:, :cfg.latent], z[:, cfg.latent:]
        return z, None

    def decode(self, z, labels=None):
        cfg, p = self.cfg, self.params
        lab = self._label_tensor(labels, z.shape[0])
        h = z if lab is None else torch.cat([z, lab], dim=1)
        if cfg.arch == "cae_b":
            h = tn.dense(h, p["dec_hidden.w"], p["dec_hidden.b"])
        h = tn.relu(tn.dense(h, p["dec_in.w"], p["dec_in.b"]))
        h = h.reshape(-1, cfg.filters[3], BOTTLENECK, BOTTLENECK)
        for i in range(4):
            if cfg.decoder_mode == "upsample_conv":
                h = tn.conv2d(tn.upsample_nearest(h, 2), p[f"dec{i}.w"], p[f"dec{i}.b"], 1,
                              same_padding(cfg.kernel))
            else:
                pad, op = transposed_padding(cfg.kernel)
                h = tn.transposed_conv2d(h, p[f"dec_t{i}.w"], p[f"dec_t{i}.b"], 2, pad, op)
            h = tn.relu(h) if i < 3 else tn.sigmoid(h)
        return h

    def forward(self, x, labels=None, generator: Optional[torch.Generator] = None):
        """Reconstruction, latent mean and log-variance; samples the latent only when a generator is given."""
        mu, logvar = self.encode(x, labels)
        z = mu
        if logvar is not None and generator is not None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z, labels), mu, logvar

    def loss(self, x, labels=None, generator=None):
        recon, mu, logvar = self.forward(x, labels, generator)
        loss = tn.mse_loss(recon, x)
        if logvar is not None:
            loss = loss + self.cfg.kl_weight * tn.gaussian_kl(mu, logvar) / (N_BANDS * N_FRAMES)
        return loss

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_state(self, state) -> None:
        with torch.no_grad():
            for k, v in state.items():
                self.params[k].copy_(v)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> CAE:
    return CAE(cfg, seed, dtype)


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainingData:
    """Normalized images [N,128,128] with optional one-hot labels."""

    train_x: np.ndarray
    val_x: np.ndarray
    train_labels: Optional[np.ndarray] = None
    val_labels: Optional[np.ndarray] = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainedModel:
    config: ModelConfig
    model: CAE
    normalizer: Normalizer
    seed: int
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def best_val(self) -> float:
        return min(r.val_loss for r in self.history)

    def checkpoint_config(self) -> dict:
        return {
            "model": self.config.to_dict(),
            "normalizer": [self.normalizer.lo, self.normalizer.hi],
            "seed": self.seed,
            "history": [asdict(r) for r in self.history],
        }


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _evaluate(model: CAE, x, labels, batch_size):
    total = 0.0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            lb = None if labels is None else labels[start:start + batch_size]
            total += float(model.loss(xb, lb)) * xb.shape[0]
    return total / x.shape[0]


def train(model: CAE, data: TrainingData, schedule: tn.TrainSchedule, seed: int,
          normalizer: Normalizer, batch_size: int = 64, log_every: int = 0,
          init_output_bias: bool = True, target_loss: Optional[float] = None) -> TrainedModel:
    """Minimise reconstruction loss with Adam under the plateau schedule.

    Returns the parameters of the epoch with the lowest validation loss.
    Training also ends once validation loss falls below ``target_loss``.
    """
    if len(data.train_x) == 0 or len(data.val_x) == 0:
        raise ValueError("training needs nonempty train and validation sets")
    dt = model.dtype
    tx = torch.as_tensor(np.asarray(data.train_x), dtype=dt).reshape(-1, 1, N_BANDS, N_FRAMES)
    vx = torch.as_tensor(np.asarray(data.val_x), dtype=dt).reshape(-1, 1, N_BANDS, N_FRAMES)
    tl = None if data.train_labels is None else torch.as_tensor(data.train_labels, dtype=dt)
    vl = None if data.val_labels is None else torch.as_tensor(data.val_labels, dtype=dt)
    gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed + 1) if model.cfg.variational else None

    if init_output_bias:
        # start the sigmoid at the mean pixel instead of 0.5
        mean = float(np.clip(np.mean(data.train_x), 1e-4, 1 - 1e-4))
        last = [k for k in model.params if k.startswith("dec") and k.endswith(".b")][-1]
        with torch.no_grad():
            model.params[last].fill_(math.log(mean / (1.0 - mean)))

    opt = tn.AdamState(lr=schedule.initial_lr)
    result = TrainedModel(model.cfg, model, normalizer, seed)
    val_history: list[float] = []
    best_state, best_loss = model.state(), math.inf
    last_reduction = -1
    for epoch in range(schedule.max_epochs):
        running, count = 0.0, 0
        for idx in _batches(tx.shape[0], batch_size, gen):
            xb = tx[idx]
            lb = None if tl is None else tl[idx]
            loss = model.loss(xb, lb, noise_gen)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            grads = torch.autograd.grad(loss, list(model.params.values()))
            tn.adam_step(model.params, dict(zip(model.params, grads)), opt)
            running += float(loss.detach()) * xb.shape[0]
            count += xb.shape[0]
        val = _evaluate(model, vx, vl, batch_size)
        if not math.isfinite(val):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        result.history.append(EpochRecord(epoch, running / count, val, opt.lr))
        val_history.append(val)
        if val < best_loss:
            best_loss, best_state = val, model.state()
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.6f val %.6f lr %.2e", epoch, running / count, val, opt.lr)
        if target_loss is not None and val < target_loss:
            break
        decision = tn.schedule_update(val_history, schedule, opt.lr, last_reduction)
        if decision.stop:
            break
        if decision.reduced:
            opt.lr = decision.new_lr
            last_reduction = epoch
    model.load_state(best_state)
    return result


# ---------------------------------------------------------------------------
# Embeddings and checkpoints

def embed(trained: TrainedModel, spectrogram: np.ndarray, label: Optional[np.ndarray] = None,
          source_id: str = "") -> FeatureVector:
    """Latent mean of one dB spectrogram as a 32-dimensional feature vector."""
    return embed_batch(trained, [spectrogram], None if label is None else [label], [source_id])[0]


def embed_batch(trained: TrainedModel, spectrograms: Sequence[np.ndarray],
                labels: Optional[Sequence[np.ndarray]] = None,
                source_ids: Optional[Sequence[str]] = None, batch_size: int = 64) -> list[FeatureVector]:
    model = trained.model
    cond = trained.config.label_size > 0
    if cond and labels is None:
        raise UsageError(f"{trained.config.conditioning} model requires labels")
    if not cond and labels is not None:
        raise UsageError("unconditional model given labels")
    x = np.stack([trained.normalizer(s) for s in spectrograms])
    source_ids = list(source_ids) if source_ids is not None else [""] * len(x)
    names = [f"emb_{i + 1}" for i in range(trained.config.latent)]
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = torch.as_tensor(x[start:start + batch_size], dtype=model.dtype).reshape(-1, 1, N_BANDS, N_FRAMES)
            lb = None if labels is None else np.asarray(labels[start:start + batch_size])
            mu, _ = model.encode(xb, lb)
            for row in mu.double().numpy():
                out.append(FeatureVector(row.copy(), names, source_ids[len(out)]))
    return out


def save_trained(path, trained: TrainedModel) -> None:
    tn.save_checkpoint(path, trained.checkpoint_config(), trained.model.params)


def load_trained(path) -> TrainedModel:
    config, params = tn.load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    model = CAE(cfg, seed=0)
    model.load_state(params)
    lo, hi = config["normalizer"]
    history = [EpochRecord(**r) for r in config.get("history", [])]
    return TrainedModel(cfg, model, Normalizer(lo, hi), config.get("seed", 0), history)
