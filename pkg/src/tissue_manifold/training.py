"""Denoising score matching at a single noise level."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import inr
from .errors import ConfigurationError, TrainingError
from .normalization import METHODS, NormStats, compute_norm_stats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 0.1
    epochs: int = 10
    batch_size: int = 4096
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalization: str = "robust"
    m: int = 256
    widths: tuple = (128, 128, 128, 128)
    omega0: float = 1.0
    freq_std: float = 0.02
    head_scale: float = 1e-2
    divergence_factor: float = 10.0
    antithetic: bool = True
    schedule: str = "constant"
    ema: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        for name in ("epochs", "batch_size", "m"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if not self.learning_rate > 0 or not self.eps > 0:
            raise ConfigurationError("learning_rate and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if self.normalization not in METHODS:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("widths must be positive")
        if not self.omega0 > 0:
            raise ConfigurationError("omega0 must be positive")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigurationError("ema must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


@dataclass
class TrainTrace:
    epoch_loss: list = field(default_factory=list)
    seconds: float = 0.0
    rng_digest: str = ""


def perturb(batch, sigma: float, rng: np.random.Generator):
    """Return ``(batch + eps, eps)`` with ``eps ~ N(0, sigma^2 I)``."""
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    batch = np.asarray(batch, dtype=np.float64)
    noise = rng.normal(0.0, sigma, size=batch.shape)
    return batch + noise, noise


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


class Adam:
    """Adam on a single flat parameter vector, updated in place."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        theta -= (self.lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.eps)


def _values(table):
    values = np.asarray(getattr(table, "values", table), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ConfigurationError("training data must be a nonempty (N, d) array")
    return values


def train(table, config: TrainConfig = TrainConfig(), norm: NormStats | None = None,
          callback=None):
    """Fit an energy model to the rows of ``table``.

    Initialisation, shuffling and noise all come from one generator seeded with
    ``config.seed``, so ``(table, config)`` fully determine the result. Pass
    ``norm`` to reuse existing normalization statistics instead of estimating
    them with ``config.normalization``.

    Returns ``(model, trace)``.
    """
    x = _values(table)
    n, d = x.shape
    if config.batch_size > n:
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds N={n}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("training data contains non-finite values")
    if norm is None:
        norm = compute_norm_stats(x, config.normalization, getattr(table, "channels", None))
    u = norm.apply(x)

    rng = np.random.default_rng(config.seed)
    model = inr.init_model(d=d, m=config.m, widths=config.widths, omega0=config.omega0,
                           freq_std=config.freq_std, head_scale=config.head_scale,
                           seed=config.seed, norm=norm, rng=rng)
    shapes = model.params.shapes()
    theta = model.params.flat()
    params = inr.Params.from_flat(theta, shapes)
    opt = Adam(theta.size, config.learning_rate, config.beta1, config.beta2, config.eps)
    # Polyak-style running average of the iterates; the returned model uses it
    avg = theta.copy() if config.ema > 0 else None

    trace = TrainTrace()
    start = time.perf_counter()
    initial = None
    bs, sigma = config.batch_size, config.sigma
    # antithetic batches hold bs/2 clean rows, each paired with +eps and -eps
    per_batch = max(1, bs // 2) if config.antithetic else bs
    steps_per_epoch = -(-n // per_batch)
    total_steps = steps_per_epoch * config.epochs
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step, s in enumerate(range(0, n, per_batch)):
            clean = u[order[s:s + per_batch]]
            noise = rng.normal(0.0, sigma, size=clean.shape)
            if config.antithetic:
                clean = np.concatenate([clean, clean])
                noise = np.concatenate([noise, -noise])
            if config.schedule == "cosine":
                frac = (epoch * steps_per_epoch + step) / total_steps
                opt.lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
            loss, grad = inr.dsm_loss_and_gradient(params, config.omega0, clean, noise, sigma)
            if initial is None:
                initial = loss
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}",
                                    epoch=epoch, step=step)
            if loss > config.divergence_factor * initial:
                raise TrainingError(
                    f"loss {loss:.4g} exceeds {config.divergence_factor}x the initial "
                    f"{initial:.4g} at epoch {epoch}, step {step}", epoch=epoch, step=step)
            opt.step(theta, grad)
            if avg is not None:
                t = opt.t
                beta = min(config.ema, (1.0 + t) / (10.0 + t))
                avg *= beta
                avg += (1.0 - beta) * theta
            total += loss * clean.shape[0]
        trace.epoch_loss.append(total / (2 * n if config.antithetic else n))
        log.debug("epoch %d loss %.5f", epoch, trace.epoch_loss[-1])
        if callback is not None:
            current = params if avg is None else inr.Params.from_flat(avg, shapes)
            callback(epoch, trace.epoch_loss[-1], current)

    trace.seconds = time.perf_counter() - start
    trace.rng_digest = rng_digest(rng)
    meta = model.meta
    final = inr.EnergyModel(
        inr.Params.from_flat((theta if avg is None else avg).copy(), shapes).frozen(),
        inr.ModelMeta(d=meta.d, m=meta.m, widths=meta.widths, omega0=meta.omega0,
                      sigma_train=float(sigma), seed=config.seed, norm=norm),
    )
    return final, trace
