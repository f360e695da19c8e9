"""Gaussian-mixture phantoms with closed-form noise-convolved densities.

These serve as ground truth for the trained energy models: the score of a
mixture convolved with N(0, sigma^2 I) is available exactly, and longitudinal
scenarios (stable disease, recurrence) are built by editing the mixture.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, InputError
from .normalization import NormStats
from .tables import DEFAULT_CHANNELS, VoxelTable


@dataclass(frozen=True)
class MixtureSpec:
    """Diagonal-covariance Gaussian mixture in R^d."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim <= 1:
            var = np.broadcast_to(var.reshape(-1, 1) if var.ndim == 1 else var, mu.shape)
        var = np.array(var, dtype=np.float64)
        if w.shape[0] != mu.shape[0] or var.shape != mu.shape:
            raise ConfigurationError("weights, means and variances disagree on component count")
        if np.any(w <= 0):
            raise ConfigurationError("mixture weights must be positive")
        if np.any(var <= 0):
            raise ConfigurationError("covariances must be strictly positive")
        w = w / w.sum()
        names = tuple(self.names) or tuple(f"c{k}" for k in range(w.shape[0]))
        if len(names) != w.shape[0]:
            raise ConfigurationError("one name per component")
        for a in (w, mu, var):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "names", names)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def index(self, name) -> int:
        return name if isinstance(name, (int, np.integer)) else self.names.index(name)

    def without(self, *names) -> "MixtureSpec":
        drop = {self.index(n) for n in names}
        keep = [i for i in range(self.k) if i not in drop]
        if not keep:
            raise ConfigurationError("cannot remove every component")
        return MixtureSpec(self.weights[keep], self.means[keep], self.variances[keep],
                           tuple(self.names[i] for i in keep))

    def normalized(self, norm: NormStats) -> "MixtureSpec":
        """The same law expressed in the coordinates ``(x - center) / scale``."""
        return MixtureSpec(self.weights, (self.means - norm.center) / norm.scale,
                           self.variances / norm.scale**2, self.names)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, obj) -> "MixtureSpec":
        return cls(obj["weights"], obj["means"], obj["variances"], tuple(obj.get("names", ())))


def single_gaussian(mean, variance) -> MixtureSpec:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1)
    return MixtureSpec([1.0], mean, np.broadcast_to(variance, mean.shape))


def two_mode(d=5, separation=4.0, variance=0.25, weights=(0.9, 0.1)) -> MixtureSpec:
    """Healthy mode at the origin, tumour mode at ``separation * e1``."""
    means = np.zeros((2, d))
    means[1, 0] = separation
    return MixtureSpec(weights, means, np.full((2, d), variance), ("healthy", "tumour"))


def sample(spec: MixtureSpec, n: int, seed=0, channels=None) -> VoxelTable:
    """Draw ``n`` i.i.d. points; component indices are kept in ``table.labels``."""
    if n < 1:
        raise InputError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = rng.choice(spec.k, size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.d))
    values = spec.means[labels] + np.sqrt(spec.variances[labels]) * z
    if channels is None:
        channels = DEFAULT_CHANNELS if spec.d == len(DEFAULT_CHANNELS) else \
            tuple(f"c{i}" for i in range(spec.d))
    return VoxelTable(values, channels, labels=labels)


def _component_terms(spec: MixtureSpec, sigma, u):
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape[1] != spec.d:
        raise InputError(f"expected points of dimension {spec.d}")
    sig2 = np.broadcast_to(np.asarray(sigma, dtype=np.float64) ** 2, (spec.d,))
    if np.any(sig2 < 0):
        raise ConfigurationError("sigma must be non-negative")
    var = spec.variances + sig2                        # (k, d)
    diff = u[:, None, :] - spec.means[None]            # (n, k, d)
    logc = (np.log(spec.weights)
            - 0.5 * np.sum(np.log(2 * np.pi * var), axis=1)
            - 0.5 * np.sum(diff**2 / var, axis=2))     # (n, k)
    return logc, diff, var


def log_density(spec: MixtureSpec, sigma, u):
    """log p_sigma(u) for the mixture convolved with N(0, diag(sigma^2))."""
    logc, _, _ = _component_terms(spec, sigma, u)
    out = logsumexp(logc, axis=1)
    return float(out[0]) if np.ndim(u) == 1 else out


def analytic_energy(spec: MixtureSpec, sigma, u):
    """Oracle energy ``-log p_sigma(u)``.

    ``sigma`` may be a scalar or a per-channel vector.
    """
    return -log_density(spec, sigma, u)


def analytic_score(spec: MixtureSpec, sigma, u):
    """Closed-form ``grad log p_sigma(u)`` with log-sum-exp responsibilities."""
    logc, diff, var = _component_terms(spec, sigma, u)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    s = -np.einsum("nk,nkd->nd", resp, diff / var[None])
    return s[0] if np.ndim(u) == 1 else s


def analytic_laplacian(spec: MixtureSpec, sigma, u):
    """Laplacian of ``-log p_sigma`` (used by curvature oracles)."""
    logc, diff, var = _component_terms(spec, sigma, u)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    g_k = -diff / var[None]                                       # (n, k, d)
    s = np.einsum("nk,nkd->nd", resp, g_k)
    # trace of sum_k r_k (g_k g_k^T - diag(1/var_k)) - s s^T
    tr_hess_logp = (np.einsum("nk,nkd->n", resp, g_k**2)
                    - resp @ np.sum(1.0 / var, axis=1)
                    - np.sum(s**2, axis=1))
    out = -tr_hess_logp
    return float(out[0]) if np.ndim(u) == 1 else out


def convolved_modes(spec: MixtureSpec, sigma, iters=200):
    """Modes of p_sigma found by fixed-point iteration from each component mean."""
    modes = []
    for mu in spec.means:
        x = mu.copy()
        for _ in range(iters):
            logc, _, var = _component_terms(spec, sigma, x[None])
            r = np.exp(logc[0] - logsumexp(logc[0]))
            prec = (r[:, None] / var).sum(axis=0)
            x_new = (r[:, None] * spec.means / var).sum(axis=0) / prec
            if np.max(np.abs(x_new - x)) < 1e-14:
                x = x_new
                break
            x = x_new
        modes.append(x)
    return np.array(modes)


@dataclass(frozen=True)
class AnalyticField:
    """The exact landscape ``-log p_sigma`` of a mixture, usable wherever the
    geometry routines accept a trained model."""

    spec: MixtureSpec
    sigma: float | tuple = 0.0

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def norm(self) -> NormStats:
        return NormStats.identity(self.d)

    def normalize(self, x):
        return np.asarray(x, dtype=np.float64)

    def denormalize(self, u):
        return np.asarray(u, dtype=np.float64)

    def to_dict(self) -> dict:
        sigma = np.asarray(self.sigma, dtype=np.float64)
        return {"spec": self.spec.to_dict(), "sigma": sigma.tolist()}

    def evaluate(self, x, laplacian: bool = False):
        from .inr import EnergyEvaluation

        return EnergyEvaluation(
            energy=np.atleast_1d(analytic_energy(self.spec, self.sigma, x)),
            score=np.atleast_2d(analytic_score(self.spec, self.sigma, x)),
            laplacian=np.atleast_1d(analytic_laplacian(self.spec, self.sigma, x))
            if laplacian else None,
        )


# ------------------------------------------------------------------ scenarios

@dataclass(frozen=True)
class TimepointEdit:
    """How one follow-up scan is generated from the baseline mixture.

    ``remove`` lists component names absent from the scan (e.g. a resected
    tumour). A fraction ``displace_fraction`` of the ``displace_component``
    samples is shifted by ``displace_alpha`` along ``direction`` (unit vector;
    defaults to the healthy-to-tumour mean direction).
    """

    label: str
    remove: tuple = ()
    displace_fraction: float = 0.0
    displace_alpha: float = 0.0
    direction: tuple | None = None
    displace_component: str = "healthy"
    n: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.displace_fraction <= 1.0:
            raise ConfigurationError("displace_fraction must lie in [0, 1]")
        if not np.isfinite(self.displace_alpha):
            raise ConfigurationError("displace_alpha must be finite")


@dataclass(frozen=True)
class ScenarioSpec:
    baseline: MixtureSpec
    followups: tuple = ()
    n: int = 50_000
    n_roi: int = 1000
    roi_radius: float | None = None
    seed: int = 0
    healthy: str = "healthy"
    tumour: str = "tumour"

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.to_dict(),
            "followups": [
                {"label": e.label, "remove": list(e.remove),
                 "displace_fraction": e.displace_fraction, "displace_alpha": e.displace_alpha,
                 "direction": None if e.direction is None else list(e.direction),
                 "displace_component": e.displace_component, "n": e.n}
                for e in self.followups
            ],
            "n": self.n, "n_roi": self.n_roi, "roi_radius": self.roi_radius,
            "seed": self.seed, "healthy": self.healthy, "tumour": self.tumour,
        }

    @classmethod
    def from_dict(cls, obj) -> "ScenarioSpec":
        edits = tuple(
            TimepointEdit(e["label"], tuple(e.get("remove", ())), e.get("displace_fraction", 0.0),
                          e.get("displace_alpha", 0.0),
                          None if e.get("direction") is None else tuple(e["direction"]),
                          e.get("displace_component", "healthy"), e.get("n"))
            for e in obj.get("followups", ())
        )
        return cls(MixtureSpec.from_dict(obj["baseline"]), edits, obj.get("n", 50_000),
                   obj.get("n_roi", 1000), obj.get("roi_radius"), obj.get("seed", 0),
                   obj.get("healthy", "healthy"), obj.get("tumour", "tumour"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Scenario:
    baseline: VoxelTable
    rois: dict
    followups: list
    labels: list
    expectations: list = field(default_factory=list)
    spec: ScenarioSpec | None = None


def stable_scenario(n=50_000, n_followup=None, seed=0, d=5) -> ScenarioSpec:
    """Three post-resection scans resampled from the healthy mode only."""
    edits = tuple(TimepointEdit(f"t{k}", remove=("tumour",), n=n_followup) for k in (1, 2, 3))
    return ScenarioSpec(two_mode(d), edits, n=n, seed=seed)


def recurrence_scenario(n=50_000, n_followup=None, seed=0, d=5,
                        fractions=(0.0, 0.1, 0.2), alpha=None) -> ScenarioSpec:
    """Post-resection scans where a growing fraction of healthy voxels moves
    toward the tumour mode by ``alpha`` (default half the inter-mode distance)."""
    spec = two_mode(d)
    if alpha is None:
        alpha = 0.5 * float(np.linalg.norm(spec.means[1] - spec.means[0]))
    edits = tuple(
        TimepointEdit(f"t{k}", remove=("tumour",), displace_fraction=f, displace_alpha=alpha,
                      n=n_followup)
        for k, f in enumerate(fractions, start=1)
    )
    return ScenarioSpec(spec, edits, n=n, seed=seed)


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Sample the baseline, ROIs and follow-up tables of a scenario.

    Every table derives from ``spec.seed`` through ``SeedSequence.spawn`` (one
    child per table), so the scenario is reproducible and each table is
    independent of how many follow-ups follow it.
    """
    base = spec.baseline
    h, t = base.index(spec.healthy), base.index(spec.tumour)
    seeds = np.random.SeedSequence(spec.seed).spawn(1 + len(spec.followups))
    baseline = sample(base, spec.n, np.random.default_rng(seeds[0]))

    rois = {}
    for name, comp in (("healthy", h), ("tumour", t)):
        rows = np.flatnonzero(baseline.labels == comp)
        if spec.roi_radius is not None:
            dist = np.linalg.norm(baseline.values[rows] - base.means[comp], axis=1)
            rows = rows[dist <= spec.roi_radius]
        rows = rows[: spec.n_roi]
        if rows.size == 0:
            raise ConfigurationError(f"ROI {name!r} is empty")
        rois[name] = rows

    axis = base.means[t] - base.means[h]
    axis_len = float(np.linalg.norm(axis))
    unit = axis / axis_len
    followups, expectations = [], []
    for edit, ss in zip(spec.followups, seeds[1:]):
        rng = np.random.default_rng(ss)
        mix = base.without(*edit.remove) if edit.remove else base
        if mix.d != base.d:
            raise ConfigurationError("follow-up dimension differs from baseline")
        n = edit.n or int(round(spec.n * _kept_weight(base, edit.remove)))
        table = sample(mix, n, rng)
        # relabel to baseline component indices
        labels = np.array([base.index(mix.names[i]) for i in table.labels])
        values = table.values.copy()
        direction = unit if edit.direction is None else np.asarray(edit.direction, float)
        if direction.shape != (base.d,):
            raise ConfigurationError("displacement direction has the wrong dimension")
        direction = direction / np.linalg.norm(direction)
        moved = np.zeros(n, dtype=bool)
        if edit.displace_fraction > 0:
            comp = base.index(edit.displace_component)
            cand = np.flatnonzero(labels == comp)
            k = int(round(edit.displace_fraction * cand.size))
            pick = rng.choice(cand, size=k, replace=False)
            values[pick] += edit.displace_alpha * direction
            moved[pick] = True
        followups.append(VoxelTable(values, table.channels, labels=labels))
        frac_moved = moved.mean()
        expected = frac_moved * edit.displace_alpha * float(direction @ unit)
        expectations.append({
            "label": edit.label,
            "displaced_fraction": float(frac_moved),
            "expected_drift": float(expected),
            "expected_drift_fraction": float(expected / axis_len),
            "tumour_present": bool(np.any(labels == t)),
        })
    return Scenario(baseline, rois, followups, [e.label for e in spec.followups],
                    expectations, spec)


def _kept_weight(base: MixtureSpec, removed) -> float:
    if not removed:
        return 1.0
    drop = {base.index(r) for r in removed}
    return float(sum(w for i, w in enumerate(base.weights) if i not in drop))
