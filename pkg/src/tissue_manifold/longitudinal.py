"""Follow-up scans evaluated against a frozen baseline energy landscape.

A healthy and a tumour ROI on the baseline scan give two centroids in
(normalized) sequence space and the unit axis between them. Each follow-up is
summarised by its energy shift under the baseline model and by its mean
displacement along that axis (positive = toward the tumour centroid).

Voxel-level p-values ignore spatial correlation between voxels and should be
read as descriptive.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import geometry, inr
from .errors import ConfigurationError, InputError
from .normalization import compute_norm_stats


# ----------------------------------------------------------------------- ROIs

@dataclass(frozen=True)
class ROI:
    """Voxel selector: explicit row indices or an inclusive spatial box."""

    name: str
    rows: tuple | None = None
    box_min: tuple | None = None
    box_max: tuple | None = None

    def __post_init__(self):
        if (self.rows is None) == (self.box_min is None):
            raise ConfigurationError(f"ROI {self.name!r} needs exactly one of rows or box")
        if (self.box_min is None) != (self.box_max is None):
            raise ConfigurationError(f"ROI {self.name!r} box needs min and max")

    def resolve(self, table) -> np.ndarray:
        n = len(table)
        if self.rows is not None:
            rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
            if rows.size == 0:
                raise InputError(f"ROI {self.name!r} is empty")
            if rows.min() < 0 or rows.max() >= n:
                raise InputError(f"ROI {self.name!r} has rows outside 0..{n - 1}")
            if np.unique(rows).size != rows.size:
                raise InputError(f"ROI {self.name!r} lists duplicate rows")
            return rows
        coords = getattr(table, "coords", None)
        if coords is None:
            raise InputError(f"ROI {self.name!r} is a box but the table has no x,y,z")
        lo, hi = np.asarray(self.box_min), np.asarray(self.box_max)
        rows = np.flatnonzero(np.all((coords >= lo) & (coords <= hi), axis=1))
        if rows.size == 0:
            raise InputError(f"ROI {self.name!r} box contains no voxels")
        return rows

    def to_dict(self) -> dict:
        if self.rows is not None:
            return {"rows": [int(r) for r in self.rows]}
        return {"box": {"min": list(self.box_min), "max": list(self.box_max)}}

    @classmethod
    def from_dict(cls, name, obj) -> "ROI":
        if "rows" in obj:
            return cls(name, rows=tuple(int(r) for r in obj["rows"]))
        if "box" in obj:
            return cls(name, box_min=tuple(obj["box"]["min"]), box_max=tuple(obj["box"]["max"]))
        raise ConfigurationError(f"ROI {name!r} needs 'rows' or 'box'")


def roi_centroid(values, rows) -> np.ndarray:
    """Arithmetic mean of the selected rows."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        raise InputError("empty ROI")
    return values[rows].mean(axis=0)


# ----------------------------------------------------------------------- axis

@dataclass(frozen=True)
class AxisFrame:
    """Healthy-to-tumour axis: ``direction`` points from ``c_H`` to ``c_T``."""

    c_H: np.ndarray
    c_T: np.ndarray
    direction: np.ndarray
    length: float

    def project(self, u):
        """Signed coordinate along the axis: 0 at c_H, ``length`` at c_T."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.c_H.shape[0]:
            raise InputError("dimension mismatch")
        out = (u - self.c_H) @ self.direction
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"c_H": self.c_H.tolist(), "c_T": self.c_T.tolist(), "length": self.length}


def build_axis(c_H, c_T) -> AxisFrame:
    c_H = np.asarray(c_H, dtype=np.float64)
    c_T = np.asarray(c_T, dtype=np.float64)
    diff = c_T - c_H
    length = float(np.linalg.norm(diff))
    if not length > 0:
        raise InputError("healthy and tumour centroids coincide; the axis is undefined")
    return AxisFrame(c_H, c_T, diff / length, length)


def project(frame: AxisFrame, u):
    return frame.project(u)


# ----------------------------------------------------------------- statistics

def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InputError("empty voxel set")
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def mean_difference(baseline_values, followup_values) -> dict:
    """``mean(followup) - mean(baseline)`` with standard errors added in quadrature."""
    mb, sb = _mean_se(baseline_values)
    mf, sf = _mean_se(followup_values)
    return {"delta": mf - mb, "se": float(np.hypot(sb, sf)),
            "mean_baseline": mb, "mean_followup": mf}


def delta_energy(model, baseline, followup) -> dict:
    """Energy shift of a follow-up set under the frozen baseline model.

    Both inputs are (n, d) arrays in model coordinates.
    """
    Eb = geometry.evaluate(model, np.atleast_2d(baseline)).energy
    Ef = geometry.evaluate(model, np.atleast_2d(followup)).energy
    out = mean_difference(Eb, Ef)
    out.update(energy_baseline=Eb, energy_followup=Ef)
    return out


def drift(frame: AxisFrame, baseline, followup) -> dict:
    """Change of mean axis projection from ``baseline`` to ``followup``."""
    pb = frame.project(np.atleast_2d(baseline))
    pf = frame.project(np.atleast_2d(followup))
    out = mean_difference(pb, pf)
    return {"drift": out["delta"], "se": out["se"],
            "projection_baseline": pb, "projection_followup": pf}


def welch_p(a, b) -> float:
    """Two-sided unequal-variance t-test p-value."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InputError("each sample needs at least 2 values")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    p = stats.ttest_ind(a, b, equal_var=False).pvalue
    return 1.0 if not np.isfinite(p) else float(p)


def permutation_p(a, b, n_perm: int = 10_000, seed=0, chunk: int = 64) -> float:
    """Two-sided permutation test of the difference in means.

    Returns ``(1 + #{|perm stat| >= |observed|}) / (1 + n_perm)``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InputError("each sample needs at least 2 values")
    if n_perm < 1:
        raise ConfigurationError("n_perm must be positive")
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([a, b])
    # centering removes the grand mean so differences are not swamped by it
    pooled = pooled - pooled.mean()
    total = pooled.sum()
    na, n = a.size, pooled.size
    observed = abs(pooled[:na].mean() - pooled[na:].mean())
    tol = 1e-12 * max(1.0, observed)
    hits = 0
    done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        perm = rng.permuted(np.broadcast_to(pooled, (k, n)), axis=1)
        sa = perm[:, :na].sum(axis=1)
        stat = np.abs(sa / na - (total - sa) / (n - na))
        hits += int(np.count_nonzero(stat >= observed - tol))
        done += k
    return (hits + 1) / (n_perm + 1)


def significance(baseline_values, followup_values, method: str = "welch",
                 n_perm: int = 10_000, seed=0) -> float:
    if method == "welch":
        return welch_p(baseline_values, followup_values)
    if method == "permutation":
        return permutation_p(baseline_values, followup_values, n_perm, seed)
    raise ConfigurationError(f"unknown test {method!r}")


# ---------------------------------------------------------------- protocol

@dataclass(frozen=True)
class LongitudinalConfig:
    """Options for :func:`run_longitudinal`.

    ``reuse_baseline_norm`` maps follow-ups through the model's own
    normalization; otherwise each follow-up gets its own ``followup_norm``
    statistics. ``n_seeds`` baseline voxels seed the basin search.
    """

    flow: geometry.FlowConfig = field(default_factory=geometry.FlowConfig)
    n_seeds: int = 2000
    n_perm: int = 10_000
    seed: int = 0
    reuse_baseline_norm: bool = True
    followup_norm: str = "robust"
    profile_K: int = 512
    profile_margin: float = 0.1
    width_level: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TimepointResult:
    label: str
    n: int
    n_healthy: int
    mean_E: float
    se_E: float
    delta_E: float
    se_delta_E: float
    delta_E_all: float
    se_delta_E_all: float
    mean_projection: float
    drift: float
    se_drift: float
    drift_all: float
    se_drift_all: float
    p_welch: float
    p_perm: float
    p_welch_drift: float
    p_perm_drift: float
    model_digest: str
    reference: str = "healthy_basin"


@dataclass
class PlotData:
    """Per-voxel rows for projection/energy scatter plots of one scan."""

    label: str
    projection: np.ndarray
    energy: np.ndarray
    grad_norm: np.ndarray
    basin: np.ndarray

    def to_csv(self) -> str:
        lines = ["projection,energy,grad_norm"]
        for row in zip(self.projection, self.energy, self.grad_norm):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class LongitudinalReport:
    axis: AxisFrame
    baseline: dict
    timepoints: list
    digests: dict
    plotdata: list = field(default_factory=list, repr=False)
    axis_profile: geometry.LineProfile | None = field(default=None, repr=False)
    basins: geometry.BasinMap | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "axis": self.axis.to_dict(),
            "baseline": dict(self.baseline),
            "timepoints": [asdict(tp) for tp in self.timepoints],
            "digests": dict(self.digests),
        }

    @property
    def final(self) -> TimepointResult | None:
        return self.timepoints[-1] if self.timepoints else None


def sha256_json(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def model_digest(model) -> str:
    """sha256 of the model's checkpoint JSON (of ``to_dict()`` for other fields)."""
    from .checkpoint import checkpoint_to_json

    if isinstance(model, inr.EnergyModel):
        return hashlib.sha256(checkpoint_to_json(model).encode()).hexdigest()
    return sha256_json(model.to_dict())


def _masked(table):
    return table.masked_values() if hasattr(table, "masked_values") else np.atleast_2d(table)


def _to_model_space(model, table, config: LongitudinalConfig):
    values = _masked(table)
    if values.shape[1] != model.d:
        raise InputError(f"scan has {values.shape[1]} channels, model expects {model.d}")
    if config.reuse_baseline_norm:
        return model.normalize(values)
    return compute_norm_stats(values, config.followup_norm).apply(values)


def run_longitudinal(model, baseline, rois: dict, followups=(), labels=None,
                     config: LongitudinalConfig = LongitudinalConfig()) -> LongitudinalReport:
    """Evaluate follow-up scans against the frozen baseline model.

    ``baseline`` and ``followups`` are raw-intensity voxel tables; ``rois`` maps
    ``"healthy"`` and ``"tumour"`` to :class:`ROI` objects or row-index arrays
    into the baseline table.

    Headline numbers are restricted to the healthy basin (the basin reached by
    descending from the healthy centroid): ``delta_E`` compares healthy-basin
    voxels of the follow-up with healthy-basin voxels of the baseline, and
    ``drift`` compares all follow-up voxels with healthy-basin baseline voxels.
    The ``*_all`` fields compare whole masks.
    """
    followups = list(followups)
    labels = list(labels) if labels is not None else [f"t{k}" for k in range(1, len(followups) + 1)]
    if len(labels) != len(followups):
        raise InputError("one label per follow-up")
    digest = model_digest(model)

    raw_base = baseline.values if hasattr(baseline, "values") else np.atleast_2d(baseline)
    if raw_base.shape[1] != model.d:
        raise InputError(f"baseline has {raw_base.shape[1]} channels, model expects {model.d}")
    resolved = {}
    for name in ("healthy", "tumour"):
        if name not in rois:
            raise InputError(f"missing {name} ROI")
        roi = rois[name]
        roi = roi if isinstance(roi, ROI) else ROI(name, rows=tuple(np.asarray(roi).tolist()))
        resolved[name] = roi.resolve(baseline)
    ub_all_rows = model.normalize(raw_base)
    frame = build_axis(roi_centroid(ub_all_rows, resolved["healthy"]),
                       roi_centroid(ub_all_rows, resolved["tumour"]))

    ub = model.normalize(_masked(baseline))
    rng = np.random.default_rng(config.seed)
    seed_rows = rng.choice(ub.shape[0], size=min(config.n_seeds, ub.shape[0]), replace=False)
    basins = geometry.find_basins(model, ub[np.sort(seed_rows)], config.flow)
    anchors = geometry.assign_to_basins(model, np.stack([frame.c_H, frame.c_T]), basins,
                                        config.flow)
    anchors = np.where(anchors >= 0, anchors, basins.nearest(np.stack([frame.c_H, frame.c_T])))
    healthy_basin, tumour_basin = int(anchors[0]), int(anchors[1])

    ev_b = geometry.evaluate(model, ub)
    proj_b = frame.project(ub)
    basin_b = geometry.assign_to_basins(model, ub, basins, config.flow)
    in_h_b = basin_b == healthy_basin
    base_fallback = np.count_nonzero(in_h_b) < 2
    if base_fallback:
        # degenerate landscape: fall back to the whole mask as reference
        in_h_b = np.ones_like(in_h_b)
    Eb, Eb_h, pb_h = ev_b.energy, ev_b.energy[in_h_b], proj_b[in_h_b]
    mean_b, se_b = _mean_se(Eb)
    mean_bh, se_bh = _mean_se(Eb_h)

    profile = geometry.line_profile(model, frame.c_H, frame.c_T, config.profile_K,
                                    config.profile_margin)
    bar = geometry.barrier(profile)
    mins = geometry.profile_local_minima(profile.energy)
    width = None
    if mins.size:
        near_h = mins[np.argmin(np.abs(profile.t[mins]))]
        width = geometry.basin_width(profile, int(near_h), config.width_level).width
    baseline_summary = {
        "n": int(ub.shape[0]),
        "mean_E": mean_b,
        "se": se_b,
        "n_healthy": int(np.count_nonzero(in_h_b)),
        "mean_E_healthy": mean_bh,
        "se_healthy": se_bh,
        "n_minima": int(basins.n_minima),
        "healthy_basin": healthy_basin,
        "tumour_basin": tumour_basin,
        "barrier": None if bar is None else bar.height,
        "healthy_width": width,
    }
    plots = [PlotData("t0", proj_b, Eb, np.linalg.norm(ev_b.score, axis=1), basin_b)]

    results = []
    for k, (label, scan) in enumerate(zip(labels, followups)):
        uf = _to_model_space(model, scan, config)
        if uf.shape[0] < 2:
            raise InputError(f"follow-up {label!r} needs at least 2 voxels")
        ev_f = geometry.evaluate(model, uf)
        Ef = ev_f.energy
        pf = frame.project(uf)
        basin_f = geometry.assign_to_basins(model, uf, basins, config.flow)
        in_h_f = basin_f == healthy_basin
        reference = "healthy_basin"
        if base_fallback or np.count_nonzero(in_h_f) < 2:
            in_h_f = np.ones_like(in_h_f)
            reference = "whole_mask"
        Ef_h = Ef[in_h_f]
        ref_E = Eb_h if reference == "healthy_basin" else Eb
        dE = mean_difference(ref_E, Ef_h)
        dE_all = mean_difference(Eb, Ef)
        dr = mean_difference(pb_h, pf)
        dr_all = mean_difference(proj_b, pf)
        mean_f, se_f = _mean_se(Ef)
        perm_seed = config.seed + 1 + k
        results.append(TimepointResult(
            label=str(label), n=int(uf.shape[0]), n_healthy=int(Ef_h.size),
            mean_E=mean_f, se_E=se_f,
            delta_E=dE["delta"], se_delta_E=dE["se"],
            delta_E_all=dE_all["delta"], se_delta_E_all=dE_all["se"],
            mean_projection=float(pf.mean()),
            drift=dr["delta"], se_drift=dr["se"],
            drift_all=dr_all["delta"], se_drift_all=dr_all["se"],
            p_welch=welch_p(ref_E, Ef_h),
            p_perm=permutation_p(ref_E, Ef_h, config.n_perm, perm_seed),
            p_welch_drift=welch_p(pb_h, pf),
            p_perm_drift=permutation_p(pb_h, pf, config.n_perm, perm_seed),
            model_digest=digest,
            reference=reference,
        ))
        plots.append(PlotData(str(label), pf, Ef, np.linalg.norm(ev_f.score, axis=1), basin_f))

    digests = {"model": digest, "config": sha256_json(config.to_dict())}
    return LongitudinalReport(frame, baseline_summary, results, digests, plots, profile, basins)
