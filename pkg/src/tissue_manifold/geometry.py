"""Geometry of a trained energy landscape.

Gradient-flow descent, basin attractors, line profiles between two points and
the barrier/width descriptors measured on them. All coordinates are in the
model's (normalized) input space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import inr
from .errors import ConfigurationError, GeometryError, InputError, NumericError

# Returned by barrier_height when the profile has fewer than two local minima.
NO_BARRIER = None


@dataclass(frozen=True)
class FlowConfig:
    """Discretisation of the gradient flow ``du/dt = -grad E``.

    Each iteration tries ``u - step * grad E``. A trial is accepted only if the
    energy strictly decreases, after which the step is multiplied by ``grow``
    (capped at ``max_step``); a rejected trial multiplies it by ``backtrack``.
    """

    step_size: float = 0.01
    max_steps: int = 2000
    grad_tol: float = 1e-4
    energy_tol: float = 1e-8
    backtrack: float = 0.5
    merge_radius: float = 0.05
    grow: float = 1.5
    max_step: float = 1.0
    min_step: float = 1e-14

    def __post_init__(self):
        for name in ("step_size", "max_steps", "grad_tol", "energy_tol", "merge_radius",
                     "max_step", "min_step"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.backtrack < 1:
            raise ConfigurationError("backtrack must lie in (0, 1)")
        if self.grow < 1:
            raise ConfigurationError("grow must be >= 1")


@dataclass
class Descent:
    """Result of descending one or many starting points."""

    endpoint: np.ndarray
    energy: np.ndarray
    steps: np.ndarray
    converged: np.ndarray
    history: list | None = None

    def __len__(self):
        return self.endpoint.shape[0]


def evaluate(model, x, laplacian: bool = False) -> inr.EnergyEvaluation:
    """Energy, score (and optionally Laplacian) at the rows of ``x``.

    ``model`` is an :class:`~tissue_manifold.inr.EnergyModel` or any field object
    with a ``d`` attribute and an ``evaluate(x, laplacian)`` method returning an
    :class:`~tissue_manifold.inr.EnergyEvaluation` (e.g. an analytic mixture).
    """
    if isinstance(model, inr.EnergyModel):
        return inr.energy_batch(model, x, energy=True, score=True, laplacian=laplacian)
    return model.evaluate(np.atleast_2d(np.asarray(x, dtype=np.float64)), laplacian)


def _eval(model, x):
    ev = evaluate(model, x)
    return ev.energy, -ev.score


def descend_many(model, starts, cfg: FlowConfig = FlowConfig(), record=False,
                 targets=None, capture_radius=None) -> Descent:
    """Backtracking gradient descent from every row of ``starts``.

    Points stop when ``||grad E|| < grad_tol``, when an accepted step lowers the
    energy by less than ``energy_tol``, when the step underflows ``min_step``
    (all counted as converged) or after ``max_steps`` iterations.

    With ``targets`` and ``capture_radius`` a point also stops (converged) as
    soon as it lies within ``capture_radius`` of a target row.

    ``record=True`` keeps each point's accepted energy sequence in ``history``.
    """
    x = np.array(np.atleast_2d(starts), dtype=np.float64)
    n = x.shape[0]
    E, g = _eval(model, x)
    if not np.all(np.isfinite(E)):
        bad = int(np.flatnonzero(~np.isfinite(E))[0])
        raise NumericError(f"non-finite energy at start {bad}", point=x[bad].copy())
    step = np.full(n, cfg.step_size)
    steps = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    history = [[float(e)] for e in E] if record else None
    tree = None
    if targets is not None and capture_radius is not None and len(targets):
        tree = cKDTree(np.atleast_2d(targets))

    def settle(idx):
        gn = np.linalg.norm(g[idx], axis=1)
        done = gn < cfg.grad_tol
        if tree is not None:
            dist, _ = tree.query(x[idx])
            done |= dist <= capture_radius
        converged[idx[done]] = True
        active[idx[done]] = False

    settle(np.arange(n))
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        trial = x[idx] - step[idx, None] * g[idx]
        E_t, g_t = _eval(model, trial)
        if not np.all(np.isfinite(E_t)):
            bad = idx[int(np.flatnonzero(~np.isfinite(E_t))[0])]
            raise NumericError(f"non-finite energy while descending point {bad}",
                               point=x[bad].copy())
        ok = E_t < E[idx]
        acc, rej = idx[ok], idx[~ok]
        decrease = E[acc] - E_t[ok]
        x[acc] = trial[ok]
        E[acc] = E_t[ok]
        g[acc] = g_t[ok]
        steps[acc] += 1
        step[acc] = np.minimum(step[acc] * cfg.grow, cfg.max_step)
        step[rej] *= cfg.backtrack
        if record:
            for i, e in zip(acc, E_t[ok]):
                history[i].append(float(e))
        small = acc[decrease < cfg.energy_tol]
        converged[small] = True
        active[small] = False
        stuck = rej[step[rej] < cfg.min_step]
        converged[stuck] = True
        active[stuck] = False
        settle(acc[active[acc]])
    return Descent(x, E, steps, converged, history)


def descend(model, u0, cfg: FlowConfig = FlowConfig(), record=False) -> dict:
    """Descend a single point; returns endpoint, energy, steps and converged."""
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.ndim != 1:
        raise InputError("descend expects a single point; use descend_many for batches")
    res = descend_many(model, u0[None], cfg, record=record)
    out = {"endpoint": res.endpoint[0], "energy": float(res.energy[0]),
           "steps": int(res.steps[0]), "converged": bool(res.converged[0])}
    if record:
        out["history"] = res.history[0]
    return out


@dataclass
class BasinMap:
    """Basin attractors found from a set of seeds.

    ``minima`` is sorted by energy (index 0 is the deepest). ``assignment`` is
    -1 for seeds whose descent did not converge.
    """

    locations: np.ndarray
    energies: np.ndarray
    assignment: np.ndarray
    steps: np.ndarray
    converged: np.ndarray
    merge_radius: float = 0.05

    @property
    def n_minima(self) -> int:
        return self.locations.shape[0]

    @property
    def minima(self) -> list:
        return [{"location": loc, "energy": float(e)}
                for loc, e in zip(self.locations, self.energies)]

    def nearest(self, points, radius=None):
        """Index of the nearest minimum to each point (-1 beyond ``radius``)."""
        dist, idx = cKDTree(self.locations).query(np.atleast_2d(points))
        idx = idx.astype(np.int64)
        if radius is not None:
            idx[dist > radius] = -1
        return idx

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "merge_radius": self.merge_radius,
            "minima": [{"location": loc.tolist(), "energy": float(e)}
                       for loc, e in zip(self.locations, self.energies)],
            "assignment": self.assignment.tolist(),
            "steps": self.steps.tolist(),
            "converged": self.converged.tolist(),
        }

    @classmethod
    def from_dict(cls, obj) -> "BasinMap":
        locs = np.array([m["location"] for m in obj["minima"]], dtype=np.float64)
        return cls(locs.reshape(len(obj["minima"]), -1),
                   np.array([m["energy"] for m in obj["minima"]], dtype=np.float64),
                   np.array(obj["assignment"], dtype=np.int64),
                   np.array(obj["steps"], dtype=np.int64),
                   np.array(obj["converged"], dtype=bool), obj["merge_radius"])


def _single_linkage(points, radius):
    """Connected components of the graph joining points closer than ``radius``."""
    n = points.shape[0]
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def find_basins(model, seeds, cfg: FlowConfig = FlowConfig()) -> BasinMap:
    """Descend every seed and merge endpoints into basin attractors.

    Endpoints are merged by single linkage at ``cfg.merge_radius``; each
    cluster's minimum is its lowest-energy endpoint.
    """
    seeds = np.atleast_2d(np.asarray(getattr(seeds, "values", seeds), dtype=np.float64))
    if seeds.shape[0] == 0:
        raise InputError("no seeds")
    res = descend_many(model, seeds, cfg)
    ok = np.flatnonzero(res.converged)
    if ok.size == 0:
        raise GeometryError("no seed converged")
    comp = _single_linkage(res.endpoint[ok], cfg.merge_radius)
    reps = []
    for c in range(comp.max() + 1):
        members = ok[comp == c]
        best = members[np.argmin(res.energy[members])]
        reps.append((res.energy[best], int(best), c))
    reps.sort()
    relabel = {c: k for k, (_, _, c) in enumerate(reps)}
    assignment = np.full(seeds.shape[0], -1, dtype=np.int64)
    assignment[ok] = [relabel[c] for c in comp]
    locs = np.array([res.endpoint[b] for _, b, _ in reps])
    energies = np.array([e for e, _, _ in reps])
    return BasinMap(locs, energies, assignment, res.steps, res.converged, cfg.merge_radius)


def assign_to_basins(model, points, basins: BasinMap, cfg: FlowConfig = FlowConfig()):
    """Basin index of each point under the gradient flow.

    A point is followed until it comes within ``merge_radius`` of a known
    minimum; points that converge elsewhere or fail to converge get -1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    res = descend_many(model, points, cfg, targets=basins.locations,
                       capture_radius=basins.merge_radius)
    labels = basins.nearest(res.endpoint, radius=basins.merge_radius)
    labels[~res.converged] = -1
    return labels


# ------------------------------------------------------------------ profiles

@dataclass
class LineProfile:
    """Quantities sampled along ``p0 + t (p1 - p0)``."""

    p0: np.ndarray
    p1: np.ndarray
    t: np.ndarray
    energy: np.ndarray
    grad_norm: np.ndarray
    laplacian: np.ndarray
    slope: np.ndarray = field(default=None)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def points(self) -> np.ndarray:
        return self.p0 + self.t[:, None] * (self.p1 - self.p0)

    def to_dict(self) -> dict:
        return {"version": 1, "p0": self.p0.tolist(), "p1": self.p1.tolist(),
                "t": self.t.tolist(), "energy": self.energy.tolist(),
                "grad_norm": self.grad_norm.tolist(), "laplacian": self.laplacian.tolist()}

    def to_csv(self) -> str:
        lines = ["t,energy,grad_norm,laplacian"]
        for row in zip(self.t, self.energy, self.grad_norm, self.laplacian):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def _profile_grid(K, margin):
    if K < 2:
        raise InputError("a profile needs K >= 2 samples")
    if margin < 0:
        raise InputError("margin must be non-negative")
    return np.linspace(-margin, 1.0 + margin, K)


def line_profile(model, p0, p1, K: int = 512, margin: float = 0.1) -> LineProfile:
    """Energy, gradient magnitude and Laplacian on a uniform grid of the segment
    extended by ``margin`` (in segment-length units) on both sides."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if p0.shape != p1.shape or p0.shape != (model.d,):
        raise InputError("profile endpoints must be points of the model's dimension")
    if np.array_equal(p0, p1):
        raise InputError("profile endpoints coincide")
    t = _profile_grid(K, margin)
    pts = p0 + t[:, None] * (p1 - p0)
    ev = evaluate(model, pts, laplacian=True)
    return LineProfile(p0, p1, t, ev.energy, np.linalg.norm(ev.score, axis=1), ev.laplacian,
                       slope=-(ev.score @ (p1 - p0)))


def profile_from_function(fn, p0, p1, K=512, margin=0.1) -> LineProfile:
    """Profile of an arbitrary energy ``fn(points) -> energies`` (no derivatives)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    t = _profile_grid(K, margin)
    pts = p0 + t[:, None] * (p1 - p0)
    E = np.asarray(fn(pts), dtype=np.float64)
    nan = np.full(K, np.nan)
    return LineProfile(p0, p1, t, E, nan, nan.copy())


def profile_local_minima(energy) -> np.ndarray:
    """Interior grid indices where the energy has a local minimum.

    Plateaus count once, at their first index.
    """
    E = np.asarray(energy, dtype=np.float64)
    out = []
    i, K = 1, E.shape[0]
    while i < K - 1:
        if E[i] < E[i - 1]:
            j = i
            while j < K - 1 and E[j + 1] == E[j]:
                j += 1
            if j < K - 1 and E[j + 1] > E[j]:
                out.append(i)
            i = j + 1
        else:
            i += 1
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class Barrier:
    height: float
    ridge_index: int
    minima: tuple
    ridge_t: float


def barrier(profile) -> Barrier | None:
    """Barrier between the two lowest interior minima of a profile, or None."""
    E = profile.energy if hasattr(profile, "energy") else np.asarray(profile, dtype=np.float64)
    t = profile.t if hasattr(profile, "t") else np.arange(E.shape[0], dtype=np.float64)
    mins = profile_local_minima(E)
    if mins.size < 2:
        return NO_BARRIER
    lowest = mins[np.argsort(E[mins], kind="stable")[:2]]
    a, b = int(lowest.min()), int(lowest.max())
    ridge = a + 1 + int(np.argmax(E[a + 1:b]))
    height = float(E[ridge] - min(E[a], E[b]))
    return Barrier(height, ridge, (a, b), float(t[ridge]))


def barrier_height(profile):
    """Ridge energy between the two lowest profile minima minus the lower of them.

    Returns ``NO_BARRIER`` (None) when the profile has fewer than two minima.
    """
    b = barrier(profile)
    return NO_BARRIER if b is None else b.height


@dataclass(frozen=True)
class BasinWidth:
    width: float
    t_left: float
    t_right: float
    truncated: bool = False
    degenerate: bool = False


def basin_width(profile, index: int, level: float) -> BasinWidth:
    """Width of the sublevel interval ``E <= E[index] + level`` around a minimum.

    ``index`` is a grid index of the profile. The interval stops at the level
    crossing (linearly interpolated) or at an adjacent ridge, whichever comes
    first; stopping at a ridge sets ``truncated``. If the interval runs off both
    ends of the grid the result is flagged ``degenerate``. The width is in
    sequence-space units (t-range times segment length).
    """
    if not level > 0:
        raise InputError("level offset must be positive")
    E = np.asarray(profile.energy, dtype=np.float64)
    t = profile.t
    K = E.shape[0]
    if not 0 <= index < K:
        raise InputError("index outside the profile")
    if (index > 0 and E[index - 1] < E[index]) or (index < K - 1 and E[index + 1] < E[index]):
        raise InputError(f"grid index {index} is not a local minimum of the profile")
    cap = E[index] + level

    def walk(direction):
        j = index
        while True:
            k = j + direction
            if k < 0 or k >= K:
                return t[j], False, True
            if E[k] < E[j]:
                return t[j], True, False
            if E[k] > cap:
                frac = (cap - E[j]) / (E[k] - E[j])
                return t[j] + frac * (t[k] - t[j]), False, False
            j = k

    tl, trunc_l, end_l = walk(-1)
    tr, trunc_r, end_r = walk(+1)
    length = float(np.linalg.norm(profile.p1 - profile.p0)) if hasattr(profile, "p1") else 1.0
    return BasinWidth(float((tr - tl) * length), float(tl), float(tr),
                      truncated=trunc_l or trunc_r, degenerate=end_l and end_r)


# ---------------------------------------------------------- field summaries

_PERCENTILES = (1, 25, 50, 75, 99)
HIST_BINS = 32


def summarize(values, bins: int = HIST_BINS) -> dict:
    """Order-independent summary of a sample.

    The histogram has ``bins`` equal-width bins spanning [min, max] of the
    sample (a single value gives one degenerate bin of width zero).
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise InputError("cannot summarise an empty sample")
    pct = np.percentile(v, _PERCENTILES)
    lo, hi = float(v[0]), float(v[-1])
    edges = np.linspace(lo, hi, bins + 1)
    if hi > lo and np.all(np.diff(edges) > 0):
        counts, edges = np.histogram(v, bins=edges)
    else:
        counts, edges = np.array([v.size]), np.array([lo, hi])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": lo,
        "max": hi,
        "median": float(pct[2]),
        "percentiles": {str(p): float(q) for p, q in zip(_PERCENTILES, pct)},
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


def field_summary(model, table, bins: int = HIST_BINS) -> dict:
    """Summaries of energy, gradient magnitude and Laplacian over the rows of
    ``table`` (model coordinates)."""
    values = np.atleast_2d(np.asarray(getattr(table, "values", table), dtype=np.float64))
    if values.shape[0] == 0:
        raise InputError("empty table")
    ev = evaluate(model, values, laplacian=True)
    return {
        "energy": summarize(ev.energy, bins),
        "grad_norm": summarize(np.linalg.norm(ev.score, axis=1), bins),
        "laplacian": summarize(ev.laplacian, bins),
    }
