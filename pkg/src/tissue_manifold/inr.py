"""Fourier-feature SIREN energy network with exact input derivatives.

The energy is

    E(u) = w . h_L + c,   h_l = sin(omega0 * (W_l h_{l-1} + b_l)),
    h_0 = [sin(2 pi B u), cos(2 pi B u)]

All derivatives (score, Laplacian, parameter gradient of the denoising score
matching loss) are propagated by hand in float64; nothing is finite-differenced.

Evaluation paths run every matrix product on fixed-size, zero-padded row blocks
so that a row's result does not depend on which batch it was evaluated in.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InputError, NumericError
from .normalization import NormStats

TWO_PI = 2.0 * np.pi
FORMAT_VERSION = 1
_BLOCK = 512


def _dense(x, W):
    """Row-blocked ``x @ W.T`` whose per-row output is batch independent."""
    n = x.shape[0]
    out = np.empty((n, W.shape[0]))
    WT = W.T
    for s in range(0, n, _BLOCK):
        blk = x[s:s + _BLOCK]
        k = blk.shape[0]
        if k < _BLOCK:
            pad = np.zeros((_BLOCK, x.shape[1]))
            pad[:k] = blk
            out[s:s + k] = (pad @ WT)[:k]
        else:
            out[s:s + k] = blk @ WT
    return out


def _matmul(x, W):
    return x @ W.T


@dataclass(frozen=True)
class Params:
    """Network parameters.

    The canonical flat layout is ``B`` (row-major), then ``W_l`` (row-major) and
    ``b_l`` for each hidden layer, then the head weights ``(1, width)`` and the
    head bias ``(1,)``.
    """

    B: np.ndarray
    Ws: tuple
    bs: tuple
    head_W: np.ndarray
    head_b: np.ndarray

    def arrays(self) -> list:
        out = [self.B]
        for W, b in zip(self.Ws, self.bs):
            out += [W, b]
        return out + [self.head_W, self.head_b]

    def shapes(self) -> list:
        return [a.shape for a in self.arrays()]

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec, shapes) -> "Params":
        """Split ``vec`` into parameter arrays; the arrays are views into ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = [], 0
        for shape in shapes:
            k = int(np.prod(shape))
            arrays.append(vec[pos:pos + k].reshape(shape))
            pos += k
        if pos != vec.size:
            raise ConfigurationError(f"flat vector has {vec.size} entries, expected {pos}")
        n_layers = (len(arrays) - 3) // 2
        return cls(
            B=arrays[0],
            Ws=tuple(arrays[1:1 + 2 * n_layers:2]),
            bs=tuple(arrays[2:2 + 2 * n_layers:2]),
            head_W=arrays[-2],
            head_b=arrays[-1],
        )

    def frozen(self) -> "Params":
        p = Params.from_flat(self.flat(), self.shapes())
        for a in p.arrays():
            a.setflags(write=False)
        return p


@dataclass(frozen=True)
class ModelMeta:
    d: int
    m: int
    widths: tuple
    omega0: float = 1.0
    sigma_train: float | None = None
    seed: int | None = None
    norm: NormStats | None = None
    version: int = FORMAT_VERSION

    @property
    def L(self) -> int:
        return len(self.widths)


@dataclass(frozen=True)
class EnergyModel:
    """Immutable energy network plus the normalization it was trained under."""

    params: Params
    meta: ModelMeta

    def __post_init__(self):
        _validate(self.params, self.meta)

    @property
    def d(self) -> int:
        return self.meta.d

    @property
    def norm(self) -> NormStats:
        return self.meta.norm if self.meta.norm is not None else NormStats.identity(self.d)

    def normalize(self, x):
        return self.norm.apply(x)

    def denormalize(self, u):
        return self.norm.invert(u)

    def with_params(self, params: Params) -> "EnergyModel":
        return EnergyModel(params.frozen(), self.meta)

    def with_meta(self, **changes) -> "EnergyModel":
        return EnergyModel(self.params, replace(self.meta, **changes))


def _validate(params: Params, meta: ModelMeta):
    m, d = params.B.shape
    if meta.d != d:
        raise ConfigurationError(f"meta.d={meta.d} but frequency matrix has {d} columns")
    if meta.m != m:
        raise ConfigurationError(f"meta.m={meta.m} but frequency matrix has {m} rows")
    if len(params.Ws) != len(meta.widths) or len(params.bs) != len(meta.widths):
        raise ConfigurationError("number of layers does not match meta.widths")
    fan_in = 2 * m
    for i, (W, b, w) in enumerate(zip(params.Ws, params.bs, meta.widths)):
        if W.shape != (w, fan_in) or b.shape != (w,):
            raise ConfigurationError(
                f"layer {i}: expected W {(w, fan_in)} and b {(w,)}, got {W.shape} and {b.shape}"
            )
        fan_in = w
    if params.head_W.shape != (1, fan_in) or params.head_b.shape != (1,):
        raise ConfigurationError("head must map the last hidden layer to a scalar")
    if meta.omega0 <= 0:
        raise ConfigurationError("omega0 must be positive")
    if meta.norm is not None and meta.norm.d != d:
        raise ConfigurationError("normalization stats dimension does not match the model")
    if not all(np.all(np.isfinite(a)) for a in params.arrays()):
        raise ConfigurationError("model parameters must be finite")


def init_model(
    d: int = 5,
    m: int = 256,
    widths=(128, 128, 128, 128),
    omega0: float = 1.0,
    freq_std: float = 1.0,
    head_scale: float = 1e-2,
    seed: int = 0,
    norm: NormStats | None = None,
    rng: np.random.Generator | None = None,
) -> EnergyModel:
    """Randomly initialised model.

    Frequencies are N(0, freq_std^2); SIREN weights are
    U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0) with biases
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the head has zero bias and
    U(-head_scale, head_scale) weights.
    """
    if d < 1 or m < 1 or not widths or min(widths) < 1:
        raise ConfigurationError("d, m and all widths must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    B = rng.normal(0.0, freq_std, size=(m, d))
    Ws, bs = [], []
    fan_in = 2 * m
    for w in widths:
        lim = np.sqrt(6.0 / fan_in) / omega0
        Ws.append(rng.uniform(-lim, lim, size=(w, fan_in)))
        bs.append(rng.uniform(-1.0, 1.0, size=w) / np.sqrt(fan_in))
        fan_in = w
    head_W = rng.uniform(-head_scale, head_scale, size=(1, fan_in))
    head_b = np.zeros(1)
    params = Params(B, tuple(Ws), tuple(bs), head_W, head_b).frozen()
    meta = ModelMeta(d=d, m=m, widths=tuple(int(w) for w in widths), omega0=float(omega0),
                     seed=seed, norm=norm)
    return EnergyModel(params, meta)


# ---------------------------------------------------------------- evaluation

def _as_batch(model: EnergyModel, u, raw: bool):
    arr = np.asarray(u, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != model.d:
        raise ConfigurationError(
            f"dimension mismatch: model expects d={model.d}, got shape {np.shape(u)}"
        )
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(arr), axis=1))[0])
        raise InputError(f"non-finite sequence vector at row {bad}")
    if raw:
        arr = model.normalize(arr)
    return arr, single


def encode(u, B):
    """Fourier features ``[sin(2 pi B u), cos(2 pi B u)]`` for one or many points."""
    B = np.asarray(B, dtype=np.float64)
    arr = np.asarray(u, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if B.ndim != 2 or arr.shape[1] != B.shape[1]:
        raise ConfigurationError(
            f"dimension mismatch: frequencies are {B.shape}, input has {arr.shape[1]} entries"
        )
    z = TWO_PI * _dense(arr, B)
    feats = np.concatenate([np.sin(z), np.cos(z)], axis=1)
    return feats[0] if single else feats


def _forward(p: Params, omega0, u, dense):
    """Primal pass. Returns (energy, cache)."""
    z = TWO_PI * dense(u, p.B)
    S, C = np.sin(z), np.cos(z)
    h = np.concatenate([S, C], axis=1)
    hs, cs = [h], []
    for W, b in zip(p.Ws, p.bs):
        a = omega0 * (dense(h, W) + b)
        h = np.sin(a)
        hs.append(h)
        cs.append(np.cos(a))
    E = dense(h, p.head_W)[:, 0] + p.head_b[0]
    return E, (S, C, hs, cs)


def _input_grad(p: Params, omega0, cache, dense):
    """Reverse pass for dE/du given the primal cache."""
    S, C, hs, cs = cache
    m = S.shape[1]
    g = np.broadcast_to(p.head_W, hs[-1].shape)
    for W, c in zip(reversed(p.Ws), reversed(cs)):
        g = dense(g * (omega0 * c), W.T)
    gz = g[:, :m] * C - g[:, m:] * S
    return TWO_PI * dense(gz, p.B.T)


def _second_directional(p: Params, omega0, u, V, dense):
    """d^2 E(u + t v)/dt^2 at t=0 for each row of ``V`` (shape (k, d)).

    Returns an array of shape (k, n).
    """
    z = TWO_PI * dense(u, p.B)
    S, C = np.sin(z), np.cos(z)
    k, n = V.shape[0], u.shape[0]
    zd = TWO_PI * dense(V, p.B)[:, None, :]            # (k, 1, m)
    h = np.concatenate([S, C], axis=1)
    hd = np.concatenate([C * zd, -S * zd], axis=2)      # (k, n, 2m)
    zd2 = zd * zd
    hdd = np.concatenate([-S * zd2, -C * zd2], axis=2)
    for W, b in zip(p.Ws, p.bs):
        a = omega0 * (dense(h, W) + b)
        ad = omega0 * dense(hd.reshape(k * n, -1), W).reshape(k, n, -1)
        add = omega0 * dense(hdd.reshape(k * n, -1), W).reshape(k, n, -1)
        h, c = np.sin(a), np.cos(a)
        hd, hdd = c * ad, c * add - h * ad * ad
    return dense(hdd.reshape(k * n, -1), p.head_W)[:, 0].reshape(k, n)


def energy(model: EnergyModel, u, raw: bool = False):
    """Energy at one point (returns a float) or at each row of an (n, d) array.

    With ``raw=True`` inputs are first mapped through the model's normalization.
    """
    arr, single = _as_batch(model, u, raw)
    E, _ = _forward(model.params, model.meta.omega0, arr, _dense)
    return float(E[0]) if single else E


def score(model: EnergyModel, u, raw: bool = False):
    """Analytic score ``-grad E``; in raw coordinates when ``raw=True``."""
    arr, single = _as_batch(model, u, raw)
    p, w0 = model.params, model.meta.omega0
    _, cache = _forward(p, w0, arr, _dense)
    s = -_input_grad(p, w0, cache, _dense)
    if raw:
        s = s / model.norm.scale
    return s[0] if single else s


def second_derivative(model: EnergyModel, u, direction, raw: bool = False):
    """Second directional derivative of the energy along ``direction``."""
    arr, single = _as_batch(model, u, raw)
    v = np.asarray(direction, dtype=np.float64).reshape(1, -1)
    if v.shape[1] != model.d:
        raise ConfigurationError("direction has the wrong dimension")
    if raw:
        v = v / model.norm.scale
    out = _second_directional(model.params, model.meta.omega0, arr, v, _dense)[0]
    return float(out[0]) if single else out


def laplacian(model: EnergyModel, u, raw: bool = False):
    """Trace of the input Hessian, summed over the d coordinate axes in order."""
    arr, single = _as_batch(model, u, raw)
    axes = np.eye(model.d)
    if raw:
        axes = axes / model.norm.scale[:, None]
    per_axis = _second_directional(model.params, model.meta.omega0, arr, axes, _dense)
    lap = per_axis[0].copy()
    for row in per_axis[1:]:
        lap += row
    return float(lap[0]) if single else lap


def activations(model: EnergyModel, u) -> list:
    """Encoder features followed by every hidden activation (for inspection)."""
    arr, _ = _as_batch(model, u, False)
    _, (_, _, hs, _) = _forward(model.params, model.meta.omega0, arr, _dense)
    return hs


@dataclass
class EnergyEvaluation:
    """Batched evaluation; unrequested quantities are ``None``."""

    energy: np.ndarray | None = None
    score: np.ndarray | None = None
    laplacian: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        for a in (self.energy, self.score, self.laplacian):
            if a is not None:
                return len(a)
        return 0

    def __getitem__(self, i):
        pick = lambda a: None if a is None else a[i]  # noqa: E731
        return EnergyEvaluation(pick(self.energy), pick(self.score), pick(self.laplacian))


def energy_batch(model: EnergyModel, table, energy: bool = True, score: bool = False,
                 laplacian: bool = False, raw: bool = False) -> EnergyEvaluation:
    """Evaluate the requested quantities for every row of ``table``.

    ``table`` is an (n, d) array or anything with a ``values`` attribute.
    Row ``i`` of the result is bitwise equal to the single-point call on row ``i``.
    """
    values = getattr(table, "values", table)
    arr, _ = _as_batch(model, np.atleast_2d(np.asarray(values, dtype=np.float64)), raw)
    p, w0 = model.params, model.meta.omega0
    out = EnergyEvaluation()
    if energy or score:
        E, cache = _forward(p, w0, arr, _dense)
        if energy:
            out.energy = E
        if score:
            s = -_input_grad(p, w0, cache, _dense)
            out.score = s / model.norm.scale if raw else s
    if laplacian:
        axes = np.eye(model.d)
        if raw:
            axes = axes / model.norm.scale[:, None]
        per_axis = _second_directional(p, w0, arr, axes, _dense)
        lap = per_axis[0].copy()
        for row in per_axis[1:]:
            lap += row
        out.laplacian = lap
    return out


# ----------------------------------------------------- denoising score matching

def _check_dsm_inputs(clean, noise, sigma, d):
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    clean = np.atleast_2d(np.asarray(clean, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if clean.shape != noise.shape:
        raise ConfigurationError(f"clean {clean.shape} and noise {noise.shape} differ in shape")
    if clean.shape[1] != d:
        raise ConfigurationError(f"dimension mismatch: model expects d={d}")
    return clean, noise


def dsm_residual(params: Params, omega0: float, clean, noise, sigma: float, dense=_matmul):
    """Per-row ``-grad E(u + eps) + eps / sigma^2``."""
    a = clean + noise
    _, cache = _forward(params, omega0, a, dense)
    return -_input_grad(params, omega0, cache, dense) + noise / sigma**2


def dsm_loss_and_gradient(params: Params, omega0: float, clean, noise, sigma: float):
    """Mean DSM loss over the batch and its exact gradient w.r.t. all parameters.

    With ``g = grad_a E(a)`` and ``v = dL/dg = 2 (g - eps/sigma^2) / n`` held
    fixed, ``dL/dtheta = d/dtheta sum_n <g_n, v_n>``. The inner product is the
    forward-mode tangent of E along ``v``, which is differentiated here in
    reverse over the joint primal/tangent graph.
    """
    n = clean.shape[0]
    a = clean + noise
    target = noise / sigma**2
    w0 = omega0
    mm = _matmul
    _, cache = _forward(params, w0, a, mm)
    S, C, hs, cs = cache
    g = _input_grad(params, w0, cache, mm)
    diff = g - target
    sq = np.einsum("ij,ij->i", diff, diff)
    loss = float(sq.mean())
    v = (2.0 / n) * diff

    # tangent pass along v
    zd = TWO_PI * mm(v, params.B)
    hd = np.concatenate([C * zd, -S * zd], axis=1)
    hds, ads = [hd], []
    for W, c in zip(params.Ws, cs):
        ad = w0 * mm(hd, W)
        hd = c * ad
        ads.append(ad)
        hds.append(hd)

    grads_W, grads_b = [], []
    head_W = params.head_W
    g_head_W = hds[-1].sum(axis=0, keepdims=True)
    g_head_b = np.zeros(1)

    bar_hd = np.broadcast_to(head_W, hds[-1].shape)
    bar_h = None
    for l in range(len(params.Ws) - 1, -1, -1):
        W, h, c, ad = params.Ws[l], hs[l + 1], cs[l], ads[l]
        bar_ad = bar_hd * c
        bar_c = bar_hd * ad
        bar_a = -bar_c * h if bar_h is None else bar_h * c - bar_c * h
        bar_p = w0 * bar_a
        bar_pd = w0 * bar_ad
        grads_W.append(bar_p.T @ hs[l] + bar_pd.T @ hds[l])
        grads_b.append(bar_p.sum(axis=0))
        bar_h = bar_p @ W
        bar_hd = bar_pd @ W
    grads_W.reverse()
    grads_b.reverse()

    m = S.shape[1]
    bar_hS, bar_hC = bar_h[:, :m], bar_h[:, m:]
    bar_hdS, bar_hdC = bar_hd[:, :m], bar_hd[:, m:]
    bar_S = bar_hS - bar_hdC * zd
    bar_C = bar_hC + bar_hdS * zd
    bar_z = bar_S * C - bar_C * S
    bar_zd = bar_hdS * C - bar_hdC * S
    g_B = TWO_PI * (bar_z.T @ a + bar_zd.T @ v)

    parts = [g_B]
    for gW, gb in zip(grads_W, grads_b):
        parts += [gW, gb]
    parts += [g_head_W, g_head_b]
    return loss, np.concatenate([x.reshape(-1) for x in parts])


def dsm_loss(model: EnergyModel, clean, noise, sigma: float) -> float:
    """Empirical mean of ``||-grad E(u + eps) + eps / sigma^2||^2``."""
    clean, noise = _check_dsm_inputs(clean, noise, sigma, model.d)
    with np.errstate(invalid="ignore", over="ignore"):
        r = dsm_residual(model.params, model.meta.omega0, clean, noise, sigma, dense=_dense)
        sq = np.einsum("ij,ij->i", r, r)
    bad = np.flatnonzero(~np.isfinite(sq))
    if bad.size:
        raise NumericError(f"non-finite loss term at row {int(bad[0])}", row=int(bad[0]))
    return float(sq.mean())


def loss_param_gradient(model: EnergyModel, clean, noise, sigma: float) -> np.ndarray:
    """Flat gradient of the mean DSM loss in the canonical parameter order."""
    clean, noise = _check_dsm_inputs(clean, noise, sigma, model.d)
    return dsm_loss_and_gradient(model.params, model.meta.omega0, clean, noise, sigma)[1]
