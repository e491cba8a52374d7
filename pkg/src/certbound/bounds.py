"""Bound propagation engines: IBP, Fast-Lin and CROWN.

All engines work on a batch: ``x`` of shape (B, n0) and margin directions
``C`` of shape (B, T, n_L). The public wrappers also accept a single input
vector and a list of :class:`~certbound.model.MarginSpec`, and strip the
batch dimension again on the way out.

Every engine is written against :mod:`certbound.autodiff`, so passing a
network whose weights are ``Var`` objects records the whole computation for
training. Discrete choices (neuron grouping, CROWN lower slopes, the sign
of backward coefficients) are read off the values and enter as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .model import MarginSpec, Network
from .tensor import norm_order

# Unstable neurons narrower than this are treated as stable at sign(upper).
SLOPE_GUARD = 1e-12


@dataclass(frozen=True)
class PerturbationSpec:
    """An l_p ball of radius ``eps`` around the clean input (p in {2, inf})."""

    eps: float
    p: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "p", norm_order(self.p))
        eps = float(self.eps)
        if not math.isfinite(eps) or eps < 0:
            raise ValueError(f"eps must be a finite non-negative number, got {self.eps!r}")
        object.__setattr__(self, "eps", eps)

    @property
    def name(self) -> str:
        return "linf" if self.p == math.inf else "l2"


def dual_norm_rows(v, p: float, axis: int = -1):
    """Dual norm of each slice of ``v`` along ``axis`` (l1 for p=inf, l2 for p=2)."""
    if p == math.inf:
        return ad.l1norm(v, axis=axis)
    return ad.l2norm(v, axis=axis)


def relu_groups(lower, upper) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks (inactive, active, unstable) for pre-activation bounds.

    ``upper == 0`` counts as inactive and ``lower == 0`` (with upper > 0) as
    active, so the unstable set is strictly ``lower < 0 < upper``.
    """
    lo, up = ad.value(lower), ad.value(upper)
    inactive = up <= 0
    unstable = (lo < 0) & (up > 0) & ((up - lo) >= SLOPE_GUARD)
    active = ~inactive & ~unstable
    return inactive, active, unstable


@dataclass
class BoundState:
    """Pre-activation bounds for layers 1..L (index 0 is layer 1)."""

    lower: list
    upper: list

    def groups(self, layer: int):
        return relu_groups(self.lower[layer], self.upper[layer])

    def unstable(self, layer: int) -> np.ndarray:
        return self.groups(layer)[2]

    def unstable_count(self) -> np.ndarray:
        """Number of unstable hidden neurons (layers 1..L-1), per sample."""
        total = 0
        for i in range(len(self.lower) - 1):
            total = total + self.unstable(i).sum(axis=-1)
        return np.asarray(total)


def relu_relaxation(lower, upper):
    """Fast-Lin slope ``D`` and intercept bound ``delta_bar`` per neuron.

    D = 0 / 1 on inactive / active neurons and upper/(upper-lower) on unstable
    ones; delta_bar = -upper*lower/(upper-lower) on unstable neurons, 0 elsewhere.
    """
    _, active, unstable = relu_groups(lower, upper)
    lo = ad.where(unstable, lower, -1.0)
    up = ad.where(unstable, upper, 1.0)
    width = up - lo
    slope = ad.where(unstable, up / width, np.where(active, 1.0, 0.0))
    icpt = ad.where(unstable, -(up * lo) / width, 0.0)
    return slope, icpt


def crown_lower_slope(lower, upper) -> np.ndarray:
    """CROWN's adaptive lower-line slope: 1 if upper >= -lower else 0 on unstable neurons."""
    _, active, unstable = relu_groups(lower, upper)
    lo, up = ad.value(lower), ad.value(upper)
    return np.where(unstable, (up >= -lo).astype(float), active.astype(float))


@dataclass
class LinearRelaxation:
    """Closed-form solution of the layer-wise linear relaxation.

    ``coef_input`` is ``c^T W_{L:1}`` (B, T, n0); ``coef_hidden[i]`` is
    ``c^T W_{L:i+2}`` (the coefficient of hidden layer i+1's intercept),
    shape (B, T, n_{i+1}); ``clean_value`` is ``c^T g_L(x)`` (B, T).
    ``slopes``/``intercept_bounds`` hold D_i and delta_bar_i of the hidden
    layers. Fast-Lin additionally records the forward-accumulated maps
    ``lin_maps[i] = W_{i+1:1}`` and clean-path values ``clean_path[i]``;
    CROWN records the per-target slope it used in ``slope_choice``.
    """

    spec: PerturbationSpec
    slopes: list
    intercept_bounds: list
    coef_input: object
    coef_hidden: list
    clean_value: object
    lin_maps: list | None = None
    clean_path: list | None = None
    lower_slopes: list | None = None
    slope_choice: list | None = None

    @property
    def intercepts(self) -> list:
        """Optimal intercepts: delta_bar where the backward coefficient is negative, else 0."""
        return optimal_intercepts(self)

    @property
    def input_perturbation(self):
        return optimal_input_perturbation(self, self.spec)

    def lower_bound(self):
        return relaxation_value(self)


def relaxation_value(relax: LinearRelaxation):
    """p_C* = c^T g_L(x) - eps*||c^T W_{L:1}||_* + sum_i sum_j delta_bar_ij * min(coef_ij, 0)."""
    spec = relax.spec
    val = relax.clean_value - spec.eps * dual_norm_rows(relax.coef_input, spec.p)
    for coef, dbar in zip(relax.coef_hidden, relax.intercept_bounds):
        val = val + ad.sum(ad.minimum(coef, 0.0) * ad.expand_dims(dbar, -2), axis=-1)
    return val


def optimal_input_perturbation(relax: LinearRelaxation, spec: PerturbationSpec | None = None, c_t=None):
    """delta_0* minimizing ``c^T W_{L:1} delta`` over the l_p ball.

    ``-eps*sign(v)`` for p=inf and ``-eps*v/||v||_2`` for p=2 (zero when v=0),
    with ``v = c^T W_{L:1}``. The sign pattern is a constant; for p=2 the
    normalization is differentiated.
    """
    spec = relax.spec if spec is None else spec
    v = relax.coef_input if c_t is None else c_t
    if spec.eps == 0:
        return np.zeros_like(ad.value(v))
    if spec.p == math.inf:
        return -spec.eps * np.sign(ad.value(v))
    norm = ad.l2norm(v, axis=-1, keepdims=True)
    nz = ad.value(norm) > 0
    return ad.where(nz, -spec.eps * v / ad.where(nz, norm, 1.0), 0.0)


def optimal_intercepts(relax: LinearRelaxation) -> list:
    """delta*_ij = delta_bar_ij when the backward coefficient is < 0, else 0 (ties -> 0)."""
    out = []
    for coef, dbar in zip(relax.coef_hidden, relax.intercept_bounds):
        neg = ad.value(coef) < 0
        out.append(ad.where(neg, ad.expand_dims(dbar, -2), 0.0))
    return out


# ------------------------------------------------------------------ helpers

def _w_t(layer):
    return ad.swapaxes(layer.weight, 0, 1)


def _bmv(M, v):
    """Batched matrix-vector product: M (..., m, n), v (..., n) -> (..., m)."""
    return ad.sum(M * ad.expand_dims(v, -2), axis=-1)


def _batch_input(x):
    xv = np.asarray(ad.value(x), dtype=np.float64)
    if xv.ndim == 1:
        return (ad.expand_dims(x, 0) if isinstance(x, ad.Var) else xv[None, :]), True
    if xv.ndim != 2:
        raise ValueError(f"input must be a vector or a (batch, width) matrix, got shape {xv.shape}")
    return x, False


def _target_tensor(targets, batch: int, n_out: int) -> np.ndarray:
    """Stack margin directions into (B, T, n_out)."""
    if targets is None:
        return np.eye(n_out)[None].repeat(batch, axis=0)
    if isinstance(targets, MarginSpec):
        targets = [targets]
    if isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], MarginSpec):
        C = np.stack([t.c for t in targets])
    else:
        C = np.asarray(targets, dtype=np.float64)
        if C.ndim == 1:
            C = C[None, :]
    if C.shape[-1] != n_out:
        raise ValueError(f"margin vectors have width {C.shape[-1]}, network has {n_out} outputs")
    if C.ndim == 2:
        C = np.broadcast_to(C, (batch,) + C.shape)
    return C


def _unbatch(obj):
    """Drop the leading batch axis from arrays, Vars and containers of them."""
    if obj is None or isinstance(obj, (PerturbationSpec, float, int)):
        return obj
    if isinstance(obj, ad.Var):
        return obj[0]
    if isinstance(obj, np.ndarray):
        return obj[0] if obj.ndim else obj
    if isinstance(obj, list):
        return [_unbatch(o) for o in obj]
    if isinstance(obj, (BoundState, LinearRelaxation)):
        kwargs = {f.name: _unbatch(getattr(obj, f.name)) for f in fields(obj)}
        return type(obj)(**kwargs)
    return obj


class CertifyResult(NamedTuple):
    bounds: BoundState
    relaxation: LinearRelaxation | None
    p_c_star: object


def _first_layer(net: Network, x, spec: PerturbationSpec):
    layer = net.layers[0]
    center = ad.matmul(x, _w_t(layer)) + layer.bias
    radius = spec.eps * dual_norm_rows(layer.weight, spec.p)
    return center - radius, center + radius, center


# --------------------------------------------------------------------- IBP

def _ibp(net: Network, x, spec: PerturbationSpec) -> BoundState:
    lo, up, _ = _first_layer(net, x, spec)
    lows, ups = [lo], [up]
    for layer in net.layers[1:]:
        zl, zu = ad.relu(lo), ad.relu(up)
        mid, half = (zu + zl) * 0.5, (zu - zl) * 0.5
        center = ad.matmul(mid, _w_t(layer)) + layer.bias
        radius = ad.matmul(half, ad.swapaxes(ad.abs(layer.weight), 0, 1))
        lo, up = center - radius, center + radius
        lows.append(lo)
        ups.append(up)
    return BoundState(lows, ups)


def _ibp_margin(net: Network, state: BoundState, C):
    """Interval lower bound on c^T x_L, folding c into the last linear layer."""
    last = net.layers[-1]
    zl, zu = ad.relu(state.lower[-2]), ad.relu(state.upper[-2])
    mid, half = (zu + zl) * 0.5, (zu - zl) * 0.5
    A = ad.matmul(C, last.weight)  # (B, T, n_{L-1})
    return _bmv(A, mid) - _bmv(ad.abs(A), half) + ad.matmul(C, last.bias)


def ibp_bounds(net: Network, x, spec: PerturbationSpec) -> BoundState:
    """Interval bounds; layer 1 uses radius eps*||W_1 row||_{p*}."""
    xb, single = _batch_input(x)
    state = _ibp(net, xb, spec)
    return _unbatch(state) if single else state


def ibp_certify(net: Network, x, spec: PerturbationSpec, targets=None) -> CertifyResult:
    xb, single = _batch_input(x)
    C = _target_tensor(targets, ad.value(xb).shape[0], net.n_out)
    state = _ibp(net, xb, spec)
    p = _ibp_margin(net, state, C)
    res = CertifyResult(state, None, p)
    return CertifyResult(*(_unbatch(r) for r in res)) if single else res


# ----------------------------------------------------------------- Fast-Lin

def _fastlin_bounds(net: Network, x, spec: PerturbationSpec):
    """Forward accumulation of W_{i:1}, g_i and the layer bounds.

    ``maps[k]`` holds W_{i:k+1} for the current layer i; ``maps[0]`` is the
    map from the input and ``maps[k]`` (k >= 1) multiplies the intercepts of
    hidden layer k.
    """
    first = net.layers[0]
    g = ad.matmul(x, _w_t(first)) + first.bias
    maps = [first.weight]
    lows, ups, slopes, icpts = [], [], [], []
    lin_maps, clean_path = [], []
    for i in range(net.depth):
        radius = spec.eps * dual_norm_rows(maps[0], spec.p)
        lo, up = g - radius, g + radius
        for k in range(1, len(maps)):
            dbar = ad.expand_dims(icpts[k - 1], -2)
            lo = lo + ad.sum(ad.minimum(maps[k], 0.0) * dbar, axis=-1)
            up = up + ad.sum(ad.maximum(maps[k], 0.0) * dbar, axis=-1)
        lows.append(lo)
        ups.append(up)
        # W_{1:1} has no batch axis yet; give it one so unbatching is uniform.
        lin_maps.append(ad.expand_dims(maps[0], 0) if i == 0 else maps[0])
        clean_path.append(g)
        if i == net.depth - 1:
            break
        D, dbar = relu_relaxation(lo, up)
        slopes.append(D)
        icpts.append(dbar)
        nxt = net.layers[i + 1]
        Dcol = ad.expand_dims(D, -1)
        maps = [ad.matmul(nxt.weight, Dcol * M) for M in maps] + [nxt.weight]
        g = ad.matmul(g * D, _w_t(nxt)) + nxt.bias
    return BoundState(lows, ups), slopes, icpts, maps, lin_maps, clean_path


def _fastlin(net: Network, x, spec: PerturbationSpec, C):
    state, slopes, icpts, maps, lin_maps, clean_path = _fastlin_bounds(net, x, spec)
    g = clean_path[-1]
    relax = LinearRelaxation(
        spec=spec,
        slopes=slopes,
        intercept_bounds=icpts,
        coef_input=ad.matmul(C, maps[0]),
        coef_hidden=[ad.matmul(C, M) for M in maps[1:]],
        clean_value=_bmv(C, g),
        lin_maps=lin_maps,
        clean_path=clean_path,
    )
    return CertifyResult(state, relax, relaxation_value(relax))


def fastlin_certify(net: Network, x, spec: PerturbationSpec, targets=None) -> CertifyResult:
    """Fast-Lin bounds and margin lower bounds p_C* for each target.

    Intermediate bounds follow the forward accumulation of ``W_{i:1}`` and
    ``g_i``; the margin bound is
    ``c^T g_L(x) - eps*||c^T W_{L:1}||_* + sum delta_bar*min(c^T W_{L:i+1}, 0)``.
    """
    xb, single = _batch_input(x)
    C = _target_tensor(targets, ad.value(xb).shape[0], net.n_out)
    res = _fastlin(net, xb, spec, C)
    return CertifyResult(*(_unbatch(r) for r in res)) if single else res


# -------------------------------------------------------------------- CROWN

def _crown_backward(net: Network, upto: int, x, spec, lows, ups, C):
    """Back-substitute ``C`` (coefficients on x_upto, 1-based layer) to the input.

    Returns the relaxation parts for the hidden layers below ``upto``. The
    slope at each unstable neuron follows the sign of its running
    coefficient: the upper line (slope u/(u-l), intercept delta_bar) when it
    is negative, CROWN's adaptive lower line otherwise.
    """
    top = net.layers[upto - 1]
    A = ad.matmul(C, top.weight)
    const = ad.matmul(C, top.bias)
    n_hidden = upto - 1
    coef_hidden = [None] * n_hidden
    choice = [None] * n_hidden
    slopes = [None] * n_hidden
    icpts = [None] * n_hidden
    alphas = [None] * n_hidden
    for i in range(n_hidden - 1, -1, -1):
        s, dbar = relu_relaxation(lows[i], ups[i])
        alpha = crown_lower_slope(lows[i], ups[i])
        neg = ad.value(A) < 0
        sel = ad.where(neg, ad.expand_dims(s, -2), ad.expand_dims(alpha, -2))
        coef_hidden[i], choice[i], slopes[i], icpts[i], alphas[i] = A, sel, s, dbar, alpha
        A = A * sel
        layer = net.layers[i]
        const = const + ad.matmul(A, layer.bias)
        A = ad.matmul(A, layer.weight)
    relax = LinearRelaxation(
        spec=spec,
        slopes=slopes,
        intercept_bounds=icpts,
        coef_input=A,
        coef_hidden=coef_hidden,
        clean_value=_bmv(A, x) + const,
        lower_slopes=alphas,
        slope_choice=choice,
    )
    return relax


def _crown(net: Network, x, spec: PerturbationSpec, C, intermediate: str = "crown"):
    if intermediate not in ("crown", "ibp"):
        raise ValueError(f"intermediate must be 'crown' or 'ibp', got {intermediate!r}")
    if intermediate == "ibp":
        ibp = _ibp(net, x, spec)
        lows, ups = list(ibp.lower[:-1]), list(ibp.upper[:-1])
    else:
        lo, up, _ = _first_layer(net, x, spec)
        lows, ups = [lo], [up]
        batch = ad.value(x).shape[0]
        for layer_idx in range(2, net.depth):
            n = net.layers[layer_idx - 1].n_out
            eye = np.eye(n)
            Cl = np.broadcast_to(np.concatenate([eye, -eye])[None], (batch, 2 * n, n))
            relax = _crown_backward(net, layer_idx, x, spec, lows, ups, Cl)
            p = relaxation_value(relax)
            lows.append(p[:, :n])
            ups.append(-p[:, n:])
    # Output-layer bounds, so the state covers every layer like the other engines.
    n_out = net.n_out
    eye = np.eye(n_out)
    Cout = np.broadcast_to(np.concatenate([eye, -eye])[None], (ad.value(x).shape[0], 2 * n_out, n_out))
    p_out = relaxation_value(_crown_backward(net, net.depth, x, spec, lows, ups, Cout))
    state = BoundState(lows + [p_out[:, :n_out]], ups + [-p_out[:, n_out:]])
    relax = _crown_backward(net, net.depth, x, spec, lows, ups, C)
    return CertifyResult(state, relax, relaxation_value(relax))


def crown_certify(net: Network, x, spec: PerturbationSpec, targets=None, intermediate: str = "crown") -> CertifyResult:
    """CROWN margin bounds; ``intermediate='ibp'`` gives CROWN-IBP."""
    xb, single = _batch_input(x)
    C = _target_tensor(targets, ad.value(xb).shape[0], net.n_out)
    res = _crown(net, xb, spec, C, intermediate)
    return CertifyResult(*(_unbatch(r) for r in res)) if single else res


ENGINES = ("ibp", "fastlin", "crown", "crown-ibp")


def certify(net: Network, x, spec: PerturbationSpec, targets=None, engine: str = "fastlin") -> CertifyResult:
    """Dispatch to one of :data:`ENGINES`."""
    if engine == "ibp":
        return ibp_certify(net, x, spec, targets)
    if engine == "fastlin":
        return fastlin_certify(net, x, spec, targets)
    if engine == "crown":
        return crown_certify(net, x, spec, targets, "crown")
    if engine == "crown-ibp":
        return crown_certify(net, x, spec, targets, "ibp")
    raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")


def _batched_certify(net, x, spec, C, engine: str) -> CertifyResult:
    """Engine call on an already-batched input and (B, T, n_out) margins."""
    if engine == "ibp":
        state = _ibp(net, x, spec)
        return CertifyResult(state, None, _ibp_margin(net, state, C))
    if engine == "fastlin":
        return _fastlin(net, x, spec, C)
    if engine == "crown":
        return _crown(net, x, spec, C, "crown")
    if engine == "crown-ibp":
        return _crown(net, x, spec, C, "ibp")
    raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
