"""Tightness indicators for a linear relaxation.

``d`` compares the true network's margin at the relaxed optimum's input
perturbation with the relaxed bound. ``r`` measures how far each unstable
neuron's true pre-activation at that input sits from the set of values that
would make the relaxation exact: {0} when the neuron's optimal intercept is
0, {lower, upper} when it is delta_bar. If every residual is zero the bound
equals the true minimum margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .bounds import (
    CertifyResult,
    PerturbationSpec,
    _batch_input,
    _batched_certify,
    optimal_input_perturbation,
)
from .model import MarginSpec, Network, forward

ZERO_BRANCH = "zero-intercept"
UPPER_BRANCH = "upper-intercept"


class TightnessInvariantError(AssertionError):
    """A supposedly tight certificate disagrees with the network's own margin."""


@dataclass
class Indicators:
    """Batched indicators, one entry per (sample, target).

    ``residuals[i]`` holds the per-neuron residuals of hidden layer i+1 with
    shape (B, T, n_{i+1}); entries for stable neurons are 0.
    """

    certificate: CertifyResult
    delta0: object  # (B, T, n0)
    p_feasible: object  # p'_O, (B, T)
    d: object  # (B, T)
    r: object  # (B, T)
    residuals: list
    upper_branch: list  # bool masks: intercept at delta_bar
    unstable: list  # bool masks (B, n_i)
    unstable_count: np.ndarray  # (B,)
    feasible_pre: list = field(default_factory=list)  # x'_i, (B, T, n_i)

    @property
    def p_c_star(self):
        return self.certificate.p_c_star


def indicators(net: Network, x, spec: PerturbationSpec, C, engine: str = "fastlin", certificate=None) -> Indicators:
    """Compute p_C*, delta_0*, p'_O, d and r for a batch.

    ``x`` is (B, n0) and ``C`` is (B, T, n_out). The relaxation of ``engine``
    supplies delta_0*, the intercept branches and the bounds; with the
    default Fast-Lin engine this is exactly the indicator pair used for
    training. ``certificate`` may be passed to reuse an existing result.
    """
    if engine == "ibp":
        raise ValueError("IBP has no linear relaxation; use fastlin, crown or crown-ibp")
    res = certificate if certificate is not None else _batched_certify(net, x, spec, C, engine)
    relax, state = res.relaxation, res.bounds
    delta0 = optimal_input_perturbation(relax, spec)
    z1 = ad.expand_dims(x, -2) + delta0
    pre = [xi for xi, _ in forward(net, z1)]
    p_feasible = ad.sum(C * pre[-1], axis=-1)
    d = p_feasible - res.p_c_star

    residuals, branches, unstable_masks = [], [], []
    total = 0.0
    count = np.zeros(ad.value(x).shape[0])
    for i, coef in enumerate(relax.coef_hidden):
        lo = ad.expand_dims(state.lower[i], -2)
        up = ad.expand_dims(state.upper[i], -2)
        unstable = state.unstable(i)
        xp = pre[i]
        to_zero = ad.abs(xp)
        to_ends = ad.minimum(ad.abs(xp - lo), ad.abs(xp - up))
        upper = ad.value(coef) < 0
        res_i = ad.where(upper, to_ends, to_zero)
        res_i = ad.where(unstable[..., None, :], res_i, 0.0)
        residuals.append(res_i)
        branches.append(upper)
        unstable_masks.append(unstable)
        total = total + ad.sum(res_i, axis=-1)
        count = count + unstable.sum(axis=-1)
    denom = np.maximum(count, 1.0)[:, None]
    r = total / denom if relax.coef_hidden else np.zeros_like(ad.value(d))
    return Indicators(res, delta0, p_feasible, d, r, residuals, branches, unstable_masks, count, pre)


# ----------------------------------------------------------- single sample

def _single(net: Network, x, c_t) -> tuple[np.ndarray, np.ndarray]:
    xb, single = _batch_input(np.asarray(x, dtype=np.float64))
    if not single:
        raise ValueError("expected a single input vector")
    c = c_t.c if isinstance(c_t, MarginSpec) else np.asarray(c_t, dtype=np.float64).reshape(-1)
    if c.shape[0] != net.n_out:
        raise ValueError(f"margin vector has width {c.shape[0]}, network has {net.n_out} outputs")
    return xb, c[None, None, :]


class DResult(NamedTuple):
    d: float
    p_feasible: float
    p_c_star: float
    delta0: np.ndarray


class Residual(NamedTuple):
    layer: int  # 1-based hidden layer
    index: int
    residual: float
    branch: str


@dataclass
class TightnessReport:
    p_c_star: float
    p_feasible: float
    d: float
    r: float
    delta0: np.ndarray
    residuals: list[Residual]


def tightness_report(net: Network, x, spec: PerturbationSpec, c_t, engine: str = "fastlin") -> TightnessReport:
    """d and r for one sample and one margin direction, sharing one delta_0*."""
    xb, C = _single(net, x, c_t)
    ind = indicators(net, xb, spec, C, engine)
    rows = []
    for i, (res_i, upper, unstable) in enumerate(zip(ind.residuals, ind.upper_branch, ind.unstable)):
        for j in np.flatnonzero(unstable[0]):
            branch = UPPER_BRANCH if upper[0, 0, j] else ZERO_BRANCH
            rows.append(Residual(i + 1, int(j), float(ad.value(res_i)[0, 0, j]), branch))
    return TightnessReport(
        p_c_star=float(ad.value(ind.p_c_star)[0, 0]),
        p_feasible=float(ad.value(ind.p_feasible)[0, 0]),
        d=float(ad.value(ind.d)[0, 0]),
        r=float(ad.value(ind.r)[0, 0]),
        delta0=np.array(ad.value(ind.delta0)[0, 0]),
        residuals=rows,
    )


def compute_d(net: Network, x, spec: PerturbationSpec, c_t, engine: str = "fastlin") -> DResult:
    """d = c^T h_L(x + delta_0*) - p_C*."""
    rep = tightness_report(net, x, spec, c_t, engine)
    return DResult(rep.d, rep.p_feasible, rep.p_c_star, rep.delta0)


def compute_r(net: Network, x, spec: PerturbationSpec, c_t, engine: str = "fastlin") -> tuple[float, list[Residual]]:
    """Mean residual over all unstable neurons (0 when there are none)."""
    rep = tightness_report(net, x, spec, c_t, engine)
    return rep.r, rep.residuals


TIGHT = "TIGHT"
UNVERIFIED = "UNVERIFIED"


@dataclass
class Verdict:
    status: str
    violations: list[Residual]
    gap: float  # p'_O - p_C*
    allowed: float  # bound on |gap| implied by the residual tolerance
    report: TightnessReport

    @property
    def tight(self) -> bool:
        return self.status == TIGHT


def residual_sensitivity(net: Network, c) -> float:
    """Constant K with |p'_O - p_C*| <= K * max residual.

    Each residual perturbs a hidden unit by at most its own size; the effect
    on the margin is bounded by ||c||_1 times the product of the inf->inf
    operator norms of the layers above it (relaxation slopes lie in [0, 1]).
    """
    c = c.c if isinstance(c, MarginSpec) else np.asarray(c, dtype=np.float64)
    norms = [np.max(np.sum(np.abs(ad.value(w)), axis=1)) for w in net.weights]
    total = 0.0
    for i in range(1, net.depth):
        total += float(np.prod(norms[i:]))
    return float(np.sum(np.abs(c))) * total


def verify_tightness(net: Network, x, spec: PerturbationSpec, c_t, tol: float = 1e-10,
                       engine: str = "fastlin", rounding: float = 1e-9) -> Verdict:
    """Sufficient-condition tightness check.

    Returns TIGHT when every unstable neuron's residual is within ``tol``,
    after asserting that the bound matches the network's own margin at
    delta_0* up to ``residual_sensitivity * tol + rounding``. Otherwise
    returns UNVERIFIED with the offending neurons; a large residual does not
    imply a gap, so no negative verdict is ever issued.
    """
    rep = tightness_report(net, x, spec, c_t, engine)
    gap = rep.p_feasible - rep.p_c_star
    allowed = residual_sensitivity(net, c_t) * tol + rounding
    violations = [row for row in rep.residuals if row.residual > tol]
    if violations:
        return Verdict(UNVERIFIED, violations, gap, allowed, rep)
    if abs(gap) > allowed:
        raise TightnessInvariantError(
            f"all residuals <= {tol:g} but p'_O - p_C* = {gap:.3e} exceeds {allowed:.3e}"
        )
    return Verdict(TIGHT, [], gap, allowed, rep)
