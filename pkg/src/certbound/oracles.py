"""Ground truth for the minimum margin: exact enumeration, grid search and PGD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .bounds import PerturbationSpec, _fastlin, ibp_bounds, optimal_input_perturbation, relu_groups
from .model import MarginSpec, Network, logits

MAX_UNSTABLE = 22
# Vertices within this distance outside a half-plane are kept, so optima that
# sit exactly on an activation boundary survive rounding in the clip.
CLIP_TOL = 1e-12


class OracleRefused(RuntimeError):
    """The exact oracle does not apply (input width, norm or pattern count)."""


@dataclass(frozen=True)
class Bracket:
    """``lower <= exact <= upper`` enclosure of the true minimum margin."""

    lower: float
    upper: float
    exact: Optional[float] = None

    def ordered(self, tol: float = 1e-9) -> bool:
        if self.exact is None:
            return self.lower <= self.upper + tol
        return self.lower <= self.exact + tol and self.exact <= self.upper + tol


def _margin_vector(net: Network, c_t) -> np.ndarray:
    c = c_t.c if isinstance(c_t, MarginSpec) else np.asarray(c_t, dtype=np.float64).reshape(-1)
    if c.shape[0] != net.n_out:
        raise ValueError(f"margin vector has width {c.shape[0]}, network has {net.n_out} outputs")
    return c


# ------------------------------------------------------------ 2-D geometry

def clip_halfplane(poly: list[tuple[float, float]], normal, offset: float, tol: float = CLIP_TOL):
    """Clip a convex polygon to ``normal . z + offset >= 0`` (one Sutherland-Hodgman pass).

    Degenerate inputs (a point or a segment) are handled like any other
    vertex list; an empty list means the intersection is empty.
    """
    nx, ny = float(normal[0]), float(normal[1])
    vals = [nx * px + ny * py + offset for px, py in poly]
    if all(v >= -tol for v in vals):
        return poly
    if all(v < -tol for v in vals):
        return []
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        vp, vq = vals[k], vals[(k + 1) % n]
        if vp >= -tol:
            out.append(p)
        if (vp >= -tol) != (vq >= -tol) and vp != vq:
            t = vp / (vp - vq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _box(center, eps: float):
    cx, cy = float(center[0]), float(center[1])
    return [(cx - eps, cy - eps), (cx + eps, cy - eps), (cx + eps, cy + eps), (cx - eps, cy + eps)]


# ---------------------------------------------------------------- oracles

def unstable_under_ibp(net: Network, x, spec: PerturbationSpec) -> list[np.ndarray]:
    state = ibp_bounds(net, x, spec)
    return [state.groups(i) for i in range(net.depth - 1)]


def pattern_oracle(net: Network, x, spec: PerturbationSpec, c_t, max_unstable: int = MAX_UNSTABLE) -> float:
    """Exact minimum of ``c^T h_L(z)`` over the l_inf box, for 2-input networks.

    Neurons that IBP proves stable keep their sign; every sign assignment of
    the remaining ones makes the network affine in z, restricted to a convex
    polygon (the box cut by one half-plane per unstable neuron). The search
    walks the assignments depth-first, prunes empty polygons and evaluates
    the affine objective at the surviving vertices.
    """
    x = np.asarray(x, dtype=np.float64)
    if net.n_in != 2 or x.shape != (2,):
        raise OracleRefused(f"pattern oracle needs 2-D inputs, network has {net.n_in}")
    if spec.p != math.inf:
        raise OracleRefused("pattern oracle handles the l_inf ball only")
    c = _margin_vector(net, c_t)
    groups = unstable_under_ibp(net, x, spec)
    k = int(sum(int(g[2].sum()) for g in groups))
    if k > max_unstable:
        raise OracleRefused(f"{k} unstable neurons exceed the limit of {max_unstable}")

    weights = [np.asarray(ad.value(w)) for w in net.weights]
    biases = [np.asarray(ad.value(b)) for b in net.biases]
    best = math.inf

    def finish(poly, A, a):
        nonlocal best
        obj_w = c @ A
        obj_b = float(c @ a)
        for px, py in poly:
            val = obj_w[0] * px + obj_w[1] * py + obj_b
            if val < best:
                best = val

    def descend(layer: int, j: int, poly, A, a, rows_A, rows_a):
        # A, a: current layer pre-activation x = A z + a; rows_*: post-activation map built so far.
        n = A.shape[0]
        while j < n:
            inactive, active, unstable = (g[j] for g in groups[layer])
            if unstable:
                on = clip_halfplane(poly, A[j], a[j])
                if on:
                    descend(layer, j + 1, on, A, a, rows_A + [A[j]], rows_a + [a[j]])
                off = clip_halfplane(poly, -A[j], -a[j])
                if off:
                    descend(layer, j + 1, off, A, a, rows_A + [np.zeros(2)], rows_a + [0.0])
                return
            if active:
                rows_A = rows_A + [A[j]]
                rows_a = rows_a + [a[j]]
            else:
                rows_A = rows_A + [np.zeros(2)]
                rows_a = rows_a + [0.0]
            j += 1
        ZA, Za = np.array(rows_A), np.array(rows_a)
        nA = weights[layer + 1] @ ZA
        na = weights[layer + 1] @ Za + biases[layer + 1]
        if layer + 1 == net.depth - 1:
            finish(poly, nA, na)
        else:
            descend(layer + 1, 0, poly, nA, na, [], [])

    descend(0, 0, _box(x, spec.eps), weights[0], biases[0].copy(), [], [])
    if best == math.inf:
        raise RuntimeError("no activation pattern was feasible; the clean input should always be")
    return float(best)


def _ball_grid(x: np.ndarray, spec: PerturbationSpec, resolution: int) -> np.ndarray:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if resolution == 1 or spec.eps == 0:
        return x[None, :]
    axis = np.linspace(-spec.eps, spec.eps, resolution)
    mesh = np.stack(np.meshgrid(*([axis] * x.shape[0]), indexing="ij"), axis=-1).reshape(-1, x.shape[0])
    if spec.p == 2:
        mesh = mesh[np.sqrt(np.sum(mesh * mesh, axis=1)) <= spec.eps]
    return x[None, :] + mesh


def grid_oracle(net: Network, x, spec: PerturbationSpec, c_t, resolution: int = 401) -> float:
    """Minimum margin over a uniform grid of the perturbation ball (input width <= 2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] > 2:
        raise OracleRefused("grid oracle is limited to inputs of width <= 2")
    c = _margin_vector(net, c_t)
    pts = _ball_grid(x, spec, resolution)
    vals = logits(net, pts) @ c
    return float(np.min(vals))


# --------------------------------------------------------------------- PGD

def _project(delta: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    if spec.p == math.inf:
        return np.clip(delta, -spec.eps, spec.eps)
    norm = np.sqrt(np.sum(delta * delta, axis=-1, keepdims=True))
    scale = np.where(norm > spec.eps, spec.eps / np.where(norm > 0, norm, 1.0), 1.0)
    return delta * scale


def random_in_ball(rng: np.random.Generator, shape, spec: PerturbationSpec) -> np.ndarray:
    if spec.p == math.inf:
        return rng.uniform(-spec.eps, spec.eps, size=shape)
    g = rng.standard_normal(size=shape)
    g /= np.maximum(np.sqrt(np.sum(g * g, axis=-1, keepdims=True)), 1e-300)
    radius = spec.eps * rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / shape[-1])
    return g * radius


def _margins(net: Network, z, C) -> np.ndarray:
    return np.sum(logits(net, z) * C, axis=-1)


def pgd_batch(net: Network, X, spec: PerturbationSpec, C, steps: int = 100, step_size: float | None = None,
              restarts: int = 5, seed: int = 0, start=None, random_starts=None):
    """Projected gradient descent on the margin for a batch of (sample, target) pairs.

    ``X`` is (B, n0) and ``C`` (B, T, n_out). Restart 0 starts from ``start``
    (default: the Fast-Lin delta_0*), the others from uniform draws in the
    ball, drawn in a fixed order so that more restarts only add candidates.
    ``random_starts`` (restarts-1, B, T, n0) overrides those draws.
    Returns the best margin seen over all iterates (B, T) and its perturbation
    (B, T, n0); both are upper bounds on the true minimum.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    B, T = C.shape[:2]
    n0 = X.shape[1]
    alpha = spec.eps / 10 if step_size is None else float(step_size)
    if start is None:
        relax = _fastlin(net, X, spec, C).relaxation
        start = np.asarray(ad.value(optimal_input_perturbation(relax, spec)))
    rng = np.random.default_rng(seed)
    starts = [np.broadcast_to(start, (B, T, n0))]
    for k in range(restarts - 1):
        starts.append(random_in_ball(rng, (B, T, n0), spec) if random_starts is None else random_starts[k])
    delta = _project(np.stack(starts), spec)  # (R, B, T, n0)
    base = X[None, :, None, :]
    Cb = np.broadcast_to(C, delta.shape[:-1] + (C.shape[-1],))

    best = _margins(net, base + delta, Cb)
    best_delta = delta.copy()
    for _ in range(steps):
        if spec.eps == 0:
            break
        tape = ad.Tape()
        dv = tape.var(delta)
        loss = ad.sum(ad.sum(logits(net, base + dv) * Cb, axis=-1))
        (g,) = tape.grad(loss, [dv])
        if spec.p == math.inf:
            step = np.sign(g)
        else:
            gn = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
            step = np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
        delta = _project(delta - alpha * step, spec)
        vals = _margins(net, base + delta, Cb)
        better = vals < best
        best = np.where(better, vals, best)
        best_delta = np.where(better[..., None], delta, best_delta)

    pick = np.argmin(best, axis=0)  # best restart per (B, T)
    margins = np.take_along_axis(best, pick[None], axis=0)[0]
    deltas = np.take_along_axis(best_delta, pick[None, ..., None], axis=0)[0]
    return margins, deltas


def pgd_attack(net: Network, x, spec: PerturbationSpec, c_t, steps: int = 100, step_size: float | None = None,
               restarts: int = 5, seed: int = 0) -> tuple[float, np.ndarray]:
    """Best feasible margin found by PGD for one sample and direction, with its perturbation."""
    x = np.asarray(x, dtype=np.float64)
    c = _margin_vector(net, c_t)
    m, d = pgd_batch(net, x[None, :], spec, c[None, None, :], steps, step_size, restarts, seed)
    return float(m[0, 0]), d[0, 0]
