"""Certified training on the regularized robust objective.

The loss for a batch is the cross entropy of the negated margin lower bounds
plus ``lam * sum_t d_t + gamma * sum_t r_t``, averaged over the batch. It is
recorded on an :class:`~certbound.autodiff.Tape` and minimized with Adam or
SGD under linear warm-up schedules for eps, lam and gamma.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bounds import PerturbationSpec, _batched_certify
from .model import DenseLayer, Network, margin_tensor, predict, random_network
from .oracles import pgd_batch
from .tightness import indicators

log = logging.getLogger(__name__)

TRAIN_ENGINES = ("fastlin", "crown", "crown-ibp")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    eps: float
    p: str = "linf"
    hidden: list[int] = field(default_factory=lambda: [8, 8])
    epochs: int = 60
    warmup_epochs: int = 20
    eps_start: float | None = None  # defaults to 0.01 * eps
    lam: float = 0.0
    gamma: float = 0.0
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    batch_size: int = 50
    engine: str = "fastlin"
    seed: int = 0
    eval_pgd_steps: int = 20
    eval_pgd_restarts: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.engine not in TRAIN_ENGINES:
            raise ValueError(f"engine must be one of {TRAIN_ENGINES}")
        if self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size and lr_decay_every must be positive")

    @property
    def start_eps(self) -> float:
        return 0.01 * self.eps if self.eps_start is None else self.eps_start

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def schedule(epoch: int, config: TrainConfig) -> tuple[float, float, float, float]:
    """(eps, lam, gamma, lr) for a 0-based epoch.

    eps ramps linearly from ``start_eps`` and lam, gamma from 0 to their final
    values over the warm-up epochs; afterwards the learning rate is halved
    (``lr_decay``) every ``lr_decay_every`` epochs.
    """
    if epoch < 0 or epoch > config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    w = config.warmup_epochs
    frac = 1.0 if w == 0 else min(epoch / w, 1.0)
    eps = config.start_eps + frac * (config.eps - config.start_eps)
    decays = max(epoch - w, 0) // config.lr_decay_every
    lr = config.lr * config.lr_decay ** decays
    return eps, frac * config.lam, frac * config.gamma, lr


# ------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class ToyDatasetSpec:
    """The V-shaped two-class distribution in [-1, 1]^2 with gap parameter ``b``."""

    b: float = 0.3
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.b < 1:
            raise ValueError("b must lie in (0, 1)")
        if self.n < 0:
            raise ValueError("n must be non-negative")


def toy_label(x, b: float) -> np.ndarray:
    """1 on S1 (x2 >= |x1| + b), 0 on S0 (x2 <= |x1| - b), -1 in the gap."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    return np.where(x2 >= np.abs(x1) + b, 1, np.where(x2 <= np.abs(x1) - b, 0, -1))


def sample_toy(rng: np.random.Generator, n: int, b: float, labels: Sequence[int] = (0, 1)):
    """Uniform rejection sampling from the union of the requested regions."""
    xs, ys = [], []
    have = 0
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(max(2 * (n - have), 64), 2))
        lab = toy_label(cand, b)
        keep = np.isin(lab, labels)
        xs.append(cand[keep])
        ys.append(lab[keep])
        have += int(keep.sum())
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n].astype(int)


def make_toy_dataset(spec: ToyDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    return sample_toy(np.random.default_rng(spec.seed), spec.n, spec.b)


# ---------------------------------------------------------------------- loss

def robust_loss(net: Network, X, y, spec: PerturbationSpec, lam: float = 0.0, gamma: float = 0.0,
                engine: str = "fastlin"):
    """Batch-mean of ``CE(-p_C*, y) + lam*sum_t d_t + gamma*sum_t r_t``.

    Binary (single-output) networks use the logits ``[0, -p_C*]``; for
    multi-class networks the entry for the true class is 0 because its margin
    direction vanishes. Regularizer terms are only built when their
    coefficient is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    C, mask = margin_tensor(y, net.n_out)
    if lam > 0 or gamma > 0:
        ind = indicators(net, X, spec, C, engine)
        p = ind.p_c_star
    else:
        ind = None
        p = _batched_certify(net, X, spec, C, engine).p_c_star
    if net.n_out == 1:
        logits = ad.concatenate([np.zeros((X.shape[0], 1)), -p], axis=1)
    else:
        logits = -p
    per_sample = ad.logsumexp(logits, axis=-1)
    if ind is not None:
        if lam > 0:
            per_sample = per_sample + lam * ad.sum(ad.where(mask, ind.d, 0.0), axis=-1)
        if gamma > 0:
            per_sample = per_sample + gamma * ad.sum(ad.where(mask, ind.r, 0.0), axis=-1)
    return ad.mean(per_sample)


# ----------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            out.append(p - lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


class SGD:
    def __init__(self, shapes, momentum=0.9):
        self.buf = [np.zeros(s) for s in shapes]
        self.momentum = momentum

    def step(self, params, grads, lr):
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.buf[k] = self.momentum * self.buf[k] + g
            out.append(p - lr * self.buf[k])
        return out


def _params(net: Network) -> list[np.ndarray]:
    out = []
    for layer in net.layers:
        out.extend([np.array(ad.value(layer.weight)), np.array(ad.value(layer.bias))])
    return out


def _assemble(params) -> Network:
    return Network(tuple(DenseLayer(params[k], params[k + 1]) for k in range(0, len(params), 2)))


def loss_and_grad(net: Network, X, y, spec: PerturbationSpec, lam: float, gamma: float, engine: str = "fastlin"):
    """Loss value and gradients w.r.t. (W_1, b_1, ..., W_L, b_L)."""
    tape = ad.Tape()
    leaves = [tape.var(p) for p in _params(net)]
    loss = robust_loss(_assemble(leaves), X, y, spec, lam, gamma, engine)
    return float(ad.value(loss)), tape.grad(loss, leaves)


# ------------------------------------------------------------------ metrics

def evaluate(net: Network, X, y, spec: PerturbationSpec, engine: str = "fastlin", pgd_steps: int = 20,
             pgd_restarts: int = 1, seed: int = 0) -> dict:
    """Standard, certified and PGD error plus mean d and r over all (sample, target) pairs."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    C, mask = margin_tensor(y, net.n_out)
    std_err = float(np.mean(predict(net, X) != y))
    ind = indicators(net, X, spec, C, engine)
    p = np.where(mask, ad.value(ind.p_c_star), np.inf)
    cert_err = float(np.mean(np.min(p, axis=1) <= 0))
    pgd, _ = pgd_batch(net, X, spec, C, steps=pgd_steps, restarts=pgd_restarts, seed=seed)
    pgd_err = float(np.mean(np.min(np.where(mask, pgd, np.inf), axis=1) <= 0))
    return {
        "std_err": std_err,
        "cert_err": cert_err,
        "pgd_err": pgd_err,
        "mean_d": float(np.mean(ad.value(ind.d)[mask])),
        "mean_r": float(np.mean(ad.value(ind.r)[mask])),
    }


# -------------------------------------------------------------------- train

def init_network(config: TrainConfig, n_in: int, n_out: int, rng: np.random.Generator) -> Network:
    return random_network([n_in, *config.hidden, n_out], rng)


def train(config: TrainConfig, X, y, n_out: int | None = None, callback=None) -> tuple[Network, list[dict]]:
    """Train from scratch; deterministic for a fixed ``config.seed``.

    Returns the final network and one metrics record per epoch with keys
    epoch, eps, lambda, gamma, lr, std_err, cert_err, pgd_err, mean_d,
    mean_r and loss (mean training loss over the epoch's batches).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if n_out is None:
        n_out = 1 if set(np.unique(y)) <= {0, 1} else int(y.max()) + 1
    rng = np.random.default_rng(config.seed)
    net = init_network(config, X.shape[1], n_out, rng)
    params = _params(net)
    opt = Adam([p.shape for p in params]) if config.optimizer == "adam" else SGD(
        [p.shape for p in params], config.momentum)

    history = []
    n = X.shape[0]
    for epoch in range(config.epochs):
        eps, lam, gamma, lr = schedule(epoch, config)
        spec = PerturbationSpec(eps, config.p)
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(_assemble(params), X[idx], y[idx], spec, lam, gamma, config.engine)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch + 1, step)
            params = opt.step(params, grads, lr)
            losses.append(loss)
        net = _assemble(params)
        record = {"epoch": epoch + 1, "eps": eps, "lambda": lam, "gamma": gamma, "lr": lr}
        record.update(evaluate(net, X, y, spec, config.engine, config.eval_pgd_steps,
                               config.eval_pgd_restarts, seed=config.seed + epoch))
        record["loss"] = float(np.mean(losses))
        history.append(record)
        log.info("epoch %(epoch)d eps=%(eps).4f loss=%(loss).4f cert_err=%(cert_err).4f mean_r=%(mean_r).4g", record)
        if callback is not None:
            callback(record)
    return net, history
