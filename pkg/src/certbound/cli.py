"""Command-line interface: ``certbound {certify,train,oracle,attack,toy}``.

Exit codes: 0 success, 1 usage error, 2 input parse error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bounds import ENGINES, PerturbationSpec, _batched_certify
from .datasets import DatasetFormatError, load_dataset, parse_eps, save_dataset
from .model import ModelFormatError, Network, load, logits, margin_specs, margin_tensor, save, toy_network
from .oracles import OracleRefused, grid_oracle, pattern_oracle, pgd_batch, random_in_ball
from .tightness import indicators
from .training import TrainConfig, ToyDatasetSpec, TrainingDiverged, make_toy_dataset, sample_toy, train

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_INVARIANT = 0, 1, 2, 3
SEED_ENV = "CERTBOUND_SEED"

CERT_HEADER = ["sample_id", "label", "worst_target", "p_c_star", "certified", "d_sum", "r_mean",
               "pgd_margin", "clean_margin"]

log = logging.getLogger("certbound")


class InputError(Exception):
    """Unreadable or malformed input file."""


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _read_inputs(model_path, data_path):
    try:
        net = load(model_path)
    except (OSError, ModelFormatError) as exc:
        raise InputError(f"model: {exc}") from exc
    try:
        X, y = load_dataset(data_path)
    except DatasetFormatError as exc:
        raise InputError(f"data: {exc}") from exc
    if X.shape[1] != net.n_in:
        raise InputError(f"data width {X.shape[1]} does not match model input width {net.n_in}")
    n_cls = 2 if net.n_out == 1 else net.n_out
    if np.any(y < 0) or np.any(y >= n_cls):
        raise InputError(f"labels must lie in [0, {n_cls})")
    return net, X, y


def _chunks(n: int, jobs: int) -> list[slice]:
    jobs = max(1, min(jobs, n))
    edges = np.linspace(0, n, jobs + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _seed(default: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else default


def _write_csv(rows, header, out):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue())


# ------------------------------------------------------------------ certify

def certify_rows(net: Network, X, y, spec: PerturbationSpec, engine: str, pgd_steps: int = 100,
                 pgd_restarts: int = 5, seed: int = 0, jobs: int = 1) -> list[list]:
    """One CertRow per sample, in sample order regardless of ``jobs``."""
    C, mask = margin_tensor(y, net.n_out)
    B, T = C.shape[:2]
    rng = np.random.default_rng(seed)
    starts = np.stack([random_in_ball(rng, (B, T, X.shape[1]), spec) for _ in range(pgd_restarts - 1)]) \
        if pgd_restarts > 1 else None
    tight_engine = "fastlin" if engine == "ibp" else engine

    def work(sl: slice):
        Xs, Cs, ms = X[sl], C[sl], mask[sl]
        res = _batched_certify(net, Xs, spec, Cs, engine)
        p = np.where(ms, ad.value(res.p_c_star), np.inf)
        ind = indicators(net, Xs, spec, Cs, tight_engine)
        d = np.where(ms, ad.value(ind.d), 0.0)
        r = np.where(ms, ad.value(ind.r), 0.0)
        pgd, _ = pgd_batch(net, Xs, spec, Cs, steps=pgd_steps, restarts=pgd_restarts,
                           random_starts=None if starts is None else starts[:, sl])
        pgd = np.where(ms, pgd, np.inf)
        clean = np.where(ms, np.sum(logits(net, Xs)[:, None, :] * Cs, axis=-1), np.inf)
        return p, d, r, pgd, clean

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        parts = list(pool.map(work, _chunks(B, jobs)))
    p, d, r, pgd, clean = (np.concatenate(arrs) for arrs in zip(*parts))

    rows = []
    for i in range(B):
        worst = int(np.argmin(p[i]))
        targets = np.flatnonzero(mask[i])
        worst_target = (1 - int(y[i])) if net.n_out == 1 else worst
        p_min = float(p[i, worst])
        row = [i, int(y[i]), worst_target, p_min, p_min > 0, float(d[i].sum()),
               float(r[i, targets].mean()), float(pgd[i].min()), float(clean[i].min())]
        if not row[7] >= p_min - 1e-9:
            raise InvariantViolation(f"sample {i}: PGD margin {row[7]!r} below certified bound {p_min!r}")
        rows.append(row)
    return rows


def cmd_certify(args) -> int:
    net, X, y = _read_inputs(args.model, args.data)
    spec = PerturbationSpec(args.eps, args.norm)
    rows = certify_rows(net, X, y, spec, args.engine, args.pgd_steps, args.restarts, _seed(args.seed), args.jobs)
    _write_csv(rows, CERT_HEADER, args.out)
    robust_err = float(np.mean([not row[4] for row in rows]))
    pgd_err = float(np.mean([row[7] <= 0 for row in rows]))
    print(f"samples={len(rows)} engine={args.engine} eps={args.eps!r} norm={spec.name} "
          f"robust_err={robust_err:.4f} pgd_err={pgd_err:.4f}", file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


# -------------------------------------------------------------------- train

def load_train_config(path) -> tuple[TrainConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"config: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("config: expected a JSON object")
    dataset = doc.pop("dataset", {"kind": "toy"})
    try:
        config = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc
    return config, dataset


def _train_data(dataset: dict, seed: int):
    if "path" in dataset:
        try:
            return load_dataset(dataset["path"])
        except DatasetFormatError as exc:
            raise InputError(f"data: {exc}") from exc
    if dataset.get("kind", "toy") != "toy":
        raise InputError(f"config: unknown dataset kind {dataset.get('kind')!r}")
    try:
        spec = ToyDatasetSpec(b=float(dataset.get("b", 0.3)), n=int(dataset.get("n", 2000)),
                              seed=int(dataset.get("seed", seed)))
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc
    return make_toy_dataset(spec)


def cmd_train(args) -> int:
    config, dataset = load_train_config(args.config)
    if os.environ.get(SEED_ENV):
        config.seed = _seed(config.seed)
        if "seed" in dataset:
            dataset = {**dataset, "seed": config.seed}
    X, y = _train_data(dataset, config.seed)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    with metrics_path.open("w") as fh:
        def record(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
        net, history = train(config, X, y, callback=record)
    save(net, args.out)
    last = history[-1]
    print(f"epochs={len(history)} std_err={last['std_err']:.4f} cert_err={last['cert_err']:.4f} "
          f"pgd_err={last['pgd_err']:.4f} mean_d={last['mean_d']:.4g} mean_r={last['mean_r']:.4g}")
    return EXIT_OK


# ------------------------------------------------------------------- oracle

ORACLE_HEADER = ["sample_id", "label", "target", "lower", "exact", "upper", "ordered"]


def oracle_rows(net: Network, X, y, spec: PerturbationSpec, resolution: int = 401, pgd_steps: int = 100,
                pgd_restarts: int = 5, seed: int = 0) -> list[list]:
    C, mask = margin_tensor(y, net.n_out)
    fl = ad.value(_batched_certify(net, X, spec, C, "fastlin").p_c_star)
    cr = ad.value(_batched_certify(net, X, spec, C, "crown").p_c_star)
    pgd, _ = pgd_batch(net, X, spec, C, steps=pgd_steps, restarts=pgd_restarts, seed=seed)
    rows = []
    for i in range(X.shape[0]):
        for t_idx, spec_t in enumerate(margin_specs(int(y[i]), net.n_out)):
            col = 0 if net.n_out == 1 else spec_t.target
            lower = max(float(fl[i, col]), float(cr[i, col]))
            upper = float(pgd[i, col])
            if net.n_in <= 2:
                upper = min(upper, grid_oracle(net, X[i], spec, spec_t, resolution))
            exact = None
            if net.n_in == 2 and spec.p == math.inf:
                try:
                    exact = pattern_oracle(net, X[i], spec, spec_t)
                except OracleRefused as exc:
                    log.warning("sample %d target %d: %s", i, spec_t.target, exc)
            ok = lower <= upper + 1e-9 if exact is None else (lower <= exact + 1e-9 and exact <= upper + 1e-9)
            rows.append([i, int(y[i]), spec_t.target, lower, "" if exact is None else repr(exact), upper, ok])
    return rows


def cmd_oracle(args) -> int:
    net, X, y = _read_inputs(args.model, args.data)
    spec = PerturbationSpec(args.eps, args.norm)
    rows = oracle_rows(net, X, y, spec, args.resolution, args.pgd_steps, args.restarts, _seed(args.seed))
    _write_csv(rows, ORACLE_HEADER, args.out)
    bad = [r for r in rows if not r[-1]]
    if bad:
        raise InvariantViolation(f"{len(bad)} bracket(s) out of order, first: {bad[0]}")
    return EXIT_OK


# ------------------------------------------------------------------- attack

def cmd_attack(args) -> int:
    net, X, y = _read_inputs(args.model, args.data)
    spec = PerturbationSpec(args.eps, args.norm)
    C, mask = margin_tensor(y, net.n_out)
    pgd, _ = pgd_batch(net, X, spec, C, steps=args.steps, step_size=args.step_size, restarts=args.restarts,
                       seed=_seed(args.seed))
    worst = np.min(np.where(mask, pgd, np.inf), axis=1)
    if args.out:
        _write_csv([[i, int(y[i]), float(worst[i]), worst[i] <= 0] for i in range(len(y))],
                   ["sample_id", "label", "pgd_margin", "attacked"], args.out)
    print(f"samples={len(y)} steps={args.steps} restarts={args.restarts} pgd_err={float(np.mean(worst <= 0)):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------- toy

def toy_report(b: float, eps: float, n: int, seed: int = 0, oracle: bool = False, tol: float = 1e-12) -> dict:
    """Tightness of Fast-Lin on the max-margin toy network over samples of S1."""
    net = toy_network()
    spec = PerturbationSpec(eps)
    X, y = sample_toy(np.random.default_rng(seed), n, b, labels=(1,))
    C, _ = margin_tensor(y, 1)
    ind = indicators(net, X, spec, C, "fastlin")
    d = ad.value(ind.d)[:, 0]
    r = ad.value(ind.r)[:, 0]
    tight = (d <= tol) & (r <= tol)
    report = {
        "b": b, "eps": eps, "n": n, "seed": seed,
        "tight_fraction": float(np.mean(tight)) if n else 1.0,
        "unstable_neurons": int(ind.unstable_count.sum()),
        "samples_with_unstable": int(np.sum(ind.unstable_count > 0)),
        "max_d": float(np.max(np.abs(d))) if n else 0.0,
        "max_r": float(np.max(r)) if n else 0.0,
    }
    if oracle:
        p = ad.value(ind.p_c_star)[:, 0]
        gaps = [abs(pattern_oracle(net, X[i], spec, [1.0]) - p[i]) for i in range(n)]
        report["max_oracle_gap"] = float(max(gaps)) if gaps else 0.0
    return report


def cmd_toy(args) -> int:
    if not 0 < args.b < 1:
        raise InputError("--b must lie in (0, 1)")
    report = toy_report(args.b, args.eps, args.n, _seed(args.seed), args.oracle)
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_dataset(args) -> int:
    X, y = make_toy_dataset(ToyDatasetSpec(args.b, args.n, _seed(args.seed)))
    save_dataset(args.out, X, y)
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="certbound", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def eps_arg(p):
        p.add_argument("--eps", type=parse_eps, required=True, help="radius, e.g. 0.1 or 8/255")
        p.add_argument("--norm", choices=["linf", "l2"], default="linf")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("certify", help="certify every sample of a dataset")
    p.add_argument("model")
    p.add_argument("data")
    eps_arg(p)
    p.add_argument("--engine", choices=ENGINES, default="fastlin")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--pgd-steps", type=int, default=100)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("train", help="train on the regularized robust objective")
    p.add_argument("config", help="JSON training config")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--metrics", help="metrics log (JSON lines); default: <out>.metrics.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="bracket the exact minimum margin")
    p.add_argument("model")
    p.add_argument("data")
    eps_arg(p)
    p.add_argument("--resolution", type=int, default=401)
    p.add_argument("--pgd-steps", type=int, default=100)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("attack", help="PGD attack error")
    p.add_argument("model")
    p.add_argument("data")
    eps_arg(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("toy", help="tightness study on the max-margin toy network")
    p.add_argument("--b", type=float, default=0.3)
    p.add_argument("--eps", type=parse_eps, default=0.2)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle", action="store_true", help="also compare against the exact pattern oracle")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("dataset", help="write a toy dataset file")
    p.add_argument("--b", type=float, default=0.3)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"certbound: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (InvariantViolation, TrainingDiverged) as exc:
        print(f"certbound: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"certbound: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
