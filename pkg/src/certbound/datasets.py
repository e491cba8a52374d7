"""Labeled-sample files and exact parsing of perturbation radii."""

from __future__ import annotations

import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    pass


def parse_eps(text) -> float:
    """Parse a radius given as a decimal (``0.1``) or a fraction (``8/255``).

    The value is parsed exactly and rounded once to the nearest float.
    """
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        try:
            value = float(Fraction(str(text).strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"cannot parse radius {text!r}") from exc
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"radius must be finite and non-negative, got {text!r}")
    return value


def _records(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``{"x": [...], "y": int}`` records (a JSON array or JSON lines)."""
    try:
        records = _records(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    if not records:
        raise DatasetFormatError(f"{path}: no samples")
    xs, ys = [], []
    for k, rec in enumerate(records):
        try:
            x = [float(v) for v in rec["x"]]
            y = int(rec["y"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: record {k} must look like {{\"x\": [floats], \"y\": int}}") from exc
        if not all(math.isfinite(v) for v in x):
            raise DatasetFormatError(f"{path}: record {k} has non-finite entries")
        if xs and len(x) != len(xs[0]):
            raise DatasetFormatError(f"{path}: record {k} has width {len(x)}, expected {len(xs[0])}")
        xs.append(x)
        ys.append(y)
    return np.array(xs, dtype=np.float64), np.array(ys, dtype=int)


def save_dataset(path, X, y) -> None:
    lines = [json.dumps({"x": [float(v) for v in x], "y": int(t)}) for x, t in zip(X, y)]
    Path(path).write_text("\n".join(lines) + "\n")
