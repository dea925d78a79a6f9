"""Synthetic source/target datasets with controlled domain shift."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractError


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray | None  # (n,) ints, or None
    domain: str  # "source" | "target"
    descriptor: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ContractError(f"{self.features.shape[0]} rows but {self.labels.shape} labels")
        if self.domain not in ("source", "target"):
            raise ContractError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None or not len(self.labels) else int(self.labels.max()) + 1


def rotation_matrix(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate 2-D row vectors about the origin (counter-clockwise)."""
    return points @ rotation_matrix(degrees).T


def _moons(n: int, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, np.pi, n)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    y = np.repeat([0, 1], n)
    if sigma > 0:
        x = x + rng.normal(scale=sigma, size=x.shape)
    return x, y


def twin_moons(n: int = 300, sigma: float = 0.1, rotation: float = 30.0, seed: int = 0):
    """Interleaved half circles; the target is a fresh draw rotated about the origin.

    Returns ``(source, target)``.  Target labels are kept for evaluation only.
    """
    if n < 1 or sigma < 0:
        raise ContractError(f"need n >= 1 and sigma >= 0, got n={n}, sigma={sigma}")
    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)
    xs, ys = _moons(n, sigma, np.random.default_rng(src_seq))
    xt, yt = _moons(n, sigma, np.random.default_rng(tgt_seq))
    xt = rotate(xt, rotation)
    desc = {"name": "twin_moons", "n": n, "sigma": sigma, "rotation": rotation, "seed": seed}
    return (
        LabeledDataset(xs, ys, "source", dict(desc)),
        LabeledDataset(xt, yt, "target", dict(desc)),
    )


def shifted_blobs(
    k: int = 3,
    n: int = 200,
    d: int = 2,
    separation: float = 4.0,
    spread: float = 1.5,
    shift: float = 1.0,
    rotation: float = 50.0,
    class_rotation: float = 5.0,
    translation: float = 1.0,
    shift_vector=None,
    seed: int = 0,
):
    """Gaussian class clusters and a target copy under a class-dependent rigid shift.

    Source class ``c`` is centered on a circle of radius ``separation`` in the
    first two coordinates at angle ``2 pi c / k`` with isotropic ``spread``.
    The target draws a fresh sample and moves class ``c`` by a rotation about
    the origin of ``shift * (rotation + c * class_rotation)`` degrees (first
    two axes), then translates everything by ``shift * translation *
    shift_vector`` (default direction: first axis).  ``shift=0`` leaves the
    target as a fresh draw from the source mixture.
    """
    if k < 2 or d < 2:
        raise ContractError(f"need k >= 2 and d >= 2, got k={k}, d={d}")
    if n < 1:
        raise ContractError("n must be >= 1")
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    if shift_vector is None:
        direction = np.zeros(d)
        direction[0] = 1.0
    else:
        direction = np.asarray(shift_vector, dtype=np.float64)
        if direction.shape != (d,):
            raise ContractError(f"shift_vector must have length {d}")

    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)

    def draw(rng):
        y = np.repeat(np.arange(k), n)
        x = means[y] + rng.normal(scale=spread, size=(k * n, d))
        return x, y

    xs, ys = draw(np.random.default_rng(src_seq))
    xt, yt = draw(np.random.default_rng(tgt_seq))
    if shift != 0.0:
        for c in range(k):
            rows = yt == c
            xt[rows, :2] = rotate(xt[rows, :2], shift * (rotation + c * class_rotation))
        xt = xt + shift * translation * direction
    desc = {
        "name": "shifted_blobs", "k": k, "n": n, "d": d, "separation": separation, "spread": spread,
        "shift": shift, "rotation": rotation, "class_rotation": class_rotation, "translation": translation,
        "shift_vector": direction.tolist(), "seed": seed,
    }
    return (
        LabeledDataset(xs, ys, "source", dict(desc)),
        LabeledDataset(xt, yt, "target", dict(desc)),
    )


def grid_2d(bounds, resolution: int) -> np.ndarray:
    """Row-major lattice over ``((xmin, xmax), (ymin, ymax))``: x varies fastest."""
    if resolution < 2:
        raise ContractError("resolution must be >= 2")
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


GENERATORS = {"twin_moons": twin_moons, "shifted_blobs": shifted_blobs}


def generate(name: str, params: dict, seed: int):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ContractError(f"unknown dataset generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(seed=seed, **params)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path, *datasets: LabeledDataset) -> None:
    """Header ``x0..x{d-1},label,domain``; a missing label is written empty."""
    if not datasets:
        raise ContractError("nothing to write")
    d = datasets[0].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label", "domain"])
        for ds in datasets:
            if ds.dim != d:
                raise ContractError("datasets have different dimensionality")
            for i in range(len(ds)):
                label = "" if ds.labels is None else int(ds.labels[i])
                w.writerow([repr(float(v)) for v in ds.features[i]] + [label, ds.domain])


def read_csv(path) -> dict[str, LabeledDataset]:
    """Inverse of :func:`write_csv`, keyed by domain."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        if header[-2:] != ["label", "domain"] or header[:d] != [f"x{i}" for i in range(d)]:
            raise ContractError(f"unexpected dataset header {header}")
        for row in r:
            rows.setdefault(row[-1], []).append(row)
    out = {}
    for domain, rs in rows.items():
        x = np.array([[float(v) for v in row[:d]] for row in rs])
        labels = [row[d] for row in rs]
        y = None if any(v == "" for v in labels) else np.array([int(v) for v in labels])
        out[domain] = LabeledDataset(x, y, domain, {"name": "csv", "path": str(Path(path))})
    return out
