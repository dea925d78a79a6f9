"""Evaluation: accuracies, proxy A-distance, ideal joint hypothesis error, exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .nn import MLP, SGD, SgdState, cross_entropy, init_params

CSV_HEADER = ("epoch", "lr", "loss_cls", "loss_adv", "acc_target_fs", "acc_target_f", "acc_pseudo")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    loss_cls: float
    loss_adv: float
    acc_target_fs: float
    acc_target_f: float
    acc_pseudo: float


@dataclass
class MetricsLog:
    records: list[MetricsRecord] = field(default_factory=list)
    terminal: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in CSV_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ContractError(f"unexpected metrics header {rows[0] if rows else None}")
        recs = [MetricsRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]
        return cls(recs)

    def to_json(self) -> dict[str, Any]:
        return {"records": [asdict(r) for r in self.records], "terminal": dict(self.terminal)}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "MetricsLog":
        names = [f.name for f in fields(MetricsRecord)]
        return cls([MetricsRecord(**{k: r[k] for k in names}) for r in obj["records"]], dict(obj.get("terminal", {})))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty list")
    return float(np.mean(predictions == labels))


# ---------------------------------------------------------------------------
# probe classifiers
# ---------------------------------------------------------------------------


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def train_probe(
    x: np.ndarray,
    y: np.ndarray,
    k: int,
    hidden: int,
    rng: np.random.Generator,
    epochs: int = 200,
    batch_size: int = 64,
    lr: float = 0.05,
    patience: int = 10,
    min_delta: float = 1e-4,
) -> MLP:
    """Fit a one-hidden-layer softmax classifier with momentum SGD.

    Stops early once the epoch-mean training loss has not improved by
    ``min_delta`` for ``patience`` consecutive epochs.
    """
    net = MLP(init_params([x.shape[1], hidden, k], rng))
    opt = SGD({"probe": (net.named_parameters(), 1.0)}, SgdState(lr0=lr, alpha=0.0, beta=0.0, momentum=0.9))
    n = x.shape[0]
    best, stale = np.inf, 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = cross_entropy(ad.softmax(net(Tensor(x[idx]))), y[idx])
            loss.backward()
            opt.step()
            total += float(loss.values) * idx.size
        total /= n
        if total < best - min_delta:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return net


def _predict(net: MLP, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return np.argmax(net(Tensor(x)).values, axis=1)


def proxy_a_distance(source_features, target_features, split: float = 0.5, seed: int = 0, hidden: int = 16) -> float:
    """2 (1 - 2 eps) from a fresh domain discriminator's held-out error, clamped to [0, 2].

    Each domain is split separately so train and test halves keep the domain
    balance of the inputs.
    """
    xs = np.asarray(getattr(source_features, "values", source_features), dtype=np.float64)
    xt = np.asarray(getattr(target_features, "values", target_features), dtype=np.float64)
    if len(xs) == 0 or len(xt) == 0:
        raise ContractError("both feature sets must be nonempty")
    if not 0.0 < split < 1.0:
        raise ContractError(f"split must lie in (0, 1), got {split}")
    rng = np.random.default_rng(seed)

    def halves(x):
        order = rng.permutation(len(x))
        cut = min(max(1, int(round(split * len(x)))), len(x) - 1) if len(x) > 1 else 1
        return x[order[:cut]], x[order[cut:]]

    s_tr, s_te = halves(xs)
    t_tr, t_te = halves(xt)
    x_tr = np.vstack([s_tr, t_tr])
    y_tr = np.r_[np.zeros(len(s_tr), int), np.ones(len(t_tr), int)]
    x_te = np.vstack([s_te, t_te])
    y_te = np.r_[np.zeros(len(s_te), int), np.ones(len(t_te), int)]
    if len(x_te) == 0:
        raise ContractError("held-out split is empty")
    x_tr, x_te = _standardize(x_tr, x_te)
    net = train_probe(x_tr, y_tr, 2, hidden, rng)
    err = 1.0 - accuracy(_predict(net, x_te), y_te)
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


def ideal_joint_error(
    source_features,
    source_labels,
    target_features,
    target_labels,
    seed: int = 0,
    hidden: int = 32,
    epochs: int = 200,
    folds: int = 2,
) -> float:
    """Target error of an MLP fit on both domains' frozen features with true labels.

    Target rows are split into ``folds`` parts; each part is predicted by a
    probe trained on every source row plus the other target parts, so every
    target prediction is out of sample.  Without this a probe that memorizes
    its training rows would report near-zero error even for random labels.
    """
    xs = np.asarray(getattr(source_features, "values", source_features), dtype=np.float64)
    xt = np.asarray(getattr(target_features, "values", target_features), dtype=np.float64)
    ys = np.asarray(source_labels, dtype=np.intp)
    yt = np.asarray(target_labels, dtype=np.intp)
    if len(ys) != len(xs) or len(yt) != len(xt):
        raise ContractError("labels must match feature rows")
    if not 2 <= folds <= len(xt):
        raise ContractError(f"need 2 <= folds <= {len(xt)} target rows, got {folds}")
    k = max(int(max(ys.max(initial=0), yt.max())) + 1, 2)
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(len(xt)), folds)
    pred = np.empty(len(xt), dtype=np.intp)
    for held in parts:
        keep = np.setdiff1d(np.arange(len(xt)), held)
        x_fit = np.vstack([xs, xt[keep]])
        x_fit, x_held = _standardize(x_fit, xt[held])
        net = train_probe(x_fit, np.r_[ys, yt[keep]], k, hidden, rng, epochs=epochs)
        pred[held] = _predict(net, x_held)
    return 1.0 - accuracy(pred, yt)


def decision_boundary_export(networks, grid, head: str = "surrogate") -> np.ndarray:
    """Rows ``(x, y, predicted class)`` for every grid point."""
    grid = np.asarray(getattr(grid, "values", grid), dtype=np.float64)
    if networks.in_dim != 2:
        raise ContractError(f"decision boundaries need a 2-D input model, got input dim {networks.in_dim}")
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise ContractError(f"grid must be m x 2, got {grid.shape}")
    if head not in ("source", "surrogate"):
        raise ContractError(f"head must be 'source' or 'surrogate', got {head!r}")
    pred = networks.predict(grid, head)
    return np.column_stack([grid, pred.astype(np.float64)])


def boundary_csv(rows: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x0", "x1", "prediction"])
    for x0, x1, p in rows:
        w.writerow([repr(float(x0)), repr(float(x1)), int(p)])
    return buf.getvalue()


def summary_json(log: MetricsLog) -> str:
    return json.dumps(log.terminal, indent=2, sort_keys=True) + "\n"
