"""Structure-conditioned adversarial training.

Per epoch, target features are clustered with spherical K-means seeded from
the source class centers, giving pseudo-labels.  Per batch, the surrogate
classifier F_S is fit to those pseudo-labels on frozen features, then G, F
and D take one joint step on

    L_cls(F(G(x_s)), y_s) + NLL_domain(D(GRL(S(x))))

with S(x) = G(x) (x) F_S(G(x)) flattened per row.  The reversal layer makes
D descend the domain loss while G ascends it (scaled by lambda).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import ClusterModel, source_class_centers, spherical_kmeans
from .config import ExperimentConfig
from .datagen import LabeledDataset
from .errors import ContractError, ScalError, TrainingDivergenceError
from .metrics import MetricsLog, MetricsRecord, accuracy
from .nn import MLP, SGD, SgdState, binary_adversarial_loss, cross_entropy, init_params

log = logging.getLogger(__name__)

# child-seed purposes; fixed ids so e.g. batch size never perturbs init
SEED_PURPOSES = {"init": 0, "shuffle": 1, "noise": 2, "probe": 3}


def child_rng(seed: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(SEED_PURPOSES[purpose],))
    return np.random.default_rng(ss)


@dataclass
class ScalNetworks:
    G: MLP
    F: MLP
    FS: MLP
    D: MLP
    num_classes: int
    conditioned: bool = True

    @classmethod
    def build(cls, in_dim: int, g_hidden, num_classes: int, d_hidden=(), conditioned: bool = True, rng=0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        g_dims = [in_dim, *g_hidden]
        n_feat = g_dims[-1]
        G = MLP(init_params(g_dims, rng, ["relu"] * (len(g_dims) - 1)))
        F = MLP(init_params([n_feat, num_classes], rng))
        FS = MLP(init_params([n_feat, num_classes], rng))
        d_in = n_feat * num_classes if conditioned else n_feat
        D = MLP(init_params([d_in, *d_hidden, 1], rng))
        return cls(G, F, FS, D, num_classes, conditioned)

    @property
    def feature_dim(self) -> int:
        return self.G.out_dim

    @property
    def in_dim(self) -> int:
        return self.G.in_dim

    def heads(self) -> dict[str, MLP]:
        return {"G": self.G, "F": self.F, "FS": self.FS, "D": self.D}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, net in self.heads().items():
            out.update(net.named_parameters(prefix=f"{name}."))
        return out

    def features(self, x) -> Tensor:
        return self.G(ad.as_tensor(x))

    def predict(self, x, head: str = "surrogate") -> np.ndarray:
        net = {"surrogate": self.FS, "source": self.F}[head]
        with ad.no_grad():
            return np.argmax(net(self.features(x)).values, axis=1)

    def zero_grad(self) -> None:
        for net in self.heads().values():
            net.zero_grad()


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def structure_conditioned_feature(g: Tensor, f: Tensor) -> Tensor:
    """Row-wise flattened outer product; entry a*K + b is g[a] * f[b]."""
    return ad.row_outer(g, f)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def inject_label_noise(labels, nl: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Replace round(nl * n) uniformly chosen labels with uniform draws from [0, k)."""
    if not 0.0 <= nl <= 1.0:
        raise ContractError(f"noise level must lie in [0, 1], got {nl}")
    labels = np.array(labels, dtype=np.int64, copy=True)
    n = labels.size
    m = int(math.floor(nl * n + 0.5))
    if m == 0:
        return labels
    idx = rng.choice(n, size=m, replace=False)
    labels[idx] = rng.integers(0, k, size=m)
    return labels


def establish_local_structure(
    networks: ScalNetworks,
    target_x,
    source_x,
    source_y,
    init_centers: np.ndarray | None = None,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> ClusterModel:
    """Cluster current target features starting from the current source class centers.

    ``init_centers`` overrides the source-center initialization (used by the
    ``kmeans_last_init`` ablation).  Target rows whose features are exactly
    zero (all relu units off) cannot be placed by cosine distance; they take
    the source classifier's prediction instead.
    """
    k = networks.num_classes
    with ad.no_grad():
        fs = networks.features(source_x).values
        ft = networks.features(target_x).values
    src_centers = source_class_centers(fs, source_y, k)
    init = src_centers if init_centers is None else init_centers

    live = np.linalg.norm(ft, axis=1) > 1e-12
    n_live = int(live.sum())
    if n_live < k:
        raise ContractError(f"only {n_live} target samples have nonzero features; need at least {k}")
    model = spherical_kmeans(ft[live], init, max_iter=max_iter, tol=tol)
    if n_live < ft.shape[0]:
        log.debug("%d target rows with zero features assigned by the source classifier", ft.shape[0] - n_live)
        assign = np.empty(ft.shape[0], dtype=np.intp)
        assign[live] = model.assignments
        with ad.no_grad():
            assign[~live] = np.argmax(networks.F(Tensor(ft[~live])).values, axis=1)
        model.assignments = assign
    return model


def conditions(networks: ScalNetworks, g: Tensor, mode: str, labels=None, flow_through: bool = True) -> Tensor:
    """Input to D for one domain's features ``g`` under an ablation mode."""
    if mode == "no_conditions":
        return g
    g_in = g if flow_through else g.detach()
    if mode in ("scal", "kmeans_last_init"):
        f = ad.softmax(networks.FS(g_in))
    elif mode == "src_classifier_conditions":
        f = ad.softmax(networks.F(g_in))
    elif mode == "non_differentiable_conditions":
        if labels is None:
            raise ContractError("non-differentiable conditions need labels")
        f = Tensor(one_hot(labels, networks.num_classes))
    else:
        raise ContractError(f"unknown ablation mode {mode!r}")
    return structure_conditioned_feature(g, f)


@dataclass
class AdversarialLosses:
    total: Tensor
    cls: Tensor
    adv: Tensor


def adversarial_objective(
    networks: ScalNetworks,
    xs,
    ys,
    xt,
    lam: float = 1.0,
    mode: str = "scal",
    target_pseudo=None,
    flow_through: bool = True,
    reverse: bool = True,
) -> AdversarialLosses:
    """Source cross-entropy plus domain NLL on (reversed) conditioned features.

    With ``reverse=False`` the reversal layer is replaced by identity, which
    turns ``total`` into an ordinary objective that finite differences can
    check.
    """
    xs, xt = ad.as_tensor(xs), ad.as_tensor(xt)
    gs = networks.G(xs)
    gt = networks.G(xt)
    loss_cls = cross_entropy(ad.softmax(networks.F(gs)), ys)
    cs = conditions(networks, gs, mode, ys, flow_through)
    ct = conditions(networks, gt, mode, target_pseudo, flow_through)
    s = ad.concat_rows([cs, ct])
    s = ad.gradient_reverse(s, lam) if reverse else ad.identity(s)
    d = ad.sigmoid(networks.D(s))
    is_source = np.r_[np.ones(len(xs), bool), np.zeros(len(xt), bool)]
    loss_adv = binary_adversarial_loss(d, is_source)
    return AdversarialLosses(ad.add(loss_cls, loss_adv), loss_cls, loss_adv)


def surrogate_update(networks: ScalNetworks, target_x, pseudo_labels, optimizer: SGD) -> float:
    """One SGD step on F_S only, fitting pseudo-labels on frozen features."""
    with ad.no_grad():
        g = networks.features(target_x)
    g = Tensor(g.values)
    optimizer.zero_grad()
    loss = cross_entropy(ad.softmax(networks.FS(g)), pseudo_labels)
    if not np.isfinite(loss.values):
        raise TrainingDivergenceError("non-finite surrogate loss", {"loss": float(loss.values)})
    loss.backward()
    optimizer.step()
    return float(loss.values)


def adversarial_update(
    networks: ScalNetworks,
    xs,
    ys,
    xt,
    target_pseudo,
    lam: float,
    optimizer: SGD,
    mode: str = "scal",
    flow_through: bool = True,
) -> tuple[float, float]:
    """One joint step on G, F and D (F_S is read but never stepped here)."""
    optimizer.zero_grad()
    networks.FS.zero_grad()
    losses = adversarial_objective(networks, xs, ys, xt, lam, mode, target_pseudo, flow_through)
    if not np.isfinite(losses.total.values):
        raise TrainingDivergenceError(
            "non-finite adversarial objective",
            {
                "loss_cls": float(losses.cls.values),
                "loss_adv": float(losses.adv.values),
                "param_norms": {k: float(np.linalg.norm(t.values)) for k, t in networks.named_parameters().items()},
            },
        )
    losses.total.backward()
    optimizer.step()
    networks.FS.zero_grad()
    return float(losses.cls.values), float(losses.adv.values)


def make_optimizers(networks: ScalNetworks, cfg: ExperimentConfig) -> tuple[SGD, SGD]:
    """(surrogate optimizer, adversarial optimizer); they share the schedule constants."""
    t = cfg.training

    def state():
        return SgdState(lr0=t.lr0, alpha=t.alpha, beta=t.beta, momentum=t.momentum)

    opt_fs = SGD({"FS": (networks.FS.named_parameters(), t.head_lr_mult)}, state())
    opt_adv = SGD(
        {
            "G": (networks.G.named_parameters(), 1.0),
            "F": (networks.F.named_parameters(), t.head_lr_mult),
            "D": (networks.D.named_parameters(), t.disc_lr_mult),
        },
        state(),
    )
    return opt_fs, opt_adv


def batch_schedule(n_s: int, n_t: int, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index matrices (iters x batch) for both domains; the shorter stream cycles."""
    iters = math.ceil(max(n_s, n_t) / batch)

    def stream(n):
        need = iters * batch
        chunks, have = [], 0
        while have < need:
            chunks.append(rng.permutation(n))
            have += n
        return np.concatenate(chunks)[:need].reshape(iters, batch)

    return stream(n_s), stream(n_t)


def resolve_head(cfg: ExperimentConfig) -> str:
    """Head used for the final target predictions.

    ``auto``: F_S for the clustering-conditioned variants; F for the
    unconditioned and source-classifier-conditioned baselines, whose own
    protocol predicts with the source classifier.
    """
    head = cfg.training.predict_head
    if head != "auto":
        return head
    if cfg.training.ablation in ("no_conditions", "src_classifier_conditions"):
        return "source"
    return "surrogate"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    networks: ScalNetworks
    opt_fs: SGD
    opt_adv: SGD
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    epoch: int = 0  # next epoch to run
    iteration: int = 0  # completed iterations
    last_centers: np.ndarray | None = None
    log: MetricsLog = field(default_factory=MetricsLog)


def init_state(cfg: ExperimentConfig, in_dim: int) -> TrainState:
    nets = ScalNetworks.build(
        in_dim,
        cfg.model.g_hidden,
        cfg.model.num_classes,
        cfg.model.d_hidden,
        conditioned=cfg.training.ablation != "no_conditions",
        rng=child_rng(cfg.seed, "init"),
    )
    opt_fs, opt_adv = make_optimizers(nets, cfg)
    return TrainState(nets, opt_fs, opt_adv, child_rng(cfg.seed, "shuffle"), child_rng(cfg.seed, "noise"))


@dataclass
class TrainResult:
    networks: ScalNetworks
    log: MetricsLog
    state: TrainState


def _check_inputs(cfg: ExperimentConfig, source: LabeledDataset, target: LabeledDataset) -> None:
    k = cfg.model.num_classes
    if source.labels is None:
        raise ContractError("source domain needs labels")
    if source.dim != target.dim:
        raise ContractError(f"source dim {source.dim} != target dim {target.dim}")
    if source.labels.min() < 0 or source.labels.max() >= k:
        raise ContractError(f"source labels must lie in [0, {k})")
    if target.labels is not None and (target.labels.min() < 0 or target.labels.max() >= k):
        raise ContractError(f"target labels must lie in [0, {k})")


def evaluate(networks: ScalNetworks, target: LabeledDataset) -> tuple[float, float]:
    """(accuracy of F_S, accuracy of F) on the target; NaN without target labels."""
    if target.labels is None:
        return float("nan"), float("nan")
    return (
        accuracy(networks.predict(target.features, "surrogate"), target.labels),
        accuracy(networks.predict(target.features, "source"), target.labels),
    )


def train(
    cfg: ExperimentConfig,
    source: LabeledDataset,
    target: LabeledDataset,
    state: TrainState | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    """Run the epoch/batch alternation; resumes from ``state`` when given.

    Target labels are read only by :func:`evaluate`.
    """
    _check_inputs(cfg, source, target)
    t = cfg.training
    k = cfg.model.num_classes
    if state is None:
        state = init_state(cfg, source.dim)
    nets = state.networks
    xs_all, ys_all = source.features, source.labels
    xt_all = target.features
    iters = math.ceil(max(len(source), len(target)) / t.batch_size)
    total = iters * t.epochs

    while state.epoch < t.epochs:
        epoch = state.epoch
        try:
            init = state.last_centers if (t.ablation == "kmeans_last_init" and state.last_centers is not None) else None
            cluster = establish_local_structure(nets, xt_all, xs_all, ys_all, init, t.kmeans_max_iter, t.kmeans_tol)
        except ScalError as e:
            e.args = (f"epoch {epoch}, clustering: {e}",)
            raise
        state.last_centers = cluster.centers
        pseudo_clean = cluster.assignments
        acc_pseudo = accuracy(pseudo_clean, target.labels) if target.labels is not None else float("nan")
        pseudo = inject_label_noise(pseudo_clean, t.noise_level, k, state.noise_rng)

        src_idx, tgt_idx = batch_schedule(len(source), len(target), t.batch_size, state.shuffle_rng)
        cls_sum = adv_sum = 0.0
        lr = state.opt_adv.state.lr
        for it in range(iters):
            p = state.iteration / total
            state.opt_fs.state.set_progress(p)
            state.opt_adv.state.set_progress(p)
            lr = state.opt_adv.state.lr
            bs, bt = src_idx[it], tgt_idx[it]
            try:
                surrogate_update(nets, xt_all[bt], pseudo[bt], state.opt_fs)
                lc, la = adversarial_update(
                    nets, xs_all[bs], ys_all[bs], xt_all[bt], pseudo[bt], t.lam, state.opt_adv, t.ablation, t.flow_through
                )
            except TrainingDivergenceError as e:
                e.diagnostics.update({"epoch": epoch, "iteration": it})
                e.args = (f"epoch {epoch}, iteration {it}: {e}",)
                raise
            except ScalError as e:
                e.args = (f"epoch {epoch}, iteration {it}: {e}",)
                raise
            cls_sum += lc
            adv_sum += la
            state.iteration += 1

        acc_fs, acc_f = evaluate(nets, target)
        state.log.records.append(
            MetricsRecord(
                epoch=epoch,
                lr=lr,
                loss_cls=cls_sum / iters,
                loss_adv=adv_sum / iters,
                acc_target_fs=acc_fs,
                acc_target_f=acc_f,
                acc_pseudo=acc_pseudo,
            )
        )
        log.info(
            "epoch %d lr %.5f cls %.4f adv %.4f acc_fs %.4f acc_f %.4f pseudo %.4f",
            epoch, lr, cls_sum / iters, adv_sum / iters, acc_fs, acc_f, acc_pseudo,
        )
        state.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(state)

    head = resolve_head(cfg)
    state.log.terminal["predict_head"] = head
    if state.log.records:
        last = state.log.records[-1]
        state.log.terminal["final_target_accuracy"] = last.acc_target_fs if head == "surrogate" else last.acc_target_f
    return TrainResult(nets, state.log, state)
