"""Three-term training: prediction + equalized-odds + explanation consistency.

Each minibatch minimises ``l_pred + lam_eo * l_eo + lam_cec * l_cec`` where
``l_cec`` is the mean squared per-pair CEC score.  The CEC term contains
input-gradients of the model, so its parameter gradient is taken by double
backpropagation through the taped integrated-gradients computation.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attribution import TRAIN_STEPS, ig_graph, normalize_graph
from .autodiff import Var
from .data import Dataset
from .matcher import UNMATCHED, BaselineSet, CounterfactualMap
from .model import MLPModel, dropout_masks, logits_graph

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    PRED_ONLY = "pred_only"
    PRED_EO = "pred_eo"
    PRED_CEC = "pred_cec"
    FULL = "full"


@dataclass(frozen=True)
class TrainConfig:
    lambda_eo: float = 1.0
    lambda_cec: float = 1.0
    lr: float = 3e-4
    epochs: int = 30
    batch_size: int = 64
    ig_steps: int = TRAIN_STEPS
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: Variant = Variant.FULL
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "tanh"
    dropout: float = 0.2
    threshold: float = 0.5
    # compute l_cec for logging even when its weight is zero (costs a full IG pass)
    monitor_cec: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.lambda_eo < 0 or self.lambda_cec < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.ig_steps < 1:
            raise ValueError("lr, epochs, batch_size and ig_steps must be positive")

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        """(lam_eo, lam_cec) after the variant switches terms off."""
        v = self.variant
        eo = self.lambda_eo if v in (Variant.PRED_EO, Variant.FULL) else 0.0
        cec = self.lambda_cec if v in (Variant.PRED_CEC, Variant.FULL) else 0.0
        return eo, cec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    l_pred: float
    l_eo: float
    l_cec: float
    total: float
    flags: tuple[str, ...] = ()


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)
    batches: list[LossBreakdown] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l_pred", "l_eo", "l_cec", "total"])
            for e, lb in enumerate(self.epochs, start=1):
                w.writerow([e, *(repr(float(v)) for v in (lb.l_pred, lb.l_eo, lb.l_cec, lb.total))])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: MLPModel, history: TrainHistory):
        super().__init__(message)
        self.model = model
        self.history = history


# ---------------------------------------------------------------- losses


def loss_pred_graph(logits: Var, y: np.ndarray) -> Var:
    """Mean BCE on logits: softplus(z) - y * z."""
    y = np.asarray(y, dtype=np.float64)
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, y)))


def _cell_masks(y: np.ndarray, a: np.ndarray):
    out = {}
    for yy in (0, 1):
        for aa in (0, 1):
            m = ((y == yy) & (a == aa)).astype(np.float64)
            out[(yy, aa)] = m
    return out


def loss_eo_graph(logits: Var, y: np.ndarray, a: np.ndarray) -> tuple[Var, tuple[str, ...]]:
    """(TPR0 - TPR1)^2 + (FPR0 - FPR1)^2 on sigmoid outputs.

    A rate gap whose two cells are not both present in the batch contributes
    zero and is reported in the returned flags.
    """
    p = ad.sigmoid(logits)
    masks = _cell_masks(np.asarray(y), np.asarray(a))
    total = Var(0.0)
    flags = []
    for yy, name in ((1, "tpr"), (0, "fpr")):
        m0, m1 = masks[(yy, 0)], masks[(yy, 1)]
        c0, c1 = m0.sum(), m1.sum()
        if c0 == 0 or c1 == 0:
            flags.append(f"empty_{name}_cell")
            continue
        gap = ad.sub(ad.mul(ad.sum(ad.mul(p, m0)), 1.0 / c0), ad.mul(ad.sum(ad.mul(p, m1)), 1.0 / c1))
        total = ad.add(total, ad.square(gap))
    return total, tuple(flags)


def loss_cec_graph(
    model: MLPModel,
    params: Sequence[Var],
    x: np.ndarray,
    x_cf: np.ndarray,
    baseline: np.ndarray,
    steps: int = TRAIN_STEPS,
) -> Var:
    """Mean over pairs of (||IGn(x; b) - IGn(x_cf; b)|| / 2)^2."""
    m = x.shape[0]
    ig = ig_graph(model, params, np.concatenate([x, x_cf]), np.concatenate([baseline, baseline]), steps)
    g = normalize_graph(ig)
    diff = ad.sub(g[:m], g[m:])
    return ad.mean(ad.mul(ad.sum(ad.square(diff), axis=1), 0.25))


def loss_pred(model: MLPModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty batch")
    with ad.no_grad():
        return loss_pred_graph(logits_graph(model, [Var(p) for p in model.parameters()], X), y).item()


def loss_eo(model: MLPModel, X: np.ndarray, y: np.ndarray, a: np.ndarray) -> float:
    with ad.no_grad():
        val, _ = loss_eo_graph(logits_graph(model, [Var(p) for p in model.parameters()], X), y, a)
    return val.item()


def loss_cec(model: MLPModel, pairs, steps: int = TRAIN_STEPS) -> float:
    """Value of the CEC loss over a paired batch (0 when the batch is empty)."""
    if len(pairs) == 0:
        return 0.0
    params = [Var(p) for p in model.parameters()]
    return loss_cec_graph(model, params, pairs.x, pairs.x_cf, pairs.baseline, steps).item()


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


# ---------------------------------------------------------------- training


@dataclass
class TrainingData:
    """Training rows with their counterfactuals and label-group baselines aligned."""

    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    row_ids: np.ndarray
    matched: np.ndarray
    x_cf: np.ndarray
    baseline: np.ndarray

    @classmethod
    def build(cls, train: Dataset, cmap: CounterfactualMap, baselines: BaselineSet) -> TrainingData:
        pos = cmap.lookup(train.row_ids)
        matched = cmap.matched_ids[pos] != UNMATCHED
        B = np.zeros_like(train.X)
        for key, b in baselines.baselines.items():
            B[(train.y == key[0]) & (train.a == key[1])] = b
        for i in np.flatnonzero(matched):
            if (int(train.y[i]), int(train.a[i])) not in baselines.baselines:
                raise ValueError(f"row {train.row_ids[i]} is matched but its cell has no baseline")
        x_cf = np.where(matched[:, None], cmap.x_cf[pos], 0.0)
        return cls(train.X, train.y, train.a, train.row_ids, matched, x_cf, B)


def _forward_batch(model, params, Xb, masks):
    return logits_graph(model, params, Xb, masks)


def train(
    data: TrainingData,
    config: TrainConfig = TrainConfig(),
    model: MLPModel | None = None,
    feature_names: list[str] | None = None,
) -> tuple[MLPModel, TrainHistory]:
    """Minibatch Adam on the three-term objective.

    Minibatches are drawn over all training rows; rows without a counterfactual
    contribute to the prediction and EO terms only.  Dropout is used for the
    prediction term alone.  Deterministic for a fixed ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    init_seed, shuffle_seed, dropout_seed = rng.integers(0, 2**63, size=3)
    if model is None:
        model = MLPModel.init(
            data.X.shape[1], config.hidden, activation=config.activation, dropout=config.dropout,
            threshold=config.threshold, seed=int(init_seed), feature_names=feature_names,
        )
    shuffle_rng = np.random.default_rng(int(shuffle_seed))
    drop_rng = np.random.default_rng(int(dropout_seed))
    lam_eo, lam_cec = config.effective_lambdas
    opt = Adam([p.shape for p in model.parameters()], config.lr, config.beta1, config.beta2, config.adam_eps)
    history = TrainHistory()
    n = data.X.shape[0]
    last_good = model.copy()

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        ep: list[LossBreakdown] = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            params = model.variables()
            Xb, yb, ab = data.X[idx], data.y[idx], data.a[idx]

            masks = dropout_masks(model, idx.size, drop_rng) if model.dropout > 0 else None
            l_pred = loss_pred_graph(_forward_batch(model, params, Xb, masks), yb)
            total = l_pred
            flags: list[str] = []

            if lam_eo > 0:
                l_eo, eo_flags = loss_eo_graph(_forward_batch(model, params, Xb, None), yb, ab)
                total = ad.add(total, ad.mul(l_eo, lam_eo))
            else:
                with ad.no_grad():
                    l_eo, eo_flags = loss_eo_graph(_forward_batch(model, params, Xb, None), yb, ab)
            flags += eo_flags

            pidx = idx[data.matched[idx]]
            # sorted by row id so the pair reduction order is fixed
            pidx = pidx[np.argsort(data.row_ids[pidx], kind="stable")]
            if pidx.size == 0:
                flags.append("no_pairs")
                l_cec_val = 0.0
            elif lam_cec > 0:
                l_cec = loss_cec_graph(model, params, data.X[pidx], data.x_cf[pidx], data.baseline[pidx], config.ig_steps)
                total = ad.add(total, ad.mul(l_cec, lam_cec))
                l_cec_val = l_cec.item()
            elif config.monitor_cec:
                frozen = [Var(p.value) for p in params]
                l_cec_val = loss_cec_graph(
                    model, frozen, data.X[pidx], data.x_cf[pidx], data.baseline[pidx], config.ig_steps
                ).item()
            else:
                l_cec_val = math.nan

            bd = LossBreakdown(l_pred.item(), l_eo.item(), l_cec_val, total.item(), tuple(flags))
            if not np.isfinite(bd.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}", last_good, history
                )
            grads = ad.grad(total, params)
            new = opt.step(model.parameters(), [g.value for g in grads])
            last_good = model
            model = MLPModel(
                list(model.dims), new[0::2], new[1::2], model.activation,
                model.dropout, model.threshold, model.feature_names,
            )
            history.batches.append(bd)
            ep.append(bd)

        history.epochs.append(_mean_breakdown(ep))
        log.info(
            "epoch %d/%d  pred=%.4f eo=%.4f cec=%.4f total=%.4f",
            epoch + 1, config.epochs, *(getattr(history.epochs[-1], k) for k in ("l_pred", "l_eo", "l_cec", "total")),
        )
    return model, history


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    vals = np.array([[b.l_pred, b.l_eo, b.l_cec, b.total] for b in items])
    flags = sorted({f for b in items for f in b.flags})
    return LossBreakdown(*(float(v) for v in vals.mean(axis=0)), tuple(flags))
