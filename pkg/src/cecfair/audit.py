"""Outcome and procedural fairness metrics, regime taxonomy and audit reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .attribution import AUDIT_STEPS, score_pairs, summarize_scores
from .data import Dataset
from .matcher import BaselineSet, CounterfactualMap, pair
from .model import MLPModel

REGIMES = ("A", "B", "C", "D")
SENSITIVITY_THETAS = (0.3, 0.5, 0.7)


# ---------------------------------------------------------------- outcome


@dataclass
class OutcomeMetrics:
    eo_gap: float | None
    sp_gap: float | None
    auc: float | None
    f1: float
    tpr: dict[int, float | None]
    fpr: dict[int, float | None]
    positive_rate: dict[int, float | None]
    confusion: dict[int, dict[str, int]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tpr", "fpr", "positive_rate", "confusion"):
            d[k] = {str(g): v for g, v in d[k].items()}
        return d


def auc_score(scores, y) -> float | None:
    """Mann-Whitney AUC with midranks for ties; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def f1_score(y, yhat) -> float:
    y = np.asarray(y).astype(bool)
    yhat = np.asarray(yhat).astype(bool)
    tp = int((y & yhat).sum())
    fp = int((~y & yhat).sum())
    fn = int((y & ~yhat).sum())
    return 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)


def _rate(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def _gap(r: Mapping[int, float | None]) -> float | None:
    if r[0] is None or r[1] is None:
        return None
    return abs(r[0] - r[1])


def outcome_metrics_from_predictions(scores, yhat, y, a) -> OutcomeMetrics:
    """Metrics from probability scores, hard predictions, labels and groups."""
    yhat = np.asarray(yhat).astype(np.int64)
    y = np.asarray(y).astype(np.int64)
    a = np.asarray(a).astype(np.int64)
    flags = []
    tpr, fpr, pos, conf = {}, {}, {}, {}
    for g in (0, 1):
        m = a == g
        yt, yp = y[m], yhat[m]
        c = {
            "tp": int(((yt == 1) & (yp == 1)).sum()),
            "fp": int(((yt == 0) & (yp == 1)).sum()),
            "tn": int(((yt == 0) & (yp == 0)).sum()),
            "fn": int(((yt == 1) & (yp == 0)).sum()),
        }
        conf[g] = c
        tpr[g] = _rate(c["tp"], c["tp"] + c["fn"])
        fpr[g] = _rate(c["fp"], c["fp"] + c["tn"])
        pos[g] = _rate(c["tp"] + c["fp"], int(m.sum()))
        if not m.any():
            flags.append(f"group_{g}_absent")
    tgap, fgap = _gap(tpr), _gap(fpr)
    if tgap is None or fgap is None:
        flags.append("eo_gap_partial")
    parts = [v for v in (tgap, fgap) if v is not None]
    eo = max(parts) if parts else None
    auc = auc_score(scores, y)
    if auc is None:
        flags.append("single_class")
    return OutcomeMetrics(eo, _gap(pos), auc, f1_score(y, yhat), tpr, fpr, pos, conf, flags)


def outcome_metrics(model: MLPModel, test: Dataset) -> OutcomeMetrics:
    """Hard predictions at the model threshold; AUC from the sigmoid scores."""
    p = model.predict_proba(test.X)
    return outcome_metrics_from_predictions(p, (p >= model.threshold).astype(np.int64), test.y, test.a)


# ---------------------------------------------------------------- procedural


def pfr(model: MLPModel, pairs) -> float:
    """Fraction of matched pairs whose hard predictions differ."""
    if len(pairs) == 0:
        raise ValueError("prediction flip rate needs at least one pair")
    return float(np.mean(model.predict(pairs.x) != model.predict(pairs.x_cf)))


def regimes_from(prediction_consistent, explanation_consistent) -> np.ndarray:
    p = np.asarray(prediction_consistent, dtype=bool)
    e = np.asarray(explanation_consistent, dtype=bool)
    return np.where(p, np.where(e, "A", "B"), np.where(e, "C", "D"))


@dataclass
class RegimeTable:
    row_ids: np.ndarray
    yhat_x: np.ndarray
    yhat_cf: np.ndarray
    delta: np.ndarray
    degenerate: np.ndarray
    theta: float

    @property
    def prediction_consistent(self) -> np.ndarray:
        return self.yhat_x == self.yhat_cf

    @property
    def explanation_consistent(self) -> np.ndarray:
        return self.delta <= self.theta

    @property
    def regime(self) -> np.ndarray:
        return regimes_from(self.prediction_consistent, self.explanation_consistent)

    def at(self, theta: float) -> RegimeTable:
        return RegimeTable(self.row_ids, self.yhat_x, self.yhat_cf, self.delta, self.degenerate, theta)

    def distribution(self) -> dict[str, float]:
        """Percentage of pairs in each regime."""
        if self.row_ids.size == 0:
            return {r: 0.0 for r in REGIMES}
        reg = self.regime
        return {r: 100.0 * float(np.mean(reg == r)) for r in REGIMES}

    def __len__(self) -> int:
        return int(self.row_ids.size)


def assign_regimes(model: MLPModel, pairs, theta: float = 0.5, steps: int = AUDIT_STEPS) -> RegimeTable:
    if not 0.0 < theta < 1.0:
        raise ValueError("theta_regime must lie in (0, 1)")
    ps = score_pairs(model, pairs, steps)
    return RegimeTable(
        pairs.row_ids, model.predict(pairs.x), model.predict(pairs.x_cf), ps.scores, ps.degenerate, theta
    )


def pareto_nondominated(runs: Sequence[Sequence[float]]) -> list[bool]:
    """Flags for (f1, eo_gap, cec) triples.

    A run is dominated when some other run has strictly higher F1, strictly
    lower EO gap and strictly lower CEC.
    """
    R = np.asarray(runs, dtype=np.float64).reshape(-1, 3)
    if R.shape[0] == 0:
        raise ValueError("need at least one run")
    better = (R[None, :, 0] > R[:, None, 0]) & (R[None, :, 1] < R[:, None, 1]) & (R[None, :, 2] < R[:, None, 2])
    return [not bool(row.any()) for row in better]


# ---------------------------------------------------------------- report


@dataclass
class AuditReport:
    outcome: OutcomeMetrics
    cec: float
    cec_excluding_degenerate: float | None
    n_degenerate: int
    pfr: float
    theta_regime: float
    regimes: dict[str, float]
    regime_sensitivity: dict[str, dict[str, float]]
    coverage: float
    n_pairs: int
    n_unmatched: int
    distance_histogram: dict
    config: dict
    instances: list[dict] = field(repr=False, default_factory=list)

    @property
    def f1(self) -> float:
        return self.outcome.f1

    @property
    def eo_gap(self) -> float | None:
        return self.outcome.eo_gap

    def aggregates(self) -> dict:
        return {
            "outcome": self.outcome.to_dict(),
            "cec": self.cec,
            "cec_excluding_degenerate": self.cec_excluding_degenerate,
            "n_degenerate": self.n_degenerate,
            "pfr": self.pfr,
            "theta_regime": self.theta_regime,
            "regimes": self.regimes,
            "regime_sensitivity": self.regime_sensitivity,
            "coverage": self.coverage,
            "n_pairs": self.n_pairs,
            "n_unmatched": self.n_unmatched,
            "distance_histogram": self.distance_histogram,
            "config": self.config,
        }

    def write(self, out_dir, prefix: str = "") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out / f"{prefix}report.json",
            "instances": out / f"{prefix}instances.csv",
            "pfr_cec": out / f"{prefix}pfr_cec.csv",
            "regimes": out / f"{prefix}regimes.csv",
        }
        paths["report"].write_text(json.dumps(self.aggregates(), indent=1, sort_keys=True))
        write_instances_csv(self.instances, paths["instances"])
        with open(paths["pfr_cec"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "pfr", "cec"])
            w.writerow([self.config.get("model_name", "model"), repr(self.pfr), repr(self.cec)])
        with open(paths["regimes"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "theta_regime", *REGIMES])
            name = self.config.get("model_name", "model")
            for th, dist in sorted(self.regime_sensitivity.items(), key=lambda kv: float(kv[0])):
                w.writerow([name, th, *(repr(dist[r]) for r in REGIMES)])
        return paths


INSTANCE_FIELDS = (
    "row_id", "matched_row_id", "y", "a", "score_x", "yhat_x", "yhat_cf",
    "delta_cec", "regime", "distance", "degenerate",
)


def write_instances_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INSTANCE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in INSTANCE_FIELDS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_instances_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(
    model: MLPModel,
    dataset: Dataset,
    cmap: CounterfactualMap,
    baselines: BaselineSet,
    *,
    theta_regime: float = 0.5,
    steps: int = AUDIT_STEPS,
    config: dict | None = None,
) -> AuditReport:
    """Audit ``model`` on ``dataset`` (normally the test split).

    Unmatched rows appear in the per-instance table with empty pair fields
    and are excluded from pair-based aggregates.
    """
    outcome = outcome_metrics(model, dataset)
    pairs = pair(dataset, cmap, baselines)
    if len(pairs) == 0:
        raise ValueError("no matched pairs to audit")
    table = assign_regimes(model, pairs, theta_regime, steps)
    summary = summarize_scores(table.delta, table.degenerate, pairs.n_unmatched)
    sens = {repr(t): table.at(t).distribution() for t in sorted({*SENSITIVITY_THETAS, theta_regime})}
    flip = float(np.mean(table.yhat_x != table.yhat_cf))

    scores = model.predict_proba(dataset.X)
    yhat = (scores >= model.threshold).astype(np.int64)
    pair_pos = {int(r): k for k, r in enumerate(table.row_ids)}
    map_pos = cmap.lookup(dataset.row_ids)
    regime = table.regime
    rows = []
    for i, rid in enumerate(dataset.row_ids):
        rec = {
            "row_id": int(rid),
            "y": int(dataset.y[i]),
            "a": int(dataset.a[i]),
            "score_x": float(scores[i]),
            "yhat_x": int(yhat[i]),
        }
        k = pair_pos.get(int(rid))
        if k is None:
            rec["matched_row_id"] = "UNMATCHED"
        else:
            rec.update(
                matched_row_id=int(cmap.matched_ids[map_pos[i]]),
                yhat_cf=int(table.yhat_cf[k]),
                delta_cec=float(table.delta[k]),
                regime=str(regime[k]),
                distance=float(pairs.distances[k]),
                degenerate=int(table.degenerate[k]),
            )
        rows.append(rec)

    cfg = {"theta_regime": theta_regime, "ig_steps": steps, "tau_dist": cmap.tau_dist}
    cfg.update(config or {})
    return AuditReport(
        outcome=outcome,
        cec=summary.value,
        cec_excluding_degenerate=summary.value_excluding_degenerate,
        n_degenerate=summary.n_degenerate,
        pfr=flip,
        theta_regime=theta_regime,
        regimes=table.distribution(),
        regime_sensitivity=sens,
        coverage=float(len(pairs) / dataset.n),
        n_pairs=len(pairs),
        n_unmatched=pairs.n_unmatched,
        distance_histogram=_hist(pairs.distances),
        config=cfg,
        instances=rows,
    )


def _hist(d: np.ndarray, bins: int = 20) -> dict:
    if d.size == 0:
        return {"edges": [], "counts": []}
    counts, edges = np.histogram(d, bins=bins)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def compare_runs(reports: Mapping[str, AuditReport]) -> list[dict]:
    """One row per run with its Pareto flag over (F1 up, EO gap down, CEC down)."""
    names = list(reports)
    triples = []
    for n in names:
        r = reports[n]
        eo = r.eo_gap if r.eo_gap is not None else np.inf
        triples.append((r.f1, eo, r.cec))
    flags = pareto_nondominated(triples)
    return [
        {"model": n, "f1": t[0], "eo_gap": reports[n].eo_gap, "cec": t[2], "pfr": reports[n].pfr,
         "regime_B": reports[n].regimes["B"], "nondominated": f}
        for n, t, f in zip(names, triples, flags)
    ]
