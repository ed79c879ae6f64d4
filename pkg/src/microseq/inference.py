"""The four case-level prediction strategies and their evaluation."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, f1_score

from .exceptions import EmptyBank, LengthMismatch
from .model import ModelParams, PredictionBundle, model_forward
from .preprocessing import PreparedCase
from .warping import build_target_sequence, softdtw_distance

STRATEGIES = ("ap", "dtw", "knn", "vote")


@dataclass
class KnnBank:
    """Sequence-head predictions of the training cases, used as KNN references."""

    trajectories: list
    labels: list

    def __post_init__(self):
        if len(self.trajectories) != len(self.labels):
            raise LengthMismatch("bank trajectories and labels differ in length")
        self.trajectories = [np.ascontiguousarray(t, dtype=np.float64) for t in self.trajectories]
        self.labels = [int(v) for v in self.labels]

    def __len__(self):
        return len(self.labels)


@dataclass
class StrategyPrediction:
    case_id: str
    ap_class: Optional[int]
    dtw_class: Optional[int]
    knn_class: Optional[int]
    vote_class: int
    y_ap: Optional[list] = None
    dtw_distances: Optional[list] = None
    neighbor_labels: Optional[list] = None
    neighbor_distances: Optional[list] = None

    def classes(self) -> dict:
        return {"ap": self.ap_class, "dtw": self.dtw_class, "knn": self.knn_class, "vote": self.vote_class}


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    confusion: list
    per_strategy: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": {"accuracy": self.accuracy, "f1": self.f1},
            "per_strategy": self.per_strategy,
            "confusion": self.confusion,
        }


def predict_ap(y_ap) -> int:
    """Arg-max of the pooled prediction (lowest index on ties)."""
    return int(np.argmax(np.asarray(y_ap)))


@lru_cache(maxsize=64)
def _class_targets(l: int, n_classes: int, kind: str):
    return tuple(build_target_sequence(l, n_classes, c, kind).values for c in range(n_classes))


def predict_dtw_distance(y_attn, l: int, gamma: float, target_kind: str, n_classes: Optional[int] = None):
    """Nearest class trajectory under soft-DTW; returns (class, per-class distances)."""
    y = np.ascontiguousarray(y_attn, dtype=np.float64)
    n_classes = n_classes or y.shape[1]
    distances = [softdtw_distance(y, target, gamma) for target in _class_targets(l, n_classes, target_kind)]
    return int(np.argmin(distances)), distances


def knn_neighbors(y_attn, bank: KnnBank, k: int, gamma: float):
    if len(bank) == 0:
        raise EmptyBank("KNN bank is empty")
    y = np.ascontiguousarray(y_attn, dtype=np.float64)
    dist = np.array([softdtw_distance(y, ref, gamma) for ref in bank.trajectories])
    k = max(1, min(int(k), len(bank)))
    order = np.argsort(dist, kind="stable")[:k]
    return [bank.labels[i] for i in order], [float(dist[i]) for i in order]


def predict_knn(y_attn, bank: KnnBank, k: int = 5, gamma: float = 0.1) -> int:
    """Majority label of the ``k`` soft-DTW-nearest bank trajectories.

    A tied majority falls back to the single nearest neighbour's label.
    """
    labels, _ = knn_neighbors(y_attn, bank, k, gamma)
    return _knn_vote(labels)


def _knn_vote(labels) -> int:
    counts = Counter(labels)
    top = max(counts.values())
    winners = [lab for lab, c in counts.items() if c == top]
    return labels[0] if len(winners) > 1 else winners[0]


def predict_vote(ap: int, dtw: int, knn: int) -> int:
    """Majority of three; when all differ the pooled prediction wins."""
    if dtw == knn:
        return dtw
    return ap


def predict_strategies(bundle: PredictionBundle, bank: Optional[KnnBank], *, target_len: int, gamma: float,
                       target_kind: str, k: int = 5, case_id: str = "") -> StrategyPrediction:
    """Apply every strategy available for the bundle's heads and fuse them.

    Without the sequence head the pooled prediction is used alone; without
    the pooled head the DTW-distance prediction is used alone.
    """
    ap = dtw = knn = None
    y_ap = dists = nb_labels = nb_dists = None
    if bundle.y_ap is not None:
        ap = predict_ap(bundle.y_ap)
        y_ap = [float(v) for v in bundle.y_ap]
    if bundle.y_attn is not None:
        dtw, dists = predict_dtw_distance(bundle.y_attn, target_len, gamma, target_kind)
        if bank is not None and len(bank):
            nb_labels, nb_dists = knn_neighbors(bundle.y_attn, bank, k, gamma)
            knn = _knn_vote(nb_labels)
    if ap is not None and dtw is not None and knn is not None:
        vote = predict_vote(ap, dtw, knn)
    elif ap is not None:
        vote = ap
    else:
        vote = dtw
    return StrategyPrediction(case_id, ap, dtw, knn, vote, y_ap, dists, nb_labels, nb_dists)


def forward_case(params: ModelParams, case: PreparedCase) -> PredictionBundle:
    bundle = model_forward(case.X, case.X_stb, case.X_rpd, params)
    bundle.cache = None
    return bundle


def build_bank(params: ModelParams, cases: Sequence[PreparedCase]) -> Optional[KnnBank]:
    if not params.use_attention:
        return None
    trajectories = [forward_case(params, c).y_attn for c in cases]
    return KnnBank(trajectories, [c.label for c in cases])


def predict_cases(params: ModelParams, cases: Sequence[PreparedCase], bank: Optional[KnnBank], *, target_len: int,
                  gamma: float, target_kind: str, k: int = 5, jobs: int = 1) -> list[StrategyPrediction]:
    """Per-case predictions in input order; ``jobs > 1`` evaluates cases on a thread pool."""

    def one(case):
        return predict_strategies(forward_case(params, case), bank, target_len=target_len, gamma=gamma,
                                  target_kind=target_kind, k=k, case_id=case.case_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def _metrics(preds, labels, n_classes):
    labels_range = list(range(n_classes))
    cm = confusion_matrix(labels, preds, labels=labels_range)
    accuracy = float(np.trace(cm) / max(1, cm.sum()))
    if n_classes == 2:
        f1 = f1_score(labels, preds, pos_label=1, average="binary", labels=labels_range, zero_division=0)
    else:
        f1 = f1_score(labels, preds, average="macro", labels=labels_range, zero_division=0)
    return accuracy, float(f1), cm


def evaluate(predictions, labels, n_classes: Optional[int] = None) -> EvalReport:
    """Accuracy, F1 (class 1 positive when binary, macro otherwise) and confusion matrix.

    ``predictions`` may be plain class indices or StrategyPrediction objects;
    for the latter every available strategy is scored and ``overall`` is the vote.
    """
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    labels = [int(v) for v in labels]
    strategy_mode = bool(predictions) and isinstance(predictions[0], StrategyPrediction)
    if n_classes is None:
        flat = labels + ([p.vote_class for p in predictions] if strategy_mode else [int(p) for p in predictions])
        n_classes = max(2, max(flat) + 1 if flat else 2)
    if not strategy_mode:
        acc, f1, cm = _metrics([int(p) for p in predictions], labels, n_classes)
        return EvalReport(acc, f1, cm.tolist())
    per_strategy = {}
    for name in STRATEGIES:
        preds = [p.classes()[name] for p in predictions]
        if any(v is None for v in preds):
            continue
        acc, f1, _ = _metrics(preds, labels, n_classes)
        per_strategy[name] = {"accuracy": acc, "f1": f1}
    acc, f1, cm = _metrics([p.vote_class for p in predictions], labels, n_classes)
    return EvalReport(acc, f1, cm.tolist(), per_strategy)
