"""Training objectives: warping, pooled cross-entropy, head alignment, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BadClass
from .model import PredictionBundle, softmax_backward
from .warping import SoftDtwConfig, TargetSequence, build_ideal_reference, softdtw_gradient, softdtw_value

ALIGN_MODES = ("soft_argmax", "straight_through", "metric_only")


@dataclass(frozen=True)
class LossWeights:
    lambda_dtw: float = 1.0
    lambda_ap: float = 10.0
    lambda_align: float = 10.0

    def __post_init__(self):
        if min(self.lambda_dtw, self.lambda_ap, self.lambda_align) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_dtw: float
    l_ap: float
    l_align: float
    total: float
    l_align_reported: float = 0.0


@dataclass
class AlignResult:
    reported: float
    trained: float
    grad_attn: np.ndarray
    grad_ap: np.ndarray
    row: int


def _values(seq):
    return seq.values if isinstance(seq, TargetSequence) else np.asarray(seq, dtype=np.float64)


def loss_dtw(y_attn, y_l, y_ideal=None, cfg=None):
    """``|D(y_attn, y_l) - D(y_ideal, y_l)|`` and its gradient w.r.t. ``y_attn``.

    With ``y_ideal=None`` the subtracted floor is zero.
    """
    cfg = cfg or SoftDtwConfig()
    target = _values(y_l)
    res = softdtw_gradient(y_attn, target, cfg)
    floor = 0.0 if y_ideal is None else softdtw_value(_values(y_ideal), target, cfg).value
    gap = res.value - floor
    return abs(gap), np.sign(gap) * res.grad_first


def loss_ap(y_ap, label):
    """Cross-entropy of the pooled prediction; gradient is w.r.t. the logits."""
    y_ap = np.asarray(y_ap, dtype=np.float64)
    if not 0 <= label < y_ap.shape[0]:
        raise BadClass(f"label {label} outside [0, {y_ap.shape[0]})")
    with np.errstate(divide="ignore"):
        value = -np.log(y_ap[label])
    grad = y_ap.copy()
    grad[label] -= 1.0
    return float(value), grad


def most_confident_row(y_attn) -> int:
    """Row with the highest top-class probability; earliest row on ties."""
    return int(np.argmax(np.max(y_attn, axis=1)))


def _soft_index(p, temperature):
    q = np.exp((p - p.max()) / temperature)
    q /= q.sum()
    idx = np.arange(p.shape[0], dtype=np.float64)
    e = float(q @ idx)
    return e, q * (idx - e) / temperature


def loss_align(y_attn, y_ap, temperature=0.1, mode="soft_argmax") -> AlignResult:
    """Disagreement between the sequence head's most confident frame and the pooled head.

    ``reported`` is the hard class-index distance.  ``trained`` is the value
    whose gradient is returned: the soft-argmax distance in ``soft_argmax``
    mode, the hard distance with soft-argmax gradients in
    ``straight_through`` mode, and the hard distance with zero gradient in
    ``metric_only`` mode.  Gradients are w.r.t. the probabilities.
    """
    if mode not in ALIGN_MODES:
        raise ValueError(f"align mode must be one of {ALIGN_MODES}")
    y_attn = np.asarray(y_attn, dtype=np.float64)
    y_ap = np.asarray(y_ap, dtype=np.float64)
    row = most_confident_row(y_attn)
    reported = float(abs(int(np.argmax(y_attn[row])) - int(np.argmax(y_ap))))
    e_attn, de_attn = _soft_index(y_attn[row], temperature)
    e_ap, de_ap = _soft_index(y_ap, temperature)
    gap = e_attn - e_ap
    grad_attn = np.zeros_like(y_attn)
    grad_ap = np.zeros_like(y_ap)
    if mode != "metric_only":
        grad_attn[row] = np.sign(gap) * de_attn
        grad_ap = -np.sign(gap) * de_ap
    trained = abs(gap) if mode == "soft_argmax" else reported
    return AlignResult(reported, float(trained), grad_attn, grad_ap, row)


def total_loss(parts, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of ``(l_dtw, l_ap, l_align)``."""
    l_dtw, l_ap, l_align = (float(p) for p in parts)
    total = weights.lambda_dtw * l_dtw + weights.lambda_ap * l_ap + weights.lambda_align * l_align
    return LossBreakdown(l_dtw, l_ap, l_align, total)


def case_objective(bundle: PredictionBundle, label: int, y_l: TargetSequence, *, weights=LossWeights(),
                   dtw_cfg=None, use_ideal_reference=True, use_align=True, align_mode="soft_argmax",
                   temperature=0.1):
    """Loss breakdown of one case plus upstream logit gradients for ``model_backward``.

    Terms whose head is missing (attention or pooling ablated) are dropped,
    and alignment needs both heads.
    """
    dtw_cfg = dtw_cfg or SoftDtwConfig()
    l_dtw = l_ap = l_align = reported = 0.0
    g_attn = None
    g_ap_logits = None
    has_attn = bundle.y_attn is not None
    has_ap = bundle.y_ap is not None

    if has_attn:
        n, C = bundle.y_attn.shape
        g_attn = np.zeros((n, C))
        y_ideal = build_ideal_reference(n, C, label, y_l.kind) if use_ideal_reference else None
        l_dtw, g = loss_dtw(bundle.y_attn, y_l, y_ideal, dtw_cfg)
        g_attn += weights.lambda_dtw * g
    if has_ap:
        l_ap, g = loss_ap(bundle.y_ap, label)
        g_ap_logits = weights.lambda_ap * g
    if has_attn and has_ap and use_align:
        res = loss_align(bundle.y_attn, bundle.y_ap, temperature, align_mode)
        l_align, reported = res.trained, res.reported
        g_attn += weights.lambda_align * res.grad_attn
        g_ap_logits += softmax_backward(bundle.y_ap, weights.lambda_align * res.grad_ap)

    breakdown = total_loss((l_dtw, l_ap, l_align), weights)
    breakdown.l_align_reported = reported
    d_attn_logits = softmax_backward(bundle.y_attn, g_attn, axis=1) if has_attn else None
    return breakdown, d_attn_logits, g_ap_logits
