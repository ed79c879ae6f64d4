"""Adam, per-case gradient accumulation, validation-driven early stopping and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data_io import DatasetManifest
from .exceptions import (
    BadMagic,
    EmptyDataset,
    IoFailure,
    ShapeMismatch,
    TrainingDiverged,
    TruncatedFile,
    VersionMismatch,
)
from .inference import KnnBank, build_bank, evaluate, predict_cases
from .losses import ALIGN_MODES, LossWeights, case_objective
from .model import ModelParams, init_params, model_backward, model_forward
from .preprocessing import PreparedCase, prepare_case, select_tau
from .warping import CONSTANT, TARGET_KINDS, SoftDtwConfig, build_target_sequence

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    accumulation_size: int = 8
    patience: int = 10
    target_len: int = 75
    target_kind: str = "implicit"
    lambda_dtw: float = 1.0
    lambda_ap: float = 10.0
    lambda_align: float = 10.0
    gamma: float = 0.1
    align_mode: str = "soft_argmax"
    align_temperature: float = 0.1
    seed: int = 0
    d_k: int = 192
    h: int = 96
    ap_input: str = "ca_output"
    ca_separate_kv: bool = False
    knn_k: int = 5
    duplicate_fraction: float = 0.25
    tau: Optional[float] = None
    use_wavelet: bool = True
    use_implicit_target: bool = True
    use_ideal_reference: bool = True
    use_align: bool = True
    use_attention: bool = True
    use_ap: bool = True

    def validate(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.target_len < 1:
            raise ValueError("target_len must be >= 1")
        if self.epochs < 1 or self.accumulation_size < 1 or self.patience < 0:
            raise ValueError("epochs and accumulation_size must be >= 1, patience >= 0")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
        if self.align_mode not in ALIGN_MODES:
            raise ValueError(f"align_mode must be one of {ALIGN_MODES}")
        if not (self.use_attention or self.use_ap):
            raise ValueError("cannot disable both the attention and the pooling modules")
        SoftDtwConfig(self.gamma)
        LossWeights(self.lambda_dtw, self.lambda_ap, self.lambda_align)
        return self

    @property
    def effective_target_kind(self) -> str:
        return self.target_kind if self.use_implicit_target else CONSTANT

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_dtw, self.lambda_ap, self.lambda_align)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise KeyError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**payload)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    epoch: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, 0)


@dataclass
class EpochStats:
    epoch: int
    l_dtw: float
    l_ap: float
    l_align: float
    l_align_reported: float
    total: float
    steps: int
    val: Optional[dict] = None
    improved: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class FitResult:
    params: ModelParams
    state: AdamState
    history: list
    tau: float
    best_epoch: int
    best_score: float
    bank: Optional[KnnBank] = None
    final_params: Optional[ModelParams] = field(default=None, repr=False)


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new params and state, inputs untouched."""
    if set(grads) != set(params.weights):
        raise ShapeMismatch("gradient keys do not match parameter keys")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    weights, m_new, v_new = {}, {}, {}
    for name, theta in params.weights.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        weights[name] = theta - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        m_new[name] = m
        v_new[name] = v
    return params.with_weights(weights), AdamState(m_new, v_new, t, state.epoch)


def init_model(d: int, n_classes: int, cfg: TrainConfig) -> ModelParams:
    return init_params(d, cfg.d_k, cfg.h, n_classes, cfg.seed, use_attention=cfg.use_attention,
                       use_ap=cfg.use_ap, ap_input=cfg.ap_input, ca_separate_kv=cfg.ca_separate_kv)


def prepare_cases(sequences, labels, tau, cfg: TrainConfig, case_ids=None) -> list[PreparedCase]:
    ids = case_ids if case_ids is not None else [str(i) for i in range(len(sequences))]
    return [prepare_case(x, tau, cfg.use_wavelet, cid, None if y is None else int(y))
            for x, y, cid in zip(sequences, labels, ids)]


def case_gradient(params: ModelParams, case: PreparedCase, y_l, cfg: TrainConfig):
    """Loss breakdown and parameter gradient for a single case."""
    bundle = model_forward(case.X, case.X_stb, case.X_rpd, params)
    breakdown, d_attn, d_ap = case_objective(
        bundle, case.label, y_l, weights=cfg.loss_weights, dtw_cfg=SoftDtwConfig(cfg.gamma),
        use_ideal_reference=cfg.use_ideal_reference, use_align=cfg.use_align,
        align_mode=cfg.align_mode, temperature=cfg.align_temperature,
    )
    return breakdown, model_backward(bundle.cache, d_attn, d_ap)


def accumulate_gradients(params: ModelParams, cases: Sequence[PreparedCase], targets: dict, cfg: TrainConfig):
    """Mean gradient over ``cases`` plus their loss breakdowns."""
    total = params.zeros_like()
    breakdowns = []
    for case in cases:
        breakdown, grads = case_gradient(params, case, targets[case.label], cfg)
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(f"non-finite loss on case {case.case_id!r}")
        breakdowns.append(breakdown)
        for name, g in grads.items():
            total[name] += g
    scale = 1.0 / len(cases)
    return {k: v * scale for k, v in total.items()}, breakdowns


def class_targets(n_classes: int, cfg: TrainConfig) -> dict:
    return {c: build_target_sequence(cfg.target_len, n_classes, c, cfg.effective_target_kind)
            for c in range(n_classes)}


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # Keyed on the epoch index so a resumed run reshuffles identically.
    return np.random.default_rng([int(seed), int(epoch)])


def train_epoch(cases: Sequence[PreparedCase], params: ModelParams, state: AdamState, cfg: TrainConfig,
                rng: Optional[np.random.Generator] = None):
    """Shuffle, accumulate per-case gradients over windows of ``accumulation_size``, step Adam."""
    if not cases:
        raise EmptyDataset("training split is empty")
    rng = rng if rng is not None else epoch_rng(cfg.seed, state.epoch)
    targets = class_targets(params.n_classes, cfg)
    order = rng.permutation(len(cases))
    sums = np.zeros(5)
    steps = 0
    for start in range(0, len(order), cfg.accumulation_size):
        window = [cases[i] for i in order[start:start + cfg.accumulation_size]]
        grads, breakdowns = accumulate_gradients(params, window, targets, cfg)
        for b in breakdowns:
            sums += (b.l_dtw, b.l_ap, b.l_align, b.l_align_reported, b.total)
        params, state = adam_step(params, grads, state, cfg)
        for name, theta in params.weights.items():
            if not np.all(np.isfinite(theta)):
                raise TrainingDiverged(f"parameter {name} became non-finite")
        steps += 1
    state = AdamState(state.m, state.v, state.t, state.epoch + 1)
    means = sums / len(cases)
    stats = EpochStats(state.epoch, *map(float, means), steps=steps)
    return params, state, stats


def evaluate_cases(params: ModelParams, cases, bank_cases, cfg: TrainConfig, jobs: int = 1):
    bank = build_bank(params, bank_cases) if bank_cases else None
    preds = predict_cases(params, cases, bank, target_len=cfg.target_len, gamma=cfg.gamma,
                          target_kind=cfg.effective_target_kind, k=cfg.knn_k, jobs=jobs)
    return evaluate(preds, [c.label for c in cases], params.n_classes), preds, bank


def fit_prepared(train_cases: Sequence[PreparedCase], val_cases: Sequence[PreparedCase], n_classes: int,
                 cfg: TrainConfig, tau: float, params: Optional[ModelParams] = None,
                 state: Optional[AdamState] = None,
                 on_epoch: Optional[Callable[[EpochStats], None]] = None) -> FitResult:
    """Train with early stopping on validation voting F1.

    Without validation cases the final epoch's parameters are returned.
    """
    cfg.validate()
    if not train_cases:
        raise EmptyDataset("training split is empty")
    d = train_cases[0].X.shape[1]
    params = params if params is not None else init_model(d, n_classes, cfg)
    state = state if state is not None else AdamState.zeros(params)
    best = params
    best_state = state
    best_score = -math.inf
    best_epoch = 0
    since_best = 0
    history = []
    for _ in range(cfg.epochs):
        params, state, stats = train_epoch(train_cases, params, state, cfg)
        if val_cases:
            report, _, _ = evaluate_cases(params, val_cases, train_cases, cfg)
            stats.val = report.to_dict()
            score = report.f1
        else:
            score = -stats.total
        if score > best_score:
            best, best_state, best_score, best_epoch = params, state, score, stats.epoch
            stats.improved = True
            since_best = 0
        else:
            since_best += 1
        history.append(stats)
        log.info("epoch %d total=%.4f dtw=%.4f ap=%.4f align=%.4f score=%.4f",
                 stats.epoch, stats.total, stats.l_dtw, stats.l_ap, stats.l_align, score)
        if on_epoch is not None:
            on_epoch(stats)
        if since_best >= cfg.patience:
            break
    if not val_cases:
        best, best_state, best_epoch = params, state, history[-1].epoch
    bank = build_bank(best, train_cases)
    return FitResult(best, best_state, history, tau, best_epoch, best_score, bank, final_params=params)


def fit(manifest: DatasetManifest, cfg: TrainConfig) -> FitResult:
    """Calibrate tau on train+val, preprocess every case once, then train."""
    cfg.validate()
    train = manifest.load_split("train")
    val = manifest.load_split("val")
    if not train:
        raise EmptyDataset("manifest has no training cases")
    tau = cfg.tau if cfg.tau is not None else select_tau(
        [s.features for s in train + val], cfg.duplicate_fraction)
    train_cases = prepare_cases([s.features for s in train], [s.label for s in train], tau, cfg,
                                [s.case_id for s in train])
    val_cases = prepare_cases([s.features for s in val], [s.label for s in val], tau, cfg,
                              [s.case_id for s in val])
    return fit_prepared(train_cases, val_cases, manifest.num_classes, cfg, tau)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_blocks(blocks: dict, meta: dict) -> bytes:
    """``MCKP`` container: named float64 tensors followed by a JSON blob."""
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    return b"".join(out)


def decode_blocks(buf: bytes):
    def need(pos, size, what):
        if pos + size > len(buf):
            raise TruncatedFile(f"checkpoint ends inside {what}", len(buf))

    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"expected magic {CKPT_MAGIC!r}, got {bytes(buf[:4])!r}", 0)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}", 4)
    pos = 12
    blocks = {}
    for _ in range(count):
        need(pos, 2, "block name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, name_len + 1, "block name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = 8 * int(np.prod(dims, dtype=np.int64))
        need(pos, size, f"payload of {name}")
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += size
    need(pos, 4, "config length")
    (blob_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(pos, blob_len, "config blob")
    meta = json.loads(buf[pos:pos + blob_len].decode("utf-8"))
    return blocks, meta


def save_checkpoint(params: ModelParams, state: Optional[AdamState], cfg: TrainConfig, path, extra=None) -> None:
    blocks = {f"param.{k}": v for k, v in sorted(params.weights.items())}
    if state is not None:
        blocks.update({f"adam.m.{k}": v for k, v in sorted(state.m.items())})
        blocks.update({f"adam.v.{k}": v for k, v in sorted(state.v.items())})
        blocks["adam.t"] = np.array(float(state.t))
        blocks["adam.epoch"] = np.array(float(state.epoch))
    meta = {"config": cfg.to_dict(), "arch": params.arch(), "extra": extra or {}}
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(encode_blocks(blocks, meta))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


@dataclass
class Checkpoint:
    params: ModelParams
    state: Optional[AdamState]
    config: TrainConfig
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    blocks, meta = decode_blocks(buf)
    weights = {k[len("param."):]: v for k, v in blocks.items() if k.startswith("param.")}
    params = ModelParams(weights=weights, **meta["arch"])
    state = None
    if "adam.t" in blocks:
        m = {k[len("adam.m."):]: v for k, v in blocks.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in blocks.items() if k.startswith("adam.v.")}
        state = AdamState(m, v, int(blocks["adam.t"]), int(blocks["adam.epoch"]))
    return Checkpoint(params, state, TrainConfig.from_dict(meta["config"]), meta.get("extra", {}))


def save_bank(bank: KnnBank, path) -> None:
    blocks = {f"traj.{i:06d}": t for i, t in enumerate(bank.trajectories)}
    try:
        Path(path).write_bytes(encode_blocks(blocks, {"labels": bank.labels}))
    except OSError as exc:
        raise IoFailure(f"cannot write bank {path}: {exc}") from exc


def load_bank(path) -> KnnBank:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read bank {path}: {exc}") from exc
    blocks, meta = decode_blocks(buf)
    return KnnBank([blocks[k] for k in sorted(blocks)], meta["labels"])
