"""Feature-sequence files, dataset manifests, splitting and the synthetic generator.

A ``.fseq`` file is a 16 byte little-endian header (magic ``FSEQ``, u32
version, u32 n, u32 d) followed by ``n * d`` float32 values in frame-major
order.  A manifest is a JSON document listing cases, their label and split.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import (
    BadMagic,
    IoFailure,
    NonFiniteValue,
    TooFewCases,
    TruncatedFile,
    VersionMismatch,
)

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "val", "test")


@dataclass
class FeatureSequence:
    """One case: an ``n x d`` matrix of frame features and its weak label."""

    case_id: str
    features: np.ndarray
    label: Optional[int] = None
    magnification_tag: Optional[str] = None

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        self.features = feats

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class CaseEntry:
    case_id: str
    file_path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    num_classes: int
    feature_dim: int
    cases: list[CaseEntry]
    root: Path = field(default_factory=Path)
    # Generator bookkeeping; never serialized.
    synth_stats: Optional[dict] = None

    def resolve(self, entry: CaseEntry) -> Path:
        p = Path(entry.file_path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def load_split(self, name: str) -> list[FeatureSequence]:
        out = []
        for entry in self.split(name):
            seq = read_feature_sequence(self.resolve(entry))
            seq.case_id = entry.case_id
            seq.label = entry.label
            out.append(seq)
        return out

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "cases": [
                {"case_id": c.case_id, "file_path": c.file_path, "label": c.label, "split": c.split}
                for c in self.cases
            ],
        }


@dataclass
class SynthConfig:
    """Parameters of the synthetic acquisition-stream generator.

    ``cases_per_class`` is either one count shared by all classes or a
    per-class list.  Signal frames of class ``c`` are shifted by
    ``separation`` along feature axis ``c`` and switch on after an onset
    fraction drawn from Beta(onset_alpha, onset_beta), so the chance that
    frame t is a signal frame is the Beta CDF at t/n.  Background frames are
    standard normal noise shared by every class.
    """

    seed: int = 0
    cases_per_class: Union[int, list] = 50
    num_classes: int = 2
    d: int = 32
    n_min: int = 40
    n_max: int = 160
    p_dup: float = 0.25
    onset_alpha: float = 3.0
    onset_beta: float = 20.0
    separation: float = 1.0
    dup_noise: float = 1e-5

    def validate(self):
        counts = self.counts()
        if len(counts) != self.num_classes or min(counts) < 1:
            raise ValueError("cases_per_class must give a positive count for every class")
        if self.num_classes < 2 or self.d < self.num_classes:
            raise ValueError("need num_classes >= 2 and d >= num_classes")
        if self.n_min < 4 or self.n_max < self.n_min:
            raise ValueError("need 4 <= n_min <= n_max")
        if not 0.0 <= self.p_dup < 1.0:
            raise ValueError("p_dup must lie in [0, 1)")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.onset_alpha <= 0 or self.onset_beta <= 0:
            raise ValueError("onset parameters must be positive")

    def counts(self) -> list[int]:
        if isinstance(self.cases_per_class, (list, tuple)):
            return [int(c) for c in self.cases_per_class]
        return [int(self.cases_per_class)] * self.num_classes


# ---------------------------------------------------------------------------
# .fseq files
# ---------------------------------------------------------------------------

def encode_feature_matrix(features) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError("features must be 2-D")
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        offset = _HEADER.size + 4 * int(bad[0])
        raise NonFiniteValue(f"non-finite value at element {int(bad[0])}", offset)
    n, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(FSEQ_MAGIC, FSEQ_VERSION, n, d) + payload


def decode_feature_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != FSEQ_MAGIC:
        raise BadMagic(f"expected magic {FSEQ_MAGIC!r}, got {bytes(buf[:4])!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    _, version, n, d = _HEADER.unpack_from(buf, 0)
    if version != FSEQ_VERSION:
        raise VersionMismatch(f"unsupported fseq version {version}", 4)
    expected = _HEADER.size + 4 * n * d
    if len(buf) != expected:
        raise TruncatedFile(
            f"header declares {n}x{d} values ({expected} bytes), file has {len(buf)} bytes",
            min(len(buf), expected),
        )
    if n < 1 or d < 1:
        raise TruncatedFile(f"empty matrix {n}x{d}", 8)
    arr = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise NonFiniteValue("non-finite value in payload", _HEADER.size + 4 * int(bad[0]))
    return arr.astype(np.float32)


def read_feature_sequence(path) -> FeatureSequence:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return FeatureSequence(case_id=path.stem, features=decode_feature_matrix(buf))


def write_feature_sequence(seq: FeatureSequence, path) -> None:
    """Write ``seq.features`` as float32; refuses non-finite entries."""
    data = encode_feature_matrix(seq.features)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def manifest_from_dict(payload: dict, root=".", check_files=True) -> DatasetManifest:
    try:
        num_classes = int(payload["num_classes"])
        feature_dim = int(payload["feature_dim"])
        raw_cases = payload["cases"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed manifest: {exc}") from exc
    cases = []
    seen = set()
    for raw in raw_cases:
        entry = CaseEntry(
            case_id=str(raw["case_id"]),
            file_path=str(raw["file_path"]),
            label=int(raw["label"]),
            split=str(raw.get("split", "train")),
        )
        if entry.case_id in seen:
            raise ValueError(f"duplicate case_id {entry.case_id!r}")
        seen.add(entry.case_id)
        if not 0 <= entry.label < num_classes:
            raise ValueError(f"case {entry.case_id!r}: label {entry.label} outside [0, {num_classes})")
        if entry.split not in SPLITS:
            raise ValueError(f"case {entry.case_id!r}: unknown split {entry.split!r}")
        cases.append(entry)
    manifest = DatasetManifest(num_classes, feature_dim, cases, Path(root))
    if check_files:
        for entry in cases:
            path = manifest.resolve(entry)
            try:
                with open(path, "rb") as fh:
                    head = fh.read(_HEADER.size)
            except OSError as exc:
                raise IoFailure(f"case {entry.case_id!r}: cannot open {path}: {exc}") from exc
            if head[:4] != FSEQ_MAGIC:
                raise BadMagic(f"case {entry.case_id!r}: {path} is not an fseq file", 0)
            if len(head) < _HEADER.size:
                raise TruncatedFile(f"case {entry.case_id!r}: short header", len(head))
            _, _, _, d = _HEADER.unpack(head)
            if d != feature_dim:
                raise ValueError(f"case {entry.case_id!r}: file has d={d}, manifest says {feature_dim}")
    train_labels = {c.label for c in cases if c.split == "train"}
    missing = set(range(num_classes)) - train_labels
    if cases and missing:
        raise ValueError(f"classes {sorted(missing)} absent from the train split")
    return manifest


def load_manifest(path, check_files=True) -> DatasetManifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_dict(payload, root=path.parent, check_files=check_files)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apportion(total: int, sizes: Sequence[int]) -> list[int]:
    """Distribute ``total`` over groups proportionally (largest remainder)."""
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split_dataset(manifest: DatasetManifest, test_frac: float, val_frac: float, seed: int) -> DatasetManifest:
    """Stratified random split into train/val/test.

    ``round(test_frac * N)`` cases go to test; ``val_frac`` of the remainder
    goes to val.  Per-class counts are apportioned by largest remainder so the
    totals are exact.
    """
    if not (0 < test_frac < 1 and 0 < val_frac < 1):
        raise ValueError("split fractions must lie in (0, 1)")
    n_total = len(manifest.cases)
    by_class: dict[int, list[int]] = {}
    for idx, entry in enumerate(manifest.cases):
        by_class.setdefault(entry.label, []).append(idx)
    labels = sorted(by_class)
    sizes = [len(by_class[c]) for c in labels]

    n_test = _round_half_up(test_frac * n_total)
    test_alloc = _apportion(n_test, sizes)
    remaining = [s - t for s, t in zip(sizes, test_alloc)]
    n_val = _round_half_up(val_frac * sum(remaining))
    val_alloc = _apportion(n_val, remaining)

    for c, rem, v in zip(labels, remaining, val_alloc):
        if rem - v < 1:
            raise TooFewCases(f"class {c} has {sizes[labels.index(c)]} cases; no training case would remain")
    if n_test < 1 or n_val < 1:
        raise TooFewCases(f"{n_total} cases cannot fill non-empty test and val splits")

    rng = np.random.default_rng(seed)
    splits = [""] * n_total
    for c, n_t, n_v in zip(labels, test_alloc, val_alloc):
        idx = np.array(by_class[c])
        perm = idx[rng.permutation(len(idx))]
        for i in perm[:n_t]:
            splits[i] = "test"
        for i in perm[n_t:n_t + n_v]:
            splits[i] = "val"
        for i in perm[n_t + n_v:]:
            splits[i] = "train"
    cases = [CaseEntry(e.case_id, e.file_path, e.label, s) for e, s in zip(manifest.cases, splits)]
    return DatasetManifest(manifest.num_classes, manifest.feature_dim, cases, manifest.root, manifest.synth_stats)


# ---------------------------------------------------------------------------
# synthetic acquisition streams
# ---------------------------------------------------------------------------

def synthesize_case(rng: np.random.Generator, cfg: SynthConfig, label: int):
    """Draw one case. Returns (features, signal_mask, duplicate_mask)."""
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    onset = rng.beta(cfg.onset_alpha, cfg.onset_beta)
    shift = np.zeros(cfg.d)
    shift[label] = cfg.separation
    feats = np.empty((n, cfg.d))
    signal = np.zeros(n, dtype=bool)
    dup = np.zeros(n, dtype=bool)
    source = None
    for t in range(n):
        if t > 0 and rng.random() < cfg.p_dup:
            # re-captures perturb the last fresh frame, so runs of duplicates stay near their source
            feats[t] = source + rng.normal(0.0, cfg.dup_noise, cfg.d)
            signal[t] = signal[t - 1]
            dup[t] = True
            continue
        source = rng.normal(0.0, 1.0, cfg.d)
        if (t + 1) / n >= onset:
            source = source + shift
            signal[t] = True
        feats[t] = source
    return feats, signal, dup


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write one ``.fseq`` file per synthetic case and return an all-train manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    cases = []
    frames = duplicates = signal_frames = 0
    for label, count in enumerate(cfg.counts()):
        for k in range(count):
            feats, signal, dup = synthesize_case(rng, cfg, label)
            case_id = f"c{label}_{k:04d}"
            rel = os.path.join("features", f"{case_id}.fseq")
            write_feature_sequence(FeatureSequence(case_id, feats.astype(np.float32), label), out_dir / rel)
            cases.append(CaseEntry(case_id, rel, label, "train"))
            frames += len(feats)
            duplicates += int(dup.sum())
            signal_frames += int(signal.sum())
    stats = {"cases": len(cases), "frames": frames, "duplicates": duplicates, "signal_frames": signal_frames}
    return DatasetManifest(cfg.num_classes, cfg.d, cases, out_dir, stats)
