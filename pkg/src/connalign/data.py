"""Dataset files, stratified splitting, batching, and the planted-signal generator.

On-disk layout of a dataset directory::

    reports.jsonl          one JSON object per line (subject_id, label, age, sex,
                           education, apoe4, mmse, cdr, notes)
    sc/<subject_id>.sc.csv N lines of N comma-separated numbers
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .connectome import SCMatrix
from .errors import ConfigError, ValidationError
from .objective import LABELS, encode_labels
from .text import NARRATIVE_FIELDS, ClinicalReport, Vocabulary, report_from_fields

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
REPORT_KEYS = ("subject_id", "label") + NARRATIVE_FIELDS


@dataclass
class SubjectRecord:
    subject_id: str
    sc: SCMatrix
    report: ClinicalReport
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"subject {self.subject_id}: unknown label {self.label!r}")


# ----------------------------------------------------------------------
# SC matrices


def load_sc(path, tol: float = SYMMETRY_TOL) -> SCMatrix:
    path = Path(path)
    rows: list[list[float]] = []
    with path.open(newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                bad = next(c for c, cell in enumerate(row) if not _is_float(cell))
                raise ValidationError(f"{path}: cannot parse row {r} col {bad}: {row[bad]!r}") from None
    n = len(rows)
    for r, row in enumerate(rows):
        if len(row) != n:
            raise ValidationError(f"{path}: row {r} has {len(row)} values, expected {n}")
    v = np.array(rows, dtype=np.float64).reshape(n, n)
    if (v < 0).any():
        i, j = np.argwhere(v < 0)[0]
        raise ValidationError(f"{path}: negative entry at ({i},{j}): {v[i, j]}")
    diff = np.abs(v - v.T)
    if (diff > tol).any():
        i, j = sorted(np.argwhere(diff > tol)[0])
        raise ValidationError(f"{path}: not symmetric at ({i},{j}): {v[i, j]} vs {v[j, i]}")
    if np.diag(v).any():
        k = int(np.flatnonzero(np.diag(v))[0])
        raise ValidationError(f"{path}: nonzero diagonal at ({k},{k})")
    return SCMatrix((v + v.T) / 2.0)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def save_sc(sc: SCMatrix, path) -> None:
    np.savetxt(path, sc.values, delimiter=",", fmt="%.17g")


# ----------------------------------------------------------------------
# reports


def load_reports(path) -> list[tuple[ClinicalReport, str]]:
    out: list[tuple[ClinicalReport, str]] = []
    seen: set[str] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: expected an object")
            for key in ("subject_id", "label"):
                if key not in rec:
                    raise ValidationError(f"{path}:{lineno}: missing required key {key!r}")
            if rec["label"] not in LABELS:
                raise ValidationError(f"{path}:{lineno}: label must be one of {LABELS}, got {rec['label']!r}")
            if any(isinstance(v, (dict, list)) for v in rec.values()):
                raise ValidationError(f"{path}:{lineno}: values must be scalars")
            sid = str(rec["subject_id"])
            if sid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            out.append((report_from_fields(sid, rec), rec["label"]))
    return out


def save_reports(records: Sequence[SubjectRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            rec = {"subject_id": r.subject_id, "label": r.label}
            rec.update({k: v for k, v in r.report.structured.items() if v is not None})
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def save_dataset(records: Sequence[SubjectRecord], root) -> None:
    root = Path(root)
    (root / "sc").mkdir(parents=True, exist_ok=True)
    save_reports(records, root / "reports.jsonl")
    for r in records:
        save_sc(r.sc, root / "sc" / f"{r.subject_id}.sc.csv")


def load_dataset(root) -> list[SubjectRecord]:
    root = Path(root)
    reports = root / "reports.jsonl"
    if not reports.is_file():
        raise FileNotFoundError(f"{root}: no reports.jsonl")
    records = []
    n = None
    for report, label in load_reports(reports):
        sc_path = root / "sc" / f"{report.subject_id}.sc.csv"
        if not sc_path.is_file():
            raise FileNotFoundError(f"missing SC matrix for subject {report.subject_id}: {sc_path}")
        sc = load_sc(sc_path)
        if n is None:
            n = sc.region_count
        elif sc.region_count != n:
            raise ValidationError(f"subject {report.subject_id}: N={sc.region_count}, dataset N={n}")
        records.append(SubjectRecord(report.subject_id, sc, report, label))
    return records


# ----------------------------------------------------------------------
# splitting and batching


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train fraction must lie in (0, 1), got {self.train_fraction}")


def stratified_split(records: Sequence[SubjectRecord], spec: SplitSpec = SplitSpec()):
    """Per-class seeded shuffle and floor(fraction * n_c) train picks; order of input is kept."""
    rng = np.random.default_rng(spec.seed)
    groups = {lab: [i for i, r in enumerate(records) if r.label == lab] for lab in LABELS} if spec.stratify else {
        "all": list(range(len(records)))
    }
    train_idx: list[int] = []
    for lab, idx in groups.items():
        if len(idx) < 2:
            raise ValidationError(f"class {lab} has {len(idx)} records; at least 2 needed to split")
        perm = rng.permutation(len(idx))
        k = int(np.floor(spec.train_fraction * len(idx)))
        train_idx.extend(idx[p] for p in perm[:k])
    chosen = set(train_idx)
    train = [r for i, r in enumerate(records) if i in chosen]
    test = [r for i, r in enumerate(records) if i not in chosen]
    return train, test


@dataclass
class Batch:
    subject_ids: list[str]
    sc: np.ndarray  # (B, N, N) raw fiber counts
    token_ids: np.ndarray  # (B, M)
    mask: np.ndarray  # (B, M) true on real tokens
    labels: np.ndarray  # (B,) 0 = NC, 1 = MCI

    def __len__(self) -> int:
        return len(self.subject_ids)


def stack_batch(records: Sequence[SubjectRecord], vocab: Vocabulary | None = None, m_max: int | None = None) -> Batch:
    reports = []
    for r in records:
        rep = r.report
        if vocab is not None:
            rep = rep.tokenized(vocab, m_max)
        elif rep.token_ids is None:
            raise ValidationError(f"subject {r.subject_id}: report not tokenized and no vocabulary given")
        reports.append(rep)
    return Batch(
        [r.subject_id for r in records],
        np.stack([r.sc.values for r in records]),
        np.stack([rep.token_ids for rep in reports]),
        np.stack([rep.mask for rep in reports]),
        encode_labels([r.label for r in records]),
    )


def make_batches(
    records: Sequence[SubjectRecord],
    batch_size: int = 8,
    seed: int = 0,
    epoch: int = 0,
    vocab: Vocabulary | None = None,
    m_max: int | None = None,
) -> list[Batch]:
    """Epoch-seeded shuffle into batches; the last partial batch is kept."""
    if not records:
        raise ValidationError("cannot batch an empty record list")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    return [
        stack_batch([records[i] for i in order[s : s + batch_size]], vocab, m_max)
        for s in range(0, len(records), batch_size)
    ]


# ----------------------------------------------------------------------
# synthetic data

FILLER_WORDS = (
    "patient", "reports", "visit", "follow", "up", "family", "history", "noted", "stable", "mood",
    "appetite", "normal", "gait", "reviewed", "medication", "blood", "pressure", "controlled",
    "lives", "with", "spouse", "independent", "daily", "activities", "hearing", "vision",
    "corrected", "denies", "headache", "exercise", "walks", "weekly", "retired", "teacher",
    "accompanied", "by", "daughter", "screening", "performed", "today", "sleep", "fair",
)

DEFAULT_PLANTED = (
    (2, "phosphorylated_tau"),
    (7, "amyloid_beta"),
    (11, "hippocampal_atrophy"),
)


@dataclass
class PlantedPair:
    region: int
    token: str
    delta: float = 0.2
    p_present: float = 0.9
    p_absent: float = 0.05


@dataclass
class SyntheticConfig:
    """Generator settings.

    ``region_sigma`` spreads each subject's per-region connection strength
    log-normally, so the planted attenuation is a shift within that spread.
    ``filler_words`` bounds the neutral words written into notes before the
    planted tokens; long notes push planted tokens past the tokenizer limit.
    """

    n_regions: int = 16
    subjects_per_class: int = 200
    planted: list[PlantedPair] = field(default_factory=lambda: [PlantedPair(r, t) for r, t in DEFAULT_PLANTED])
    mean_fibers: float = 50.0
    region_sigma: float = 1.1
    noise: float = 0.1
    filler_words: tuple[int, int] = (5, 40)
    seed: int = 7

    def __post_init__(self):
        self.planted = [
            p if isinstance(p, PlantedPair) else PlantedPair(**p) if isinstance(p, dict) else PlantedPair(*p)
            for p in self.planted
        ]
        self.filler_words = tuple(self.filler_words)
        if self.n_regions < 2:
            raise ConfigError("n_regions must be >= 2")
        if self.subjects_per_class < 1:
            raise ConfigError("subjects_per_class must be >= 1")
        for p in self.planted:
            if not 0 <= p.region < self.n_regions:
                raise ConfigError(f"planted region {p.region} outside [0, {self.n_regions})")
            if not 0.0 < p.delta <= 1.0:
                raise ConfigError(f"planted attenuation must lie in (0, 1], got {p.delta}")
            if not (0.0 <= p.p_present <= 1.0 and 0.0 <= p.p_absent <= 1.0):
                raise ConfigError(f"planted probabilities must lie in [0, 1]: {p}")
        lo, hi = self.filler_words
        if not 0 <= lo <= hi:
            raise ConfigError(f"filler_words must satisfy 0 <= lo <= hi, got {self.filler_words}")
        if self.mean_fibers <= 0 or self.region_sigma < 0 or self.noise < 0:
            raise ConfigError("mean_fibers must be positive; region_sigma and noise non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filler_words"] = list(self.filler_words)
        return d


def _synthetic_sc(cfg: SyntheticConfig, is_mci: bool, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_regions
    strength = np.exp(cfg.region_sigma * rng.standard_normal(n))
    rate = cfg.mean_fibers * np.outer(strength, strength)
    counts = np.triu(rng.poisson(rate).astype(np.float64), k=1)
    counts = counts + counts.T
    if is_mci:
        for p in cfg.planted:
            counts[p.region, :] *= p.delta
            counts[:, p.region] *= p.delta
    if cfg.noise > 0:
        jitter = np.triu(rng.normal(0.0, cfg.noise * cfg.mean_fibers, (n, n)), k=1)
        counts = counts + jitter + jitter.T
    counts = np.round(np.clip(counts, 0.0, None))
    np.fill_diagonal(counts, 0.0)
    return counts


def _synthetic_fields(cfg: SyntheticConfig, is_mci: bool, rng: np.random.Generator) -> dict:
    if is_mci:
        age = rng.normal(72.0, 7.0)
        mmse = np.clip(np.round(rng.normal(27.0, 1.8)), 20, 30)
        cdr = 0.5 if rng.random() < 0.5 else 0.0
        apoe4 = rng.choice(3, p=[0.5, 0.38, 0.12])
    else:
        age = rng.normal(71.0, 6.0)
        mmse = np.clip(np.round(rng.normal(28.3, 1.4)), 20, 30)
        cdr = 0.5 if rng.random() < 0.2 else 0.0
        apoe4 = rng.choice(3, p=[0.68, 0.27, 0.05])
    lo, hi = cfg.filler_words
    words = list(rng.choice(FILLER_WORDS, size=int(rng.integers(lo, hi + 1))))
    for p in cfg.planted:
        if rng.random() < (p.p_present if is_mci else p.p_absent):
            words.append(p.token)
    return {
        "age": int(np.round(age)),
        "sex": "female" if rng.random() < 0.5 else "male",
        "education": int(rng.integers(12, 21)),
        "apoe4": int(apoe4),
        "mmse": int(mmse),
        "cdr": float(cdr),
        "notes": " ".join(words) if words else None,
    }


def generate_synthetic(cfg: SyntheticConfig) -> list[SubjectRecord]:
    """Paired SC matrices and reports with planted region/token associations.

    Subject ``i`` draws from its own stream seeded by (seed, i), so output
    order and content do not depend on evaluation order.
    """
    records = []
    total = 2 * cfg.subjects_per_class
    for i in range(total):
        is_mci = i % 2 == 1
        rng = np.random.default_rng([cfg.seed, i])
        sid = f"sub-{i:04d}"
        sc = SCMatrix(_synthetic_sc(cfg, is_mci, rng))
        report = report_from_fields(sid, _synthetic_fields(cfg, is_mci, rng))
        records.append(SubjectRecord(sid, sc, report, LABELS[int(is_mci)]))
    logger.debug("generated %d synthetic subjects", total)
    return records


def ground_truth(cfg: SyntheticConfig) -> dict:
    return {
        "planted": [
            {"region": p.region, "region_name": f"R{p.region:03d}", "token": p.token, "delta": p.delta,
             "p_present": p.p_present, "p_absent": p.p_absent}
            for p in cfg.planted
        ]
    }
