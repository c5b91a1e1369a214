"""Attention-based interpretation: critical subnetworks, disease-related tokens, ablations.

Subnetwork salience is the row-max of brain-to-text attention, averaged over
MCI subjects. A token's per-subject salience is the row-max of its
text-to-brain attention (averaged over its occurrences in that report, 0 when
absent); its influence is the absolute MCI-minus-NC gap in group means.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SubjectRecord, stack_batch
from .errors import ValidationError
from .metrics import compute_metrics
from .model import ConnectomeReportModel, predict_records
from .text import RESERVED, Vocabulary

REGION_SALIENCE = ("max", "mean")


@dataclass
class InteractionReport:
    subnetworks: list[dict] = field(default_factory=list)
    tokens: list[dict] = field(default_factory=list)
    voting: list[dict] = field(default_factory=list)
    salience: list[dict] = field(default_factory=list)
    influence: list[dict] = field(default_factory=list)


def _ranked(scores: dict, k: int | None = None) -> list:
    """Keys sorted by descending score, ties by ascending key."""
    order = sorted(scores, key=lambda key: (-scores[key], key))
    return order if k is None else order[:k]


def _attention(model: ConnectomeReportModel, records: Sequence[SubjectRecord], batch_size: int = 64):
    """Per-subject (attn_b2t N×M', attn_t2b M'×N, token ids M', valid mask M')."""
    if model is None or not model.cfg.aligned:
        raise ValidationError("interpretation needs a model with both modalities")
    out = []
    for s in range(0, len(records), batch_size):
        batch = stack_batch(records[s : s + batch_size])
        align = model.forward(batch).alignment
        for i in range(len(batch)):
            out.append((align.attn_b2t[i], align.attn_t2b[i], batch.token_ids[i, 1:], batch.mask[i, 1:]))
    return out


def _region_names(records: Sequence[SubjectRecord]) -> list[str]:
    return records[0].sc.region_names


def top_subnetworks(
    model: ConnectomeReportModel,
    records: Sequence[SubjectRecord],
    vocab: Vocabulary,
    k: int = 6,
    k_tokens: int = 5,
    k_connections: int = 5,
    salience: str = "max",
) -> InteractionReport:
    """Rank regions by brain-to-text attention salience over MCI subjects."""
    if salience not in REGION_SALIENCE:
        raise ValidationError(f"salience must be one of {REGION_SALIENCE}")
    mci = [r for r in records if r.label == "MCI"]
    if not mci:
        raise ValidationError("no MCI subjects to interpret")
    names = _region_names(mci)
    n = len(names)
    attn = _attention(model, mci)
    per_subject = np.empty((len(mci), n))
    for s, (b2t, _, _, valid) in enumerate(attn):
        rows = b2t[:, valid]
        per_subject[s] = rows.max(axis=1) if salience == "max" else rows.mean(axis=1)
    score = per_subject.mean(axis=0)
    ranking = _ranked({i: score[i] for i in range(n)})
    top = ranking[:k]

    votes = np.zeros(n, dtype=int)
    for s in range(len(mci)):
        for i in _ranked({i: per_subject[s, i] for i in range(n)}, k):
            votes[i] += 1

    mean_sc = np.mean([r.sc.values for r in mci], axis=0)
    subnetworks = []
    for i in top:
        sums: dict[int, float] = defaultdict(float)
        counts: dict[int, int] = defaultdict(int)
        for b2t, _, ids, valid in attn:
            for j in np.flatnonzero(valid):
                sums[int(ids[j])] += b2t[i, j]
                counts[int(ids[j])] += 1
        tok_scores = {t: sums[t] / counts[t] for t in sums if vocab.tokens[t] not in RESERVED}
        conn = {j: mean_sc[i, j] for j in range(n) if j != i}
        subnetworks.append({
            "region_index": i,
            "region": names[i],
            "salience": float(score[i]),
            "tokens": [{"token": vocab.tokens[t], "score": float(tok_scores[t])} for t in _ranked(tok_scores, k_tokens)],
            "connections": [
                {"region": names[j], "mean_fibers": float(conn[j])} for j in _ranked(conn, k_connections)
            ],
        })
    return InteractionReport(
        subnetworks=subnetworks,
        voting=[{"region": names[i], "votes": int(votes[i])} for i in _ranked({i: votes[i] for i in range(n)})],
        salience=[{"region_index": i, "region": names[i], "score": float(score[i])} for i in ranking],
    )


def top_tokens(
    model: ConnectomeReportModel,
    records: Sequence[SubjectRecord],
    vocab: Vocabulary,
    k: int = 5,
    k_regions: int = 5,
) -> InteractionReport:
    """Rank tokens by the MCI-vs-NC gap in text-to-brain attention salience."""
    labels = {r.label for r in records}
    if labels != {"NC", "MCI"}:
        raise ValidationError(f"both NC and MCI subjects needed, got {sorted(labels)}")
    names = _region_names(records)
    attn = _attention(model, records)
    group_sum = {"NC": defaultdict(float), "MCI": defaultdict(float)}
    group_n = {"NC": 0, "MCI": 0}
    region_sum: dict[int, np.ndarray] = {}
    region_cnt: dict[int, int] = defaultdict(int)
    for rec, (_, t2b, ids, valid) in zip(records, attn):
        group_n[rec.label] += 1
        occ: dict[int, list[float]] = defaultdict(list)
        for j in np.flatnonzero(valid):
            t = int(ids[j])
            occ[t].append(t2b[j].max())
            region_sum[t] = region_sum.get(t, 0.0) + t2b[j]
            region_cnt[t] += 1
        for t, vals in occ.items():
            group_sum[rec.label][t] += float(np.mean(vals))
    candidates = sorted(t for t in region_cnt if vocab.tokens[t] not in RESERVED)
    mci = {t: group_sum["MCI"][t] / group_n["MCI"] for t in candidates}
    nc = {t: group_sum["NC"][t] / group_n["NC"] for t in candidates}
    influence = {t: abs(mci[t] - nc[t]) for t in candidates}
    ranking = _ranked(influence)
    tokens = []
    for t in ranking[:k]:
        per_region = region_sum[t] / region_cnt[t]
        tokens.append({
            "token": vocab.tokens[t],
            "influence": float(influence[t]),
            "score_mci": float(mci[t]),
            "score_nc": float(nc[t]),
            "regions": [
                {"region": names[i], "score": float(per_region[i])}
                for i in _ranked({i: per_region[i] for i in range(len(names))}, k_regions)
            ],
        })
    return InteractionReport(
        tokens=tokens,
        influence=[
            {"token": vocab.tokens[t], "score_mci": float(mci[t]), "score_nc": float(nc[t]), "diff": float(mci[t] - nc[t])}
            for t in ranking
        ],
    )


def interpret(model, records, vocab, k_subnets: int = 6, k_tokens: int = 5) -> InteractionReport:
    sub = top_subnetworks(model, records, vocab, k=k_subnets)
    tok = top_tokens(model, records, vocab, k=k_tokens)
    return replace(sub, tokens=tok.tokens, influence=tok.influence)


def write_interaction_report(report: InteractionReport, out_dir) -> dict[str, Path]:
    """Structured text report plus the three companion CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "interaction_report.txt",
        "salience": out / "subnetwork_salience.csv",
        "influence": out / "token_influence.csv",
        "interactions": out / "interactions.csv",
    }
    with paths["report"].open("w", encoding="utf-8") as fh:
        for rank, sub in enumerate(report.subnetworks, start=1):
            fh.write(f"subnetwork.{rank}.region = {sub['region']}\n")
            fh.write(f"subnetwork.{rank}.salience = {sub['salience']:.6g}\n")
            for i, t in enumerate(sub["tokens"], start=1):
                fh.write(f"subnetwork.{rank}.token.{i} = {t['token']} ({t['score']:.6g})\n")
            for i, c in enumerate(sub["connections"], start=1):
                fh.write(f"subnetwork.{rank}.connection.{i} = {c['region']} ({c['mean_fibers']:.6g})\n")
        for rank, tok in enumerate(report.tokens, start=1):
            fh.write(f"token.{rank}.token = {tok['token']}\n")
            fh.write(f"token.{rank}.influence = {tok['influence']:.6g}\n")
            fh.write(f"token.{rank}.score_mci = {tok['score_mci']:.6g}\n")
            fh.write(f"token.{rank}.score_nc = {tok['score_nc']:.6g}\n")
            for i, r in enumerate(tok["regions"], start=1):
                fh.write(f"token.{rank}.region.{i} = {r['region']} ({r['score']:.6g})\n")
        for v in report.voting:
            fh.write(f"vote.{v['region']} = {v['votes']}\n")
    _write_csv(paths["salience"], ("region", "score"), [(s["region"], s["score"]) for s in report.salience])
    _write_csv(
        paths["influence"],
        ("token", "score_mci", "score_nc", "diff"),
        [(t["token"], t["score_mci"], t["score_nc"], t["diff"]) for t in report.influence],
    )
    _write_csv(
        paths["interactions"],
        ("region", "token", "weight"),
        [(s["region"], t["token"], t["score"]) for s in report.subnetworks for t in s["tokens"]],
    )
    return paths


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


# ----------------------------------------------------------------------
# ablations

ABLATIONS = (
    ("A", "I-only", {"use_text": False}),
    ("A", "C-only", {"use_image": False}),
    ("B", "w/o L_cl+L_sl", {"use_cl": False, "use_sl": False}),
    ("B", "w/o L_cl", {"use_cl": False}),
)


def run_ablation_suite(base_config, train_set, test_set, on_run=None) -> list[dict]:
    """Train the full model and each ablation; one metrics row per (group, variant).

    The full model is trained once and reported in both groups.
    """
    from .training import evaluate_records, tokenize_records, train

    def run(cfg):
        ckpt, _ = train(cfg, train_set)
        model = ckpt.build_model()
        return evaluate_records(model, tokenize_records(test_set, ckpt.vocab, cfg.m_max))

    results = {"full": run(base_config)}
    if on_run:
        on_run("full", results["full"])
    for _, name, flags in ABLATIONS:
        results[name] = run(replace(base_config, **flags))
        if on_run:
            on_run(name, results[name])
    rows = []
    for group in ("A", "B"):
        for g, name, _ in ABLATIONS:
            if g == group:
                rows.append({"group": group, "variant": name, **_metric_cols(results[name])})
        rows.append({"group": group, "variant": "full", **_metric_cols(results["full"])})
    return rows


def _metric_cols(m) -> dict:
    return {"acc": m.acc, "sen": m.sen, "spe": m.spe, "f1": m.f1}


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text table; floats in [0, 1] are shown as percentages."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def cell(v):
        if isinstance(v, float):
            return f"{100 * v:.2f}" if 0.0 <= v <= 1.0 else f"{v:.4g}"
        return "" if v is None else str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_jsonl(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
