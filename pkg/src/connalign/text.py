"""Clinical narratives: template rendering, word-level vocabulary, tokenization, encoder.

The report encoder is a small transformer trained from scratch that exposes the
same interface a pretrained language model would: token-level features
``V_local`` and a report-level feature ``V_global`` read at the [CLS] slot.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError
from .nn import Module, TransformerLayer, parameter, trunc_normal

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

NARRATIVE_FIELDS = ("age", "sex", "education", "apoe4", "mmse", "cdr", "notes")

# Multi-word clinical terms kept as one token by joining with underscores.
CLINICAL_TERMS = (
    "phosphorylated tau",
    "total tau",
    "amyloid beta",
    "amyloid plaques",
    "neurofibrillary tangles",
    "memory complaint",
    "short term memory",
    "word finding",
    "executive dysfunction",
    "posterior cingulate",
    "medial temporal",
    "white matter",
    "grey matter",
    "hippocampal atrophy",
    "cortical thinning",
    "visuospatial deficit",
    "sleep disturbance",
)

_TERM_PATTERNS = [
    (re.compile(r"\b" + r"[\s\-]+".join(map(re.escape, term.split())) + r"\b", re.IGNORECASE), term.replace(" ", "_"))
    for term in sorted(CLINICAL_TERMS, key=len, reverse=True)
]
_WORD = re.compile(r"\w+")


def join_clinical_terms(text: str) -> str:
    for pattern, joined in _TERM_PATTERNS:
        text = pattern.sub(joined, text)
    return text


def _fmt(value) -> str:
    if value is None or (isinstance(value, str) and not value.strip()):
        return "unknown"
    if isinstance(value, float):
        if not np.isfinite(value):
            return "unknown"
        return str(int(value)) if value.is_integer() else f"{value:g}"
    return str(value).strip()


def compose_narrative(fields: Mapping[str, object]) -> str:
    """Render structured fields and notes into one narrative string.

    Missing fields render as ``unknown``. Output is byte-identical for equal input.
    """
    f = {k: _fmt(fields.get(k)) for k in NARRATIVE_FIELDS}
    edu = f["education"] if f["education"] == "unknown" else f"{f['education']} years"
    text = (
        f"age {f['age']}. sex {f['sex']}. education {edu}. apoe4 {f['apoe4']}. "
        f"mmse {f['mmse']}. cdr {f['cdr']}. notes: {f['notes']}"
    )
    return join_clinical_terms(text)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; underscores stay inside tokens."""
    return _WORD.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValidationError(f"vocabulary must start with {RESERVED}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    if not corpus:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in split_words(text))
    for r in RESERVED:
        counts.pop(r.lower(), None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def tokenize(text: str, vocab: Vocabulary, m_max: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] + word ids, truncated from the end to ``m_max`` and padded with [PAD]."""
    if m_max < 1:
        raise ConfigError(f"M_max must be >= 1, got {m_max}")
    ids = [CLS_ID] + [vocab.id(w) for w in split_words(text)]
    ids = ids[:m_max]
    n = len(ids)
    token_ids = np.full(m_max, PAD_ID, dtype=np.int64)
    token_ids[:n] = ids
    mask = np.zeros(m_max, dtype=bool)
    mask[:n] = True
    return token_ids, mask


def detokenize(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in token_ids if i not in (PAD_ID, CLS_ID))


@dataclass
class ClinicalReport:
    subject_id: str
    raw_text: str
    structured: dict = field(default_factory=dict)
    token_ids: np.ndarray | None = None
    mask: np.ndarray | None = None

    def tokenized(self, vocab: Vocabulary, m_max: int) -> "ClinicalReport":
        ids, mask = tokenize(self.raw_text, vocab, m_max)
        return ClinicalReport(self.subject_id, self.raw_text, dict(self.structured), ids, mask)


def report_from_fields(subject_id: str, fields: Mapping[str, object]) -> ClinicalReport:
    structured = {k: fields.get(k) for k in NARRATIVE_FIELDS}
    return ClinicalReport(subject_id, compose_narrative(fields), structured)


class TextEncoder(Module):
    def __init__(self, vocab_size: int, m_max: int, dim: int, layers: int, heads: int, rng: np.random.Generator):
        self.m_max = m_max
        self.token_embed = parameter(trunc_normal(rng, (vocab_size, dim)))
        self.pos_embed = parameter(trunc_normal(rng, (m_max, dim)))
        self.layers = [TransformerLayer(dim, heads, rng) for _ in range(layers)]

    def forward(self, token_ids, mask) -> tuple[Tensor, Tensor]:
        """ids/mask (..., T) -> (V_local (..., T-1, D), V_global (..., D)).

        ``mask`` is true on real tokens. Rows of V_local at padded positions are zero.
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        t = token_ids.shape[-1]
        if t > self.m_max:
            raise ConfigError(f"sequence length {t} exceeds M_max={self.m_max}")
        h = ad.embedding(self.token_embed, token_ids) + self.pos_embed[:t]
        for layer in self.layers:
            h = layer(h, key_padding_mask=~mask)
        v_local = h[..., 1:, :] * mask[..., 1:, None].astype(np.float64)
        return v_local, h[..., 0, :]

    def encode_text(self, token_ids, mask) -> tuple[Tensor, Tensor]:
        """Single report: (V_local (M-1)×D, V_global 1×D)."""
        v_local, v_global = self.forward(token_ids, mask)
        return v_local, v_global.reshape(1, -1)
