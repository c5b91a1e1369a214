"""The full connectome/report model: two encoders, both alignments, classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .alignment import (
    DEFAULT_TAU,
    AlignmentOutputs,
    connectome_alignment_loss,
    connectome_cross_attention,
    connectome_similarity,
    infonce_loss,
    subject_cross_attention,
    subject_similarity,
)
from .autodiff import Tensor
from .connectome import ConnectomeEncoder, transform_values
from .data import Batch, SubjectRecord, stack_batch
from .errors import ConfigError
from .nn import Linear, Module
from .objective import ClassifierHead, ClassWeights, balanced_cross_entropy, total_loss
from .text import TextEncoder


@dataclass
class ModelConfig:
    n_regions: int = 16
    vocab_size: int = 3
    dim: int = 256
    layers: int = 4
    heads: int = 4
    m_max: int = 64
    hidden: int | None = None
    tau: float = DEFAULT_TAU
    subject_attention: str = "degenerate"
    input_transform: str = "log_standardize"
    region_embed: bool = True
    align_projection: bool = False
    use_image: bool = True
    use_text: bool = True
    use_cl: bool = True
    use_sl: bool = True

    def __post_init__(self):
        if not (self.use_image or self.use_text):
            raise ConfigError("at least one modality must be enabled")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.subject_attention not in ("batch", "degenerate"):
            raise ConfigError(f"subject_attention must be 'batch' or 'degenerate', got {self.subject_attention!r}")

    @property
    def aligned(self) -> bool:
        """Alignment terms only exist when both modalities are present."""
        return self.use_image and self.use_text

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutputs:
    logits: Tensor
    x_global: Tensor
    v_global: Tensor
    l_cl: Tensor
    l_sl: Tensor
    l_cls: Tensor | None
    loss: Tensor | None
    alignment: AlignmentOutputs | None


class ConnectomeReportModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.connectome = (
            ConnectomeEncoder(cfg.n_regions, cfg.dim, cfg.layers, cfg.heads, rng, cfg.input_transform, cfg.region_embed)
            if cfg.use_image
            else None
        )
        self.text = TextEncoder(cfg.vocab_size, cfg.m_max, cfg.dim, cfg.layers, cfg.heads, rng) if cfg.use_text else None
        self.head = ClassifierHead(cfg.dim, cfg.hidden or cfg.dim, rng)
        if cfg.align_projection and cfg.aligned:
            self.proj_image = Linear(cfg.dim, cfg.dim, rng)
            self.proj_text = Linear(cfg.dim, cfg.dim, rng)
        else:
            self.proj_image = self.proj_text = None

    def forward(self, batch: Batch, class_weights: ClassWeights | None = None) -> ForwardOutputs:
        """Encode a batch, compute enabled alignment terms and, with weights, the loss."""
        cfg = self.cfg
        b = len(batch)
        zeros = Tensor(np.zeros((b, cfg.dim)))
        if cfg.use_image:
            x_local, x_global = self.connectome.forward(transform_values(batch.sc, cfg.input_transform))
        else:
            x_local, x_global = None, zeros
        if cfg.use_text:
            v_local, v_global = self.text.forward(batch.token_ids, batch.mask)
        else:
            v_local, v_global = None, zeros

        l_cl = l_sl = Tensor(0.0)
        alignment = None
        if cfg.aligned:
            xl, vl, xg, vg = x_local, v_local, x_global, v_global
            if self.proj_image is not None:
                xl, xg = self.proj_image(xl), self.proj_image(xg)
                vl, vg = self.proj_text(vl), self.proj_text(vg)
            text_mask = batch.mask[:, 1:]
            b2t, t2b, attn_b2t, attn_t2b = connectome_cross_attention(xl, vl, text_mask)
            s_cl = connectome_similarity(b2t, t2b)
            b2t_sl, t2b_sl = subject_cross_attention(xg, vg, cfg.subject_attention)
            s_sl = subject_similarity(b2t_sl, t2b_sl)
            alignment = AlignmentOutputs(b2t, t2b, s_cl, attn_b2t.data, attn_t2b.data, b2t_sl, t2b_sl, s_sl)
            if cfg.use_cl:
                l_cl = connectome_alignment_loss(s_cl, text_mask)
            if cfg.use_sl:
                l_sl = infonce_loss(s_sl, cfg.tau)

        logits = self.head(x_global, v_global)
        l_cls = loss = None
        if class_weights is not None:
            l_cls = balanced_cross_entropy(logits, batch.labels, class_weights)
            loss = total_loss(l_cl, l_sl, l_cls, use_cl=cfg.use_cl and cfg.aligned, use_sl=cfg.use_sl and cfg.aligned)
        return ForwardOutputs(logits, x_global, v_global, l_cl, l_sl, l_cls, loss, alignment)

    def predict(self, batch: Batch) -> np.ndarray:
        return np.argmax(self.forward(batch).logits.data, axis=-1)


def predict_records(model: ConnectomeReportModel, records: list[SubjectRecord], batch_size: int = 64) -> np.ndarray:
    """Argmax predictions in record order; reports must already be tokenized."""
    preds = [model.predict(stack_batch(records[s : s + batch_size])) for s in range(0, len(records), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
