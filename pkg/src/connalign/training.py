"""AdamW training of the joint objective, plus checkpoint files.

Checkpoint layout (all integers ASCII, payload little-endian float64)::

    CONNALIGN-CHECKPOINT <version>\\n
    <header byte length>\\n
    <JSON header: configs, vocabulary, epoch, RNG state, tensor table>
    <payload: tensors back to back, offsets relative to payload start>
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Recording
from .data import SubjectRecord, make_batches
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .metrics import compute_metrics
from .model import ConnectomeReportModel, ModelConfig, predict_records
from .objective import ClassWeights
from .text import Vocabulary, build_vocab

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "CONNALIGN-CHECKPOINT"
CHECKPOINT_VERSION = 1

NO_DECAY_SUFFIXES = ("bias", "gamma", "beta", "class_token", "region_embed", "token_embed", "pos_embed")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 32
    batch_size: int = 8
    tau: float = 0.07
    use_cl: bool = True
    use_sl: bool = True
    use_image: bool = True
    use_text: bool = True
    n_regions: int = 16
    dim: int = 256
    layers: int = 4
    heads: int = 4
    m_max: int = 64
    hidden: int | None = None
    subject_attention: str = "degenerate"
    input_transform: str = "log_standardize"
    region_embed: bool = True
    align_projection: bool = False
    min_freq: int = 1
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            n_regions=self.n_regions, vocab_size=vocab_size, dim=self.dim, layers=self.layers, heads=self.heads,
            m_max=self.m_max, hidden=self.hidden, tau=self.tau, subject_attention=self.subject_attention,
            input_transform=self.input_transform, region_embed=self.region_embed,
            align_projection=self.align_projection, use_image=self.use_image, use_text=self.use_text,
            use_cl=self.use_cl, use_sl=self.use_sl,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(0, {n: np.zeros(p.shape) for n, p in params.items()}, {n: np.zeros(p.shape) for n, p in params.items()})


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> OptimizerState:
    """One in-place AdamW update with decoupled weight decay and bias-corrected moments."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = cfg.learning_rate
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {state.m[name].shape}")
        data = p.data
        if cfg.weight_decay and decays(name):
            data -= lr * cfg.weight_decay * data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


# ----------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    model_config: ModelConfig
    class_weights: ClassWeights
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    epoch: int
    rng_state: dict
    vocab: Vocabulary

    def build_model(self) -> ConnectomeReportModel:
        model = ConnectomeReportModel(self.model_config, seed=self.config.seed)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    table = []
    chunks = []
    offset = 0
    named = list(ckpt.params.items())
    named += [(f"optim.m.{n}", a) for n, a in ckpt.optimizer.m.items()]
    named += [(f"optim.v.{n}", a) for n, a in ckpt.optimizer.v.items()]
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "model_config": ckpt.model_config.to_dict(),
        "class_weights": [ckpt.class_weights.w_nc, ckpt.class_weights.w_mci],
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer_step": ckpt.optimizer.step,
        "vocab": ckpt.vocab.tokens,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{len(head)}\n".encode("ascii"))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path, n_regions: int | None = None) -> Checkpoint:
    """Read a checkpoint; ``n_regions`` (if given) must match the stored model."""
    raw = Path(path).read_bytes()
    try:
        magic_end = raw.index(b"\n")
        magic, version = raw[:magic_end].decode("ascii").split(" ")
        len_end = raw.index(b"\n", magic_end + 1)
        head_len = int(raw[magic_end + 1 : len_end])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: not a checkpoint file (bad preamble)") from None
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    start = len_end + 1
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt or truncated header") from None
    payload = raw[start + head_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: corrupt or truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    config = TrainConfig.from_dict(header["config"])
    model_config = ModelConfig(**header["model_config"])
    if n_regions is not None and model_config.n_regions != n_regions:
        raise ShapeError(f"checkpoint was trained with N={model_config.n_regions} regions, data has N={n_regions}")
    params = {n: a for n, a in arrays.items() if not n.startswith("optim.")}
    opt = OptimizerState(
        header["optimizer_step"],
        {n[len("optim.m."):]: a for n, a in arrays.items() if n.startswith("optim.m.")},
        {n[len("optim.v."):]: a for n, a in arrays.items() if n.startswith("optim.v.")},
    )
    ckpt = Checkpoint(
        config, model_config, ClassWeights(*header["class_weights"]), params, opt, header["epoch"],
        header["rng_state"], Vocabulary(header["vocab"]),
    )
    expected = dict(ConnectomeReportModel(model_config).named_parameters())
    for name, p in expected.items():
        if name not in params or params[name].shape != p.shape:
            got = params[name].shape if name in params else None
            raise ShapeError(f"checkpoint tensor {name}: expected shape {p.shape}, found {got}")
    return ckpt


# ----------------------------------------------------------------------
# training loop


def tokenize_records(records: Sequence[SubjectRecord], vocab: Vocabulary, m_max: int) -> list[SubjectRecord]:
    return [replace(r, report=r.report.tokenized(vocab, m_max)) for r in records]


def evaluate_records(model: ConnectomeReportModel, records: Sequence[SubjectRecord]):
    return compute_metrics(predict_records(model, list(records)), [r.label for r in records])


def train(
    config: TrainConfig,
    train_set: Sequence[SubjectRecord],
    eval_set: Sequence[SubjectRecord] = (),
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the full seeded training loop; returns the final checkpoint and per-epoch history."""
    if not train_set:
        raise ConfigError("training set is empty")
    n = train_set[0].sc.region_count
    if n != config.n_regions:
        raise ConfigError(f"config N={config.n_regions} but data has N={n}")
    vocab = build_vocab([r.report.raw_text for r in train_set], config.min_freq)
    train_tok = tokenize_records(train_set, vocab, config.m_max)
    eval_tok = tokenize_records(eval_set, vocab, config.m_max)
    weights = ClassWeights.from_labels([r.label for r in train_set])
    model_cfg = config.model_config(len(vocab))
    model = ConnectomeReportModel(model_cfg, seed=config.seed)
    params = dict(model.named_parameters())
    state = OptimizerState.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        sums = {"L_cl": 0.0, "L_sl": 0.0, "L_cls": 0.0, "L": 0.0}
        batches = make_batches(train_tok, config.batch_size, config.seed, epoch)
        for bi, batch in enumerate(batches):
            try:
                with Recording() as rec:
                    out = model.forward(batch, weights)
                    rec.backward(out.loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch + 1}, batch {bi}: {exc}") from exc
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, config)
            sums["L_cl"] += out.l_cl.item()
            sums["L_sl"] += out.l_sl.item()
            sums["L_cls"] += out.l_cls.item()
            sums["L"] += out.loss.item()
        entry = {"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()}}
        train_m = evaluate_records(model, train_tok)
        entry["train_acc"], entry["train_f1"] = train_m.acc, train_m.f1
        if eval_tok:
            eval_m = evaluate_records(model, eval_tok)
            entry["eval_acc"], entry["eval_f1"] = eval_m.acc, eval_m.f1
        else:
            entry["eval_acc"] = entry["eval_f1"] = None
        history.append(entry)
        logger.info("epoch %d: %s", epoch + 1, entry)
        if on_epoch is not None:
            on_epoch(entry)
    ckpt = Checkpoint(
        config, model_cfg, weights, model.state_dict(), state, config.epochs,
        {"seed": config.seed, "next_epoch": config.epochs}, vocab,
    )
    return ckpt, history
