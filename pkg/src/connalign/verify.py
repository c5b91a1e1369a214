"""Invariant suite: gradient checks, oracle equivalences, loss identities, masking laws.

Each check returns a :class:`CheckResult`; :func:`run_verification` runs them
all in a fixed order. Primitives are looked up on the ``autodiff`` module at
call time, so a patched primitive is what gets checked.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import reference as ref
from .alignment import (
    connectome_alignment_loss,
    connectome_cross_attention,
    connectome_similarity,
    infonce_loss,
    subject_cross_attention,
    subject_similarity,
)
from .autodiff import Recording, Tensor, grad_check
from .data import Batch
from .model import ConnectomeReportModel, ModelConfig
from .nn import TransformerLayer
from .objective import ClassWeights, balanced_cross_entropy

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
SEEDS = 20


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


# ----------------------------------------------------------------------
# primitive gradient checks


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(out, Tensor(w)))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-valued probe per primitive, drawn from ``rng``."""

    def p(*shape, positive=False, away_from_zero=False):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)
        return Tensor(x, requires_grad=True)

    a, b = p(3, 4), p(3, 4)
    row = p(1, 4)
    s = p(3, 4)
    w34 = rng.standard_normal((3, 4))
    m1, m2 = p(3, 5), p(5, 2)
    w32 = rng.standard_normal((3, 2))
    pos = p(3, 4, positive=True)
    nz = p(3, 4, away_from_zero=True)
    cat1, cat2 = p(2, 4), p(3, 4)
    w54 = rng.standard_normal((5, 4))
    table = p(6, 4)
    ids = rng.integers(0, 6, size=(5,))
    fill_mask = rng.random((3, 4)) < 0.3
    valid = rng.random((3, 4)) < 0.7
    valid[:, 0] = True
    x_ln, gamma, beta = p(3, 4), p(4), p(4)
    clamp_in = Tensor(np.clip(rng.standard_normal((3, 4)), -0.9, 0.9), requires_grad=True)
    clamp_in.data[np.abs(np.abs(clamp_in.data) - 0.5) < 0.05] += 0.1

    return {
        "add": (lambda: _weighted_sum(ad.add(a, row), w34), [a, row]),
        "sub": (lambda: _weighted_sum(ad.sub(a, b), w34), [a, b]),
        "mul": (lambda: _weighted_sum(ad.mul(a, b), w34), [a, b]),
        "scale": (lambda: _weighted_sum(ad.scale(a, -1.7), w34), [a]),
        "transpose": (lambda: _weighted_sum(ad.transpose(a), w34.T), [a]),
        "reshape": (lambda: _weighted_sum(ad.reshape(a, (4, 3)), w34.reshape(4, 3)), [a]),
        "concat": (lambda: _weighted_sum(ad.concat([cat1, cat2], axis=0), w54[:5]), [cat1, cat2]),
        "row_select": (lambda: _weighted_sum(ad.getitem(a, np.array([2, 0, 2])), w34), [a]),
        "sum": (lambda: _weighted_sum(ad.sum_(a, axis=0), w34[0]), [a]),
        "mean": (lambda: _weighted_sum(ad.mean(a, axis=1), w34[:, 0]), [a]),
        "log": (lambda: _weighted_sum(ad.log(pos), w34), [pos]),
        "exp": (lambda: _weighted_sum(ad.exp(a), w34), [a]),
        "relu": (lambda: _weighted_sum(ad.relu(nz), w34), [nz]),
        "gelu": (lambda: _weighted_sum(ad.gelu(a), w34), [a]),
        "clamp": (lambda: _weighted_sum(ad.clamp(clamp_in, -0.5, 0.5), w34), [clamp_in]),
        "embedding": (lambda: _weighted_sum(ad.embedding(table, ids), w54), [table]),
        "masked_fill": (lambda: _weighted_sum(ad.masked_fill(a, fill_mask, 2.0), w34), [a]),
        "matmul": (lambda: _weighted_sum(ad.matmul(m1, m2), w32), [m1, m2]),
        "softmax": (lambda: _weighted_sum(ad.softmax(s, axis=-1, valid=valid), w34), [s]),
        "log_softmax": (lambda: _weighted_sum(ad.log_softmax(s, axis=0), w34), [s]),
        "log_softmax_masked": (lambda: _weighted_sum(ad.log_softmax(s, axis=-1, valid=valid), w34), [s]),
        "layer_norm": (lambda: _weighted_sum(ad.layer_norm(x_ln, gamma, beta), w34), [x_ln, gamma, beta]),
        "l2_normalize": (lambda: _weighted_sum(ad.l2_normalize(a), w34), [a]),
        "shared_leaf": (lambda: _weighted_sum(ad.add(ad.mul(a, a), ad.exp(a)), w34), [a]),
    }


def check_primitive_gradients(seeds: int = SEEDS) -> list[CheckResult]:
    worst: dict[str, float] = {}
    start = time.perf_counter()
    for seed in range(seeds):
        for name, (f, params) in _primitive_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, params))
    per = (time.perf_counter() - start) / max(1, len(worst))
    return [CheckResult(f"grad[{n}]", v < GRAD_TOL, v, GRAD_TOL, per) for n, v in worst.items()]


# ----------------------------------------------------------------------
# tiny model instance


TINY = dict(n_regions=6, m_tokens=8, dim=16, batch=4, layers=2, heads=2, vocab=20)


def tiny_instance(seed: int = 0, subject_attention: str = "degenerate", **overrides):
    """Seeded model, batch and class weights at the smallest acceptance size."""
    size = {**TINY, **overrides}
    rng = np.random.default_rng(seed)
    n, m, b = size["n_regions"], size["m_tokens"], size["batch"]
    cfg = ModelConfig(
        n_regions=n, vocab_size=size["vocab"], dim=size["dim"], layers=size["layers"], heads=size["heads"],
        m_max=m + 1, subject_attention=subject_attention,
    )
    model = ConnectomeReportModel(cfg, seed=seed)
    # larger-than-default weights so attention maps are far from uniform
    for name, prm in model.named_parameters():
        if not name.endswith(("gamma", "beta", "bias")):
            prm.data[...] = rng.standard_normal(prm.shape) * 0.3
    sc = rng.poisson(20.0, (b, n, n)).astype(np.float64)
    sc = np.triu(sc, 1)
    sc = sc + np.swapaxes(sc, 1, 2)
    lengths = rng.integers(3, m + 1, size=b)
    lengths[0] = m
    mask = np.arange(m + 1)[None, :] <= lengths[:, None]
    ids = np.where(mask, rng.integers(3, size["vocab"], (b, m + 1)), 0)
    ids[:, 0] = 2
    labels = np.array([i % 2 for i in range(b)])
    batch = Batch([f"s{i}" for i in range(b)], sc, ids, mask, labels)
    return model, batch, ClassWeights(1.0, 1.5)


def check_objective_gradients(seed: int = 0, max_entries: int = 4) -> list[CheckResult]:
    """Each loss term and the total against central differences on the tiny instance."""
    out = []
    for mode in ("degenerate", "batch"):
        model, batch, weights = tiny_instance(seed, mode)
        params = model.parameters()
        terms = {
            "L_cl": lambda: model.forward(batch, weights).l_cl,
            "L_sl": lambda: model.forward(batch, weights).l_sl,
            "L_cls": lambda: model.forward(batch, weights).l_cls,
            "L": lambda: model.forward(batch, weights).loss,
        }
        for name, f in terms.items():
            start = time.perf_counter()
            err = grad_check(f, params, max_entries=max_entries, seed=seed)
            out.append(CheckResult(f"grad[{name}, {mode}]", err < GRAD_TOL, err, GRAD_TOL, time.perf_counter() - start))
    return out


def check_layer_gradient(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(8, 2, rng)
    for _, prm in layer.named_parameters():
        prm.data[...] += rng.standard_normal(prm.shape) * 0.2
    x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
    pad = np.zeros((2, 5), dtype=bool)
    pad[1, 3:] = True
    w = rng.standard_normal((2, 5, 8))
    start = time.perf_counter()
    err = grad_check(lambda: _weighted_sum(layer(x, pad), w), [x] + layer.parameters())
    return CheckResult("grad[transformer layer]", err < GRAD_TOL, err, GRAD_TOL, time.perf_counter() - start)


# ----------------------------------------------------------------------
# oracle equivalence


def _random_alignment_inputs(rng: np.random.Generator):
    n, m, d, b = rng.integers(2, 7), rng.integers(2, 9), rng.integers(2, 9), rng.integers(2, 6)
    x_local = rng.standard_normal((n, d))
    v_local = rng.standard_normal((m, d))
    valid = rng.random(m) < 0.7
    valid[rng.integers(m)] = True
    xg = rng.standard_normal((b, d))
    vg = rng.standard_normal((b, d))
    logits = rng.standard_normal((b, 2)) * 2
    labels = rng.integers(0, 2, b)
    return x_local, v_local, valid, xg, vg, logits, labels


def oracle_discrepancies(seed: int) -> dict[str, float]:
    """Max abs difference per quantity between the vectorized path and the loop reference."""
    rng = np.random.default_rng(seed)
    x_local, v_local, valid, xg, vg, logits, labels = _random_alignment_inputs(rng)
    tau = float(rng.uniform(0.05, 1.0))
    weights = ClassWeights(*rng.uniform(0.5, 2.0, 2))
    diff = {}

    b2t, t2b, a_bt, a_tb = connectome_cross_attention(Tensor(x_local), Tensor(v_local), valid)
    r_b2t, r_abt = ref.cross_attention(x_local, v_local, list(valid))
    r_t2b, r_atb = ref.cross_attention(v_local, x_local)
    diff["connectome cross-attention"] = max(
        np.abs(b2t.data - r_b2t).max(), np.abs(t2b.data - r_t2b).max(),
        np.abs(a_bt.data - r_abt).max(), np.abs(a_tb.data - r_atb).max(),
    )
    s_cl = connectome_similarity(b2t, t2b)
    r_scl = ref.cosine_matrix(r_b2t, r_t2b)
    diff["S_cl"] = np.abs(s_cl.data - r_scl).max()
    diff["L_cl"] = abs(connectome_alignment_loss(s_cl, valid).item() - ref.connectome_loss(r_scl, list(valid)))

    b2t_sl, t2b_sl = subject_cross_attention(Tensor(xg), Tensor(vg), "batch")
    r_b2t_sl, _ = ref.cross_attention(xg, vg)
    r_t2b_sl, _ = ref.cross_attention(vg, xg)
    diff["subject cross-attention"] = max(np.abs(b2t_sl.data - r_b2t_sl).max(), np.abs(t2b_sl.data - r_t2b_sl).max())
    s_sl = subject_similarity(b2t_sl, t2b_sl)
    r_ssl = ref.cosine_matrix(r_b2t_sl, r_t2b_sl)
    diff["S_sl"] = np.abs(s_sl.data - r_ssl).max()
    diff["L_sl"] = abs(infonce_loss(s_sl, tau).item() - ref.infonce(r_ssl, tau))

    l_cls = balanced_cross_entropy(Tensor(logits), labels, weights).item()
    diff["L_cls"] = abs(l_cls - ref.balanced_cross_entropy(logits, labels, weights.as_array()))
    return diff


def check_oracles(seeds: int = SEEDS) -> list[CheckResult]:
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for k, v in oracle_discrepancies(seed).items():
            worst[k] = max(worst.get(k, 0.0), float(v))
    per = (time.perf_counter() - start) / len(worst)
    return [CheckResult(f"oracle[{k}]", v <= ORACLE_TOL, v, ORACLE_TOL, per) for k, v in worst.items()]


def check_block_oracles(seed: int = 0) -> list[CheckResult]:
    """Multi-head attention and a full transformer layer against per-head loops."""
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(4, 2, rng)
    for _, prm in layer.named_parameters():
        prm.data[...] = rng.standard_normal(prm.shape) * 0.5
    x = rng.standard_normal((3, 4))
    pad = np.array([False, False, True])
    start = time.perf_counter()
    msa = layer.msa
    got = msa(Tensor(x), pad).data
    want = ref.msa(x, msa.w_q.weight.data, msa.w_k.weight.data, msa.w_v.weight.data, msa.w_o.weight.data, 2, list(pad))
    e_msa = float(np.abs(got - want).max())
    p = {
        "ln1_g": layer.ln1.gamma.data, "ln1_b": layer.ln1.beta.data,
        "wq": msa.w_q.weight.data, "wk": msa.w_k.weight.data, "wv": msa.w_v.weight.data, "wo": msa.w_o.weight.data,
        "ln2_g": layer.ln2.gamma.data, "ln2_b": layer.ln2.beta.data,
        "fc1_w": layer.mlp.fc1.weight.data, "fc1_b": layer.mlp.fc1.bias.data,
        "fc2_w": layer.mlp.fc2.weight.data, "fc2_b": layer.mlp.fc2.bias.data,
    }
    e_layer = float(np.abs(layer(Tensor(x), pad).data - ref.transformer_layer(x, p, 2, list(pad))).max())
    t = time.perf_counter() - start
    return [
        CheckResult("oracle[multi-head attention]", e_msa <= ORACLE_TOL, e_msa, ORACLE_TOL, t / 2),
        CheckResult("oracle[transformer layer]", e_layer <= ORACLE_TOL, e_layer, ORACLE_TOL, t / 2),
    ]


# ----------------------------------------------------------------------
# loss identities


def loss_identities() -> dict[str, tuple[float, float]]:
    """(absolute error, tolerance) for each closed-form loss value."""
    b = 5
    out = {}
    got = infonce_loss(Tensor(np.full((b, b), 0.3)), 0.07).item()
    out["InfoNCE constant S = log B"] = (abs(got - math.log(b)), 1e-12)
    got = infonce_loss(Tensor(np.eye(2)), 1.0).item()
    out["InfoNCE eye(2), tau 1"] = (abs(got + math.log(math.e / (math.e + 1.0))), 1e-10)
    got = connectome_alignment_loss(Tensor(np.ones((6, 8)))).item()
    out["L_cl all-ones = 0"] = (abs(got), 1e-12)
    got = connectome_alignment_loss(Tensor(np.zeros((6, 8)))).item()
    out["L_cl all-zeros = log 2"] = (abs(got - math.log(2.0)), 1e-10)
    return out


def check_loss_identities() -> list[CheckResult]:
    return [CheckResult(f"identity[{k}]", e <= tol, e, tol) for k, (e, tol) in loss_identities().items()]


# ----------------------------------------------------------------------
# masking, permutation and residual laws


def padding_discrepancy(seed: int = 0, extra: int = 5) -> dict[str, float]:
    """Change only the padding length of every report and compare outputs."""
    model, batch, weights = tiny_instance(seed, m_tokens=8)
    short = int(batch.mask.sum(axis=1).max())
    trimmed = Batch(batch.subject_ids, batch.sc, batch.token_ids[:, :short], batch.mask[:, :short], batch.labels)
    model_long = _with_m_max(model, short + extra)
    pad = np.zeros((len(batch), extra), dtype=np.int64)
    padded = Batch(
        batch.subject_ids, batch.sc,
        np.concatenate([trimmed.token_ids, pad], axis=1),
        np.concatenate([trimmed.mask, pad.astype(bool)], axis=1),
        batch.labels,
    )
    a = model.forward(trimmed, weights)
    b = model_long.forward(padded, weights)
    v_a, _ = model.text.forward(trimmed.token_ids, trimmed.mask)
    v_b, _ = model_long.text.forward(padded.token_ids, padded.mask)
    rows = 0.0
    for i in range(len(batch)):
        n_real = int(trimmed.mask[i].sum()) - 1
        rows = max(rows, float(np.abs(v_a.data[i, :n_real] - v_b.data[i, :n_real]).max()))
    return {
        "L_cl": abs(a.l_cl.item() - b.l_cl.item()),
        "V_global": float(np.abs(a.v_global.data - b.v_global.data).max()),
        "unpadded V_local rows": rows,
    }


def _with_m_max(model: ConnectomeReportModel, m_max: int) -> ConnectomeReportModel:
    """Same weights, longer position table (extra rows are random; they only meet padded slots)."""
    from dataclasses import replace

    other = ConnectomeReportModel(replace(model.cfg, m_max=m_max), seed=99)
    state = model.state_dict()
    pos = other.text.pos_embed.data.copy()
    pos[: state["text.pos_embed"].shape[0]] = state["text.pos_embed"]
    state["text.pos_embed"] = pos
    other.load_state_dict(state)
    return other


def permutation_discrepancy(seed: int = 0) -> dict[str, float]:
    out = {}
    for mode in ("degenerate", "batch"):
        model, batch, weights = tiny_instance(seed, mode)
        perm = np.random.default_rng(seed + 1).permutation(len(batch))
        shuffled = Batch(
            [batch.subject_ids[i] for i in perm], batch.sc[perm], batch.token_ids[perm], batch.mask[perm],
            batch.labels[perm],
        )
        out[f"L_sl ({mode})"] = abs(model.forward(batch).l_sl.item() - model.forward(shuffled).l_sl.item())
    return out


def residual_discrepancy(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d, h in ((8, 2), (16, 4)):
        layer = TransformerLayer(d, h, rng)
        layer.msa.zero_()
        layer.mlp.zero_()
        x = rng.standard_normal((3, 7, d))
        pad = rng.random((3, 7)) < 0.3
        pad[:, 0] = False
        worst = max(worst, float(np.abs(layer(Tensor(x), pad).data - x).max()))
    return worst


def check_invariances() -> list[CheckResult]:
    out = [CheckResult(f"padding[{k}]", v <= 1e-10, v, 1e-10) for k, v in padding_discrepancy().items()]
    out += [CheckResult(f"permutation[{k}]", v <= 1e-12, v, 1e-12) for k, v in permutation_discrepancy().items()]
    r = residual_discrepancy()
    out.append(CheckResult("residual identity", r == 0.0, r, 0.0))
    return out


def check_determinism(seed: int = 0) -> CheckResult:
    """Same seeded graph twice: bit-identical loss and gradients."""
    runs = []
    for _ in range(2):
        model, batch, weights = tiny_instance(seed)
        with Recording() as rec:
            loss = model.forward(batch, weights).loss
            rec.backward(loss)
        runs.append([loss.data.copy()] + [p.grad.copy() for p in model.parameters()])
    same = all(np.array_equal(a, b) for a, b in zip(*runs))
    return CheckResult("determinism[forward+backward]", same, 0.0 if same else 1.0, 0.0)


SUITE: tuple[Callable[[], list[CheckResult] | CheckResult], ...] = (
    check_primitive_gradients,
    check_layer_gradient,
    check_objective_gradients,
    check_oracles,
    check_block_oracles,
    check_loss_identities,
    check_invariances,
    check_determinism,
)


def run_verification(on_result: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for check in SUITE:
        got = check()
        for r in got if isinstance(got, list) else [got]:
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results
