"""Linear layers, multi-head self-attention and the pre-norm transformer layer."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ±2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Parameter container; attributes that are parameters or sub-modules are discovered by name."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def zero_(self) -> None:
        """Set every weight matrix to zero (layer-norm gain stays as-is)."""
        for name, p in self.named_parameters():
            if not name.endswith("gamma"):
                p.data[...] = 0.0


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_out, d_in)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"Linear expects last dim {self.weight.shape[1]}, got shape {x.shape}")
        y = ad.matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    n = len(lead)
    x = x.reshape(tuple(lead) + (t, heads, d // heads))
    return ad.transpose(x, list(range(n)) + [n + 1, n, n + 2])


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = ad.transpose(x, list(range(n)) + [n + 1, n, n + 2])
    return x.reshape(tuple(lead) + (t, h * dh))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by head count {heads}")
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_o = Linear(dim, dim, rng, bias=False)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor, key_padding_mask=None) -> Tensor:
        """Attention over ``x`` of shape (..., T, D); ``key_padding_mask`` is true at padded keys."""
        dh = x.shape[-1] // self.heads
        q = _split_heads(self.w_q(x), self.heads)
        k = _split_heads(self.w_k(x), self.heads)
        v = _split_heads(self.w_v(x), self.heads)
        scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh))
        valid = None
        if key_padding_mask is not None:
            kpm = np.asarray(key_padding_mask, dtype=bool)
            valid = ~kpm[..., None, None, :]
        attn = ad.softmax(scores, axis=-1, valid=valid)
        self.last_attention = attn.data
        return self.w_o(_merge_heads(ad.matmul(attn, v)))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm layer: o' = MSA(LN(o)) + o, then out = MLP(LN(o')) + o'."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.msa = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor, key_padding_mask=None) -> Tensor:
        h = self.msa(self.ln1(x), key_padding_mask) + x
        return self.mlp(self.ln2(h)) + h
