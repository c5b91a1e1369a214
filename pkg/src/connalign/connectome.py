"""Structural connectivity matrices and the subnetwork-token encoder.

Each region's row of the SC matrix (its connectivity to every region) is one
token. Tokens are linearly embedded, offset by a learnable per-region
embedding, prefixed with a class token and passed through transformer layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError
from .nn import Linear, Module, TransformerLayer, parameter, trunc_normal

INPUT_TRANSFORMS = ("log_standardize", "raw")


@dataclass
class SCMatrix:
    values: np.ndarray
    region_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"SC matrix must be square, got shape {v.shape}")
        if not np.isfinite(v).all():
            i, j = np.argwhere(~np.isfinite(v))[0]
            raise ValidationError(f"SC entry ({i},{j}) is not finite")
        if (v < 0).any():
            i, j = np.argwhere(v < 0)[0]
            raise ValidationError(f"SC entry ({i},{j}) is negative: {v[i, j]}")
        asym = np.argwhere(v != v.T)
        if len(asym):
            i, j = sorted(asym[0])
            raise ValidationError(f"SC matrix not symmetric at ({i},{j}): {v[i, j]} vs {v[j, i]}")
        diag = np.flatnonzero(np.diag(v))
        if len(diag):
            raise ValidationError(f"SC diagonal entry ({diag[0]},{diag[0]}) is nonzero")
        if not self.region_names:
            self.region_names = [f"R{i:03d}" for i in range(v.shape[0])]
        elif len(self.region_names) != v.shape[0]:
            raise ValidationError(f"{len(self.region_names)} region names for {v.shape[0]} regions")

    @property
    def region_count(self) -> int:
        return self.values.shape[0]


def transform_values(values: np.ndarray, mode: str = "log_standardize") -> np.ndarray:
    """log1p then standardize over the whole matrix (or over each matrix of a stack)."""
    if mode == "raw":
        return np.array(values, dtype=np.float64)
    if mode != "log_standardize":
        raise ConfigError(f"unknown input transform {mode!r}; expected one of {INPUT_TRANSFORMS}")
    x = np.log1p(values)
    axes = (-2, -1)
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return (x - mu) / np.where(sd > 1e-12, sd, 1.0)


def patchify(sc: SCMatrix, mode: str = "log_standardize") -> np.ndarray:
    """Row i is region i's transformed connectivity profile."""
    return transform_values(sc.values, mode)


class ConnectomeEncoder(Module):
    def __init__(
        self,
        n_regions: int,
        dim: int,
        layers: int,
        heads: int,
        rng: np.random.Generator,
        input_transform: str = "log_standardize",
        region_embed: bool = True,
    ):
        if input_transform not in INPUT_TRANSFORMS:
            raise ConfigError(f"unknown input transform {input_transform!r}")
        self.n_regions = n_regions
        self.input_transform = input_transform
        self.patch_embed = Linear(n_regions, dim, rng)
        self.class_token = parameter(trunc_normal(rng, (dim,)))
        self.region_embed = parameter(trunc_normal(rng, (n_regions, dim))) if region_embed else None
        self.layers = [TransformerLayer(dim, heads, rng) for _ in range(layers)]

    def embed_patches(self, patches) -> Tensor:
        """(..., N, N) patches -> (..., N+1, D) with the class token at index 0."""
        patches = ad.as_tensor(patches)
        if patches.shape[-1] != self.n_regions or patches.shape[-2] != self.n_regions:
            raise ConfigError(f"encoder built for N={self.n_regions}, got patches of shape {patches.shape}")
        tokens = self.patch_embed(patches)
        if self.region_embed is not None:
            tokens = tokens + self.region_embed
        lead = patches.shape[:-2]
        dim = self.class_token.shape[0]
        cls = ad.add(np.zeros(lead + (1, dim)), self.class_token)
        return ad.concat([cls, tokens], axis=-2)

    def forward(self, patches) -> tuple[Tensor, Tensor]:
        """Transformed patches (..., N, N) -> (X_local (..., N, D), X_global (..., D))."""
        h = self.embed_patches(patches)
        for layer in self.layers:
            h = layer(h)
        return h[..., 1:, :], h[..., 0, :]

    def encode(self, sc: SCMatrix) -> tuple[Tensor, Tensor]:
        """Single subject: (X_local N×D, X_global 1×D)."""
        x_local, x_global = self.forward(patchify(sc, self.input_transform))
        return x_local, x_global.reshape(1, -1)
