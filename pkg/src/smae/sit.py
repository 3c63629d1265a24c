"""Surface Vision Transformer (SiT) on icosphere patches.

Token layout: a surface map X of shape (V, C) becomes N patch tokens of
width patch_size * C. Each token lists channel 0 over the patch's vertices
(in patch-table order), then channel 1, and so on. Row 0 of every encoder
sequence is the regression token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import _kernels as K
from . import tensor as T
from .geodesy import PatchTable, default_patch_table, patch_size_for_depth
from .layers import Block, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class SitConfig:
    patch_level: int = 1
    data_level: int = 4
    channels: int = 4
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 2
    ffn_mult: int = 4

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid SitConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.data_level <= self.patch_level:
            out.append("data_level must exceed patch_level")
        if self.channels < 1:
            out.append("channels must be >= 1")
        if self.layers < 0:
            out.append("layers must be >= 0")
        if self.heads < 1 or self.hidden_dim % self.heads:
            out.append(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 2:
            out.append("hidden_dim must be even for sine-cosine encodings")
        if self.ffn_mult < 1:
            out.append("ffn_mult must be >= 1")
        return out

    @property
    def n_patches(self) -> int:
        return 20 * 4**self.patch_level

    @property
    def patch_size(self) -> int:
        return patch_size_for_depth(self.data_level - self.patch_level)

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.channels

    def to_json(self) -> dict:
        d = asdict(self)
        return {
            "patchLevel": d["patch_level"],
            "dataLevel": d["data_level"],
            "channels": d["channels"],
            "hiddenDim": d["hidden_dim"],
            "layers": d["layers"],
            "heads": d["heads"],
            "ffnMult": d["ffn_mult"],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SitConfig":
        keys = {
            "patchLevel": "patch_level", "dataLevel": "data_level", "channels": "channels",
            "hiddenDim": "hidden_dim", "layers": "layers", "heads": "heads", "ffnMult": "ffn_mult",
        }
        names = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            k = keys.get(k, k)
            if k in names:
                kw[k] = int(v)
        return cls(**kw)


# --------------------------------------------------------------------------
# patch <-> surface


def patchify(X: np.ndarray, table: PatchTable) -> np.ndarray:
    """(V, C) or (B, V, C) surface maps -> (N, P*C) or (B, N, P*C) tokens."""
    X = np.asarray(X)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != table.n_vertices:
        raise ValueError(f"patchify: map of shape {X.shape} does not match {table.n_vertices} vertices")
    B, _, C = X.shape
    tok = X[:, table.patches, :]  # (B, N, P, C)
    tok = np.transpose(tok, (0, 1, 3, 2)).reshape(B, table.n_patches, table.patch_size * C)
    return tok[0] if single else tok


def unpatchify(tokens: np.ndarray, table: PatchTable) -> np.ndarray:
    """Inverse of :func:`patchify`; shared vertices take the mean of their copies."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    B, N, W = tokens.shape
    P = table.patch_size
    if N != table.n_patches or W % P:
        raise ValueError(f"unpatchify: tokens {tokens.shape} incompatible with {N} x {P}*C table")
    C = W // P
    vals = np.transpose(tokens.reshape(B, N, C, P), (0, 1, 3, 2)).reshape(B, N * P, C)
    dtype = np.result_type(tokens.dtype, np.float32)
    idx = table.patches.reshape(-1)
    _, first = np.unique(idx, return_index=True)
    # mean = reference copy + mean deviation, so identical copies reproduce exactly
    ref = vals[:, first, :].astype(dtype)
    dev = (vals - ref[:, idx, :]).astype(dtype)
    out = np.zeros((B, table.n_vertices, C), dtype=dtype)
    for b in range(B):
        K.scatter_add_rows(out[b], idx, np.ascontiguousarray(dev[b]))
    out = ref + out / table.multiplicity[None, :, None].astype(dtype)
    return out[0] if single else out


def sincos_posenc(length: int, dim: int) -> np.ndarray:
    """Fixed 1-D sine-cosine encodings, shape (length, dim).

    Column j < dim/2 holds sin(p * w_j), column dim/2 + j holds cos(p * w_j),
    with w_j = 10000 ** (-2j / dim).
    """
    if dim % 2:
        raise ValueError(f"sine-cosine encoding needs an even dim, got {dim}")
    half = dim // 2
    omega = 1.0 / 10000.0 ** (2.0 * np.arange(half) / dim)
    ang = np.arange(length, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --------------------------------------------------------------------------
# model


class SitEncoder(Module):
    """Patch embedding, regression token, fixed positional encoding and L blocks."""

    def __init__(self, cfg: SitConfig, rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = Linear(cfg.token_dim, cfg.hidden_dim, rng, dtype)
        self.reg_token = T.parameter(rng.normal(0.0, 0.02, cfg.hidden_dim), dtype=dtype)
        self.blocks = [Block(cfg.hidden_dim, cfg.heads, cfg.ffn_mult, rng, dtype) for _ in range(cfg.layers)]
        self.use_posenc = use_posenc
        self.pos = sincos_posenc(cfg.n_patches + 1, cfg.hidden_dim).astype(dtype)

    def patch_embeddings(self, tokens) -> Tensor:
        """(B, N, P*C) -> (B, N, D) linear projection, no positional term."""
        x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=self.dtype))
        return self.patch_embed(x)

    def add_posenc(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        """Positional terms for patch rows and the regression row.

        Returns (patches + E[1:], reg_token + E[0]) with the regression row of
        shape (B, 1, D).
        """
        B = emb.shape[0]
        D = self.cfg.hidden_dim
        reg = T.reshape(self.reg_token, (1, 1, D))
        if self.use_posenc:
            emb = T.add(emb, self.pos[1:])
            reg = T.add(reg, self.pos[:1][None])
        return emb, T.broadcast_to(reg, (B, 1, D))

    def embed(self, tokens) -> Tensor:
        """X = [X_0, ..., X_N] + E_pos_enc, shape (B, N+1, D)."""
        emb, reg = self.add_posenc(self.patch_embeddings(tokens))
        return T.concat([reg, emb], axis=1)

    def encode(self, seq: Tensor) -> Tensor:
        for blk in self.blocks:
            seq = blk(seq)
        return seq

    def __call__(self, tokens) -> Tensor:
        return self.encode(self.embed(tokens))


class RegressionHead(Module):
    """LayerNorm + linear on the regression token: 3D + 1 parameters."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(dim, dtype)
        self.fc = Linear(dim, 1, rng, dtype)

    def __call__(self, reg: Tensor) -> Tensor:
        return self.fc(self.norm(reg))


class SitModel(Module):
    def __init__(self, cfg: SitConfig, rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True):
        self.cfg = cfg
        self.encoder = SitEncoder(cfg, rng, dtype, use_posenc)
        self.head = RegressionHead(cfg.hidden_dim, rng, dtype)

    def __call__(self, tokens) -> Tensor:
        """Predictions of shape (B,)."""
        out = self.encoder(tokens)
        return self.predict(out)

    def predict(self, seq_out: Tensor) -> Tensor:
        B, _, D = seq_out.shape
        reg = T.take_slice(seq_out, (slice(None), 0))
        return T.reshape(self.head(reg), (B,))


def build_table(cfg: SitConfig) -> PatchTable:
    return default_patch_table(cfg.patch_level, cfg.data_level)


def tokenize(X: np.ndarray, table: PatchTable, dtype=np.float32) -> np.ndarray:
    """Normalise each (V, C) map per channel, then patchify; (B, V, C) -> (B, N, P*C)."""
    from .synthcortex import normalize_map

    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros((0, table.n_patches, table.patch_size * X.shape[-1]), dtype)
    Z = np.stack([normalize_map(x) for x in X])
    return patchify(Z, table).astype(dtype)
