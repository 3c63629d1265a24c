"""Transformer building blocks on top of :mod:`smae.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns the names that were loaded."""
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing}")
        loaded = []
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            loaded.append(k)
        return loaded

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = math.sqrt(6.0 / (n_in + n_out))
        self.weight = T.parameter(rng.uniform(-bound, bound, (n_in, n_out)), dtype=dtype)
        self.bias = T.parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gain = T.parameter(np.ones(dim), dtype=dtype)
        self.bias = T.parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Attention(Module):
    """Multi-head self-attention with scale 1/sqrt(head_dim), no dropout."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        H = self.heads
        dh = D // H
        qkv = T.reshape(self.qkv(x), (B, N, 3, H, dh))
        qkv = T.permute(qkv, (2, 0, 3, 1, 4))
        q, k, v = (T.reshape(t, (B, H, N, dh)) for t in T.split(qkv, [1, 1, 1], axis=0))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores)
        self.last_attention = attn.data
        out = T.matmul(attn, v)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (B, N, D))
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm encoder block: z = MHSA(LN(x)) + x; x' = FFN(LN(z)) + z."""

    def __init__(self, dim: int, heads: int, ffn_mult: int, rng: np.random.Generator, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        z = T.add(self.attn(self.norm1(x)), x)
        return T.add(self.ffn(self.norm2(z)), z)
