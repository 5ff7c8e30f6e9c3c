"""Layers built on the tensor engine: linear, conv, norms, attention, encoder."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True, name=name)


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: parameters are discovered from attributes in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = parameter(_uniform(rng, d_in, (d_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, d_in: int, d_out: int, kernel_size: int, rng: np.random.Generator,
                 bias: bool = True):
        fan_in = kernel_size * d_in
        self.weight = parameter(_uniform(rng, fan_in, (kernel_size, d_in, d_out)))
        self.bias = parameter(_uniform(rng, fan_in, (d_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = parameter(rng.standard_normal((n, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(ids, self.weight)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class SequenceNorm(Module):
    """Batch norm run per sequence (instance-norm statistics over valid time steps).

    ``mask`` is ``[B, L]`` with 1 on real positions; padding never enters the
    statistics, so an example normalizes identically alone or inside a batch.
    """

    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        m = Tensor(mask[..., None].astype(x.dtype))
        count = Tensor(np.maximum(mask.sum(axis=1), 1)[:, None, None].astype(x.dtype))
        mu = (x * m).sum(axis=1, keepdims=True) / count
        centered = (x - mu) * m
        var = (centered * centered).sum(axis=1, keepdims=True) / count
        xhat = centered * (var + self.eps) ** -0.5
        return xhat * self.weight + self.bias


def key_padding_bias(mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive attention bias ``[B, 1, 1, L]`` that removes padded keys."""
    if mask is None:
        return None
    return np.where(mask[:, None, None, :] > 0, 0.0, -1e9).astype(dtype)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over ``[B, L, d]`` inputs.

    The key projection has no bias: a key bias shifts every logit of a query
    row by the same amount and softmax cancels it, so it would never train.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.heads))
        bias = key_padding_bias(mask, x.dtype)
        if bias is not None:
            logits = logits + Tensor(bias)
        weights = T.softmax(logits)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, inner, rng)
        self.fc2 = Linear(inner, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Post-norm transformer block: x = LN(x + MHSA(x)); x = LN(x + FFN(x))."""

    def __init__(self, dim: int, heads: int, inner: int, dropout: float, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, inner, rng)
        self.norm2 = LayerNorm(dim)
        self.p = dropout

    def forward(self, x: Tensor, mask: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        train = self.training
        x = self.norm1(x + T.dropout(self.attn(x, mask), self.p, train, rng))
        return self.norm2(x + T.dropout(self.ffn(x), self.p, train, rng))


class TransformerEncoder(Module):
    def __init__(self, n_layers: int, dim: int, heads: int, inner: int, dropout: float,
                 rng: np.random.Generator):
        self.layers = [EncoderLayer(dim, heads, inner, dropout, rng) for _ in range(n_layers)]

    def forward(self, x: Tensor, mask: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return x
