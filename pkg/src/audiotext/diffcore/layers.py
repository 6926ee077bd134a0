"""Parameter containers and the layer set used by the audio, text and caption models."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import DimensionError
from . import functional as F
from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor; its name is assigned by the owning module tree."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name


class Module:
    """Base class: discovers parameters, buffers and children from attributes."""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters and buffers by name, in deterministic discovery order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        bad = sorted(k for k in own if k in state and np.shape(state[k]) != own[k].shape)
        if missing or extra or bad:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra} shape={bad}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=np.float64)
        for name, buf in self.named_buffers():
            buf[...] = state[name]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3 (or any odd) same-padding convolution on NHWC maps, no bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        std = np.sqrt(2.0 / (kernel * kernel * c_in))
        self.weight = Parameter(rng.normal(0.0, std, (kernel, kernel, c_in, c_out)))

    def forward(self, x):
        return F.conv2d(x, self.weight)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.1):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, std, (num, dim)))

    def forward(self, indices):
        return F.embedding(self.weight, indices)


class GRUCell(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_ih = Parameter(rng.uniform(-bound, bound, (d_in, 3 * hidden)))
        self.w_hh = Parameter(rng.uniform(-bound, bound, (hidden, 3 * hidden)))
        self.b_ih = Parameter(rng.uniform(-bound, bound, 3 * hidden))
        self.b_hh = Parameter(rng.uniform(-bound, bound, 3 * hidden))

    def forward(self, x, h):
        return F.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class GRU(Module):
    """Stacked (optionally bidirectional) GRU over (batch, time, features) input.

    Each layer's output is the concatenation of the forward and the
    time-reversed backward cell states; it feeds the next layer.
    """

    def __init__(self, d_in: int, hidden: int, num_layers: int, rng: np.random.Generator,
                 bidirectional: bool = True):
        super().__init__()
        self.hidden = hidden
        self.bidirectional = bidirectional
        dirs = 2 if bidirectional else 1
        self.cells = []
        for layer in range(num_layers):
            width = d_in if layer == 0 else hidden * dirs
            for _ in range(dirs):
                self.cells.append(GRUCell(width, hidden, rng))

    @property
    def output_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def _run(self, cell: GRUCell, steps: list, reverse: bool) -> list:
        B = steps[0].shape[0]
        h = Tensor(np.zeros((B, self.hidden)))
        order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
        outs = [None] * len(steps)
        for t in order:
            h = cell(steps[t], h)
            outs[t] = h
        return outs

    def forward(self, x):
        if x.ndim != 3:
            raise DimensionError(f"GRU: expected (batch, time, features), got shape {x.shape}")
        T = x.shape[1]
        steps = [x[:, t, :] for t in range(T)]
        dirs = 2 if self.bidirectional else 1
        for layer in range(len(self.cells) // dirs):
            fwd = self._run(self.cells[layer * dirs], steps, reverse=False)
            if self.bidirectional:
                bwd = self._run(self.cells[layer * dirs + 1], steps, reverse=True)
                steps = [ops.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
            else:
                steps = fwd
        return ops.stack(steps, axis=1)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


NEG_INF = -1e9


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"attention: width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x, B, T):
        return ops.transpose(ops.reshape(x, (B, T, self.heads, -1)), (0, 2, 1, 3))

    def forward(self, query, context, mask: Optional[np.ndarray] = None):
        """``mask``: boolean, broadcastable to (B, heads, Tq, Tk); True marks blocked keys."""
        B, Tq, D = query.shape
        Tk = context.shape[1]
        if context.shape[2] != D:
            raise DimensionError(f"attention: context axis 2 has {context.shape[2]}, query axis 2 has {D}")
        q = self._split(self.q(query), B, Tq)
        k = self._split(self.k(context), B, Tk)
        v = self._split(self.v(context), B, Tk)
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(D // self.heads))
        if mask is not None:
            scores = ops.masked_fill(scores, mask, NEG_INF)
        attn = ops.softmax(scores, axis=-1)
        mixed = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, Tq, D))
        return self.out(mixed)


class EncoderBlock(Module):
    """Pre-norm transformer block: x + SA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    """Pre-norm decoder block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(self, x, memory, self_mask=None):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ff(self.ln3(x))


def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)
