"""Patch tokenizer, pre-norm transformer encoder with a global token, attention significance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor, ops, parameter, uniform_init
from .geometry import PatchSet


class ConfigError(ValueError):
    pass


class DegenerateAttentionError(ArithmeticError):
    pass


def stack_patches(patches: Sequence[PatchSet]) -> tuple:
    """Stack per-cloud patch sets into ``(local (B,N,k,3), centers (B,N,3))`` arrays."""
    if isinstance(patches, PatchSet):
        patches = [patches]
    local = np.stack([p.local_coords for p in patches])
    centers = np.stack([p.centers for p in patches])
    return local, centers


@dataclass
class TokenSequence:
    """Point-token content and positional terms kept apart so masking can swap content only.

    The assembled ``tokens`` tensor is ``(B, N+1, d)`` with the global token at row 0.
    """

    content: Tensor
    pos: Tensor
    global_token: Tensor

    @property
    def n_patches(self) -> int:
        return self.content.shape[1]

    @property
    def batch_size(self) -> int:
        return self.content.shape[0]

    @property
    def width(self) -> int:
        return self.content.shape[2]

    @property
    def tokens(self) -> Tensor:
        b, _, d = self.content.shape
        glob = ops.broadcast_to(ops.reshape(self.global_token, (1, 1, d)), (b, 1, d))
        return ops.concat([glob, self.content + self.pos], axis=1)


@dataclass
class AttentionRecord:
    """Per layer: attention ``(B, h, N+1, N+1)`` and per-head value-row norms ``(B, h, N+1)``."""

    attention: List[np.ndarray] = field(default_factory=list)
    value_norms: List[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.attention)


@dataclass
class EncoderOutput:
    latent: Tensor
    records: AttentionRecord

    @property
    def global_feature(self) -> Tensor:
        return ops.index(self.latent, (slice(None), 0))


class AttentionBlock(Module):
    """Pre-norm multi-head self-attention + GELU feed-forward, both residual."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.norm1 = LayerNorm(d)
        self.q = Linear(rng, d, d, bias=False)
        self.k = Linear(rng, d, d, bias=False)
        self.v = Linear(rng, d, d, bias=False)
        self.proj = Linear(rng, d, d)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, mlp_ratio * d)
        self.fc2 = Linear(rng, mlp_ratio * d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor):
        b, t, d = x.shape
        h = self.norm1(x)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        logits = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d // self.heads))
        attn = ops.row_softmax(logits)
        mixed = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        x = x + self.proj(mixed)
        x = x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))
        vnorm = np.sqrt(np.sum(v.data * v.data, axis=-1))
        return x, attn.data, vnorm


class PointEncoder(Module):
    def __init__(self, d: int = 64, heads: int = 4, depth: int = 3, hidden: int = 32,
                 mlp_ratio: int = 4, seed: int = 0):
        if depth < 1:
            raise ConfigError("depth must be >= 1")
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        self.d, self.heads, self.depth = d, heads, depth
        # shared per-point map, max-pooled over each patch
        self.point_fc1 = Linear(rng, 3, hidden)
        self.point_fc2 = Linear(rng, hidden, d)
        self.pos_fc1 = Linear(rng, 3, d)
        self.pos_fc2 = Linear(rng, d, d)
        self.global_token = parameter(uniform_init(rng, (d,), d))
        self.blocks = [AttentionBlock(rng, d, heads, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(d)

    def embed_tokens(self, patches) -> TokenSequence:
        """Accepts a PatchSet, a list of them, or ``(local, centers)`` arrays."""
        if isinstance(patches, tuple):
            local, centers = patches
        else:
            local, centers = stack_patches(patches)
        if local.shape[1] == 0:
            raise ValueError("cannot embed an empty patch set")
        per_point = self.point_fc2(ops.relu(self.point_fc1(Tensor(local))))
        content = ops.max_over_axis(per_point, axis=2)
        pos = self.pos_fc2(ops.gelu(self.pos_fc1(Tensor(centers))))
        return TokenSequence(content, pos, self.global_token)

    def encode(self, tokens, depth: Optional[int] = None) -> EncoderOutput:
        """Run the first ``depth`` blocks (all by default) and the final norm."""
        depth = self.depth if depth is None else depth
        if not 1 <= depth <= self.depth:
            raise ConfigError(f"depth must be in [1, {self.depth}], got {depth}")
        x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
        record = AttentionRecord()
        for block in self.blocks[:depth]:
            x, attn, vnorm = block(x)
            record.attention.append(attn)
            record.value_norms.append(vnorm)
        return EncoderOutput(self.norm(x), record)


def significance(record: AttentionRecord, layer: int = -1) -> np.ndarray:
    """Patch significance toward the global token, ``(B, N)``; rows sum to 1.

    Per head: attention from the global token to patch j times that patch's value norm,
    normalized over patches (the global token's own entry is ignored). Heads are summed
    and renormalized.
    """
    if not -record.n_layers <= layer < record.n_layers:
        raise IndexError(f"layer {layer} out of range for {record.n_layers} layers")
    attn = record.attention[layer]
    vnorm = record.value_norms[layer]
    weighted = attn[:, :, 0, 1:] * vnorm[:, :, 1:]
    denom = weighted.sum(axis=-1, keepdims=True)
    if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
        raise DegenerateAttentionError("a head has zero total patch significance")
    per_head = weighted / denom
    total = per_head.sum(axis=1)
    return total / total.sum(axis=-1, keepdims=True)
