"""Attention-driven dynamic masking (Gumbel-perturbed top-K) and the baseline mask strategies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .encoder import TokenSequence

STRATEGIES = ("dynamic_high", "fixed_high", "low_attention", "random", "none")
EPS_CLAMP = 1e-12


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gumbel(eps: np.ndarray) -> np.ndarray:
    eps = np.clip(eps, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return -np.log(-np.log(eps))


def dynamic_logits(S, tau_pro: float, seed=None, *, eps: Optional[np.ndarray] = None,
                   draws: Optional[int] = None) -> np.ndarray:
    """Perturbed log-probabilities ``log softmax(S / tau_pro) + Gumbel(eps)``.

    ``eps`` overrides the uniform draws (same shape as the output). With ``draws`` set,
    returns ``(draws, N)`` independent perturbations from one seed.
    """
    if tau_pro <= 0:
        raise ValueError(f"tau_pro must be > 0, got {tau_pro}")
    S = np.asarray(S, dtype=np.float64)
    shape = S.shape if draws is None else (draws,) + S.shape
    if eps is None:
        eps = np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)
    return _log_softmax(S / tau_pro) + gumbel(np.asarray(eps, dtype=np.float64))


def top_k_select(logits, K: int) -> np.ndarray:
    """Indices of the K largest entries, largest first; ties go to the lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 0 <= K <= n:
        raise ValueError(f"K must be in [0, {n}], got {K}")
    return np.argsort(-logits, axis=-1, kind="stable")[..., :K]


def baseline_mask(S, strategy: str, K: int, seed=None) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[-1]
    if not 0 <= K <= n:
        raise ValueError(f"K must be in [0, {n}], got {K}")
    if strategy == "fixed_high":
        return top_k_select(S, K)
    if strategy == "low_attention":
        return top_k_select(-S, K)
    if strategy == "random":
        return np.sort(np.random.default_rng(seed).permutation(n)[:K])
    raise ValueError(f"unknown baseline strategy {strategy!r}")


def mask_count(n_patches: int, mask_ratio: float) -> int:
    return int(round(mask_ratio * n_patches))


@dataclass
class MaskDecision:
    significance: np.ndarray
    masked: np.ndarray
    strategy: str
    tau_pro: float
    seed: Optional[int] = None
    perturbed_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.strategy!r}")
        self.masked = np.asarray(self.masked, dtype=np.int64)
        n = len(self.significance)
        if self.strategy == "none" and len(self.masked):
            raise ValueError("strategy 'none' cannot mask patches")
        if len(set(self.masked.tolist())) != len(self.masked) or np.any((self.masked < 0) | (self.masked >= n)):
            raise ValueError("masked indices must be distinct and in [0, N)")

    @property
    def K(self) -> int:
        return len(self.masked)

    def to_record(self, sample_id) -> dict:
        return {
            "sample_id": sample_id,
            "significance": [float(x) for x in self.significance],
            "masked": [int(i) for i in self.masked],
            "strategy": self.strategy,
            "tau_pro": self.tau_pro,
        }


def decide_mask(S, strategy: str, K: int, tau_pro: float = 0.5, seed=None) -> MaskDecision:
    """One sample's mask under any strategy; ``none`` masks nothing."""
    S = np.asarray(S, dtype=np.float64)
    if strategy == "dynamic_high":
        logits = dynamic_logits(S, tau_pro, seed)
        return MaskDecision(S, top_k_select(logits, K), strategy, tau_pro, seed, logits)
    if strategy == "none":
        return MaskDecision(S, np.empty(0, dtype=np.int64), strategy, tau_pro, seed)
    return MaskDecision(S, baseline_mask(S, strategy, K, seed), strategy, tau_pro, seed)


@dataclass
class MaskToken:
    embedding: Tensor

    @property
    def width(self) -> int:
        return self.embedding.shape[0]


def apply_mask(tokens: TokenSequence, masked, mask_token) -> TokenSequence:
    """Swap the content of masked point tokens for the shared mask embedding.

    ``masked`` holds point-token indices in ``[0, N)`` (per sample: a list of index arrays,
    or one array for a single-sample batch). Positional terms are kept, and the global
    token sits outside this index space so it can never be masked.
    """
    emb = mask_token.embedding if isinstance(mask_token, MaskToken) else mask_token
    b, n, d = tokens.content.shape
    if b == 1 and (len(masked) == 0 or np.ndim(masked[0]) == 0):
        masked = [masked]
    if len(masked) != b:
        raise ValueError(f"got {len(masked)} mask sets for a batch of {b}")
    select = np.zeros((b, n), dtype=bool)
    for i, idx in enumerate(masked):
        idx = np.asarray(idx, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx >= n):
            raise ValueError(f"mask index out of range [0, {n}); the global token is not maskable")
        select[i, idx] = True
    if not select.any():
        return tokens
    fill = ops.broadcast_to(ops.reshape(emb, (1, 1, d)), (b, n, d))
    return TokenSequence(ops.where_rows(tokens.content, select, fill), tokens.pos, tokens.global_token)


def write_mask_records(path, decisions: Iterable[tuple]) -> int:
    """Write ``(sample_id, MaskDecision)`` pairs as JSON lines; returns the row count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, decision in decisions:
            fh.write(json.dumps(decision.to_record(sample_id)) + "\n")
            count += 1
    return count


def read_mask_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
