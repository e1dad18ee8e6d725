"""Symmetric contrastive loss, Chamfer reconstruction loss, projection head, joint objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, as_tensor, ops

NORM_TOL = 1e-6


class ProjectionHead(Module):
    """``d -> d -> d_proj`` map with a nonlinearity between, then exact row normalization."""

    def __init__(self, rng: np.random.Generator, d: int, d_proj: int = 64,
                 activation: str | None = "gelu", bias: bool = True):
        if activation not in (None, "gelu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.fc1 = Linear(rng, d, d, bias=bias)
        self.fc2 = Linear(rng, d, d_proj, bias=bias)
        self.activation = activation

    def raw(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.activation == "gelu":
            h = ops.gelu(h)
        elif self.activation == "relu":
            h = ops.relu(h)
        return self.fc2(h)

    def __call__(self, x: Tensor) -> Tensor:
        return project(x, self)


def project(features, head: ProjectionHead) -> Tensor:
    features = as_tensor(features)
    if features.shape[0] == 0:
        raise ValueError("cannot project an empty batch")
    return ops.l2_norm_rows(head.raw(features), eps=1e-12)


def _check_unit_rows(name: str, h: Tensor) -> None:
    norms = np.linalg.norm(h.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"{name} rows must be unit norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def contrastive_loss(Hm, Hs, tau_sim: float) -> Tensor:
    """Symmetric InfoNCE between matched rows of ``Hm`` and ``Hs`` (both ``b x d_proj``)."""
    if tau_sim <= 0:
        raise ValueError(f"tau_sim must be > 0, got {tau_sim}")
    Hm, Hs = as_tensor(Hm), as_tensor(Hs)
    if Hm.shape != Hs.shape or Hm.ndim != 2 or Hm.shape[0] < 1:
        raise ValueError(f"contrastive_loss: incompatible shapes {Hm.shape} and {Hs.shape}")
    _check_unit_rows("Hm", Hm)
    _check_unit_rows("Hs", Hs)
    b = Hm.shape[0]
    logits = ops.scale(ops.matmul(Hm, ops.transpose(Hs)), 1.0 / tau_sim)
    eye = np.eye(b)
    m_to_s = ops.dot(ops.log_softmax(logits), eye)
    s_to_m = ops.dot(ops.log_softmax(ops.transpose(logits)), eye)
    return ops.scale(m_to_s + s_to_m, -1.0 / (2 * b))


def chamfer_loss(pred, target) -> Tensor:
    """Mean squared nearest-neighbor distance in both directions.

    Works on single sets ``(M, 3)`` / ``(L, 3)`` or batches ``(P, M, 3)`` / ``(P, L, 3)``;
    batches return the mean over the P pairs. Only ``pred`` is expected to carry gradients.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape[-2] == 0 or target.shape[-2] == 0:
        raise ValueError("chamfer_loss needs non-empty point sets")
    d = ops.pairwise_sq_dist(pred, target)
    forward = ops.mean_over_axis(ops.min_over_axis(d, axis=-1), axis=-1)
    reverse = ops.mean_over_axis(ops.min_over_axis(d, axis=-2), axis=-1)
    per_pair = forward + reverse
    return per_pair if per_pair.ndim == 0 else ops.mean_over_axis(per_pair)


def total_loss(origin, contra, lam: float) -> Tensor:
    return as_tensor(origin) + ops.scale(contra, lam)


@dataclass(frozen=True)
class LossBundle:
    origin: float
    contra: float
    total: float
    lam: float
    tau_sim: float

    def as_dict(self) -> dict:
        return {"origin": self.origin, "contra": self.contra, "total": self.total}
