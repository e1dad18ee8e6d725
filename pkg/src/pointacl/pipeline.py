"""Dual-branch pretraining (standard + attention-masked branch through shared weights)."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Linear, Module, Tensor, backward, no_grad, ops, parameter, save_checkpoint, uniform_init
from .encoder import EncoderOutput, PointEncoder, significance
from .geometry import PointCloud, patchify
from .masking import STRATEGIES, MaskDecision, MaskToken, apply_mask, decide_mask, mask_count
from .objectives import LossBundle, ProjectionHead, chamfer_loss, contrastive_loss, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 32
    lam: float = 0.6
    tau_pro: float = 0.5
    tau_sim: float = 0.1
    mask_ratio: float = 0.6
    strategy: str = "dynamic_high"
    seed: int = 0
    depth: int = 3
    d: int = 64
    heads: int = 4
    n_patches: int = 16
    group_size: int = 16
    hidden: int = 32
    d_proj: int = 64
    significance_layer: int = -1
    feature: str = "global"
    grad_clip: float = 10.0
    reset_optimizer_stage2: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.tau_pro <= 0 or self.tau_sim <= 0:
            raise ValueError("learning_rate, tau_pro and tau_sim must be > 0")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be >= 0")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.feature not in ("global", "mean"):
            raise ValueError("feature must be 'global' or 'mean'")

    @property
    def mask_k(self) -> int:
        return mask_count(self.n_patches, self.mask_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class PointACLModel(Module):
    def __init__(self, cfg: TrainConfig):
        self.encoder = PointEncoder(cfg.d, cfg.heads, cfg.depth, cfg.hidden, seed=cfg.seed)
        rng = np.random.default_rng(derive_seed(cfg.seed, 1))
        self.mask_token = parameter(uniform_init(rng, (cfg.d,), cfg.d))
        self.recon = Linear(rng, cfg.d, cfg.group_size * 3)
        self.proj = ProjectionHead(rng, cfg.d, cfg.d_proj)
        self.group_size = cfg.group_size

    @property
    def mask(self) -> MaskToken:
        return MaskToken(self.mask_token)

    def features(self, out: EncoderOutput, kind: str = "global") -> Tensor:
        if kind == "global":
            return out.global_feature
        points = ops.index(out.latent, (slice(None), slice(1, None)))
        return ops.mean_over_axis(points, axis=1)


@dataclass
class PatchedData:
    local: np.ndarray
    centers: np.ndarray
    labels: list

    def __len__(self) -> int:
        return len(self.local)

    def subset(self, idx) -> "PatchedData":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchedData(self.local[idx], self.centers[idx], [self.labels[i] for i in idx])


def prepare_patches(clouds: Sequence[PointCloud], n_patches: int, group_size: int, seed: int = 0) -> PatchedData:
    """Patchify every cloud. FPS start points come from ``(seed, sample index)``."""
    sets = [patchify(c, n_patches, group_size, derive_seed(seed, i)) for i, c in enumerate(clouds)]
    return PatchedData(np.stack([p.local_coords for p in sets]), np.stack([p.centers for p in sets]),
                       [c.label for c in clouds])


@dataclass
class StepOutputs:
    total: Tensor
    origin: Tensor
    contra: Tensor
    standard: Optional[EncoderOutput]
    masked: EncoderOutput
    decisions: List[MaskDecision]

    def bundle(self, cfg: TrainConfig, lam: float) -> LossBundle:
        return LossBundle(float(self.origin.data), float(self.contra.data), float(self.total.data), lam, cfg.tau_sim)


def dual_branch_loss(local: np.ndarray, centers: np.ndarray, model: PointACLModel, cfg: TrainConfig,
                     mask_seeds: Sequence[int], stage: int = 2) -> StepOutputs:
    """Forward both branches and build the joint loss; no backward.

    Stage 1 (or strategy ``none``) masks at random for reconstruction only. Stage 2 with
    ``lam > 0`` adds the contrastive term between the branches' projected features.
    """
    b = len(local)
    K = cfg.mask_k
    use_contra = stage == 2 and cfg.strategy != "none" and cfg.lam > 0
    strategy = cfg.strategy if stage == 2 and cfg.strategy != "none" else "random"
    needs_attention = strategy in ("dynamic_high", "fixed_high", "low_attention")

    tokens = model.encoder.embed_tokens((local, centers))
    standard = None
    if needs_attention or use_contra:
        standard = model.encoder.encode(tokens)
    if needs_attention:
        S = significance(standard.records, cfg.significance_layer)
    else:
        S = np.full((b, cfg.n_patches), 1.0 / cfg.n_patches)
    decisions = [decide_mask(S[i], strategy, K, cfg.tau_pro, mask_seeds[i]) for i in range(b)]

    masked_tokens = apply_mask(tokens, [d.masked for d in decisions], model.mask)
    masked = model.encoder.encode(masked_tokens)

    if K > 0:
        rows = np.arange(b)[:, None]
        idx = np.stack([d.masked for d in decisions])
        latent = ops.index(masked.latent, (rows, idx + 1))
        pred = ops.reshape(model.recon(latent), (b * K, model.group_size, 3))
        target = local[rows, idx].reshape(b * K, model.group_size, 3)
        origin = chamfer_loss(pred, target)
    else:
        origin = Tensor(0.0)

    if use_contra:
        hs = model.proj(model.features(standard, cfg.feature))
        hm = model.proj(model.features(masked, cfg.feature))
        contra = contrastive_loss(hm, hs, cfg.tau_sim)
        total = total_loss(origin, contra, cfg.lam)
    else:
        contra = Tensor(0.0)
        total = origin
    return StepOutputs(total, origin, contra, standard, masked, decisions)


def dual_branch_step(local, centers, model: PointACLModel, cfg: TrainConfig, mask_seeds, stage: int = 2):
    """One forward of both branches and a single backward into the shared parameters."""
    model.zero_grad()
    out = dual_branch_loss(local, centers, model, cfg, mask_seeds, stage)
    for name, t in (("origin", out.origin), ("contra", out.contra), ("total", out.total)):
        if not np.isfinite(t.data):
            raise TrainingError(f"non-finite {name} loss ({float(t.data)})")
    backward(out.total)
    lam = cfg.lam if stage == 2 else 0.0
    return out.bundle(cfg, lam), out


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    if total_steps <= 1:
        return peak
    return 0.5 * peak * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only) and global-norm clipping."""

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 0.05, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: Optional[float] = 10.0):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        clip = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            clip = self.grad_clip / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * clip
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if p.ndim >= 2 and self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


@dataclass
class TrainReport:
    epochs: List[dict] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def final_checkpoint(self) -> Optional[str]:
        return self.checkpoints.get("final")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(cfg: TrainConfig, data: PatchedData, output_dir=None, model: Optional[PointACLModel] = None,
          epoch_callback=None):
    """Two-stage schedule: reconstruction only, then reconstruction + contrastive.

    Returns ``(model, TrainReport)``. Checkpoints go to ``output_dir`` when given.
    """
    if len(data) == 0:
        raise ValueError("training corpus is empty")
    start = time.perf_counter()
    model = model or PointACLModel(cfg)
    params = model.parameters()
    opt = AdamW(params, cfg.weight_decay, grad_clip=cfg.grad_clip)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2
    total_steps = total_epochs * steps_per_epoch
    report = TrainReport(config=cfg.to_dict())
    out_dir = Path(output_dir) if output_dir is not None else None
    step = 0
    for epoch in range(total_epochs):
        stage = 1 if epoch < cfg.epochs_stage1 else 2
        if stage == 2 and epoch == cfg.epochs_stage1 and cfg.reset_optimizer_stage2:
            opt.reset()
        rng = np.random.default_rng(derive_seed(cfg.seed, 0, epoch))
        sums = np.zeros(3)
        batches = _batches(len(data), cfg.batch_size, rng)
        lr = cfg.learning_rate
        for idx in batches:
            seeds = [derive_seed(cfg.seed, 1, epoch, int(i)) for i in idx]
            try:
                bundle, _ = dual_branch_step(data.local[idx], data.centers[idx], model, cfg, seeds, stage)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            lr = cosine_lr(step, total_steps, cfg.learning_rate)
            opt.step(lr)
            sums += (bundle.origin, bundle.contra, bundle.total)
            step += 1
        mean = sums / len(batches)
        row = {"epoch": epoch, "stage": stage, "origin": float(mean[0]), "contra": float(mean[1]),
               "total": float(mean[2]), "lr": lr}
        report.epochs.append(row)
        log.info("epoch %d stage %d origin %.5f contra %.5f total %.5f", epoch, stage,
                 row["origin"], row["contra"], row["total"])
        if epoch_callback is not None:
            epoch_callback(epoch, model, row)
        if out_dir is not None and epoch == cfg.epochs_stage1 - 1 and cfg.epochs_stage2 > 0:
            report.checkpoints["stage1"] = str(save_checkpoint(out_dir / "stage1.ckpt", model.state_dict()))
    if out_dir is not None:
        report.checkpoints["final"] = str(save_checkpoint(out_dir / "final.ckpt", model.state_dict()))
    report.wall_time = time.perf_counter() - start
    return model, report


def extract_features(model: PointACLModel, data: PatchedData, kind: str = "global", batch_size: int = 64) -> np.ndarray:
    """Frozen features of the unmasked encoder, one row per sample."""
    rows = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            tokens = model.encoder.embed_tokens((data.local[i:i + batch_size], data.centers[i:i + batch_size]))
            rows.append(model.features(model.encoder.encode(tokens), kind).data)
    return np.concatenate(rows)


def attention_significance(model: PointACLModel, data: PatchedData, layer: int = -1, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            tokens = model.encoder.embed_tokens((data.local[i:i + batch_size], data.centers[i:i + batch_size]))
            out.append(significance(model.encoder.encode(tokens).records, layer))
    return np.concatenate(out)


def knn_probe(train_feats, train_labels, test_feats, test_labels, k: int = 5) -> float:
    """Cosine-distance k-NN majority vote; ties go to the tied class seen nearest first."""
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    if len(train_feats) == 0 or len(test_feats) == 0:
        raise ValueError("knn_probe needs non-empty train and test sets")
    if not 1 <= k <= len(train_feats):
        raise ValueError(f"k must be in [1, {len(train_feats)}], got {k}")

    def unit(x):
        return x / (np.linalg.norm(x, axis=1, keepdims=True) + 1e-12)

    dist = 1.0 - unit(test_feats) @ unit(train_feats).T
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    train_labels = list(train_labels)
    correct = 0
    for row, truth in zip(nearest, test_labels):
        votes: Dict = {}
        for j in row:
            votes[train_labels[j]] = votes.get(train_labels[j], 0) + 1
        best = max(votes.values())
        # dicts keep insertion order, i.e. distance order of first appearance
        pred = next(lbl for lbl, v in votes.items() if v == best)
        correct += pred == truth
    return correct / len(test_feats)
