"""Pretrain / evaluate / robustness sweep / ablation matrix."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..autodiff import load_checkpoint
from ..geometry import SHAPE_KINDS, PointCloud, Perturbation, perturb, synth_shape
from ..masking import dynamic_logits, top_k_select
from ..pipeline import (PatchedData, PointACLModel, TrainConfig, TrainReport, attention_significance,
                        derive_seed, extract_features, knn_probe, prepare_patches, train)
from .config import ExperimentSpec
from .io import read_cloud_dir, write_features, write_jsonl

log = logging.getLogger(__name__)

# seed-stream tags so data, patchify, perturbation and mask draws never share a stream
_TRAIN_SPLIT, _TEST_SPLIT = 0, 1
_PERTURB_STREAM = 7
_COVERAGE_STREAM = 11


@dataclass
class MetricsRecord:
    experiment_id: str
    config_hash: str
    accuracies: Dict[str, float]
    mask_coverage: Dict[str, float] = field(default_factory=dict)
    wall_times: Dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {name}={acc} outside [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def without_wall_times(self) -> dict:
        d = self.to_dict()
        d.pop("wall_times")
        return d


def synthetic_split(per_class: int, n_points: int, seed: int, split: int) -> List[PointCloud]:
    return [synth_shape(kind, n_points, derive_seed(seed, split, c, i))
            for c, kind in enumerate(SHAPE_KINDS) for i in range(per_class)]


def _subsample(clouds: Sequence[PointCloud], n_points: int, seed: int) -> List[PointCloud]:
    out = []
    for i, c in enumerate(clouds):
        if len(c) > n_points:
            keep = np.sort(np.random.default_rng(derive_seed(seed, i)).permutation(len(c))[:n_points])
            c = PointCloud(c.points[keep], c.label)
        out.append(c)
    return out


def load_clouds(spec: ExperimentSpec) -> tuple:
    """(train clouds, test clouds) for the spec's data block."""
    d = spec.data
    if d.source == "synthetic":
        return (synthetic_split(d.train_per_class, d.n_points, d.seed, _TRAIN_SPLIT),
                synthetic_split(d.test_per_class, d.n_points, d.seed, _TEST_SPLIT))
    return (_subsample(read_cloud_dir(d.train_dir), d.n_points, derive_seed(d.seed, _TRAIN_SPLIT)),
            _subsample(read_cloud_dir(d.test_dir), d.n_points, derive_seed(d.seed, _TEST_SPLIT)))


def patch_split(clouds: Sequence[PointCloud], cfg: TrainConfig, data_seed: int, split: int) -> PatchedData:
    return prepare_patches(clouds, cfg.n_patches, cfg.group_size, derive_seed(data_seed, split, 99))


def perturb_split(clouds: Sequence[PointCloud], p: Perturbation, data_seed: int) -> List[PointCloud]:
    base = derive_seed(data_seed, _PERTURB_STREAM, p.seed)
    return [perturb(c, p.with_seed(derive_seed(base, i))) for i, c in enumerate(clouds)]


def load_model(cfg: TrainConfig, checkpoint) -> PointACLModel:
    model = PointACLModel(cfg)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def mask_coverage(model: PointACLModel, data: PatchedData, cfg: TrainConfig, draws: int, seed: int) -> dict:
    """Distinct patches masked at least once over ``draws`` dynamic decisions, per sample.

    The fixed top-K strategy always covers exactly K patches, so ``frac_exceeds_fixed`` is the
    share of samples whose dynamic coverage is strictly larger than K.
    """
    K = cfg.mask_k
    S = attention_significance(model, data, cfg.significance_layer)
    counts = []
    for i, s in enumerate(S):
        logits = dynamic_logits(s, cfg.tau_pro, derive_seed(seed, _COVERAGE_STREAM, i), draws=draws)
        chosen = top_k_select(logits, K)
        counts.append(len(np.unique(chosen)))
    counts = np.array(counts)
    return {"K": float(K), "draws": float(draws), "mean_distinct_dynamic": float(counts.mean()),
            "min_distinct_dynamic": float(counts.min()), "frac_exceeds_fixed": float(np.mean(counts > K))}


def evaluate(model: PointACLModel, spec: ExperimentSpec, train_clouds, test_clouds,
             perturbations: Optional[Sequence[Perturbation]] = None, output_dir=None) -> tuple:
    """Probe accuracies for the clean test set and each perturbed copy of it."""
    cfg = spec.train
    perturbations = spec.eval.perturbation_objects() if perturbations is None else perturbations
    train_data = patch_split(train_clouds, cfg, spec.data.seed, _TRAIN_SPLIT)
    train_feats = extract_features(model, train_data, cfg.feature)
    conditions = [("clean", list(test_clouds))]
    conditions += [(p.name, perturb_split(test_clouds, p, spec.data.seed)) for p in perturbations]
    accuracies, times = {}, {}
    for name, clouds in conditions:
        t0 = time.perf_counter()
        test_data = patch_split(clouds, cfg, spec.data.seed, _TEST_SPLIT)
        feats = extract_features(model, test_data, cfg.feature)
        accuracies[name] = knn_probe(train_feats, train_data.labels, feats, test_data.labels, spec.eval.probe_k)
        times[f"eval:{name}"] = time.perf_counter() - t0
        if output_dir is not None and spec.eval.export_features:
            safe = name.replace("(", "_").replace(")", "").replace(",", "_").replace("=", "")
            write_features(Path(output_dir) / f"features_{safe}.tsv", feats, test_data.labels)
    if output_dir is not None and spec.eval.export_features:
        write_features(Path(output_dir) / "features_train.tsv", train_feats, train_data.labels)
    return accuracies, times


def pretrain(spec: ExperimentSpec, train_clouds=None):
    if train_clouds is None:
        train_clouds, _ = load_clouds(spec)
    data = patch_split(train_clouds, spec.train, spec.data.seed, _TRAIN_SPLIT)
    out_dir = Path(spec.output_dir) if spec.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model, report = train(spec.train, data, out_dir)
    if out_dir is not None:
        write_train_report(out_dir, report)
    return model, report


def write_train_report(out_dir: Path, report: TrainReport) -> None:
    write_jsonl(out_dir / "train_log.jsonl", report.epochs)
    write_jsonl(out_dir / "train_report.jsonl", [{
        "config": report.config, "checkpoints": report.checkpoints, "wall_time": report.wall_time,
    }])


def run_experiment(spec: ExperimentSpec, experiment_id: Optional[str] = None, model: Optional[PointACLModel] = None,
                   write: bool = True) -> MetricsRecord:
    """Pretrain (unless a model or checkpoint is supplied), then probe clean + perturbed test sets."""
    t0 = time.perf_counter()
    train_clouds, test_clouds = load_clouds(spec)
    times: Dict[str, float] = {}
    if model is None and spec.checkpoint:
        model = load_model(spec.train, spec.checkpoint)
    if model is None:
        model, report = pretrain(spec, train_clouds)
        times["train"] = report.wall_time
    out_dir = Path(spec.output_dir) if spec.output_dir and write else None
    accuracies, eval_times = evaluate(model, spec, train_clouds, test_clouds, output_dir=out_dir)
    times.update(eval_times)
    test_data = patch_split(test_clouds, spec.train, spec.data.seed, _TEST_SPLIT)
    coverage = mask_coverage(model, test_data, spec.train, spec.eval.coverage_draws, spec.train.seed)
    times["total"] = time.perf_counter() - t0
    record = MetricsRecord(experiment_id or spec.config_hash, spec.config_hash, accuracies, coverage, times,
                           spec.result_fields())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(out_dir / "metrics.jsonl", [record.to_dict()])
    return record


COMPONENT_ROWS = (
    ("no_mask/origin", "none", False),
    ("random/origin", "random", False),
    ("random/joint", "random", True),
    ("low_attention/origin", "low_attention", False),
    ("low_attention/joint", "low_attention", True),
    ("high_attention/origin", "dynamic_high", False),
    ("high_attention/joint", "dynamic_high", True),
)
RATIO_GRID = (0.2, 0.4, 0.6, 0.8)


def ablation_specs(base: ExperimentSpec) -> List[tuple]:
    """(row id, spec) for the 7 component rows and the fixed/dynamic x mask-ratio grid.

    Only ``strategy``, ``lam`` and ``mask_ratio`` vary; origin-only rows set ``lam = 0``.
    """
    if base.train.lam <= 0:
        raise ValueError("ablation base config needs lam > 0 for its joint-objective rows")
    rows = []
    for row_id, strategy, joint in COMPONENT_ROWS:
        rows.append((row_id, base.replace(strategy=strategy, lam=base.train.lam if joint else 0.0)))
    for strategy, tag in (("fixed_high", "fixed"), ("dynamic_high", "dynamic")):
        for ratio in RATIO_GRID:
            rows.append((f"{tag}/ratio={ratio:g}", base.replace(strategy=strategy, mask_ratio=ratio)))
    return rows


def run_ablation(base: ExperimentSpec) -> List[MetricsRecord]:
    records = []
    root = Path(base.output_dir) if base.output_dir else None
    for row_id, spec in ablation_specs(base):
        if root is not None:
            spec = dataclasses.replace(spec, output_dir=str(root / row_id.replace("/", "__").replace("=", "")))
        log.info("ablation row %s", row_id)
        records.append(run_experiment(dataclasses.replace(spec, checkpoint=None), experiment_id=row_id))
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        write_jsonl(root / "ablation.jsonl", [r.to_dict() for r in records])
    return records
