"""Acceptance criteria 1-7, each at its stated tolerance and runtime budget.

Every criterion records one ``[PASS]``/``[FAIL]`` line, printed in the terminal summary.
Criteria 4-6 train desk-scale models on the default data and take several minutes.
"""

import json
import statistics
import time

import numpy as np
import pytest
from conftest import tiny_config

import test_autodiff
from test_encoder import brute_significance, random_record
from test_geometry import brute_knn
from test_masking import brute_top_k, selection_freq, softmax, within_3_sigma
from test_objectives import naive_chamfer, naive_contrastive, unit_rows

from pointacl.autodiff import finite_diff_check, ops
from pointacl.encoder import significance
from pointacl.geometry import PointCloud, knn_group, synth_shape
from pointacl.harness import cli
from pointacl.harness.config import load_spec
from pointacl.harness.experiment import (
    _TEST_SPLIT, evaluate, load_clouds, mask_coverage, patch_split, pretrain,
)
from pointacl.masking import top_k_select
from pointacl.objectives import chamfer_loss, contrastive_loss
from pointacl.pipeline import PointACLModel, dual_branch_loss, prepare_patches

SEEDS = (0, 1, 2, 3, 4)
NOISE = "gaussian_noise:0.03"
NOISE_NAME = "gaussian_noise(sigma=0.03)"


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def default_spec(**train_changes):
    spec = load_spec(None, [f"eval.perturbations={NOISE}"], environ={})
    return spec.replace(**train_changes) if train_changes else spec


class _Runs:
    """Trained models shared by criteria 4-6 so each configuration trains once."""

    def __init__(self):
        self.cache = {}

    def get(self, seed, joint):
        key = (seed, joint)
        if key not in self.cache:
            spec = default_spec(seed=seed) if joint else default_spec(seed=seed, strategy="none", lam=0.0)
            t0 = time.perf_counter()
            model, _ = pretrain(spec)
            self.cache[key] = (spec, model, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs():
    return _Runs()


@pytest.fixture(scope="module")
def clouds():
    return load_clouds(default_spec())


def test_criterion_1_equation_oracles(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"significance": 0.0, "contrastive": 0.0, "chamfer": 0.0}
    mismatches = {"knn": 0, "top_k": 0}
    n = 100
    for _ in range(n):
        b, h, m = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 12))
        rec = random_record(rng, b, h, m)
        s = significance(rec)
        for i in range(b):
            oracle = brute_significance(rec.attention[0][i].tolist(), rec.value_norms[0][i].tolist())
            worst["significance"] = max(worst["significance"], max(rel_err(x, y) for x, y in zip(s[i], oracle)))

        bb, d = int(rng.integers(1, 8)), int(rng.integers(2, 10))
        tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
        Hm, Hs = unit_rows(rng, bb, d), unit_rows(rng, bb, d)
        worst["contrastive"] = max(worst["contrastive"], rel_err(
            contrastive_loss(Hm, Hs, tau).item(), naive_contrastive(Hm.tolist(), Hs.tolist(), tau)))

        a = rng.normal(size=(int(rng.integers(1, 10)), 3))
        c = rng.normal(size=(int(rng.integers(1, 10)), 3))
        worst["chamfer"] = max(worst["chamfer"], rel_err(chamfer_loss(a, c).item(), naive_chamfer(a.tolist(), c.tolist())))

        p = int(rng.integers(2, 40))
        pts = rng.integers(-2, 3, size=(p, 3)).astype(float)
        k = int(rng.integers(1, p + 1))
        centers = rng.choice(p, size=min(p, 3), replace=False)
        got = knn_group(PointCloud(pts), centers, k).neighbor_indices
        mismatches["knn"] += sum(row.tolist() != brute_knn(pts, ci, k) for ci, row in zip(centers, got))

        vals = np.round(rng.normal(size=int(rng.integers(1, 20))), 1)
        K = int(rng.integers(0, len(vals) + 1))
        mismatches["top_k"] += top_k_select(vals, K).tolist() != brute_top_k(vals.tolist(), K)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-9 for v in worst.values()) and not any(mismatches.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel {v:.1e}" for k, v in worst.items())
    detail += ", " + ", ".join(f"{k} mismatches {v}" for k, v in mismatches.items())
    acceptance_report("1 equation oracles", ok, f"{n} instances each; {detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradient_suite(acceptance_report):
    t0 = time.perf_counter()
    per_op = {}
    for name in ops.CORE_OPS:
        worst = 0.0
        for trial in range(100):
            f, params = test_autodiff.CASES[name](np.random.default_rng(trial))
            worst = max(worst, finite_diff_check(f, params, step=test_autodiff.STEP))
        per_op[name] = worst
    cfg = tiny_config()
    model = PointACLModel(cfg)
    data = prepare_patches([synth_shape(k, 48, seed=i) for i, k in enumerate(("sphere", "torus"))], 6, 4, seed=1)
    full = finite_diff_check(lambda: dual_branch_loss(data.local, data.centers, model, cfg, [11, 12]).total,
                             model.parameters(), step=1e-5)
    elapsed = time.perf_counter() - t0
    worst_op = max(per_op, key=per_op.get)
    ok = per_op[worst_op] < 1e-5 and full < 1e-3 and elapsed < 120
    acceptance_report("2 gradient suite", ok, f"{len(per_op)} ops, worst {worst_op} {per_op[worst_op]:.1e} "
                      f"(<1e-5); full dual-branch loss {full:.1e} (<1e-3); {elapsed:.1f}s")
    assert ok


def test_criterion_3_gumbel_statistics(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for trial in range(20):
        n = int(rng.integers(2, 9))
        S, tau = rng.dirichlet(np.ones(n)), float(rng.uniform(0.05, 2.0))
        failures += not np.all(within_3_sigma(selection_freq(S, tau, seed=trial), softmax(list(S / tau))))
    hot = selection_freq(np.array([0.6, 0.25, 0.1, 0.05]), 1e3, seed=5)
    hot_ok = bool(np.all(within_3_sigma(hot, np.full(4, 0.25))))
    cold = selection_freq(np.array([0.1, 0.45, 0.3, 0.15]), 1e-3, seed=6)[1]
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and hot_ok and cold >= 0.999 and elapsed < 60
    acceptance_report("3 gumbel-top-k statistics", ok, f"{20 - failures}/20 pairs within 3 sigma at 1e5 draws; "
                      f"tau=1e3 uniform {hot_ok}; tau=1e-3 argmax freq {cold:.5f}; {elapsed:.1f}s")
    assert ok


def probe_accuracy(model, spec, clouds, perturbations=()):
    acc, _ = evaluate(model, spec, clouds[0], clouds[1], perturbations=list(perturbations))
    return acc


@pytest.mark.slow
def test_criterion_4_toy_pretraining_signal(runs, clouds, acceptance_report):
    spec, model, train_time = runs.get(0, joint=True)
    t0 = time.perf_counter()
    trained = probe_accuracy(model, spec, clouds)["clean"]
    untrained = probe_accuracy(PointACLModel(spec.train), spec, clouds)["clean"]
    elapsed = train_time + time.perf_counter() - t0
    ok = trained >= 0.85 and untrained <= 0.45 and elapsed < 600
    acceptance_report("4 toy pretraining signal", ok, f"trained {trained:.3f} (>=0.85), random init {untrained:.3f} "
                      f"(<=0.45); {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_robustness_direction(runs, clouds, acceptance_report):
    t0 = time.perf_counter()
    drops = {True: [], False: []}
    for seed in SEEDS:
        for joint in (True, False):
            spec, model, _ = runs.get(seed, joint)
            acc = probe_accuracy(model, spec, clouds, spec.eval.perturbation_objects())
            drops[joint].append(acc["clean"] - acc[NOISE_NAME])
    elapsed = time.perf_counter() - t0
    joint, origin = statistics.median(drops[True]), statistics.median(drops[False])
    ok = joint <= origin and elapsed < 3600
    acceptance_report("5 robustness direction", ok, f"median clean-minus-noisy drop: joint dynamic-high {joint:.3f} "
                      f"vs origin-only {origin:.3f} over seeds {list(SEEDS)}; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_masking_coverage(runs, clouds, acceptance_report):
    spec, model, _ = runs.get(0, joint=True)
    t0 = time.perf_counter()
    test_data = patch_split(clouds[1], spec.train, spec.data.seed, _TEST_SPLIT)
    cov = mask_coverage(model, test_data, spec.train, 200, spec.train.seed)
    elapsed = time.perf_counter() - t0
    ok = cov["frac_exceeds_fixed"] >= 0.9 and elapsed < 300
    acceptance_report("6 masking coverage", ok, f"{cov['frac_exceeds_fixed']:.3f} of {len(test_data)} test samples "
                      f"exceed K={int(cov['K'])} (>=0.90); mean distinct {cov['mean_distinct_dynamic']:.2f}, "
                      f"min {int(cov['min_distinct_dynamic'])}; {elapsed:.1f}s")
    assert ok


TINY_FLAGS = [
    "train.epochs_stage1=1", "train.epochs_stage2=1", "train.batch_size=4", "train.depth=1", "train.d=8",
    "train.heads=2", "train.n_patches=6", "train.group_size=4", "train.hidden=8", "train.d_proj=8",
    "train.mask_ratio=0.5", "data.train_per_class=3", "data.test_per_class=2", "data.n_points=32",
    "eval.coverage_draws=20", "eval.export_features=true",
]
_WALL_KEYS = ("wall_time", "wall_times")


def _strip_wall(obj):
    if isinstance(obj, dict):
        return {k: _strip_wall(v) for k, v in obj.items() if k not in _WALL_KEYS}
    if isinstance(obj, list):
        return [_strip_wall(v) for v in obj]
    return obj


def _snapshot(root):
    """Every output file's content, with wall-time fields removed from JSON lines and paths relativized."""
    snap = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        raw = path.read_bytes()
        if path.suffix == ".jsonl":
            rows = [_strip_wall(json.loads(line)) for line in raw.decode().splitlines()]
            raw = json.dumps(rows, sort_keys=True).replace(str(root), "<root>").encode()
        snap[str(path.relative_to(root))] = raw
    return snap


def _run_all(root, capsys):
    flags = [x for item in TINY_FLAGS for x in ("--set", item)] + ["--seed", "7", "--data-seed", "3"]
    ckpt = str(root / "pre" / "final.ckpt")
    commands = [
        ["pretrain", *flags, "--output-dir", str(root / "pre")],
        ["probe", *flags, "--checkpoint", ckpt, "--output-dir", str(root / "probe")],
        ["robustness", *flags, "--checkpoint", ckpt, "--output-dir", str(root / "rob")],
        ["export-masks", *flags, "--checkpoint", ckpt, "--output-dir", str(root / "masks")],
        ["ablate", *flags, "--output-dir", str(root / "abl")],
    ]
    stdout = []
    for argv in commands:
        code = cli.main(argv)
        out, err = capsys.readouterr()
        assert code == 0, err
        stdout.append(out.replace(str(root), "<root>"))
    return stdout, _snapshot(root)


def test_criterion_7_cli_determinism(tmp_path, capsys, acceptance_report):
    out_a, snap_a = _run_all(tmp_path / "a", capsys)
    out_b, snap_b = _run_all(tmp_path / "b", capsys)
    differing = sorted(k for k in set(snap_a) | set(snap_b) if snap_a.get(k) != snap_b.get(k))
    ok = not differing and out_a == out_b and len(snap_a) > 0
    ckpts = sum(k.endswith(".ckpt") for k in snap_a)
    acceptance_report("7 determinism", ok, f"5 subcommands rerun: {len(snap_a)} files ({ckpts} checkpoints) "
                      f"compared, {len(differing)} differ{': ' + ', '.join(differing[:5]) if differing else ''}")
    assert ok
