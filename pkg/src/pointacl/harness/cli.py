"""``pointacl`` command line.

Every subcommand reads an optional INI config (``--config``), then ``POINTACL_*`` environment
variables, then ``--set section.key=value`` and the dedicated flags. Failures print a
single JSON line ``{"error": <kind>, "message": <text>}`` to stderr; usage errors exit 2,
runtime errors exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..autodiff import CheckpointError
from ..masking import decide_mask, write_mask_records
from ..pipeline import TrainingError, attention_significance, derive_seed
from .config import ConfigError, ExperimentSpec, load_spec
from .experiment import (MetricsRecord, _TEST_SPLIT, evaluate, load_clouds, load_model, patch_split,
                         pretrain, run_ablation)
from .io import ParseError, write_jsonl

_MASK_STREAM = 13


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser, checkpoint: bool) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--data-seed", type=int, help="data seed (data.seed)")
    p.add_argument("--output-dir", help="output directory (output.dir)")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint file (output.checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointacl", description="Attention-driven contrastive point-cloud pretraining")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add_common(sub.add_parser("pretrain", help="two-stage pretraining; writes checkpoints + train log"), False)
    _add_common(sub.add_parser("probe", help="clean k-NN probe accuracy of a checkpoint"), True)
    _add_common(sub.add_parser("robustness", help="probe accuracy under each configured perturbation"), True)
    _add_common(sub.add_parser("ablate", help="component ablation and mask-ratio grid"), False)
    p = sub.add_parser("export-masks", help="one mask decision per test sample as JSON lines")
    _add_common(p, True)
    p.add_argument("--output", help="output file (default: <output-dir>/masks.jsonl)")
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.data_seed is not None:
        overrides.append(f"data.seed={args.data_seed}")
    if args.output_dir is not None:
        overrides.append(f"output.dir={args.output_dir}")
    if getattr(args, "checkpoint", None) is not None:
        overrides.append(f"output.checkpoint={args.checkpoint}")
    return load_spec(args.config, overrides)


def _require(value, what: str):
    if not value:
        raise UsageError(f"missing required {what}")
    return value


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_pretrain(spec: ExperimentSpec, args) -> int:
    _require(spec.output_dir, "--output-dir (or output.dir)")
    _, report = pretrain(spec)
    _emit({"checkpoints": report.checkpoints, "epochs": len(report.epochs),
           "final": report.epochs[-1] if report.epochs else None})
    return 0


def _evaluate_checkpoint(spec: ExperimentSpec, perturbations, experiment_id: str) -> MetricsRecord:
    ckpt = _require(spec.checkpoint, "--checkpoint (or output.checkpoint)")
    model = load_model(spec.train, ckpt)
    train_clouds, test_clouds = load_clouds(spec)
    out_dir = Path(spec.output_dir) if spec.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    accuracies, times = evaluate(model, spec, train_clouds, test_clouds, perturbations, out_dir)
    record = MetricsRecord(experiment_id, spec.config_hash, accuracies, {}, times, spec.result_fields())
    if out_dir is not None:
        write_jsonl(out_dir / f"{experiment_id}_metrics.jsonl", [record.to_dict()])
    return record


def cmd_probe(spec: ExperimentSpec, args) -> int:
    _emit(_evaluate_checkpoint(spec, [], "probe").accuracies)
    return 0


def cmd_robustness(spec: ExperimentSpec, args) -> int:
    _emit(_evaluate_checkpoint(spec, None, "robustness").accuracies)
    return 0


def cmd_ablate(spec: ExperimentSpec, args) -> int:
    _require(spec.output_dir, "--output-dir (or output.dir)")
    for rec in run_ablation(spec):
        _emit({"row": rec.experiment_id, "config_hash": rec.config_hash, "accuracies": rec.accuracies})
    return 0


def cmd_export_masks(spec: ExperimentSpec, args) -> int:
    ckpt = _require(spec.checkpoint, "--checkpoint (or output.checkpoint)")
    if args.output:
        target = Path(args.output)
    else:
        target = Path(_require(spec.output_dir, "--output or --output-dir")) / "masks.jsonl"
    target.parent.mkdir(parents=True, exist_ok=True)
    cfg = spec.train
    model = load_model(cfg, ckpt)
    _, test_clouds = load_clouds(spec)
    data = patch_split(test_clouds, cfg, spec.data.seed, _TEST_SPLIT)
    S = attention_significance(model, data, cfg.significance_layer)
    decisions = ((i, decide_mask(S[i], cfg.strategy, cfg.mask_k, cfg.tau_pro, derive_seed(cfg.seed, _MASK_STREAM, i)))
                 for i in range(len(data)))
    n = write_mask_records(target, decisions)
    _emit({"masks": str(target), "rows": n})
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "robustness": cmd_robustness,
    "ablate": cmd_ablate,
    "export-masks": cmd_export_masks,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        spec = _spec_from_args(args)
        return COMMANDS[args.command](spec, args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, 2)
    except (ParseError, CheckpointError) as exc:
        return _fail("input", exc, 1)
    except TrainingError as exc:
        return _fail("training", exc, 1)
    except (OSError, ValueError, KeyError) as exc:
        return _fail("runtime", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
