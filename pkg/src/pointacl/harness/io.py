"""Point-cloud readers/writers (xyz, OFF) and small tabular exports."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..geometry import PointCloud

CLOUD_SUFFIXES = {".xyz": "xyz", ".off": "off"}


class ParseError(ValueError):
    def __init__(self, path, line: Optional[int], message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def _finite_triple(tokens, path, lineno) -> list:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"expected numeric coordinates, got {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, lineno, "non-finite coordinate")
    return vals


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_xyz(text: str, path="<string>") -> PointCloud:
    points, labels = [], set()
    labelled = None
    for lineno, line in _content_lines(text):
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise ParseError(path, lineno, f"expected 3 coordinates and an optional label, got {len(tokens)} fields")
        points.append(_finite_triple(tokens[:3], path, lineno))
        has_label = len(tokens) == 4
        if labelled is None:
            labelled = has_label
        elif labelled != has_label:
            raise ParseError(path, lineno, "label column must be present on every line or on none")
        if has_label:
            labels.add(tokens[3])
            if len(labels) > 1:
                raise ParseError(path, lineno, f"conflicting labels {sorted(labels)}")
    if not points:
        raise ValueError(f"{path}: empty point cloud file")
    return PointCloud(np.array(points), labels.pop() if labels else None)


def parse_off(text: str, path="<string>") -> PointCloud:
    lines = list(_content_lines(text))
    if not lines:
        raise ValueError(f"{path}: empty point cloud file")
    lineno, head = lines[0]
    if not head.startswith("OFF"):
        raise ParseError(path, lineno, "missing OFF header")
    rest = head[3:].split()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError(path, lineno, "missing vertex/face counts")
        lineno, counts_line = lines[1]
        rest = counts_line.split()
        pos = 2
    try:
        n_vertices = int(rest[0])
        [int(x) for x in rest[1:3]]
    except (ValueError, IndexError):
        raise ParseError(path, lineno, f"bad count line {' '.join(rest)!r}") from None
    if n_vertices < 1:
        raise ValueError(f"{path}: OFF file declares no vertices")
    if len(lines) < pos + n_vertices:
        last = lines[-1][0]
        raise ParseError(path, last, f"expected {n_vertices} vertices, file ends after {len(lines) - pos}")
    points = []
    for lineno, line in lines[pos:pos + n_vertices]:
        tokens = line.split()
        if len(tokens) < 3:
            raise ParseError(path, lineno, f"vertex line needs 3 coordinates, got {len(tokens)}")
        points.append(_finite_triple(tokens[:3], path, lineno))
    return PointCloud(np.array(points))


def read_cloud(path, fmt: Optional[str] = None, label=None) -> PointCloud:
    """Read an ``xyz`` or ``off`` file; the format defaults to the file suffix."""
    path = Path(path)
    fmt = fmt or CLOUD_SUFFIXES.get(path.suffix.lower())
    if fmt not in ("xyz", "off"):
        raise ValueError(f"{path}: unknown point cloud format {fmt!r}")
    text = path.read_text(encoding="utf-8")
    cloud = parse_xyz(text, path) if fmt == "xyz" else parse_off(text, path)
    if label is not None and cloud.label is None:
        cloud = PointCloud(cloud.points, label)
    return cloud


def format_xyz(cloud: PointCloud, with_label: bool = True) -> str:
    label = f" {cloud.label}" if with_label and cloud.label is not None else ""
    return "".join(f"{x:.17g} {y:.17g} {z:.17g}{label}\n" for x, y, z in cloud.points)


def write_xyz(path, cloud: PointCloud, with_label: bool = True) -> Path:
    path = Path(path)
    path.write_text(format_xyz(cloud, with_label), encoding="utf-8")
    return path


def read_cloud_dir(root) -> list:
    """All clouds under ``root``; files without an inline label take their directory name."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise ValueError(f"{root}: no .xyz or .off files found")
    return [read_cloud(p, label=p.parent.name) for p in files]


def write_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_features(path, features: np.ndarray, labels: Sequence) -> Path:
    """Tab-separated feature rows with the label in the last column."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row, label in zip(features, labels):
            fh.write("\t".join(f"{v:.17g}" for v in row) + f"\t{label}\n")
    return path
