"""Dataset directories, feature extraction over many scenes and probe evaluation helpers."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import (
    IGNORE,
    HierFeatures,
    ProbeConfig,
    build_superpoints,
    extract_hier_features,
    instance_probe,
    linear_probe,
    miou,
    nn_probe,
)
from .grad import ParamSet
from .hunet import HUNetConfig
from .scene import CLASS_NAMES, PointCloud, SceneSpec, generate_scene, read_ply, write_ply

MANIFEST = "manifest.tsv"
INDEX = "index.tsv"
DUMP_SUFFIX = ".msmf"


# ----------------------------------------------------------------------------
# datasets on disk

@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    path: Path
    split: str


def split_assignment(n: int, seed: int, train_fraction: float = 0.8) -> list[str]:
    """80/20 train/val labels for ``n`` scenes, drawn from ``seed``."""
    n_train = int(round(train_fraction * n))
    order = np.random.default_rng([seed, 0xDA7A]).permutation(n)
    split = ["val"] * n
    for i in order[:n_train]:
        split[int(i)] = "train"
    return split


def scene_spec_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(out_dir, n: int, seed: int, jobs: int = 1) -> list[SceneEntry]:
    """Write ``n`` synthetic PLY scenes and their train/val manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = split_assignment(n, seed)
    entries = [SceneEntry(f"scene_{i:05d}", out / f"scene_{i:05d}.ply", split[i]) for i in range(n)]

    def make(i):
        e = entries[i]
        write_ply(generate_scene(SceneSpec(seed=scene_spec_seed(seed, i), scene_id=e.scene_id)), e.path)

    _map(make, range(n), jobs)
    write_manifest(out / MANIFEST, entries)
    return entries


def write_manifest(path, entries: list[SceneEntry]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("scene\tfile\tsplit\n")
        for e in entries:
            fh.write(f"{e.scene_id}\t{e.path.name}\t{e.split}\n")


def read_manifest(data_dir) -> list[SceneEntry]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.is_file():
        raise FormatError(f"{root}: no {MANIFEST}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != ["scene", "file", "split"]:
        raise FormatError(f"{path}: bad header")
    entries = []
    for row in rows[1:]:
        if len(row) != 3 or row[2] not in ("train", "val"):
            raise FormatError(f"{path}: bad row {row!r}")
        entries.append(SceneEntry(row[0], root / row[1], row[2]))
    return entries


def select_split(entries: list[SceneEntry], split: str) -> list[SceneEntry]:
    if split == "all":
        return list(entries)
    return [e for e in entries if e.split == split]


def load_scenes(entries: list[SceneEntry], jobs: int = 1) -> list[PointCloud]:
    return _map(lambda e: read_ply(e.path), entries, jobs)


def _map(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ----------------------------------------------------------------------------
# features

def scene_features(params: ParamSet, model: HUNetConfig, clouds: list[PointCloud], voxel_size: float,
                   levels=None, jobs: int = 1) -> list[HierFeatures]:
    """Frozen hierarchical features for every cloud; order and values do not depend on ``jobs``."""
    return _map(lambda c: extract_hier_features(params, model, c, voxel_size, levels), clouds, jobs)


def read_index(dump_dir) -> list[tuple[str, Path, Path | None]]:
    """(scene id, dump path, source PLY or None) for a feature directory."""
    root = Path(dump_dir)
    index = root / INDEX
    if index.is_file():
        with open(index, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        if not rows or rows[0] != ["scene", "dump", "ply"]:
            raise FormatError(f"{index}: bad header")
        out = []
        for row in rows[1:]:
            if len(row) != 3:
                raise FormatError(f"{index}: bad row {row!r}")
            out.append((row[0], root / row[1], Path(row[2]) if row[2] else None))
        return out
    dumps = sorted(root.glob(f"*{DUMP_SUFFIX}"))
    if not dumps and not root.is_dir():
        raise FormatError(f"{root}: not a feature directory")
    return [(p.stem, p, None) for p in dumps]


def write_index(dump_dir, rows: list[tuple[str, str, str]]) -> None:
    with open(Path(dump_dir) / INDEX, "w", newline="") as fh:
        fh.write("scene\tdump\tply\n")
        for scene, dump, ply in rows:
            fh.write(f"{scene}\t{dump}\t{ply}\n")


# ----------------------------------------------------------------------------
# probes

@dataclass
class ProbeData:
    features: list[np.ndarray]
    labels: list[np.ndarray]
    clouds: list[PointCloud] | None = None


def linear_miou(train: ProbeData, val: ProbeData, cfg: ProbeConfig) -> tuple[float, np.ndarray]:
    """Best-epoch val mIoU of a linear probe, plus the per-class IoU of that head."""
    head, score = linear_probe(np.concatenate(train.features), np.concatenate(train.labels),
                               np.concatenate(val.features), np.concatenate(val.labels), cfg)
    per_class, _ = miou(head.predict(np.concatenate(val.features)), np.concatenate(val.labels),
                        cfg.num_classes)
    return score, per_class


def nn_miou(train: ProbeData, val: ProbeData, metric: str = "L2", cell: float = 0.25,
            unit_norm: bool = False) -> tuple[float, np.ndarray]:
    if train.clouds is None or val.clouds is None:
        raise FormatError("the nearest-neighbor probe needs the source scenes for superpoints")
    sp_tr = [build_superpoints(c, cell) for c in train.clouds]
    sp_va = [build_superpoints(c, cell) for c in val.clouds]
    pred = nn_probe(train.features, train.labels, sp_tr, val.features, sp_va, metric, unit_norm)
    per_class, score = miou(np.concatenate(pred), np.concatenate(val.labels))
    return score, per_class


def instance_map(train: ProbeData, val: ProbeData, settings, seed: int) -> float:
    if train.clouds is None or val.clouds is None:
        raise FormatError("the instance probe needs the source scenes for positions and instances")
    tr = [c.with_labels(y) for c, y in zip(train.clouds, train.labels)]
    return instance_probe(train.features, tr, val.features, val.clouds,
                          settings.instance_config(seed), settings.probe_config(seed))


def labeled_fraction(labels: list[np.ndarray]) -> float:
    total = sum(len(y) for y in labels)
    return sum(int(np.sum(y != IGNORE)) for y in labels) / total if total else 0.0


# ----------------------------------------------------------------------------
# reports

REPORT_HEADER = ("task", "split", "metric", "value")


def format_value(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def class_rows(task: str, split: str, per_class: np.ndarray) -> list[tuple[str, str, str, float]]:
    return [(task, split, f"IoU[{name}]", float(v)) for name, v in zip(CLASS_NAMES, per_class)]


def write_report(path, rows: list[tuple[str, str, str, float]]) -> str:
    lines = ["\t".join(REPORT_HEADER)] + [f"{t}\t{s}\t{m}\t{format_value(v)}" for t, s, m, v in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    return text
