"""Labeled datasets, manifests and the on-disk feature/label formats."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BINARY_MAGIC = b"CLTMF64\x00"


class DataError(ValueError):
    """Input files that violate the manifest contract."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    label_names: list[str]
    scenes: np.ndarray | None = None
    split: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DataError("features and labels must be 2-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} label rows"
            )
        if len(self.label_names) != self.labels.shape[1]:
            raise DataError("label_names length does not match label columns")
        if self.scenes is not None:
            self.scenes = np.asarray(self.scenes, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=int)
        return LabeledDataset(
            self.features[index],
            self.labels[index],
            list(self.label_names),
            None if self.scenes is None else self.scenes[index],
        )

    def part(self, name: str) -> "LabeledDataset":
        """Named split (``train``/``validation``), or the whole set for ``all``."""
        if name == "all":
            return self
        if name not in self.split:
            if name == "train" and not self.split:
                return self
            raise DataError(f"dataset has no {name!r} split")
        return self.subset(self.split[name])

    def validation_report(self) -> dict:
        freq = self.labels.mean(axis=0)
        constant = [self.label_names[j] for j in np.flatnonzero((freq == 0) | (freq == 1))]
        for name in constant:
            log.warning("label %s is constant over the dataset", name)
        return {
            "n": self.n,
            "d": self.d,
            "L": self.n_labels,
            "label_frequencies": {k: float(v) for k, v in zip(self.label_names, freq)},
            "constant_labels": constant,
        }


def write_matrix_csv(path: Path, matrix: np.ndarray, integer: bool = False) -> None:
    matrix = np.atleast_2d(matrix)
    with open(path, "w") as fh:
        for row in matrix:
            if integer:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
            else:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path: Path) -> list[list[str]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([c.strip() for c in line.split(",")])
    return rows


def write_features_binary(path: Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<QQ", *features.shape))
        fh.write(features.tobytes())


def read_features_binary(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != BINARY_MAGIC:
        raise DataError(f"{path}: bad magic")
    rows, cols = struct.unpack("<QQ", raw[8:24])
    body = raw[24:]
    if len(body) != rows * cols * 8:
        raise DataError(f"{path}: expected {rows}x{cols} doubles, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def read_features(path: Path, n: int, d: int) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bin":
        x = read_features_binary(path)
    else:
        rows = read_matrix_csv(path)
        x = np.empty((len(rows), d))
        for i, row in enumerate(rows):
            if len(row) != d:
                raise DataError(f"{path}: row {i} has {len(row)} columns, expected {d}")
            for j, cell in enumerate(row):
                try:
                    x[i, j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric feature at row {i}, column {j}") from None
    if x.shape != (n, d):
        raise DataError(f"{path}: shape {x.shape} does not match declared ({n}, {d})")
    bad = np.argwhere(~np.isfinite(x))
    if len(bad):
        i, j = bad[0]
        raise DataError(f"{path}: non-finite feature at row {i}, column {j}")
    return x


def read_labels(path: Path, n: int, n_labels: int) -> np.ndarray:
    rows = read_matrix_csv(path)
    if len(rows) != n:
        raise DataError(f"{path}: {len(rows)} rows, expected {n}")
    y = np.empty((n, n_labels), dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != n_labels:
            raise DataError(f"{path}: row {i} has {len(row)} columns, expected {n_labels}")
        for j, cell in enumerate(row):
            if cell not in ("0", "1"):
                raise DataError(f"{path}: non-binary label {cell!r} at row {i}, column {j}")
            y[i, j] = int(cell)
    return y


def read_scenes(path: Path, n: int) -> np.ndarray:
    rows = read_matrix_csv(path)
    if len(rows) != n:
        raise DataError(f"{path}: {len(rows)} scene rows, expected {n}")
    try:
        return np.array([int(r[0]) for r in rows], dtype=np.int64)
    except ValueError:
        raise DataError(f"{path}: scene labels must be integers") from None


def ingest(manifest_path) -> LabeledDataset:
    """Load a dataset described by a JSON manifest; paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    for key in ("n", "d", "L", "features", "labels", "label_names"):
        if key not in manifest:
            raise DataError(f"manifest missing {key!r}")
    n, d, n_labels = int(manifest["n"]), int(manifest["d"]), int(manifest["L"])
    names = [str(s) for s in manifest["label_names"]]
    if len(names) != n_labels:
        raise DataError(f"manifest declares L={n_labels} but lists {len(names)} label names")
    base = manifest_path.parent
    x = read_features(base / manifest["features"], n, d)
    y = read_labels(base / manifest["labels"], n, n_labels)
    scenes = read_scenes(base / manifest["scenes"], n) if manifest.get("scenes") else None
    split = {}
    for name, idx in (manifest.get("split") or {}).items():
        idx = [int(i) for i in idx]
        if any(i < 0 or i >= n for i in idx):
            raise DataError(f"split {name!r} has out-of-range indices")
        split[name] = idx
    ds = LabeledDataset(x, y, names, scenes, split)
    ds.validation_report()
    return ds


def write_dataset(
    out_dir,
    dataset: LabeledDataset,
    binary: bool = False,
    stem: str = "",
) -> Path:
    """Write features, labels, optional scenes and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feat_name = f"{stem}features.bin" if binary else f"{stem}features.csv"
    if binary:
        write_features_binary(out_dir / feat_name, dataset.features)
    else:
        write_matrix_csv(out_dir / feat_name, dataset.features)
    write_matrix_csv(out_dir / f"{stem}labels.csv", dataset.labels, integer=True)
    manifest = {
        "n": dataset.n,
        "d": dataset.d,
        "L": dataset.n_labels,
        "features": feat_name,
        "labels": f"{stem}labels.csv",
        "label_names": list(dataset.label_names),
    }
    if dataset.scenes is not None:
        write_matrix_csv(out_dir / f"{stem}scenes.csv", dataset.scenes[:, None], integer=True)
        manifest["scenes"] = f"{stem}scenes.csv"
    if dataset.split:
        manifest["split"] = {k: list(map(int, v)) for k, v in dataset.split.items()}
    path = out_dir / f"{stem}manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
