"""On-disk formats: feature matrices, labels, descriptions, groups, splits.

Binary feature files carry magic "LAGO", a little-endian u32 format
version, u64 row and column counts, then row-major 32-bit floats
(widened to float64 on load). CSV feature files have no header and one
sample per row.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .data import ClassDescriptions, Dataset, Group, GroupSpec, SplitSpec
from .numerics import require_matrix

__all__ = [
    "FEATURE_MAGIC",
    "FEATURE_VERSION",
    "read_matrix",
    "write_matrix",
    "read_labels",
    "write_labels",
    "read_descriptions",
    "write_descriptions",
    "read_groups",
    "write_groups",
    "read_splits",
    "write_splits",
    "load_dataset",
]

FEATURE_MAGIC = b"LAGO"
FEATURE_VERSION = 1


def write_matrix(path, m: np.ndarray) -> None:
    """Write a matrix; `.csv` suffix selects CSV, anything else binary."""
    path = Path(path)
    m = require_matrix(m, "matrix")
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            for row in m:
                writer.writerow([repr(v) for v in row])
        return
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        fh.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a feature matrix, sniffing binary vs. CSV from the magic bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open("rb") as fh:
        head = fh.read(4)
        if head == FEATURE_MAGIC:
            (version,) = struct.unpack("<I", fh.read(4))
            if version != FEATURE_VERSION:
                raise ValueError(f"{path}: unsupported format version {version}")
            rows, cols = struct.unpack("<QQ", fh.read(16))
            payload = fh.read(rows * cols * 4)
            if len(payload) != rows * cols * 4:
                raise ValueError(f"{path}: truncated payload")
            data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            return data.reshape(rows, cols)
    return _read_csv_matrix(path)


def _read_csv_matrix(path: Path) -> np.ndarray:
    rows = []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ValueError(f"{path}: malformed row {lineno}: {row!r}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ValueError(
                    f"{path}: row {lineno} has {len(vals)} columns, expected {width}"
                )
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    return require_matrix(np.array(rows, dtype=np.float64), str(path))


def write_labels(path, names) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def read_labels(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return [line for line in path.read_text().splitlines() if line.strip()]


def write_descriptions(path, desc: ClassDescriptions) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(desc.class_names))
        for m, name in enumerate(desc.attribute_names):
            writer.writerow([name] + [repr(v) for v in desc.u[m]])


def read_descriptions(path) -> ClassDescriptions:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty descriptions file") from None
        class_names = [c for c in header[1:]]
        attr_names = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(class_names) + 1:
                raise ValueError(
                    f"{path}: row {lineno} has {len(row)} cells, "
                    f"expected {len(class_names) + 1}"
                )
            attr_names.append(row[0])
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError:
                raise ValueError(f"{path}: malformed row {lineno}") from None
    return ClassDescriptions(
        np.array(rows, dtype=np.float64), tuple(attr_names), tuple(class_names)
    )


def write_groups(path, spec: GroupSpec, attribute_names) -> None:
    names = list(attribute_names)
    payload = {
        "groups": [
            {"name": g.name, "attributes": [names[m] for m in g.attributes]}
            for g in spec.groups
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_groups(path, attribute_names, auto_singletons: bool = True) -> GroupSpec:
    """Load a group file, resolving attribute names against the registry.

    Attributes missing from every group become singleton groups unless
    `auto_singletons` is disabled.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    payload = json.loads(path.read_text())
    index = {name: m for m, name in enumerate(attribute_names)}
    groups = []
    for entry in payload.get("groups", []):
        attrs = []
        for name in entry["attributes"]:
            if name not in index:
                raise ValueError(f"{path}: unknown attribute {name!r} in group "
                                 f"{entry.get('name')!r}")
            attrs.append(index[name])
        groups.append(Group(str(entry["name"]), tuple(attrs)))
    spec = GroupSpec(tuple(groups))
    if auto_singletons:
        spec = spec.with_singletons(attribute_names)
    return spec


def write_splits(path, split: SplitSpec) -> None:
    payload = {"train": list(split.train), "val": list(split.val), "test": list(split.test)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_splits(path) -> SplitSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    payload = json.loads(path.read_text())
    for part in ("train", "val", "test"):
        if part not in payload:
            raise ValueError(f"{path}: missing split {part!r}")
    return SplitSpec(tuple(payload["train"]), tuple(payload["val"]), tuple(payload["test"]))


def load_dataset(
    feature_path,
    labels_path,
    attr_labels_path=None,
    *,
    class_names,
    attribute_names,
) -> Dataset:
    """Assemble a Dataset from files, validating row counts and names."""
    features = read_matrix(feature_path)
    label_names = read_labels(labels_path)
    if len(label_names) != features.shape[0]:
        raise ValueError(
            f"row count mismatch: {features.shape[0]} feature rows vs "
            f"{len(label_names)} labels"
        )
    index = {name: i for i, name in enumerate(class_names)}
    labels = np.empty(len(label_names), dtype=np.int64)
    for i, name in enumerate(label_names):
        if name not in index:
            raise ValueError(f"labels row {i + 1}: unknown class name {name!r}")
        labels[i] = index[name]
    attr_labels = None
    if attr_labels_path is not None:
        attr_labels = read_matrix(attr_labels_path)
        if attr_labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"row count mismatch: {features.shape[0]} feature rows vs "
                f"{attr_labels.shape[0]} attribute-label rows"
            )
    return Dataset(
        features=features,
        labels=labels,
        class_names=tuple(class_names),
        attribute_names=tuple(attribute_names),
        attribute_labels=attr_labels,
    )
