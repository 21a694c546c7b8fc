"""Datasets, class descriptions, attribute groups, splits, and synthetic benchmarks.

A class description matrix holds p(attribute=True | class) with one column
per class. Groups partition attributes into named sets of alternatives.
Everything here is immutable once built and safe to share across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import make_rng, require_matrix

__all__ = [
    "DESCRIPTION_EPS",
    "Dataset",
    "ClassDescriptions",
    "Group",
    "GroupSpec",
    "SplitSpec",
    "AttributePrior",
    "SyntheticConfig",
    "SyntheticBenchmark",
    "estimate_class_descriptions",
    "estimate_attribute_prior",
    "normalize_group_sums",
    "normalize_group_sums_array",
    "inject_salt_pepper",
    "generate_synthetic",
    "subset_for_classes",
    "clamp_descriptions",
]

# Descriptions are clamped to [eps, 1-eps] before entering the model so
# log-space products and prior ratios never hit 0 or 1 exactly.
DESCRIPTION_EPS = 1e-6


def clamp_descriptions(u: np.ndarray) -> np.ndarray:
    return np.clip(u, DESCRIPTION_EPS, 1.0 - DESCRIPTION_EPS)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus aligned labels and optional per-sample attributes."""

    features: np.ndarray  # N x D float64
    labels: np.ndarray  # N ints indexing class_names
    class_names: tuple[str, ...]
    attribute_names: tuple[str, ...]
    attribute_labels: np.ndarray | None = None  # N x |A| in {0,1}

    def __post_init__(self):
        feats = require_matrix(self.features, "features")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError(
                f"labels: expected {feats.shape[0]} entries, got shape {labels.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError("labels: class index out of range")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        if self.attribute_labels is not None:
            attrs = require_matrix(self.attribute_labels, "attribute_labels")
            if attrs.shape != (feats.shape[0], len(self.attribute_names)):
                raise ValueError(
                    f"attribute_labels: expected shape "
                    f"{(feats.shape[0], len(self.attribute_names))}, got {attrs.shape}"
                )
            if not np.all((attrs == 0.0) | (attrs == 1.0)):
                raise ValueError("attribute_labels: entries must be 0 or 1")
            object.__setattr__(self, "attribute_labels", attrs)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClassDescriptions:
    """Matrix of p(attribute=True | class), attributes x classes."""

    u: np.ndarray
    attribute_names: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        u = require_matrix(self.u, "descriptions")
        if u.shape != (len(self.attribute_names), len(self.class_names)):
            raise ValueError(
                f"descriptions: expected shape "
                f"{(len(self.attribute_names), len(self.class_names))}, got {u.shape}"
            )
        if u.min() < 0.0 or u.max() > 1.0:
            raise ValueError("descriptions: entries must lie in [0, 1]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def columns_for(self, names) -> np.ndarray:
        """Sub-matrix for the given class names, in the given order."""
        index = {name: i for i, name in enumerate(self.class_names)}
        try:
            cols = [index[name] for name in names]
        except KeyError as exc:
            raise ValueError(f"unknown class name: {exc.args[0]!r}") from None
        return self.u[:, cols].copy()


@dataclass(frozen=True)
class Group:
    name: str
    attributes: tuple[int, ...]


@dataclass(frozen=True)
class GroupSpec:
    """Hard partition of attribute indices into named groups.

    Attributes left out of every group are allowed at construction; loaders
    wrap them as singleton groups via `with_singletons` before training.
    """

    groups: tuple[Group, ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "groups",
            tuple(Group(g.name, tuple(int(i) for i in g.attributes)) for g in self.groups),
        )
        seen: set[int] = set()
        for g in self.groups:
            for m in g.attributes:
                if m < 0:
                    raise ValueError(f"group {g.name!r}: negative attribute index")
                if m in seen:
                    raise ValueError(
                        f"group {g.name!r}: attribute {m} appears in more than one group"
                    )
                seen.add(m)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def covered(self) -> set[int]:
        return {m for g in self.groups for m in g.attributes}

    def with_singletons(self, attribute_names) -> "GroupSpec":
        """Wrap every uncovered attribute as its own singleton group."""
        names = list(attribute_names)
        covered = self.covered()
        extra = [
            Group(names[m], (m,)) for m in range(len(names)) if m not in covered
        ]
        return GroupSpec(self.groups + tuple(extra))

    def assignment(self, n_attributes: int) -> np.ndarray:
        """Vector mapping each attribute to its group index (-1 if uncovered)."""
        out = np.full(n_attributes, -1, dtype=np.int64)
        for k, g in enumerate(self.groups):
            for m in g.attributes:
                if m >= n_attributes:
                    raise ValueError(
                        f"group {g.name!r}: attribute index {m} out of range"
                    )
                out[m] = k
        return out


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/val/test class-name lists (the zero-shot contract)."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "val", tuple(self.val))
        object.__setattr__(self, "test", tuple(self.test))
        pools = {"train": set(self.train), "val": set(self.val), "test": set(self.test)}
        for part, names in pools.items():
            if len(names) != len(getattr(self, part)):
                raise ValueError(f"split {part!r}: duplicate class names")
        for a in ("train", "val", "test"):
            for b in ("train", "val", "test"):
                if a < b and pools[a] & pools[b]:
                    raise ValueError(f"splits {a!r} and {b!r} share classes")


@dataclass(frozen=True)
class AttributePrior:
    """Marginal attribute prior p(attribute=True), uniform or per-attribute."""

    mode: str  # "uniform" | "per-attribute"
    values: np.ndarray | float

    def __post_init__(self):
        if self.mode not in ("uniform", "per-attribute"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if self.mode == "uniform":
            val = float(self.values)
            if not 0.0 < val <= 1.0:
                raise ValueError("uniform prior must lie in (0, 1]")
            object.__setattr__(self, "values", val)
        else:
            vals = np.asarray(self.values, dtype=np.float64)
            if vals.ndim != 1 or np.any(vals <= 0.0) or np.any(vals > 1.0):
                raise ValueError("per-attribute prior must be a vector in (0, 1]")
            object.__setattr__(self, "values", vals)

    def vector(self, n_attributes: int) -> np.ndarray:
        if self.mode == "uniform":
            return np.full(n_attributes, self.values, dtype=np.float64)
        if len(self.values) != n_attributes:
            raise ValueError(
                f"prior has {len(self.values)} entries, expected {n_attributes}"
            )
        return np.asarray(self.values, dtype=np.float64)

    @property
    def uniform_scalar(self) -> float:
        """Single-number analogue of this prior (the mean when per-attribute)."""
        if self.mode == "uniform":
            return float(self.values)
        return float(np.mean(self.values))


def estimate_class_descriptions(dataset: Dataset) -> ClassDescriptions:
    """Per-class attribute frequencies (maximum likelihood from counts)."""
    if dataset.attribute_labels is None:
        raise ValueError("estimate_class_descriptions: dataset has no attribute labels")
    n_attrs = len(dataset.attribute_names)
    n_classes = len(dataset.class_names)
    u = np.zeros((n_attrs, n_classes), dtype=np.float64)
    for z in range(n_classes):
        mask = dataset.labels == z
        if not mask.any():
            raise ValueError(
                f"class {dataset.class_names[z]!r} has no samples; description undefined"
            )
        u[:, z] = dataset.attribute_labels[mask].mean(axis=0)
    return ClassDescriptions(u, dataset.attribute_names, dataset.class_names)


def estimate_attribute_prior(u, mode: str = "uniform") -> AttributePrior:
    """Attribute prior from a description matrix under a uniform class prior.

    Per-attribute: the row mean of u. Uniform: the single mean of those
    values. Results are clamped to at least DESCRIPTION_EPS.
    """
    if isinstance(u, ClassDescriptions):
        u = u.u
    u = require_matrix(u, "descriptions")
    per_attribute = u.mean(axis=1)
    if mode == "per-attribute":
        return AttributePrior(mode, np.maximum(per_attribute, DESCRIPTION_EPS))
    if mode == "uniform":
        return AttributePrior(mode, max(float(per_attribute.mean()), DESCRIPTION_EPS))
    raise ValueError(f"unknown prior mode {mode!r}")


def normalize_group_sums_array(u: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Scale per-group description mass down to 1 wherever it exceeds 1.

    Sums below 1 are left alone; the complementary pseudo-attribute absorbs
    the remaining mass. `assignment` maps attributes to group indices, -1
    meaning untouched.
    """
    u = require_matrix(u, "descriptions")
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (u.shape[0],):
        raise ValueError("assignment length must match the attribute count")
    out = u.copy()
    for k in range(assignment.max() + 1 if assignment.size else 0):
        rows = np.where(assignment == k)[0]
        if rows.size == 0:
            continue
        sums = out[rows].sum(axis=0)
        scale = np.where(sums > 1.0, 1.0 / np.maximum(sums, 1e-300), 1.0)
        out[rows] *= scale
    return out


def normalize_group_sums(u: ClassDescriptions, groups: GroupSpec) -> ClassDescriptions:
    """`normalize_group_sums_array` over a ClassDescriptions value."""
    assignment = groups.assignment(len(u.attribute_names))
    return replace(u, u=normalize_group_sums_array(u.u, assignment))


def inject_salt_pepper(u, ratio: float, seed: int):
    """Overwrite a fixed fraction of description entries with fair coin flips.

    Exactly round(ratio * entries) cells are chosen without replacement and
    set to 0 or 1 with equal probability. Deterministic given the seed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    wrap = isinstance(u, ClassDescriptions)
    mat = u.u if wrap else require_matrix(u, "descriptions")
    out = mat.copy()
    count = int(round(ratio * out.size))
    if count:
        rng = make_rng(seed)
        flat = rng.choice(out.size, size=count, replace=False)
        out.flat[flat] = rng.integers(0, 2, size=count).astype(np.float64)
    return replace(u, u=out) if wrap else out


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the generated AND-OR benchmark.

    Each class picks one true attribute per group; rater confusion `rho`
    moves that description mass onto same-group siblings, and `sigma` is
    the feature noise on top of a random linear detector map.
    """

    n_groups: int = 6
    attrs_per_group: int = 5
    train_classes: int = 40
    val_classes: int = 10
    test_classes: int = 10
    feature_dim: int = 64
    samples_per_class: int = 20
    rho: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.attrs_per_group < 1:
            raise ValueError("attrs_per_group must be at least 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.rho > 0.0 and self.attrs_per_group < 2:
            raise ValueError("rho > 0 needs at least 2 attributes per group")
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")
        for fieldname in ("n_groups", "train_classes", "val_classes", "test_classes",
                          "feature_dim", "samples_per_class"):
            if getattr(self, fieldname) < 1:
                raise ValueError(f"{fieldname} must be at least 1")


@dataclass(frozen=True)
class SyntheticBenchmark:
    full: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    descriptions: ClassDescriptions
    groups: GroupSpec
    split: SplitSpec


def subset_for_classes(dataset: Dataset, names) -> Dataset:
    """Samples of the given classes only, labels re-indexed to those names."""
    names = tuple(names)
    index = {name: i for i, name in enumerate(dataset.class_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ValueError(f"unknown class names: {missing}")
    wanted = np.array([index[n] for n in names], dtype=np.int64)
    remap = np.full(len(dataset.class_names), -1, dtype=np.int64)
    remap[wanted] = np.arange(len(names))
    mask = np.isin(dataset.labels, wanted)
    return Dataset(
        features=dataset.features[mask],
        labels=remap[dataset.labels[mask]],
        class_names=names,
        attribute_names=dataset.attribute_names,
        attribute_labels=None
        if dataset.attribute_labels is None
        else dataset.attribute_labels[mask],
    )


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> SyntheticBenchmark:
    """Desk-scale benchmark with known group structure and disjoint splits.

    Per class and group, the description puts mass 1-rho on the true
    attribute and rho spread evenly over its siblings, so every group
    column sums to exactly 1. Sample attribute vectors draw one attribute
    per group from that distribution (mutually exclusive alternatives),
    then features are a noisy linear image of the attribute vector.
    """
    rng = make_rng(seed)
    n_attrs = cfg.n_groups * cfg.attrs_per_group
    n_classes = cfg.train_classes + cfg.val_classes + cfg.test_classes

    attribute_names = tuple(
        f"g{k:02d}:a{j}" for k in range(cfg.n_groups) for j in range(cfg.attrs_per_group)
    )
    class_names = tuple(f"class_{z:03d}" for z in range(n_classes))
    groups = GroupSpec(
        tuple(
            Group(
                f"group_{k:02d}",
                tuple(range(k * cfg.attrs_per_group, (k + 1) * cfg.attrs_per_group)),
            )
            for k in range(cfg.n_groups)
        )
    )

    # One true attribute per (class, group); description mass 1-rho / rho.
    true_attr = rng.integers(0, cfg.attrs_per_group, size=(n_classes, cfg.n_groups))
    u = np.zeros((n_attrs, n_classes), dtype=np.float64)
    for z in range(n_classes):
        for k in range(cfg.n_groups):
            base = k * cfg.attrs_per_group
            block = slice(base, base + cfg.attrs_per_group)
            if cfg.attrs_per_group == 1:
                u[base, z] = 1.0
                continue
            u[block, z] = cfg.rho / (cfg.attrs_per_group - 1)
            u[base + true_attr[z, k], z] = 1.0 - cfg.rho

    detector = rng.standard_normal((n_attrs, cfg.feature_dim))

    n_samples = n_classes * cfg.samples_per_class
    labels = np.repeat(np.arange(n_classes), cfg.samples_per_class)
    attrs = np.zeros((n_samples, n_attrs), dtype=np.float64)
    for i, z in enumerate(labels):
        for k in range(cfg.n_groups):
            base = k * cfg.attrs_per_group
            block = u[base : base + cfg.attrs_per_group, z]
            j = rng.choice(cfg.attrs_per_group, p=block / block.sum())
            attrs[i, base + j] = 1.0
    features = attrs @ detector
    if cfg.sigma > 0.0:
        features = features + cfg.sigma * rng.standard_normal(features.shape)

    full = Dataset(
        features=features,
        labels=labels,
        class_names=class_names,
        attribute_names=attribute_names,
        attribute_labels=attrs,
    )
    split = SplitSpec(
        train=class_names[: cfg.train_classes],
        val=class_names[cfg.train_classes : cfg.train_classes + cfg.val_classes],
        test=class_names[cfg.train_classes + cfg.val_classes :],
    )
    descriptions = ClassDescriptions(u, attribute_names, class_names)
    return SyntheticBenchmark(
        full=full,
        train=subset_for_classes(full, split.train),
        val=subset_for_classes(full, split.val),
        test=subset_for_classes(full, split.test),
        descriptions=descriptions,
        groups=groups,
        split=split,
    )
