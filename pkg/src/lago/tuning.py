"""Hyperparameter search and the retrain-on-train+val finalization protocol.

A coarse random subsample of the relevant grid is scored first, then two
local refinement rounds explore adjacent grid points around the incumbent.
Every trial is scored as the mean validation balanced accuracy over the
seed list, with per-trial RNG seeds derived from the master seed and the
config hash so concurrent execution order cannot change results. The test
split is structurally invisible here: SearchData simply has no test field.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import ClassDescriptions, Dataset, GroupSpec
from .model import ModelConfig
from .numerics import derive_seed
from .training import LossConfig, TrainConfig, TrainResult, train

__all__ = [
    "SearchSpace",
    "SearchData",
    "TrialResult",
    "SearchResult",
    "grid_search",
    "finalize",
    "merge_train_val",
    "trials_csv_lines",
    "config_hash",
]

_AXES_BY_VARIANT = {
    "singletons": ("lr_w", "beta", "lambda_"),
    "semantic-hard": ("lr_w", "beta", "lambda_"),
    "k-soft": ("lr_w", "beta", "lambda_", "lr_v", "zeta", "k"),
    "semantic-soft": ("lr_w", "beta", "lambda_", "lr_v", "zeta", "psi"),
}


@dataclass(frozen=True)
class SearchSpace:
    """Grid axes. Defaults follow the published tuning protocol; the L2 and
    membership-prior axes are decade-spaced."""

    lr_w: tuple = (3e-6, 1e-5, 3e-5, 1e-4, 3e-4)
    beta: tuple = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)
    lambda_: tuple = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)
    lr_v: tuple = (0.01, 0.1, 1.0)
    zeta: tuple = (1.0, 3.0, 10.0)
    k: tuple = (1, 10, 20, 30, 40, 60)
    psi: tuple = (1e-5, 1e-4, 1e-3, 1e-2)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name in ("lr_w", "beta", "lambda_", "lr_v", "zeta", "k", "psi", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"search axis {name!r} is empty")

    def axes_for(self, variant: str) -> dict[str, tuple]:
        if variant not in _AXES_BY_VARIANT:
            raise ValueError(f"unknown variant {variant!r}")
        return {name: tuple(getattr(self, name)) for name in _AXES_BY_VARIANT[variant]}


@dataclass(frozen=True)
class SearchData:
    """Training and validation material only; finalize and test evaluation
    happen elsewhere."""

    train: Dataset
    val: Dataset
    descriptions: ClassDescriptions
    group_spec: GroupSpec | None = None


@dataclass(frozen=True)
class TrialResult:
    config: dict
    config_hash: str
    seed_accs: tuple[float, ...]
    best_epochs: tuple[int, ...]
    mean_acc: float
    std_acc: float


@dataclass(frozen=True)
class SearchResult:
    trials: tuple[TrialResult, ...]
    best_config: dict
    best_trial: TrialResult


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build_trial_cfgs(variant, config, base_model, base_loss, base_train, seed):
    model_cfg = ModelConfig(
        variant=variant,
        k=int(config["k"]) if "k" in config else base_model.k,
        zeta=float(config.get("zeta", base_model.zeta)),
        c_comp=base_model.c_comp,
        prior_mode=base_model.prior_mode,
        comp_mode=base_model.comp_mode,
    )
    loss_cfg = LossConfig(
        alpha=base_loss.alpha,
        beta=float(config.get("beta", base_loss.beta)),
        lambda_=float(config.get("lambda_", base_loss.lambda_)),
        psi=float(config.get("psi", base_loss.psi)),
        gamma_sem=base_loss.gamma_sem,
    )
    train_cfg = TrainConfig(
        lr_w=float(config.get("lr_w", base_train.lr_w)),
        lr_v=float(config.get("lr_v", base_train.lr_v)),
        epochs=base_train.epochs,
        batch_size=base_train.batch_size,
        early_stop_patience=base_train.early_stop_patience,
        seed=seed,
        alternate=base_train.alternate,
    )
    return model_cfg, loss_cfg, train_cfg


def _run_trial(args) -> TrialResult:
    (variant, config, data, master_seed, base_model, base_loss, base_train, seeds) = args
    chash = config_hash(config)
    accs, epochs = [], []
    for label in seeds:
        seed = derive_seed(master_seed, chash, label)
        model_cfg, loss_cfg, train_cfg = _build_trial_cfgs(
            variant, config, base_model, base_loss, base_train, seed
        )
        result = train(
            model_cfg,
            data.train,
            data.descriptions,
            group_spec=data.group_spec,
            loss_cfg=loss_cfg,
            train_cfg=train_cfg,
            val_data=data.val,
        )
        best = max((r.val_balanced_acc for r in result.history), default=0.0)
        accs.append(float(best))
        epochs.append(int(result.best_epoch))
    return TrialResult(
        config=config,
        config_hash=chash,
        seed_accs=tuple(accs),
        best_epochs=tuple(epochs),
        mean_acc=float(np.mean(accs)),
        std_acc=float(np.std(accs)),
    )


def _neighbors(config: dict, axes: dict[str, tuple]) -> list[dict]:
    """Configs one grid step away along a single axis."""
    out = []
    for name, values in axes.items():
        idx = values.index(config[name])
        for step in (-1, 1):
            j = idx + step
            if 0 <= j < len(values):
                neighbor = dict(config)
                neighbor[name] = values[j]
                out.append(neighbor)
    return out


def _rank_key(trial: TrialResult):
    return (-trial.mean_acc, trial.config_hash)


def grid_search(
    space: SearchSpace,
    variant: str,
    data: SearchData,
    budget: int,
    master_seed: int = 0,
    base_model: ModelConfig | None = None,
    base_loss: LossConfig | None = None,
    base_train: TrainConfig | None = None,
    jobs: int = 1,
    refine_rounds: int = 2,
) -> SearchResult:
    """Coarse random search over the variant's grid, then local refinement
    around the incumbent. Deterministic given the master seed; ties rank
    by config hash."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    base_model = base_model or ModelConfig(variant=variant, k=1)
    base_loss = base_loss or LossConfig()
    base_train = base_train or TrainConfig()

    axes = space.axes_for(variant)
    names = sorted(axes)
    grid = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    if not grid:
        raise ValueError("empty search space")

    rng = np.random.default_rng(derive_seed(master_seed, "coarse"))
    if budget >= len(grid):
        candidates = list(grid)
    else:
        picks = rng.choice(len(grid), size=budget, replace=False)
        candidates = [grid[i] for i in sorted(picks)]

    evaluated: dict[str, TrialResult] = {}

    def run_all(configs):
        todo = [c for c in configs if config_hash(c) not in evaluated]
        args = [
            (variant, c, data, master_seed, base_model, base_loss, base_train, space.seeds)
            for c in todo
        ]
        if jobs > 1 and len(args) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_trial, args))
        else:
            results = [_run_trial(a) for a in args]
        for trial in results:
            evaluated[trial.config_hash] = trial

    run_all(candidates)
    incumbent = min(evaluated.values(), key=_rank_key)
    for _ in range(refine_rounds):
        run_all(_neighbors(incumbent.config, axes))
        incumbent = min(evaluated.values(), key=_rank_key)

    trials = tuple(sorted(evaluated.values(), key=_rank_key))
    best_config = dict(incumbent.config)
    best_config["variant"] = variant
    best_config["epochs"] = max(1, int(round(np.mean(incumbent.best_epochs))) + 1)
    return SearchResult(trials=trials, best_config=best_config, best_trial=incumbent)


def merge_train_val(train_data: Dataset, val_data: Dataset) -> Dataset:
    """One dataset over the union of train and val classes."""
    shared = set(train_data.class_names) & set(val_data.class_names)
    if shared:
        raise ValueError(f"train and val share classes: {sorted(shared)}")
    names = tuple(train_data.class_names) + tuple(val_data.class_names)
    attr = None
    if train_data.attribute_labels is not None and val_data.attribute_labels is not None:
        attr = np.concatenate([train_data.attribute_labels, val_data.attribute_labels])
    return Dataset(
        features=np.concatenate([train_data.features, val_data.features]),
        labels=np.concatenate(
            [train_data.labels, val_data.labels + len(train_data.class_names)]
        ),
        class_names=names,
        attribute_names=train_data.attribute_names,
        attribute_labels=attr,
    )


def finalize(
    best_config: dict,
    variant: str,
    data: SearchData,
    master_seed: int = 0,
    base_model: ModelConfig | None = None,
    base_loss: LossConfig | None = None,
    base_train: TrainConfig | None = None,
) -> TrainResult:
    """Retrain on train+val classes for the epoch count fixed by the
    validation learning curves, returning the final parameters."""
    base_model = base_model or ModelConfig(variant=variant, k=1)
    base_loss = base_loss or LossConfig()
    base_train = base_train or TrainConfig()
    seed = derive_seed(master_seed, "finalize", config_hash(best_config))
    model_cfg, loss_cfg, train_cfg = _build_trial_cfgs(
        variant,
        {k: v for k, v in best_config.items() if k not in ("variant", "epochs")},
        base_model,
        base_loss,
        base_train,
        seed,
    )
    epochs = int(best_config.get("epochs", base_train.epochs))
    train_cfg = TrainConfig(
        lr_w=train_cfg.lr_w,
        lr_v=train_cfg.lr_v,
        epochs=epochs,
        batch_size=train_cfg.batch_size,
        early_stop_patience=train_cfg.early_stop_patience,
        seed=seed,
        alternate=train_cfg.alternate,
    )
    merged = merge_train_val(data.train, data.val)
    return train(
        model_cfg,
        merged,
        data.descriptions,
        group_spec=data.group_spec,
        loss_cfg=loss_cfg,
        train_cfg=train_cfg,
        val_data=None,
    )


def trials_csv_lines(trials, seeds) -> list[str]:
    axis_names = sorted({name for t in trials for name in t.config})
    header = ["rank", "config_hash"] + axis_names + ["mean_acc", "std_acc"] + [
        f"acc_seed_{label}" for label in seeds
    ]
    lines = [",".join(header)]
    for rank, t in enumerate(trials):
        cells = [str(rank), t.config_hash]
        cells += [repr(t.config[n]) if n in t.config else "" for n in axis_names]
        cells += [repr(t.mean_acc), repr(t.std_acc)]
        cells += [repr(a) for a in t.seed_accs]
        lines.append(",".join(cells))
    return lines
