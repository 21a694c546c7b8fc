"""Class-balanced accuracy, membership-structure analysis, and the
description-noise robustness experiment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassDescriptions, Dataset, inject_salt_pepper, normalize_group_sums_array
from .model import (
    LagoParams,
    ModelConfig,
    attribute_probs,
    binarize_descriptions,
    dap_log_posterior,
    eszsl_scores,
    eszsl_train,
    predict,
    prepare_eval_descriptions,
)
from .numerics import ks_statistic, require_matrix

__all__ = [
    "GammaAnalysis",
    "balanced_accuracy",
    "gamma_sparsity",
    "grouped_pairs",
    "anticorrelation_report",
    "analyze_gamma",
    "occurrence_matrix",
    "evaluate_zero_shot",
    "NoiseCurvePoint",
    "noise_robustness_experiment",
    "noise_csv_lines",
]


def balanced_accuracy(predictions, labels, num_classes: int) -> float:
    """Mean over classes of the per-class accuracy; classes with no samples
    are left out of the mean."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise ValueError("balanced_accuracy: empty predictions")
    if predictions.shape != labels.shape:
        raise ValueError("balanced_accuracy: shape mismatch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("balanced_accuracy: label out of range")
    per_class = []
    for z in range(num_classes):
        mask = labels == z
        if mask.any():
            per_class.append(float((predictions[mask] == z).mean()))
    return float(np.mean(per_class))


def gamma_sparsity(gamma, tau: float) -> float:
    """Fraction of membership entries exceeding the threshold tau."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    gamma = require_matrix(gamma, "gamma")
    return float((gamma > tau).mean())


def grouped_pairs(gamma, tau: float = 1e-3) -> list[tuple[int, int]]:
    """Unordered attribute pairs whose tau-thresholded membership rows have
    a positive inner product, i.e. that share mass on some group."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    gamma = require_matrix(gamma, "gamma")
    thresholded = np.where(gamma > tau, gamma, 0.0)
    inner = thresholded @ thresholded.T
    pairs = []
    n = gamma.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if inner[i, j] > 0.0:
                pairs.append((i, j))
    return pairs


@dataclass(frozen=True)
class GammaAnalysis:
    """Structure summary of a learned membership matrix."""

    sparsity_fraction: float
    grouped_pairs: list[tuple[int, int]]
    anticorr_grouped_fraction: float | None
    anticorr_baseline_fraction: float
    ks_statistic: float | None
    ks_pvalue: float | None

    def to_json_dict(self) -> dict:
        return {
            "sparsity_fraction": self.sparsity_fraction,
            "grouped_pairs": [list(p) for p in self.grouped_pairs],
            "anticorr_grouped_fraction": self.anticorr_grouped_fraction,
            "anticorr_baseline_fraction": self.anticorr_baseline_fraction,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
        }


def _pair_correlations(occurrence: np.ndarray) -> np.ndarray:
    """Correlation matrix of occurrence columns; NaN marks undefined pairs."""
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(occurrence, rowvar=False)
    constant = occurrence.std(axis=0) == 0.0
    corr[constant, :] = np.nan
    corr[:, constant] = np.nan
    return corr


def anticorrelation_report(occurrence, pairs) -> GammaAnalysis:
    """How often grouped attribute pairs co-vary negatively, against the
    all-pairs baseline, with a KS test between the two correlation samples.

    `occurrence` rows are observations (samples, or classes when only
    class-level descriptions exist) and columns are attributes. Pairs with
    an undefined correlation are excluded on both sides.
    """
    occurrence = require_matrix(occurrence, "occurrence")
    if occurrence.shape[0] < 2:
        raise ValueError("anticorrelation_report: need at least 2 observations")
    corr = _pair_correlations(occurrence)
    n = occurrence.shape[1]
    iu = np.triu_indices(n, k=1)
    all_corr = corr[iu]
    all_corr = all_corr[~np.isnan(all_corr)]
    if all_corr.size == 0:
        raise ValueError("anticorrelation_report: every pair correlation is undefined")
    baseline = float((all_corr < 0.0).mean())

    grouped_corr = np.array(
        [corr[i, j] for i, j in pairs if not np.isnan(corr[i, j])]
    )
    if grouped_corr.size == 0:
        return GammaAnalysis(
            sparsity_fraction=float("nan"),
            grouped_pairs=list(pairs),
            anticorr_grouped_fraction=None,
            anticorr_baseline_fraction=baseline,
            ks_statistic=None,
            ks_pvalue=None,
        )
    stat, pvalue = ks_statistic(grouped_corr, all_corr)
    return GammaAnalysis(
        sparsity_fraction=float("nan"),
        grouped_pairs=list(pairs),
        anticorr_grouped_fraction=float((grouped_corr < 0.0).mean()),
        anticorr_baseline_fraction=baseline,
        ks_statistic=stat,
        ks_pvalue=pvalue,
    )


def analyze_gamma(gamma, occurrence, tau: float = 1e-3) -> GammaAnalysis:
    """Full membership analysis: sparsity, grouped pairs, anticorrelation."""
    pairs = grouped_pairs(gamma, tau)
    report = anticorrelation_report(occurrence, pairs)
    return GammaAnalysis(
        sparsity_fraction=gamma_sparsity(gamma, tau),
        grouped_pairs=pairs,
        anticorr_grouped_fraction=report.anticorr_grouped_fraction,
        anticorr_baseline_fraction=report.anticorr_baseline_fraction,
        ks_statistic=report.ks_statistic,
        ks_pvalue=report.ks_pvalue,
    )


def occurrence_matrix(dataset: Dataset | None, descriptions: ClassDescriptions) -> np.ndarray:
    """Observations-by-attributes matrix for correlation analysis:
    per-sample binary attributes when available, else per-class
    descriptions."""
    if dataset is not None and dataset.attribute_labels is not None:
        return dataset.attribute_labels
    return descriptions.u.T


def evaluate_zero_shot(params: LagoParams, data: Dataset, descriptions: ClassDescriptions) -> float:
    """Balanced accuracy of params on one split's classes."""
    u_eval = prepare_eval_descriptions(params, descriptions, data.class_names)
    preds = predict(params, u_eval, data.features)
    return balanced_accuracy(preds, data.labels, len(data.class_names))


@dataclass(frozen=True)
class NoiseCurvePoint:
    model: str
    ratio: float
    mean_acc: float
    relative_acc: float
    seed_accs: tuple[float, ...]


def _fit_noise_models(models, bench, loss_cfg, train_cfg, model_cfgs):
    """Train each requested model once on the clean training split.

    The hard-threshold baseline ("dap") shares its attribute detectors with
    a singleton model trained the same way; only inference differs.
    """
    from .training import train

    model_cfgs = dict(model_cfgs or {})
    fitted = {}
    for name in models:
        if name == "eszsl":
            u_train = bench.descriptions.columns_for(bench.train.class_names)
            fitted[name] = ("eszsl", eszsl_train(
                bench.train.features, bench.train.labels, u_train, 1.0, 1.0
            ))
            continue
        cfg = model_cfgs.get(name)
        if cfg is None:
            variant = "singletons" if name == "dap" else name
            k = bench.groups.n_groups if variant == "k-soft" else None
            cfg = ModelConfig(variant=variant, k=k)
        result = train(
            cfg,
            bench.train,
            bench.descriptions,
            group_spec=bench.groups,
            loss_cfg=loss_cfg,
            train_cfg=train_cfg,
            val_data=bench.val,
        )
        fitted[name] = ("dap" if name == "dap" else "lago", result.params)
    return fitted


def _noisy_accuracy(kind, fitted, data: Dataset, u_eval_raw: np.ndarray) -> float:
    if kind == "eszsl":
        scores = eszsl_scores(fitted, u_eval_raw, data.features)
        preds = np.argmax(scores, axis=1)
    elif kind == "dap":
        params = fitted
        u_bin = binarize_descriptions(u_eval_raw)
        p = attribute_probs(params.w, data.features)
        preds = np.array(
            [int(np.argmax(dap_log_posterior(u_bin, params.prior, row))) for row in p]
        )
    else:
        params = fitted
        u_eval = u_eval_raw
        if params.variant in ("semantic-hard", "semantic-soft"):
            u_eval = normalize_group_sums_array(u_eval, params.group_assignment)
        preds = predict(params, u_eval, data.features)
    return balanced_accuracy(preds, data.labels, len(data.class_names))


def noise_robustness_experiment(
    models,
    bench,
    ratios,
    seeds,
    loss_cfg=None,
    train_cfg=None,
    model_cfgs=None,
) -> list[NoiseCurvePoint]:
    """Accuracy under salt-and-pepper corruption of the evaluation-class
    descriptions, absolute and relative to each model's zero-noise baseline.

    Every model is fit once on the clean training split; corruption is then
    applied to the raw test-class description columns for each
    (ratio, seed) cell before the model-specific preprocessing
    (normalization, binarization) runs.
    """
    ratios = [float(r) for r in ratios]
    if 0.0 not in ratios:
        raise ValueError("ratios must include 0")
    fitted = _fit_noise_models(models, bench, loss_cfg, train_cfg, model_cfgs)
    u_test_raw = bench.descriptions.columns_for(bench.test.class_names)

    rows: list[NoiseCurvePoint] = []
    for name in models:
        kind, model = fitted[name]
        acc0 = _noisy_accuracy(kind, model, bench.test, u_test_raw)
        for ratio in ratios:
            if ratio == 0.0:
                accs = tuple(acc0 for _ in seeds)
            else:
                accs = tuple(
                    _noisy_accuracy(
                        kind, model, bench.test,
                        inject_salt_pepper(u_test_raw, ratio, seed),
                    )
                    for seed in seeds
                )
            mean_acc = float(np.mean(accs))
            relative = mean_acc / acc0 if acc0 > 0 else float("nan")
            rows.append(NoiseCurvePoint(name, ratio, mean_acc, relative, accs))
    return rows


def noise_csv_lines(rows) -> list[str]:
    n_seeds = max((len(r.seed_accs) for r in rows), default=0)
    header = ["model", "ratio", "mean_balanced_acc", "relative_acc"] + [
        f"acc_seed_{i}" for i in range(n_seeds)
    ]
    lines = [",".join(header)]
    for r in rows:
        cells = [r.model, repr(r.ratio), repr(r.mean_acc), repr(r.relative_acc)]
        cells += [repr(a) for a in r.seed_accs]
        lines.append(",".join(cells))
    return lines
