"""Loss, analytic gradients, Adam, and the alternating training loop.

The objective is categorical cross-entropy over normalized class scores,
optionally plus attribute-supervision BXE, L2 on the detector weights,
an ellipsoid prior ||W U||^2, and a pull of the learned membership
toward a semantic prior. Gradients are exact backprop through the
group-score forward pass, including the softmax membership rows and the
De-Morgan complement products, and are verified against central finite
differences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .data import (
    ClassDescriptions,
    Dataset,
    GroupSpec,
    estimate_attribute_prior,
    normalize_group_sums_array,
)
from .evaluation import balanced_accuracy
from .model import (
    _SCORE_FLOOR,
    LagoParams,
    ModelConfig,
    ScoreState,
    forward_scores,
    gamma_from_v,
    hard_assignment,
    membership,
    predict,
    prepare_eval_descriptions,
)
from .numerics import make_rng, sigmoid

__all__ = [
    "LossConfig",
    "TrainConfig",
    "AdamState",
    "Batch",
    "LossComponents",
    "EpochRecord",
    "TrainResult",
    "TrainingDivergedError",
    "adam_step",
    "orthogonal_init",
    "init_params",
    "loss_forward",
    "loss_gradients",
    "finite_diff_check",
    "train",
    "history_csv_lines",
    "write_history",
    "HISTORY_COLUMNS",
]

HISTORY_COLUMNS = ("epoch", "cxe", "bxe", "reg_w", "reg_wu", "reg_gamma", "total",
                   "val_balanced_acc")


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class LossConfig:
    """Weights of the training objective's terms."""

    alpha: float = 0.0  # attribute-supervision BXE
    beta: float = 0.0  # ||W||^2
    lambda_: float = 0.0  # ||W U||^2
    psi: float = 0.0  # ||Gamma(V) - Gamma(V_sem)||^2
    gamma_sem: np.ndarray | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_", "psi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr_w: float = 1e-3
    lr_v: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    early_stop_patience: int = 10
    seed: int = 0
    alternate: bool = True  # soft variants: W on even epochs, V on odd

    def __post_init__(self):
        if self.lr_w <= 0 or self.lr_v <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0 or self.early_stop_patience < 0:
            raise ValueError("epochs and patience must be non-negative")


@dataclass
class AdamState:
    """First/second-moment accumulators for one parameter matrix."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns the new param."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError("adam_step: shape mismatch")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix (scale 1) via QR of a Gaussian draw; columns are
    orthonormal when rows >= cols, rows otherwise."""
    a = rng.standard_normal((rows, cols) if rows >= cols else (cols, rows))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    return q if rows >= cols else q.T


@dataclass(frozen=True)
class Batch:
    features: np.ndarray  # n x D
    labels: np.ndarray  # n class indices into the u_train columns
    attr_targets: np.ndarray | None = None  # n x |A| targets for BXE


@dataclass(frozen=True)
class LossComponents:
    cxe: float
    bxe: float
    reg_w: float
    reg_wu: float
    reg_gamma: float
    total: float


def init_params(
    model_cfg: ModelConfig,
    n_features: int,
    n_attributes: int,
    prior,
    rng: np.random.Generator,
    group_spec: GroupSpec | None = None,
    seed: int = 0,
) -> LagoParams:
    """Fresh parameters per the training protocol: orthogonal detector
    weights with a zero bias row, and variant-specific membership logits
    (sparse ones on the hard partition, or near-zero uniform noise)."""
    w = np.zeros((n_features + 1, n_attributes))
    w[:-1] = orthogonal_init(n_features, n_attributes, rng)

    variant = model_cfg.variant
    assignment = None
    if variant == "singletons":
        v = np.eye(n_attributes)
        zeta = 10.0
    elif variant in ("semantic-hard", "semantic-soft"):
        if group_spec is None:
            raise ValueError(f"{variant} requires a group spec")
        assignment = group_spec.assignment(n_attributes)
        if np.any(assignment < 0):
            raise ValueError("group spec must cover every attribute "
                             "(wrap leftovers as singletons)")
        v = np.zeros((n_attributes, group_spec.n_groups))
        v[np.arange(n_attributes), assignment] = 1.0
        zeta = 10.0 if variant == "semantic-hard" else model_cfg.zeta
    elif variant == "k-soft":
        if model_cfg.k is None or model_cfg.k < 1:
            raise ValueError("k-soft requires a positive group count k")
        v = rng.uniform(0.0, 1e-3, size=(n_attributes, model_cfg.k))
        zeta = model_cfg.zeta
    else:  # pragma: no cover - ModelConfig already validates
        raise ValueError(f"unknown variant {variant!r}")

    return LagoParams(
        w=w,
        v=v,
        zeta=zeta,
        c_comp=model_cfg.c_comp,
        prior_mode=model_cfg.prior_mode,
        comp_mode=model_cfg.comp_mode,
        variant=variant,
        prior=prior,
        group_assignment=assignment,
        seed=seed,
    )


def _augment(features: np.ndarray) -> np.ndarray:
    return np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)


def _forward(params: LagoParams, batch: Batch, u_train: np.ndarray):
    x1 = _augment(np.asarray(batch.features, dtype=np.float64))
    logits = x1 @ params.w
    p = sigmoid(logits)
    state = forward_scores(
        p,
        membership(params),
        u_train,
        params.prior,
        params.comp_mode,
        params.c_comp,
        assignment=hard_assignment(params),
        keep_grad=True,
    )
    return x1, state


def _components(params, batch, u_train, cfg, state: ScoreState) -> LossComponents:
    labels = np.asarray(batch.labels, dtype=np.int64)
    n = labels.size
    ls = state.log_scores
    lse = ls.max(axis=1)
    lse = lse + np.log(np.exp(ls - lse[:, None]).sum(axis=1))
    cxe = float(-(ls[np.arange(n), labels] - lse).mean())

    bxe = 0.0
    if batch.attr_targets is not None:
        t = np.asarray(batch.attr_targets, dtype=np.float64)
        p = state.attr_probs
        bxe = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    elif cfg.alpha > 0:
        raise ValueError("alpha > 0 requires attribute targets in the batch")

    reg_w = float((params.w ** 2).sum())
    wu = params.w @ state.u_c
    reg_wu = float((wu ** 2).sum())
    reg_gamma = 0.0
    if cfg.gamma_sem is not None:
        reg_gamma = float(((state.gamma - cfg.gamma_sem) ** 2).sum())
    elif cfg.psi > 0:
        raise ValueError("psi > 0 requires gamma_sem")
    total = (
        cxe
        + cfg.alpha * bxe
        + cfg.beta * reg_w
        + cfg.lambda_ * reg_wu
        + cfg.psi * reg_gamma
    )
    return LossComponents(cxe, bxe, reg_w, reg_wu, reg_gamma, total)


def loss_forward(params: LagoParams, batch: Batch, u_train, cfg: LossConfig) -> LossComponents:
    """Objective value plus each term reported separately (unweighted)."""
    if np.asarray(batch.labels).size == 0:
        raise ValueError("empty batch")
    _, state = _forward(params, batch, u_train)
    return _components(params, batch, u_train, cfg, state)


def _grads_from_state(params, batch, u_train, cfg, x1, state: ScoreState):
    labels = np.asarray(batch.labels, dtype=np.int64)
    n = labels.size
    p = state.attr_probs
    gamma = state.gamma
    ratio = state.ratio
    g_scores = state.gscores

    g = state.probs.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n
    h = g[:, None, :] / g_scores  # n x K x Z, d(cxe)/d(group score)
    h[g_scores == _SCORE_FLOOR] = 0.0  # flat region below the score floor

    assignment = state.assignment
    d_p = np.zeros_like(p)
    d_gamma = None

    if assignment is not None:
        ha = h[:, assignment, :]  # n x A x Z
        d_p += np.einsum("imz,mz->im", ha, ratio)
        if state.comp_mode == "demorgan":
            dpcx = np.einsum("ikz,kz->ik", h, state.comp_ratio)
            t2 = dpcx * state.comp_x
            d_p -= t2[:, assignment] / (1.0 - p)
    else:
        hr = np.einsum("ikz,mz->ikm", h, ratio)
        d_p += np.einsum("ikm,mk->im", hr, gamma)
        d_gamma = np.einsum("ikm,im->mk", hr, p)

        # complement-description path, d through C[k,z] and the prior product
        if state.comp_mode == "demorgan":
            d_cr = np.einsum("ikz,ik->kz", h, state.comp_x)
        else:
            d_cr = state.comp_x * h.sum(axis=0)
        d_log_c = d_cr * state.comp_ratio  # K x Z
        d_gamma -= np.einsum("kz,mz,mkz->mk", d_log_c, state.u_c, 1.0 / state.du)
        if state.comp_mode == "demorgan":
            d_log_rho = -d_log_c.sum(axis=1)  # K
            dr = 1.0 - gamma * state.prior_vec[:, None]
            d_gamma -= d_log_rho[None, :] * state.prior_vec[:, None] / dr
            dpcx = np.einsum("ikz,kz->ik", h, state.comp_ratio)
            t2 = dpcx * state.comp_x
            d_p -= np.einsum("ik,imk->im", t2, gamma[None, :, :] / state.dq)
            d_gamma -= np.einsum("ik,im,imk->mk", t2, p, 1.0 / state.dq)

    d_logits = d_p * p * (1.0 - p)
    if cfg.alpha > 0:
        t = np.asarray(batch.attr_targets, dtype=np.float64)
        d_logits = d_logits + cfg.alpha * (p - t) / p.size
    grad_w = x1.T @ d_logits
    grad_w += 2.0 * cfg.beta * params.w
    if cfg.lambda_ > 0:
        grad_w += 2.0 * cfg.lambda_ * (params.w @ state.u_c) @ state.u_c.T

    grad_v = np.zeros_like(params.v)
    if d_gamma is not None:
        if cfg.gamma_sem is not None and cfg.psi > 0:
            d_gamma = d_gamma + 2.0 * cfg.psi * (gamma - cfg.gamma_sem)
        inner = (d_gamma * gamma).sum(axis=1, keepdims=True)
        grad_v = params.zeta * gamma * (d_gamma - inner)
    return grad_w, grad_v


def loss_gradients(params: LagoParams, batch: Batch, u_train, cfg: LossConfig):
    """Exact gradients of `loss_forward` with respect to w and v."""
    x1, state = _forward(params, batch, u_train)
    return _grads_from_state(params, batch, u_train, cfg, x1, state)


def loss_and_gradients(params, batch, u_train, cfg):
    x1, state = _forward(params, batch, u_train)
    comps = _components(params, batch, u_train, cfg, state)
    grad_w, grad_v = _grads_from_state(params, batch, u_train, cfg, x1, state)
    return comps, grad_w, grad_v


def finite_diff_check(
    params: LagoParams,
    batch: Batch,
    u_train,
    cfg: LossConfig,
    h: float = 1e-6,
    coords_per_matrix: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences on a random coordinate subset of each parameter matrix."""
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    grad_w, grad_v = loss_gradients(params, batch, u_train, cfg)
    rng = make_rng(seed)
    worst = 0.0
    for name, grad in (("w", grad_w), ("v", grad_v)):
        base = getattr(params, name)
        n_coords = min(base.size, coords_per_matrix)
        coords = rng.choice(base.size, size=n_coords, replace=False)
        for flat in coords:
            numeric = _central_diff(params, batch, u_train, cfg, name, int(flat), h)
            analytic = float(grad.flat[flat])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def _central_diff(params, batch, u_train, cfg, name, flat, h):
    vals = []
    for delta in (h, -h):
        mat = getattr(params, name).copy()
        mat.flat[flat] += delta
        shifted = replace(params, **{name: mat})
        vals.append(loss_forward(shifted, batch, u_train, cfg).total)
    return (vals[0] - vals[1]) / (2.0 * h)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    cxe: float
    bxe: float
    reg_w: float
    reg_wu: float
    reg_gamma: float
    total: float
    val_balanced_acc: float


@dataclass
class TrainResult:
    params: LagoParams
    history: list[EpochRecord]
    best_epoch: int


def history_csv_lines(history) -> list[str]:
    lines = [",".join(HISTORY_COLUMNS)]
    for rec in history:
        lines.append(
            ",".join(
                [str(rec.epoch)]
                + [repr(getattr(rec, c)) for c in HISTORY_COLUMNS[1:]]
            )
        )
    return lines


def write_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(history_csv_lines(history)) + "\n")


def _updates_this_epoch(params: LagoParams, cfg: TrainConfig, epoch: int) -> tuple[bool, bool]:
    if params.variant in ("singletons", "semantic-hard"):
        return True, False  # V frozen for hard grouping
    if not cfg.alternate:
        return True, True
    return (epoch % 2 == 0), (epoch % 2 == 1)


def train(
    model_cfg: ModelConfig,
    train_data: Dataset,
    descriptions: ClassDescriptions,
    group_spec: GroupSpec | None = None,
    loss_cfg: LossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    val_data: Dataset | None = None,
) -> TrainResult:
    """Mini-batch Adam on the training classes, validating zero-shot on the
    held-out class set each epoch and returning the best-epoch parameters.

    Group-sum description normalization applies to the semantic variants.
    Hard variants update only the detector weights; soft variants alternate
    detector and membership epochs (when configured). Descriptions double
    as per-sample attribute targets when the data carries none.
    """
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    rng = make_rng(train_cfg.seed)

    u_train = descriptions.columns_for(train_data.class_names)
    assignment = None
    if model_cfg.variant in ("semantic-hard", "semantic-soft"):
        if group_spec is None:
            raise ValueError(f"{model_cfg.variant} requires a group spec")
        assignment = group_spec.assignment(len(train_data.attribute_names))
        u_train = normalize_group_sums_array(u_train, assignment)
    prior = estimate_attribute_prior(u_train, model_cfg.prior_mode)
    params = init_params(
        model_cfg,
        train_data.n_features,
        len(train_data.attribute_names),
        prior,
        rng,
        group_spec=group_spec,
        seed=train_cfg.seed,
    )
    if model_cfg.variant == "semantic-soft" and loss_cfg.psi > 0 and loss_cfg.gamma_sem is None:
        loss_cfg = replace(loss_cfg, gamma_sem=gamma_from_v(params.v, params.zeta))

    if train_data.attribute_labels is not None:
        attr_targets = train_data.attribute_labels
    else:
        attr_targets = u_train[:, train_data.labels].T

    adam_w = AdamState.for_param(params.w)
    adam_v = AdamState.for_param(params.v)
    history: list[EpochRecord] = []
    best_epoch = -1
    best_acc = -np.inf
    best_params = copy.deepcopy(params)
    n = train_data.n_samples

    for epoch in range(train_cfg.epochs):
        update_w, update_v = _updates_this_epoch(params, train_cfg, epoch)
        order = rng.permutation(n)
        sums = np.zeros(6)
        for start in range(0, n, train_cfg.batch_size):
            take = order[start : start + train_cfg.batch_size]
            batch = Batch(
                features=train_data.features[take],
                labels=train_data.labels[take],
                attr_targets=attr_targets[take],
            )
            comps, grad_w, grad_v = loss_and_gradients(params, batch, u_train, loss_cfg)
            if not np.isfinite(comps.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // train_cfg.batch_size}"
                )
            weight = take.size
            sums += weight * np.array(
                [comps.cxe, comps.bxe, comps.reg_w, comps.reg_wu, comps.reg_gamma,
                 comps.total]
            )
            if update_w:
                params.w = adam_step(adam_w, params.w, grad_w, train_cfg.lr_w)
            if update_v:
                params.v = adam_step(adam_v, params.v, grad_v, train_cfg.lr_v)
        means = sums / n

        val_acc = float("nan")
        if val_data is not None:
            u_val = prepare_eval_descriptions(params, descriptions, val_data.class_names)
            preds = predict(params, u_val, val_data.features)
            val_acc = balanced_accuracy(preds, val_data.labels, len(val_data.class_names))
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_params = copy.deepcopy(params)
        history.append(
            EpochRecord(epoch, *(float(v) for v in means), val_balanced_acc=val_acc)
        )
        if val_data is not None and epoch - best_epoch >= train_cfg.early_stop_patience:
            break

    if val_data is None or best_epoch < 0:
        best_params = params
        best_epoch = train_cfg.epochs - 1
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch)
