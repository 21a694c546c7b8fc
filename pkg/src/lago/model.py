"""Forward passes for the AND-OR grouping model and its special-case baselines.

An image's features are mapped to attribute probabilities by a sigmoid
layer. Each group then scores every class through a weighted OR over
attribute/description evidence ratios plus a complementary "none of the
group" slot, and classes combine group scores with a product (soft AND).
Group membership is either fixed (identity or a hard partition) or a
row softmax over learned logits.

Both the class prior p(z) and the group prior p(g)=p(z) are taken as
uniform; they cancel between the within-group score and the group
conjunction, so neither is ever materialized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AttributePrior, ClassDescriptions, DESCRIPTION_EPS, clamp_descriptions, \
    normalize_group_sums_array
from .numerics import require_matrix, row_softmax, sigmoid

__all__ = [
    "VARIANTS",
    "COMP_MODES",
    "PRIOR_MODES",
    "ModelConfig",
    "LagoParams",
    "ClassScores",
    "attribute_probs",
    "gamma_from_v",
    "membership",
    "complementary_description",
    "group_scores",
    "class_scores",
    "score_batch",
    "predict",
    "prepare_eval_descriptions",
    "binarize_descriptions",
    "dap_log_posterior",
    "dap_posterior",
    "eszsl_train",
    "eszsl_scores",
    "lago_k1_score",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

VARIANTS = ("singletons", "semantic-hard", "k-soft", "semantic-soft")
COMP_MODES = ("const", "demorgan")
PRIOR_MODES = ("uniform", "per-attribute")

# Group scores below this are clamped before entering log space.
_SCORE_FLOOR = 1e-300

CHECKPOINT_MAGIC = b"LAGC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Variant and scoring knobs, independent of any learned weights."""

    variant: str = "semantic-hard"
    k: int | None = None  # group count for the learned-groups variant
    zeta: float = 10.0
    c_comp: float = 0.5
    prior_mode: str = "uniform"
    comp_mode: str = "const"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.comp_mode not in COMP_MODES:
            raise ValueError(f"unknown comp_mode {self.comp_mode!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not 0.0 <= self.c_comp <= 1.0:
            raise ValueError("c_comp must lie in [0, 1]")


@dataclass
class LagoParams:
    """Learned detector weights plus membership logits and scoring config.

    `w` is (D+1) x |A| with the bias in the last row. `v` is |A| x K; for
    the singleton variant the membership is the identity assignment and
    for the semantic hard variant an exact one-hot partition, both
    bypassing the softmax parametrization.
    """

    w: np.ndarray
    v: np.ndarray
    zeta: float
    c_comp: float
    prior_mode: str
    comp_mode: str
    variant: str
    prior: AttributePrior
    group_assignment: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.w = require_matrix(self.w, "w")
        self.v = require_matrix(self.v, "v")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.comp_mode not in COMP_MODES:
            raise ValueError(f"unknown comp_mode {self.comp_mode!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not 0.0 <= self.c_comp <= 1.0:
            raise ValueError("c_comp must lie in [0, 1]")
        n_attrs = self.w.shape[1]
        if self.v.shape[0] != n_attrs:
            raise ValueError(
                f"v has {self.v.shape[0]} rows, expected {n_attrs} attributes"
            )
        if self.variant == "singletons" and self.v.shape[1] != n_attrs:
            raise ValueError("singleton variant requires K == |A|")
        if self.variant in ("semantic-hard", "semantic-soft"):
            if self.group_assignment is None:
                raise ValueError(f"{self.variant} requires a group assignment")
            assignment = np.asarray(self.group_assignment, dtype=np.int64)
            if assignment.shape != (n_attrs,) or assignment.min() < 0 \
                    or assignment.max() >= self.v.shape[1]:
                raise ValueError("group assignment must map every attribute to a group")
            self.group_assignment = assignment

    @property
    def n_features(self) -> int:
        return self.w.shape[0] - 1

    @property
    def n_attributes(self) -> int:
        return self.w.shape[1]

    @property
    def n_groups(self) -> int:
        return self.v.shape[1]


@dataclass(frozen=True)
class ClassScores:
    """Per-class log scores and their unit-sum normalization."""

    log_scores: np.ndarray
    probs: np.ndarray


def attribute_probs(w, x) -> np.ndarray:
    """Detector outputs sigmoid([x; 1] @ w) for one sample or a batch."""
    w = require_matrix(w, "w")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != w.shape[0] - 1:
        raise ValueError(
            f"feature dim {x2.shape[-1] if x2.ndim == 2 else x2.shape} does not "
            f"match detector input size {w.shape[0] - 1}"
        )
    logits = x2 @ w[:-1] + w[-1]
    out = sigmoid(logits)
    return out[0] if single else out


def gamma_from_v(v, zeta: float) -> np.ndarray:
    """Row-stochastic membership matrix softmax(zeta * v) per attribute row."""
    return row_softmax(v, zeta)


def _one_hot(assignment: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((assignment.size, k), dtype=np.float64)
    out[np.arange(assignment.size), assignment] = 1.0
    return out


def hard_assignment(params: LagoParams) -> np.ndarray | None:
    """Attribute-to-group map for variants with exact hard membership."""
    if params.variant == "singletons":
        return np.arange(params.n_attributes, dtype=np.int64)
    if params.variant == "semantic-hard":
        return params.group_assignment
    return None


def membership(params: LagoParams) -> np.ndarray:
    """Gamma for this variant: identity, exact one-hot, or softmax rows."""
    assignment = hard_assignment(params)
    if assignment is not None:
        return _one_hot(assignment, params.n_groups)
    return gamma_from_v(params.v, params.zeta)


def complementary_description(u_col, gamma, k: int) -> float:
    """Probability that none of group k's attributes hold for this class:
    the De-Morgan product over attributes of (1 - gamma[m,k] * u[m])."""
    u_col = np.asarray(u_col, dtype=np.float64)
    gamma = require_matrix(gamma, "gamma")
    return float(np.prod(1.0 - gamma[:, k] * u_col))


@dataclass
class ScoreState:
    """All forward intermediates needed to score and to backpropagate."""

    attr_probs: np.ndarray  # n x A
    gamma: np.ndarray  # A x K
    u_c: np.ndarray  # A x Z (clamped)
    prior_vec: np.ndarray  # A (clamped)
    ratio: np.ndarray  # A x Z
    comp_ratio: np.ndarray  # K x Z
    comp_x: np.ndarray | float  # n x K in demorgan mode, else the constant
    gscores: np.ndarray  # n x K x Z (floored)
    log_scores: np.ndarray  # n x Z
    probs: np.ndarray  # n x Z
    comp_mode: str
    assignment: np.ndarray | None  # hard attribute-to-group map when exact
    du: np.ndarray | None = None  # A x K x Z, soft path only
    dq: np.ndarray | None = None  # n x A x K, soft demorgan path only


def _group_index_lists(assignment: np.ndarray, k: int) -> list[np.ndarray]:
    return [np.where(assignment == g)[0] for g in range(k)]


def forward_scores(
    attr_p: np.ndarray,
    gamma: np.ndarray,
    u: np.ndarray,
    prior: AttributePrior,
    comp_mode: str,
    c_comp: float,
    assignment: np.ndarray | None = None,
    keep_grad: bool = False,
) -> ScoreState:
    """Score a batch of attribute-probability rows against description columns.

    Per group k and class z the score is the weighted OR
        sum_m gamma[m,k] * (u[m,z] / prior[m]) * p(a_m | x)
    plus the complementary slot (u_comp / prior_comp) * p_comp. Class log
    scores sum the per-group logs (soft AND); probabilities normalize to
    unit sum across classes.
    """
    attr_p = np.asarray(attr_p, dtype=np.float64)
    single = attr_p.ndim == 1
    p = attr_p[None, :] if single else attr_p
    n, n_attrs = p.shape
    k = gamma.shape[1]
    u_c = clamp_descriptions(u)
    n_classes = u_c.shape[1]
    prior_vec = np.clip(prior.vector(n_attrs), DESCRIPTION_EPS, 1.0 - DESCRIPTION_EPS)
    ratio = u_c / prior_vec[:, None]

    du = dq = None
    if assignment is not None:
        idx_lists = _group_index_lists(assignment, k)
        main = np.empty((n, k, n_classes))
        log_comp_desc = np.empty((k, n_classes))
        log_prior_comp = np.empty(k)
        log_q = np.zeros((n, k)) if comp_mode == "demorgan" else None
        for g, idx in enumerate(idx_lists):
            main[:, g, :] = p[:, idx] @ ratio[idx]
            log_comp_desc[g] = np.log1p(-u_c[idx]).sum(axis=0)
            log_prior_comp[g] = np.log1p(-prior_vec[idx]).sum()
            if log_q is not None:
                log_q[:, g] = np.log1p(-p[:, idx]).sum(axis=1)
    else:
        main = np.einsum("im,mk,mz->ikz", p, gamma, ratio, optimize=True)
        du = 1.0 - gamma[:, :, None] * u_c[:, None, :]
        log_comp_desc = np.log(du).sum(axis=0)
        log_prior_comp = np.log1p(-gamma * prior_vec[:, None]).sum(axis=0)
        if comp_mode == "demorgan":
            dq = 1.0 - gamma[None, :, :] * p[:, :, None]
            log_q = np.log(dq).sum(axis=1)
        else:
            log_q = None
        if not keep_grad:
            du = dq = None

    if comp_mode == "const":
        log_prior_comp = np.full(k, np.log(prior.uniform_scalar))
        comp_x = float(c_comp)
    else:
        comp_x = np.exp(log_q)

    comp_ratio = np.exp(np.clip(log_comp_desc - log_prior_comp[:, None], -745.0, 700.0))
    if comp_mode == "const":
        gscores = main + comp_ratio[None, :, :] * comp_x
    else:
        gscores = main + comp_ratio[None, :, :] * comp_x[:, :, None]
    gscores = np.maximum(gscores, _SCORE_FLOOR)
    log_scores = np.log(gscores).sum(axis=1)
    shifted = log_scores - log_scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    return ScoreState(
        attr_probs=p,
        gamma=gamma,
        u_c=u_c,
        prior_vec=prior_vec,
        ratio=ratio,
        comp_ratio=comp_ratio,
        comp_x=comp_x,
        gscores=gscores,
        log_scores=log_scores,
        probs=probs,
        comp_mode=comp_mode,
        assignment=assignment,
        du=du,
        dq=dq,
    )


def group_scores(gamma, u, prior: AttributePrior, attr_probs, params) -> np.ndarray:
    """Per-group class scores (K x |Z|) for a single attribute-probability
    vector; `params` supplies the complementary-slot configuration."""
    gamma = require_matrix(gamma, "gamma")
    state = forward_scores(
        np.asarray(attr_probs, dtype=np.float64),
        gamma,
        require_matrix(u, "u"),
        prior,
        params.comp_mode,
        params.c_comp,
    )
    return state.gscores[0]


def class_scores(gscores) -> ClassScores:
    """Combine per-group scores into class log scores and unit-sum probs."""
    gscores = require_matrix(gscores, "group scores")
    if np.any(gscores <= 0):
        gscores = np.maximum(gscores, _SCORE_FLOOR)
    log_scores = np.log(gscores).sum(axis=0)
    shifted = log_scores - log_scores.max()
    expd = np.exp(shifted)
    return ClassScores(log_scores=log_scores, probs=expd / expd.sum())


def score_batch(params: LagoParams, u_eval, features, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Class log scores and probs for a feature batch (n x Z each)."""
    u_eval = require_matrix(u_eval, "u_eval")
    if u_eval.shape[1] == 0:
        raise ValueError("no candidate classes")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    gamma = membership(params)
    assignment = hard_assignment(params)
    logs, probs = [], []
    for start in range(0, feats.shape[0], chunk):
        block = feats[start : start + chunk]
        p = attribute_probs(params.w, block)
        state = forward_scores(
            p, gamma, u_eval, params.prior, params.comp_mode, params.c_comp,
            assignment=assignment,
        )
        logs.append(state.log_scores)
        probs.append(state.probs)
    return np.concatenate(logs, axis=0), np.concatenate(probs, axis=0)


def predict(params: LagoParams, u_eval, x):
    """Most likely class index per sample; ties go to the lowest index."""
    log_scores, _ = score_batch(params, u_eval, x)
    winners = np.argmax(log_scores, axis=1)
    return int(winners[0]) if np.asarray(x).ndim == 1 else winners


def prepare_eval_descriptions(
    params: LagoParams, descriptions: ClassDescriptions, class_names
) -> np.ndarray:
    """Description columns for the candidate classes, with per-group mass
    renormalized for the semantic variants (matching training)."""
    u = descriptions.columns_for(class_names)
    if params.variant in ("semantic-hard", "semantic-soft"):
        u = normalize_group_sums_array(u, params.group_assignment)
    return u


def binarize_descriptions(u) -> np.ndarray:
    """Hard {0,1} descriptions, thresholded at the mean of the matrix."""
    u = require_matrix(u, "u")
    return (u > u.mean()).astype(np.float64)


def dap_log_posterior(u_binary, prior: AttributePrior, attr_probs) -> np.ndarray:
    """Log of the per-attribute probability-ratio product over binary
    descriptions (the hard-threshold all-AND baseline)."""
    u_binary = require_matrix(u_binary, "u_binary")
    if not np.all((u_binary == 0.0) | (u_binary == 1.0)):
        raise ValueError("dap posterior requires a binary description matrix")
    p = np.asarray(attr_probs, dtype=np.float64)
    if p.ndim != 1 or p.size != u_binary.shape[0]:
        raise ValueError("attr_probs length must match the attribute count")
    rho = prior.vector(u_binary.shape[0])
    if np.any(rho <= 0.0) or np.any(rho >= 1.0):
        raise ValueError("attribute prior must lie strictly inside (0, 1)")
    with np.errstate(divide="ignore"):
        log_true = np.log(p) - np.log(rho)
        log_false = np.log1p(-p) - np.log1p(-rho)
    return log_true @ u_binary + log_false @ (1.0 - u_binary)


def dap_posterior(u_binary, prior: AttributePrior, attr_probs) -> np.ndarray:
    """exp of `dap_log_posterior`; one unnormalized score per class."""
    return np.exp(dap_log_posterior(u_binary, prior, attr_probs))


def eszsl_train(features, labels, u_train, gamma_reg: float, lambda_reg: float) -> np.ndarray:
    """Closed-form bilinear baseline: ridge system over features and
    description signatures with +/-1 one-hot targets. Returns W (D x |A|)
    scored as x @ W @ u."""
    if not (gamma_reg > 0 and lambda_reg > 0):
        raise ValueError("regularizers must be positive")
    feats = require_matrix(features, "features")
    s = require_matrix(u_train, "u_train")
    labels = np.asarray(labels, dtype=np.int64)
    n, d = feats.shape
    n_classes = s.shape[1]
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels must index the description columns")
    y = np.full((n, n_classes), -1.0)
    y[np.arange(n), labels] = 1.0
    x = feats.T  # D x N
    lhs = x @ x.T + gamma_reg * np.eye(d)
    rhs = x @ y @ s.T
    mid = np.linalg.solve(lhs, rhs)  # D x A
    gram = s @ s.T + lambda_reg * np.eye(s.shape[0])
    return np.linalg.solve(gram.T, mid.T).T


def eszsl_scores(w, u_eval, x) -> np.ndarray:
    """Bilinear compatibility scores x @ W @ u_eval."""
    x = np.asarray(x, dtype=np.float64)
    return x @ require_matrix(w, "w") @ require_matrix(u_eval, "u_eval")


def lago_k1_score(params: LagoParams, u, x) -> np.ndarray:
    """Direct single-group evaluation: one OR over all attributes plus the
    complementary slot, normalized across classes. Diagnostic twin of the
    general pipeline at K=1."""
    p = attribute_probs(params.w, np.asarray(x, dtype=np.float64))
    if p.ndim != 1:
        raise ValueError("lago_k1_score takes a single sample")
    u_c = clamp_descriptions(require_matrix(u, "u"))
    rho = np.clip(
        params.prior.vector(u_c.shape[0]), DESCRIPTION_EPS, 1.0 - DESCRIPTION_EPS
    )
    scores = (u_c / rho[:, None]).T @ p
    log_comp_desc = np.log1p(-u_c).sum(axis=0)
    if params.comp_mode == "const":
        log_prior_comp = np.log(params.prior.uniform_scalar)
        p_comp = params.c_comp
    else:
        log_prior_comp = np.log1p(-rho).sum()
        p_comp = np.exp(np.log1p(-p).sum())
    scores = scores + np.exp(log_comp_desc - log_prior_comp) * p_comp
    return scores / scores.sum()


def save_checkpoint(path, params: LagoParams) -> None:
    """Write magic, version, length-prefixed JSON metadata, then the w and v
    blocks as little-endian float64 row-major."""
    meta = {
        "variant": params.variant,
        "zeta": params.zeta,
        "c_comp": params.c_comp,
        "comp_mode": params.comp_mode,
        "prior_mode": params.prior_mode,
        "seed": params.seed,
        "dims": {"w": list(params.w.shape), "v": list(params.v.shape)},
        "prior": {
            "mode": params.prior.mode,
            "values": params.prior.values
            if isinstance(params.prior.values, float)
            else [float(v) for v in params.prior.values],
        },
        "group_assignment": None
        if params.group_assignment is None
        else [int(g) for g in params.group_assignment],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(params.w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.v, dtype="<f8").tobytes())


def load_checkpoint(path) -> LagoParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with path.open("rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        w_shape = tuple(meta["dims"]["w"])
        v_shape = tuple(meta["dims"]["v"])
        w_bytes = fh.read(8 * w_shape[0] * w_shape[1])
        v_bytes = fh.read(8 * v_shape[0] * v_shape[1])
    if len(w_bytes) != 8 * w_shape[0] * w_shape[1] or len(v_bytes) != 8 * v_shape[0] * v_shape[1]:
        raise ValueError(f"{path}: truncated weight blocks")
    prior_meta = meta["prior"]
    prior_values = prior_meta["values"]
    prior = AttributePrior(
        prior_meta["mode"],
        prior_values if isinstance(prior_values, float) else np.array(prior_values),
    )
    assignment = meta["group_assignment"]
    return LagoParams(
        w=np.frombuffer(w_bytes, dtype="<f8").reshape(w_shape).copy(),
        v=np.frombuffer(v_bytes, dtype="<f8").reshape(v_shape).copy(),
        zeta=float(meta["zeta"]),
        c_comp=float(meta["c_comp"]),
        prior_mode=meta["prior_mode"],
        comp_mode=meta["comp_mode"],
        variant=meta["variant"],
        prior=prior,
        group_assignment=None if assignment is None else np.array(assignment, dtype=np.int64),
        seed=int(meta["seed"]),
    )
