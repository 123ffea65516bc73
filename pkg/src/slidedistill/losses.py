"""Loss terms for the co-trained teacher/student triple.

Window-level terms (covariance alignment, similarity preservation) consume
the features of all samples accumulated since the last optimizer step;
per-sample terms (cross-entropy, orthogonality, mutual KL) are averaged over
the same window so the total stays scale-stable in the window size.

All functions build tensorcore graphs and are pure: safe to call from any
thread, no internal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoders import DecomposedFeatures, HeadOutputs
from .errors import ConfigError, ContractError, WindowTooSmallError
from .tensorcore import Tensor

KL_CLAMP = 1e-12
DEFAULT_ALPHA = 1.0 / 6.0
DEFAULT_TAU = 4.0


@dataclass
class AccumulationWindow:
    """Per-sample outputs gathered between optimizer steps, row-aligned."""

    features: list[DecomposedFeatures]
    heads: list[HeadOutputs]
    labels: list[int]

    def __post_init__(self):
        if not (len(self.features) == len(self.heads) == len(self.labels)):
            raise ContractError("window lists must be aligned by sample")
        for label in self.labels:
            if label not in (0, 1):
                raise ContractError(f"labels must be binary, got {label!r}")
        for f in self.features:
            if f.z_g is None or f.z_m is None:
                raise ContractError("window samples need all three decomposed features")

    @property
    def b(self) -> int:
        return len(self.features)

    def stacked(self) -> tuple[Tensor, Tensor, Tensor]:
        """Concatenate per-sample features into (Z_P, Z_G, Z_M), each b x d."""
        z_p = tc.concat_rows([f.z_p for f in self.features])
        z_g = tc.concat_rows([f.z_g for f in self.features])
        z_m = tc.concat_rows([f.z_m for f in self.features])
        return z_p, z_g, z_m


@dataclass
class LossBreakdown:
    """Every term of one optimizer step, as plain floats.

    Identities: l_mkd == l_coral + alpha * l_or and
    l_total == l_ce + l_mkd + l_skd + l_clod (exactly, same summation order).
    """

    l_ce: float
    l_coral: float
    l_or: float
    l_mkd: float
    l_skd: float
    l_clod: float
    l_total: float

    FIELDS = ("l_ce", "l_coral", "l_or", "l_mkd", "l_skd", "l_clod", "l_total")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}


# ---------------------------------------------------------------------------
# covariance alignment


def covariance(Z: Tensor) -> Tensor:
    """Unbiased covariance of window features: (Z'Z - (1'Z)'(1'Z)/b) / (b-1)."""
    b = Z.shape[0]
    if b < 2:
        raise WindowTooSmallError(f"covariance needs at least 2 samples, got {b}")
    ones = Tensor(np.ones((1, b)))
    col_sums = tc.matmul(ones, Z)
    gram = tc.matmul(tc.transpose(Z), Z)
    outer = tc.scale(tc.matmul(tc.transpose(col_sums), col_sums), 1.0 / b)
    return tc.scale(tc.sub(gram, outer), 1.0 / (b - 1))


def coral_loss(Z_P: Tensor, Z_G: Tensor, Z_M: Tensor) -> Tensor:
    """Pairwise squared Frobenius distance of the three covariances, / (4 d^2)."""
    if not (Z_P.shape == Z_G.shape == Z_M.shape):
        raise ContractError(f"window matrices must share a shape, got {Z_P.shape}, {Z_G.shape}, {Z_M.shape}")
    d = Z_P.shape[1]
    c_p, c_g, c_m = covariance(Z_P), covariance(Z_G), covariance(Z_M)
    total = tc.add(tc.add(tc.frobenius_sq(tc.sub(c_p, c_g)),
                          tc.frobenius_sq(tc.sub(c_p, c_m))),
                   tc.frobenius_sq(tc.sub(c_g, c_m)))
    return tc.scale(total, 1.0 / (4.0 * d * d))


def orthogonal_loss(z_p: Tensor, z_g: Tensor, z_m: Tensor) -> Tensor:
    """Sum of absolute pairwise dot products of the decomposed features."""
    if not (z_p.shape == z_g.shape == z_m.shape and z_p.shape[0] == 1):
        raise ContractError("orthogonal loss expects three 1xd rows of equal width")
    def dot(a, b):
        return tc.absval(tc.matmul(a, tc.transpose(b)))
    return tc.add(tc.add(dot(z_p, z_g), dot(z_p, z_m)), dot(z_g, z_m))


def mkd_loss(window: AccumulationWindow, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Covariance alignment plus alpha times the window-mean orthogonality."""
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    Z_P, Z_G, Z_M = window.stacked()
    coral = coral_loss(Z_P, Z_G, Z_M)
    or_terms = [orthogonal_loss(f.z_p, f.z_g, f.z_m) for f in window.features]
    or_mean = tc.scale(_add_all(or_terms), 1.0 / window.b)
    return tc.add(coral, tc.scale(or_mean, alpha))


# ---------------------------------------------------------------------------
# similarity preservation


def skd_pair(Z_a: Tensor, Z_b: Tensor) -> Tensor:
    """Squared Frobenius distance of row-normalized Gram matrices, / b^2.

    Invariant to right-multiplying either argument by an orthogonal matrix
    and to positive per-matrix scaling (row normalization removes scale).
    """
    if Z_a.shape[0] != Z_b.shape[0]:
        raise ContractError(f"window row counts differ: {Z_a.shape[0]} vs {Z_b.shape[0]}")
    b = Z_a.shape[0]
    if b < 2:
        raise WindowTooSmallError(f"similarity matrices need at least 2 samples, got {b}")
    g_a = tc.row_l2_normalize(tc.matmul(Z_a, tc.transpose(Z_a)))
    g_b = tc.row_l2_normalize(tc.matmul(Z_b, tc.transpose(Z_b)))
    return tc.scale(tc.frobenius_sq(tc.sub(g_a, g_b)), 1.0 / (b * b))


def similarity_matrix(Z: np.ndarray) -> np.ndarray:
    """Row-normalized Gram matrix of window features (diagnostic view)."""
    g = Z @ Z.T
    norms = np.maximum(np.linalg.norm(g, axis=1, keepdims=True), tc.ROW_NORM_EPS)
    return g / norms


def skd_loss(window: AccumulationWindow) -> Tensor:
    """Student-vs-multimodal plus student-vs-genomic similarity terms."""
    Z_P, Z_G, Z_M = window.stacked()
    return tc.add(skd_pair(Z_P, Z_M), skd_pair(Z_P, Z_G))


# ---------------------------------------------------------------------------
# mutual distillation and cross-entropy


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability rows, with 0 log 0 = 0 and q clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ContractError(f"distributions differ in length: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise ContractError(f"{name} is not a probability row (sum {v.sum():.8f})")
    q = np.maximum(q, KL_CLAMP)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_graph(p: Tensor, q: Tensor) -> Tensor:
    logs = tc.sub(tc.log(tc.clamp_min(p, KL_CLAMP)), tc.log(tc.clamp_min(q, KL_CLAMP)))
    return tc.sum_all(tc.mul(p, logs))


def _add_all(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return total


def clod_loss(window: AccumulationWindow, tau: float = DEFAULT_TAU, soft_kl_tau2: bool = True) -> Tensor:
    """Symmetric student<->teacher KL terms, averaged over the window.

    With ``soft_kl_tau2`` (default) the KLs use temperature-softened
    distributions and the tau^2 gradient-scale correction; otherwise they use
    the raw head distributions with no correction.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    per_sample: list[Tensor] = []
    for heads in window.heads:
        if heads.logits_g is None or heads.logits_m is None:
            raise ContractError("mutual distillation needs all three heads")
        if soft_kl_tau2:
            p_p = tc.softmax_row(tc.scale(heads.logits_p, 1.0 / tau))
            p_g = tc.softmax_row(tc.scale(heads.logits_g, 1.0 / tau))
            p_m = tc.softmax_row(tc.scale(heads.logits_m, 1.0 / tau))
            factor = tau * tau
        else:
            p_p, p_g, p_m = heads.probs_p, heads.probs_g, heads.probs_m
            factor = 1.0
        term = _add_all([_kl_graph(p_p, p_m), _kl_graph(p_m, p_p),
                         _kl_graph(p_p, p_g), _kl_graph(p_g, p_p)])
        per_sample.append(tc.scale(term, factor))
    return tc.scale(_add_all(per_sample), 1.0 / window.b)


def _ce_head(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] via shift-stabilized log-sum-exp."""
    n = logits.shape[1]
    m = float(logits.data.max())
    shift = Tensor(np.full((1, n), m))
    lse = tc.add(tc.log(tc.sum_all(tc.exp(tc.sub(logits, shift)))), Tensor([[m]]))
    picked = tc.matmul(logits, Tensor(np.eye(n)[:, [label]]))
    return tc.sub(lse, picked)


def ce_loss(window: AccumulationWindow) -> Tensor:
    """Cross-entropy summed over the three heads, averaged over the window."""
    per_sample = []
    for heads, label in zip(window.heads, window.labels):
        if label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {label!r}")
        terms = [_ce_head(heads.logits_p, label)]
        if heads.logits_g is not None:
            terms.append(_ce_head(heads.logits_g, label))
        if heads.logits_m is not None:
            terms.append(_ce_head(heads.logits_m, label))
        per_sample.append(_add_all(terms))
    return tc.scale(_add_all(per_sample), 1.0 / window.b)


# ---------------------------------------------------------------------------
# total


def total_loss(
    window: AccumulationWindow,
    tau: float = DEFAULT_TAU,
    alpha: float = DEFAULT_ALPHA,
    enable_mkd: bool = True,
    enable_skd: bool = True,
    enable_clod: bool = True,
    soft_kl_tau2: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the enabled terms; disabled terms are exactly 0.

    Returns the scalar graph node (for backward) and the float breakdown.
    """
    l_ce = ce_loss(window)
    total = l_ce

    l_coral_v = l_or_v = l_mkd_v = 0.0
    if enable_mkd:
        Z_P, Z_G, Z_M = window.stacked()
        coral = coral_loss(Z_P, Z_G, Z_M)
        or_mean = tc.scale(_add_all([orthogonal_loss(f.z_p, f.z_g, f.z_m) for f in window.features]),
                           1.0 / window.b)
        l_mkd = tc.add(coral, tc.scale(or_mean, alpha))
        total = tc.add(total, l_mkd)
        l_coral_v, l_or_v, l_mkd_v = coral.item(), or_mean.item(), l_mkd.item()

    l_skd_v = 0.0
    if enable_skd:
        l_skd = skd_loss(window)
        total = tc.add(total, l_skd)
        l_skd_v = l_skd.item()

    l_clod_v = 0.0
    if enable_clod:
        l_clod = clod_loss(window, tau=tau, soft_kl_tau2=soft_kl_tau2)
        total = tc.add(total, l_clod)
        l_clod_v = l_clod.item()

    breakdown = LossBreakdown(l_ce=l_ce.item(), l_coral=l_coral_v, l_or=l_or_v,
                              l_mkd=l_mkd_v, l_skd=l_skd_v, l_clod=l_clod_v,
                              l_total=total.item())
    return total, breakdown
