"""The three aggregator branches and their classification heads.

Student branch: per-instance compression of a pathology bag followed by gated
attention pooling. Genomic teacher: a self-normalizing encoder over the
reshaped gene matrix followed by its own attention pooling. Multi-modal
teacher: bias-augmented Kronecker fusion of the two pooled vectors. Each
branch ends in a binary head.

The multi-modal teacher consumes the same pooled vectors the other two
branches produce; by default its gradients flow back into them (online
co-training), which ``detach_fusion_inputs`` turns off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError, EmptyBagError, MissingModalityError
from .tensorcore import Tensor

COMPRESS_ACTIVATIONS = ("relu", "tanh", "identity")


def _check_finite_matrix(name: str, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ContractError(f"{name}: expected a non-empty 2-D feature matrix, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise ContractError(f"{name}: features contain NaN or Inf")


@dataclass
class PathologyBag:
    """Per-sample instance-embedding matrix (n_p x d_in); bag size varies."""

    sample_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        _check_finite_matrix(f"pathology bag {self.sample_id!r}", self.features)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class GenomicMatrix:
    """Reshaped gene-expression matrix (n_g x d_in) for one sample."""

    sample_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        _check_finite_matrix(f"genomic matrix {self.sample_id!r}", self.features)


@dataclass
class AffineParams:
    """Weights (in x out) and bias (1 x out) of one affine map."""

    W: Tensor
    b: Tensor


@dataclass
class AttentionParams:
    """Gated-attention projections: V, U are d x d, W is d x 1."""

    V: Tensor
    U: Tensor
    W: Tensor


@dataclass
class DecomposedFeatures:
    """The pooled triple: pathology-specific, genomic-specific, modality-general."""

    z_p: Tensor
    z_g: Tensor | None = None
    z_m: Tensor | None = None


@dataclass
class HeadOutputs:
    """Logits and softmax probabilities of the three heads (1 x 2 each).

    In pathology-only mode the genomic and multi-modal entries are None.
    """

    logits_p: Tensor
    probs_p: Tensor
    logits_g: Tensor | None = None
    probs_g: Tensor | None = None
    logits_m: Tensor | None = None
    probs_m: Tensor | None = None

    @property
    def p_p(self) -> np.ndarray:
        return self.probs_p.data[0]

    @property
    def p_g(self) -> np.ndarray | None:
        return None if self.probs_g is None else self.probs_g.data[0]

    @property
    def p_m(self) -> np.ndarray | None:
        return None if self.probs_m is None else self.probs_m.data[0]


@dataclass
class ModelConfig:
    d_in: int
    d: int = 256
    n_classes: int = 2
    dropout: float = 0.25
    compress_activation: str = "relu"
    detach_fusion_inputs: bool = False

    def __post_init__(self):
        if self.d_in < 1 or self.d < 1:
            raise ConfigError(f"widths must be positive, got d_in={self.d_in}, d={self.d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.compress_activation not in COMPRESS_ACTIVATIONS:
            raise ConfigError(f"unknown compress_activation {self.compress_activation!r}")


class Model:
    """Parameter container for the three branches.

    ``parameters()`` yields a stable name -> Tensor mapping; the optimizer and
    the checkpoint format both rely on that ordering.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        d_in, d, c = config.d_in, config.d, config.n_classes
        z = lambda r, cc: Tensor(np.zeros((r, cc)), requires_grad=True)
        self.compress = AffineParams(z(d_in, d), z(1, d))
        self.snn = AffineParams(z(d_in, d), z(1, d))
        self.attn_p = AttentionParams(z(d, d), z(d, d), z(d, 1))
        self.attn_g = AttentionParams(z(d, d), z(d, d), z(d, 1))
        self.fuse = AffineParams(z((d + 1) ** 2, d), z(1, d))
        self.head_p = AffineParams(z(d, c), z(1, c))
        self.head_g = AffineParams(z(d, c), z(1, c))
        self.head_m = AffineParams(z(d, c), z(1, c))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, aff in (("compress", self.compress), ("snn", self.snn), ("fuse", self.fuse),
                          ("head_p", self.head_p), ("head_g", self.head_g), ("head_m", self.head_m)):
            out[f"{name}.W"] = aff.W
            out[f"{name}.b"] = aff.b
        for name, attn in (("attn_p", self.attn_p), ("attn_g", self.attn_g)):
            out[f"{name}.V"] = attn.V
            out[f"{name}.U"] = attn.U
            out[f"{name}.W"] = attn.W
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def affine(x: Tensor, params: AffineParams) -> Tensor:
    if x.shape[1] != params.W.shape[0]:
        raise ConfigError(f"affine width mismatch: input has {x.shape[1]} columns, weights expect {params.W.shape[0]}")
    return tc.add_rowvec(tc.matmul(x, params.W), params.b)


def compress_pathology(x: Tensor, params: AffineParams, activation: str = "relu") -> Tensor:
    """Row-wise d_in -> d compression of bag instances (order preserving)."""
    h = affine(x, params)
    if activation == "relu":
        return tc.relu(h)
    if activation == "tanh":
        return tc.tanh(h)
    if activation == "identity":
        return h
    raise ConfigError(f"unknown compress activation {activation!r}")


def alpha_dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """SELU-compatible dropout: dropped units go to -lambda*alpha, then the
    output is affinely corrected to keep zero mean / unit variance."""
    if rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    q = 1.0 - rate
    alpha_p = -tc.SELU_LAMBDA * tc.SELU_ALPHA
    keep = (rng.random(x.shape) < q).astype(np.float64)
    a = (q + alpha_p**2 * q * rate) ** -0.5
    b = -a * rate * alpha_p
    masked = tc.add(tc.mul(x, Tensor(keep)), Tensor(alpha_p * (1.0 - keep)))
    return tc.add(tc.scale(masked, a), Tensor(np.full(x.shape, b)))


def snn_encode(
    x: Tensor,
    params: AffineParams,
    dropout: float = 0.25,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Self-normalizing row-wise encoder: affine, SELU, alpha-dropout when training."""
    h = tc.selu(affine(x, params))
    if training and dropout > 0.0:
        h = alpha_dropout(h, dropout, rng)
    return h


def abmil_pool(h: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Gated attention pooling: returns (pooled 1xd, attention 1xn).

    Scores are W^T (tanh(h V^T) * sigmoid(h U^T)) per instance, softmaxed over
    the bag; the pooled vector is the attention-weighted instance sum.
    """
    n = h.shape[0]
    if n < 1:
        raise EmptyBagError("attention pooling over an empty bag")
    gated = tc.mul(tc.tanh(tc.matmul(h, tc.transpose(params.V))),
                   tc.sigmoid(tc.matmul(h, tc.transpose(params.U))))
    scores = tc.matmul(gated, params.W)            # n x 1
    attention = tc.softmax_row(tc.transpose(scores))
    pooled = tc.matmul(attention, h)
    return pooled, attention


def fuse_multimodal(z_p: Tensor, z_g: Tensor, params: AffineParams, detach: bool = False) -> Tensor:
    """Bias-augmented Kronecker fusion projected back to width d.

    Appending a constant 1 to each vector keeps the unimodal terms of the
    outer product; the learned projection maps the (d+1)^2 interactions to d.
    """
    if z_p.shape[1] != z_g.shape[1]:
        raise ConfigError(f"fusion width mismatch: {z_p.shape[1]} vs {z_g.shape[1]}")
    if detach:
        z_p, z_g = z_p.detach(), z_g.detach()
    one = Tensor([[1.0]])
    k = tc.kron(tc.concat_cols([z_p, one]), tc.concat_cols([z_g, one]))
    return tc.relu(affine(k, params))


def classify(z: Tensor, params: AffineParams) -> tuple[Tensor, Tensor]:
    logits = affine(z, params)
    return logits, tc.softmax_row(logits)


def forward_sample(
    bag: PathologyBag,
    genomic: GenomicMatrix | None,
    model: Model,
    training: bool = False,
    rng: np.random.Generator | None = None,
    pathology_only: bool = False,
) -> tuple[DecomposedFeatures, HeadOutputs]:
    """Run one sample through the network.

    In pathology-only mode only the student path executes (genomic input is
    ignored); otherwise a missing genomic matrix is an error.
    """
    cfg = model.config
    if bag.features.shape[1] != cfg.d_in:
        raise ConfigError(f"bag width {bag.features.shape[1]} != configured d_in {cfg.d_in}")

    h_p = compress_pathology(Tensor(bag.features), model.compress, cfg.compress_activation)
    z_p, _ = abmil_pool(h_p, model.attn_p)
    logits_p, probs_p = classify(z_p, model.head_p)
    if pathology_only:
        return DecomposedFeatures(z_p=z_p), HeadOutputs(logits_p=logits_p, probs_p=probs_p)

    if genomic is None:
        raise MissingModalityError(f"sample {bag.sample_id!r} has no genomic matrix; use pathology_only mode")
    if genomic.features.shape[1] != cfg.d_in:
        raise ConfigError(f"genomic width {genomic.features.shape[1]} != configured d_in {cfg.d_in}")

    h_g = snn_encode(Tensor(genomic.features), model.snn, cfg.dropout, training=training, rng=rng)
    z_g, _ = abmil_pool(h_g, model.attn_g)
    logits_g, probs_g = classify(z_g, model.head_g)

    z_m = fuse_multimodal(z_p, z_g, model.fuse, detach=cfg.detach_fusion_inputs)
    logits_m, probs_m = classify(z_m, model.head_m)

    features = DecomposedFeatures(z_p=z_p, z_g=z_g, z_m=z_m)
    heads = HeadOutputs(logits_p=logits_p, probs_p=probs_p,
                        logits_g=logits_g, probs_g=probs_g,
                        logits_m=logits_m, probs_m=probs_m)
    return features, heads
