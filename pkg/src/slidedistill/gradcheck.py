"""Finite-difference verification of every loss and encoder path.

Builds small random graphs, runs :func:`tensorcore.grad_check` against each
loss term and against the full three-branch forward, and reports the max
relative error per checked surface. Seeds that would land an input inside
the numerical danger zone of a kink (|x| comparable to the step, for abs,
relu and selu) are deterministically re-drawn: the subgradient convention is
still exercised by dedicated unit tests, but central differences are
meaningless there.

The suites default to a step of 1e-4: composite graphs carry gradients
spanning several decades, and a larger step keeps float64 rounding noise
below the tolerance on the small ones without hurting the smooth terms.
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .encoders import (AttentionParams, DecomposedFeatures, GenomicMatrix, HeadOutputs, Model,
                       ModelConfig, PathologyBag, forward_sample)
from .losses import (AccumulationWindow, ce_loss, clod_loss, coral_loss, mkd_loss,
                     orthogonal_loss, skd_loss, total_loss)
from .tensorcore import Tensor, grad_check

KINK_MARGIN = 5e-4  # min distance of any kinked preactivation from 0
DOT_MARGIN = 5e-3   # min |<z_a, z_b>| so the abs in the orthogonality term is safe


def _window_leaves(rng: np.random.Generator, b: int, d: int):
    """Random leaf tensors plus a factory that rebuilds the window graph.

    grad_check perturbs leaf data and re-runs the builder, so everything
    derived from a leaf (the softmax probabilities in particular) has to be
    reconstructed on every call.
    """
    z_leaves, logit_leaves = [], []
    groups: dict[str, tuple[list[Tensor], list[str]]] = {"z": ([], []), "logits": ([], [])}
    for i in range(b):
        zs = tuple(Tensor(rng.standard_normal((1, d)), requires_grad=True) for _ in range(3))
        ls = tuple(Tensor(rng.standard_normal((1, 2)) * 2.0, requires_grad=True) for _ in range(3))
        z_leaves.append(zs)
        logit_leaves.append(ls)
        for t, part in zip(zs, ("z_p", "z_g", "z_m")):
            groups["z"][0].append(t)
            groups["z"][1].append(f"s{i}.{part}")
        for t, part in zip(ls, ("logits_p", "logits_g", "logits_m")):
            groups["logits"][0].append(t)
            groups["logits"][1].append(f"s{i}.{part}")
    labels = [int(rng.integers(0, 2)) for _ in range(b)]

    def make_window() -> AccumulationWindow:
        feats = [DecomposedFeatures(z_p=zp, z_g=zg, z_m=zm) for zp, zg, zm in z_leaves]
        heads = [HeadOutputs(logits_p=lp, probs_p=tc.softmax_row(lp),
                             logits_g=lg, probs_g=tc.softmax_row(lg),
                             logits_m=lm, probs_m=tc.softmax_row(lm))
                 for lp, lg, lm in logit_leaves]
        return AccumulationWindow(features=feats, heads=heads, labels=labels)

    return make_window, groups


def _min_pairwise_dot(window: AccumulationWindow) -> float:
    worst = np.inf
    for f in window.features:
        zp, zg, zm = f.z_p.data[0], f.z_g.data[0], f.z_m.data[0]
        for a, b in ((zp, zg), (zp, zm), (zg, zm)):
            worst = min(worst, abs(float(a @ b)))
    return worst


def _safe_window(seed: int, b: int, d: int):
    for bump in range(100):
        rng = np.random.default_rng([seed, bump])
        make_window, groups = _window_leaves(rng, b, d)
        if _min_pairwise_dot(make_window()) > DOT_MARGIN:
            return make_window, groups
    raise RuntimeError("could not draw a kink-safe window")  # pragma: no cover


# builder plus the leaf group the loss actually depends on
LOSS_BUILDERS = {
    "coral": (lambda w, tau, alpha: coral_loss(*w.stacked()), "z"),
    "orthogonal": (lambda w, tau, alpha: orthogonal_loss(w.features[0].z_p, w.features[0].z_g,
                                                         w.features[0].z_m), "z"),
    "mkd": (lambda w, tau, alpha: mkd_loss(w, alpha=alpha), "z"),
    "skd": (lambda w, tau, alpha: skd_loss(w), "z"),
    "clod": (lambda w, tau, alpha: clod_loss(w, tau=tau), "logits"),
    "clod_raw": (lambda w, tau, alpha: clod_loss(w, tau=tau, soft_kl_tau2=False), "logits"),
    "ce": (lambda w, tau, alpha: ce_loss(w), "logits"),
    "total": (lambda w, tau, alpha: total_loss(w, tau=tau, alpha=alpha)[0], "all"),
}


def check_losses(
    d: int = 6,
    b: int = 3,
    seeds=range(20),
    h: float = 1e-4,
    tol: float = 1e-4,
    tau: float = 4.0,
    alpha: float = 1.0 / 6.0,
) -> dict[str, float]:
    """Max finite-difference relative error per loss term across seeds."""
    worst = {name: 0.0 for name in LOSS_BUILDERS}
    for seed in seeds:
        make_window, groups = _safe_window(seed, b, d)
        all_leaves = groups["z"][0] + groups["logits"][0]
        all_names = groups["z"][1] + groups["logits"][1]
        for name, (build, group) in LOSS_BUILDERS.items():
            leaves, names = (all_leaves, all_names) if group == "all" else groups[group]
            report = grad_check(lambda: build(make_window(), tau, alpha), leaves, h=h, tol=tol, names=names)
            worst[name] = max(worst[name], report.max_rel_error)
    return worst


def _kink_distances(model: Model, bag: PathologyBag, genomic: GenomicMatrix) -> float:
    """Distance of the closest relu/selu preactivation from 0."""
    pre_p = bag.features @ model.compress.W.data + model.compress.b.data
    pre_g = genomic.features @ model.snn.W.data + model.snn.b.data
    feats, _ = forward_sample(bag, genomic, model)
    one = np.ones((1, 1))
    k = np.kron(np.hstack([feats.z_p.data, one]), np.hstack([feats.z_g.data, one]))
    pre_m = k @ model.fuse.W.data + model.fuse.b.data
    return min(np.abs(pre_p).min(), np.abs(pre_g).min(), np.abs(pre_m).min())


def _random_model(rng: np.random.Generator, config: ModelConfig) -> Model:
    model = Model(config)
    for p in model.parameters().values():
        p.data[...] = rng.standard_normal(p.data.shape) * 0.3
    return model


def _safe_network_case(seed: int, d: int, d_in: int, n_p: int, n_g: int, b: int):
    config = ModelConfig(d_in=d_in, d=d, dropout=0.0)
    for bump in range(100):
        rng = np.random.default_rng([seed, bump, 7])
        model = _random_model(rng, config)
        samples = [(PathologyBag(f"s{i}", rng.standard_normal((n_p, d_in))),
                    GenomicMatrix(f"s{i}", rng.standard_normal((n_g, d_in))))
                   for i in range(b)]
        labels = [int(rng.integers(0, 2)) for _ in range(b)]
        if all(_kink_distances(model, bag, g) > KINK_MARGIN for bag, g in samples):
            feats = [forward_sample(bag, g, model)[0] for bag, g in samples]
            dots = min(_min_pairwise_dot_features(f) for f in feats)
            if dots > DOT_MARGIN:
                return model, samples, labels
    raise RuntimeError("could not draw a kink-safe network case")  # pragma: no cover


def _min_pairwise_dot_features(f: DecomposedFeatures) -> float:
    zp, zg, zm = f.z_p.data[0], f.z_g.data[0], f.z_m.data[0]
    return min(abs(float(zp @ zg)), abs(float(zp @ zm)), abs(float(zg @ zm)))


def check_encoder_paths(
    d: int = 6,
    d_in: int = 5,
    n_p: int = 4,
    n_g: int = 3,
    seeds=range(20),
    h: float = 1e-4,
    tol: float = 1e-4,
) -> dict[str, float]:
    """Each branch checked against its own parameters, one path at a time.

    Readouts are smooth contractions of the path output; restricting the
    leaves to the path keeps the coordinate count (and runtime) sane.
    """
    worst = {"compress_abmil": 0.0, "snn_abmil": 0.0, "fusion": 0.0, "heads": 0.0}
    config = ModelConfig(d_in=d_in, d=d, dropout=0.0)
    for seed in seeds:
        for bump in range(100):
            rng = np.random.default_rng([seed, bump, 11])
            model = _random_model(rng, config)
            bag = Tensor(rng.standard_normal((n_p, d_in)))
            gen = Tensor(rng.standard_normal((n_g, d_in)))
            z_a = Tensor(rng.standard_normal((1, d)))
            z_b = Tensor(rng.standard_normal((1, d)))
            pre_p = bag.data @ model.compress.W.data + model.compress.b.data
            pre_g = gen.data @ model.snn.W.data + model.snn.b.data
            one = np.ones((1, 1))
            k = np.kron(np.hstack([z_a.data, one]), np.hstack([z_b.data, one]))
            pre_m = k @ model.fuse.W.data + model.fuse.b.data
            if min(np.abs(pre_p).min(), np.abs(pre_g).min(), np.abs(pre_m).min()) > KINK_MARGIN:
                break
        else:  # pragma: no cover
            raise RuntimeError("could not draw a kink-safe path case")
        readout_p = Tensor(rng.standard_normal((1, d)))
        readout_g = Tensor(rng.standard_normal((1, d)))

        from .encoders import abmil_pool, classify, compress_pathology, fuse_multimodal, snn_encode

        cases = {
            "compress_abmil": (
                lambda: tc.sum_all(tc.mul(abmil_pool(compress_pathology(bag, model.compress),
                                                     model.attn_p)[0], readout_p)),
                [model.compress.W, model.compress.b, model.attn_p.V, model.attn_p.U, model.attn_p.W],
            ),
            "snn_abmil": (
                lambda: tc.sum_all(tc.mul(abmil_pool(snn_encode(gen, model.snn), model.attn_g)[0],
                                          readout_g)),
                [model.snn.W, model.snn.b, model.attn_g.V, model.attn_g.U, model.attn_g.W],
            ),
            "fusion": (
                lambda: tc.sum_all(tc.mul(fuse_multimodal(z_a, z_b, model.fuse), readout_p)),
                [model.fuse.W, model.fuse.b],
            ),
            "heads": (
                lambda: tc.sum_all(tc.mul(classify(z_a, model.head_p)[1],
                                          classify(z_b, model.head_m)[0])),
                [model.head_p.W, model.head_p.b, model.head_m.W, model.head_m.b],
            ),
        }
        for name, (build, leaves) in cases.items():
            report = grad_check(build, leaves, h=h, tol=tol)
            worst[name] = max(worst[name], report.max_rel_error)
    return worst


def check_network(
    d: int = 6,
    d_in: int = 5,
    n_p: int = 4,
    n_g: int = 3,
    b: int = 2,
    seeds=range(5),
    h: float = 1e-4,
    tol: float = 1e-4,
) -> dict[str, float]:
    """End-to-end check: full three-branch forward into the total loss,
    differentiated with respect to every model parameter."""
    worst = {"network": 0.0}
    for seed in seeds:
        model, samples, labels = _safe_network_case(seed, d, d_in, n_p, n_g, b)
        leaves = list(model.parameters().values())
        names = list(model.parameters().keys())

        def run():
            feats, heads = [], []
            for bag, g in samples:
                f, hd = forward_sample(bag, g, model)
                feats.append(f)
                heads.append(hd)
            window = AccumulationWindow(features=feats, heads=heads, labels=labels)
            return total_loss(window)[0]

        report = grad_check(run, leaves, h=h, tol=tol, names=names)
        worst["network"] = max(worst["network"], report.max_rel_error)
    return worst


def run_suite(seeds=range(20), d_values=(6, 12), h: float = 1e-4, tol: float = 1e-4,
              network_seeds=range(5)) -> dict[str, float]:
    """The full verification suite; returns per-surface max relative errors.

    Losses and individual encoder paths run at every width in ``d_values``;
    the all-parameters network composite runs at the smallest width (its
    leaf count grows with d^3 through the fusion projection).
    """
    results: dict[str, float] = {}
    for d in d_values:
        for name, err in check_losses(d=d, seeds=seeds, h=h, tol=tol).items():
            key = f"loss/{name}"
            results[key] = max(results.get(key, 0.0), err)
        for name, err in check_encoder_paths(d=d, d_in=d - 1, seeds=seeds, h=h, tol=tol).items():
            key = f"encoder/{name}"
            results[key] = max(results.get(key, 0.0), err)
    d0 = min(d_values)
    results["encoder/network"] = check_network(d=d0, d_in=d0 - 1, seeds=network_seeds, h=h, tol=tol)["network"]
    return results
