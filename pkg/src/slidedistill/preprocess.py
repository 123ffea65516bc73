"""Survival-based gene ranking, genomic reshaping, and synthetic cohorts.

The gene screen fits one proportional-hazards coefficient per gene by
Newton-Raphson on the partial likelihood (Breslow tie handling) and ranks
genes by absolute Wald z. Selected genes are packed row-major into a matrix
of width d_in; the trailing K mod d_in genes are dropped so every row stays
fully informative.

The synthetic generator replaces the upstream slide/feature-extraction
pipeline at desk scale. Each sample draws a binary label and a decisive
latent split into a modality-general block and two modality-specific blocks;
``gamma`` controls the fraction of decisive signal that is shared between
modalities. Bags carry the pathology latent on a random subset of instances,
gene expression carries the genomic latent densely, and survival times follow
an exponential hazard loading on a known causal gene subset, so the ranking
screen is testable end to end. Generation is seed-deterministic and emits
the same on-disk formats the ingestion path reads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, ContractError
from .encoders import GenomicMatrix

COX_TOL = 1e-9
COX_MAX_ITER = 50
CSV_PREFIX = ("sample_id", "time", "event")


@dataclass
class SurvivalRecord:
    """One cohort member: follow-up time, event flag, raw expression vector."""

    sample_id: str
    time: float
    event: int
    expression: np.ndarray

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64).reshape(-1)
        if not self.time > 0:
            raise ContractError(f"{self.sample_id}: survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ContractError(f"{self.sample_id}: event must be 0 or 1, got {self.event}")


@dataclass
class CoxFit:
    beta: float
    wald_z: float
    converged: bool
    flagged: bool
    iterations: int


@dataclass
class GeneRanking:
    """Per-gene fit results plus the top-K selection order."""

    beta: np.ndarray
    wald_z: np.ndarray
    flagged: np.ndarray
    order: np.ndarray        # gene indices, best first
    K: int

    @property
    def selected(self) -> np.ndarray:
        return self.order[: self.K]

    @property
    def ranks(self) -> np.ndarray:
        """rank[g] = 1-based position of gene g (a permutation of 1..n)."""
        r = np.empty(len(self.order), dtype=int)
        r[self.order] = np.arange(1, len(self.order) + 1)
        return r

    def to_dict(self) -> dict:
        return {"k": int(self.K),
                "selected": [int(g) for g in self.selected],
                "genes": [{"index": int(g), "beta": float(self.beta[g]),
                           "wald_z": float(self.wald_z[g]), "rank": int(r),
                           "flagged": bool(self.flagged[g])}
                          for g, r in zip(range(len(self.beta)), self.ranks)]}


# ---------------------------------------------------------------------------
# Cox partial likelihood (single covariate, Breslow ties)


def _cox_quantities(beta: float, x: np.ndarray, starts: np.ndarray, stops: np.ndarray,
                    death_x_sums: np.ndarray, death_counts: np.ndarray):
    """Log-likelihood, score and information over tie groups.

    Arrays are pre-sorted by descending time; group boundaries mark tied
    times, so cumulative sums through a group's end give the risk-set sums.
    """
    bx = beta * x
    shift = bx.max()
    w = np.exp(bx - shift)
    cs0 = np.cumsum(w)
    cs1 = np.cumsum(w * x)
    cs2 = np.cumsum(w * x * x)
    s0 = cs0[stops]
    s1 = cs1[stops]
    s2 = cs2[stops]
    if s0.min() <= 0.0:  # risk-set weights underflowed at this beta
        return -np.inf, np.nan, np.nan
    ll = float(np.sum(beta * death_x_sums - death_counts * (np.log(s0) + shift)))
    score = float(np.sum(death_x_sums - death_counts * s1 / s0))
    info = float(np.sum(death_counts * (s2 / s0 - (s1 / s0) ** 2)))
    return ll, score, info


def cox_fit(times: np.ndarray, events: np.ndarray, x: np.ndarray) -> CoxFit:
    """Newton-Raphson fit of one hazard coefficient with step-halving.

    The step is halved until the partial likelihood does not decrease, so the
    iteration is monotone; convergence is |delta| < 1e-9 within 50 iterations,
    anything else comes back flagged.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    x = np.asarray(x, dtype=float)
    if int(events.sum()) < 2:
        raise ContractError(f"cox fit needs at least 2 events, got {int(events.sum())}")
    if float(np.var(x)) == 0.0:
        return CoxFit(beta=0.0, wald_z=0.0, converged=True, flagged=True, iterations=0)

    order = np.argsort(-times, kind="stable")
    t_s, e_s, x_s = times[order], events[order], x[order]
    # tie groups over the descending-time sequence
    boundaries = np.flatnonzero(np.diff(t_s) != 0.0)
    starts = np.concatenate(([0], boundaries + 1))
    stops = np.concatenate((boundaries, [len(t_s) - 1]))
    death_counts = np.array([e_s[lo:hi + 1].sum() for lo, hi in zip(starts, stops)], dtype=float)
    death_x_sums = np.array([(x_s[lo:hi + 1] * e_s[lo:hi + 1]).sum() for lo, hi in zip(starts, stops)])
    keep = death_counts > 0
    starts, stops = starts[keep], stops[keep]
    death_counts, death_x_sums = death_counts[keep], death_x_sums[keep]

    beta = 0.0
    ll, score, info = _cox_quantities(beta, x_s, starts, stops, death_x_sums, death_counts)
    converged = False
    it = 0
    for it in range(1, COX_MAX_ITER + 1):
        if info <= 0 or not np.isfinite(info):
            break
        delta = score / info
        step = delta
        for _ in range(30):
            new_ll, new_score, new_info = _cox_quantities(beta + step, x_s, starts, stops,
                                                          death_x_sums, death_counts)
            if np.isfinite(new_ll) and new_ll >= ll - 1e-12:
                break
            step *= 0.5
        else:
            break
        assert new_ll >= ll - 1e-12, "step-halving must not decrease the partial likelihood"
        beta += step
        ll, score, info = new_ll, new_score, new_info
        if abs(step) < COX_TOL:
            converged = True
            break

    if not np.isfinite(beta) or info <= 0 or not np.isfinite(info):
        return CoxFit(beta=0.0, wald_z=0.0, converged=False, flagged=True, iterations=it)
    wald_z = beta * float(np.sqrt(info))
    return CoxFit(beta=beta, wald_z=wald_z, converged=converged, flagged=not converged, iterations=it)


def cox_fit_univariate(records: list[SurvivalRecord], gene: int) -> CoxFit:
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    x = np.array([r.expression[gene] for r in records])
    return cox_fit(times, events, x)


def rank_and_select(records: list[SurvivalRecord], K: int) -> GeneRanking:
    """Univariate screen per gene, ranked by |Wald z| descending.

    Ties break toward the lower gene index; flagged fits rank last.
    """
    n_genes = records[0].expression.shape[0]
    for r in records:
        if r.expression.shape[0] != n_genes:
            raise ContractError(f"{r.sample_id}: expression length {r.expression.shape[0]} != {n_genes}")
    if not 1 <= K <= n_genes:
        raise ConfigError(f"K must be in [1, {n_genes}], got {K}")
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    X = np.vstack([r.expression for r in records])
    beta = np.zeros(n_genes)
    wald_z = np.zeros(n_genes)
    flagged = np.zeros(n_genes, dtype=bool)
    for g in range(n_genes):
        fit = cox_fit(times, events, X[:, g])
        beta[g], wald_z[g], flagged[g] = fit.beta, fit.wald_z, fit.flagged
    order = np.lexsort((np.arange(n_genes), -np.abs(wald_z), flagged.astype(int)))
    return GeneRanking(beta=beta, wald_z=wald_z, flagged=flagged, order=order, K=K)


def reshape_genomic(values: np.ndarray, d_in: int, sample_id: str = "") -> GenomicMatrix:
    """Pack a rank-ordered gene vector row-major into an (n_g x d_in) matrix.

    n_g = floor(K / d_in); the trailing K mod d_in genes are dropped.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    K = values.shape[0]
    if K < d_in:
        raise ConfigError(f"need at least d_in={d_in} genes to form one row, got {K}")
    n_g = K // d_in
    return GenomicMatrix(sample_id, values[: n_g * d_in].reshape(n_g, d_in).copy())


def genomic_matrix_for_sample(expression: np.ndarray, ranking: GeneRanking, d_in: int,
                              sample_id: str = "") -> GenomicMatrix:
    """Select the top-K genes in rank order, then reshape."""
    expression = np.asarray(expression, dtype=np.float64).reshape(-1)
    return reshape_genomic(expression[ranking.selected], d_in, sample_id)


# ---------------------------------------------------------------------------
# survival/expression table (cox-rank input)


def write_survival_csv(path, records: list[SurvivalRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_genes = records[0].expression.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_PREFIX) + [f"gene_{i}" for i in range(n_genes)])
        for r in records:
            writer.writerow([r.sample_id, repr(float(r.time)), r.event]
                            + [repr(float(v)) for v in r.expression])


def read_survival_csv(path) -> list[SurvivalRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != CSV_PREFIX:
            raise ContractError(f"{path}: expected header starting with {','.join(CSV_PREFIX)}")
        records = []
        for row in reader:
            if not row:
                continue
            records.append(SurvivalRecord(sample_id=row[0], time=float(row[1]), event=int(row[2]),
                                          expression=np.array([float(v) for v in row[3:]])))
    if not records:
        raise ContractError(f"{path}: no data rows")
    return records


# ---------------------------------------------------------------------------
# simulators


def simulate_survival_cohort(n: int, n_genes: int, causal: list[int], effect: float,
                             seed: int, baseline_hazard: float = 0.05,
                             censor_hazard: float = 0.0) -> list[SurvivalRecord]:
    """Exponential-survival cohort with iid standard-normal expression.

    The hazard is baseline * exp(effect * x_g) summed over the causal genes,
    so a univariate screen sees each causal gene at roughly the planted
    effect. censor_hazard 0 means every subject has an event.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_genes))
    lp = effect * X[:, causal].sum(axis=1) if len(causal) else np.zeros(n)
    hazard = baseline_hazard * np.exp(lp)
    t_event = rng.exponential(1.0 / hazard)
    if censor_hazard > 0:
        t_censor = rng.exponential(1.0 / censor_hazard, size=n)
    else:
        t_censor = np.full(n, np.inf)
    time = np.minimum(t_event, t_censor)
    event = (t_event <= t_censor).astype(int)
    return [SurvivalRecord(f"p{i:04d}", float(max(time[i], 1e-9)), int(event[i]), X[i])
            for i in range(n)]


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic multi-modal cohort.

    ``gamma`` is the fraction of decisive (label-carrying) latent signal that
    is modality-general; the remainder splits into pathology-only and
    genomics-only blocks. ``noise_scale`` drives every stochastic nuisance
    term, so 0 gives noiseless, perfectly separable data.
    """

    n_samples: int = 400
    n_p_range: tuple[int, int] = (8, 24)
    d_in: int = 32
    n_genes: int = 128
    gamma: float = 0.7
    signal_strength: float = 1.0
    noise_scale: float = 1.0
    label_balance: float = 0.5
    seed: int = 0
    latent_dim: int = 6
    carrier_fraction: float = 0.35
    genomic_noise_factor: float = 0.35
    latent_jitter: float = 0.3
    n_causal_genes: int = 5
    survival_effect: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 < self.label_balance < 1.0:
            raise ConfigError(f"label_balance must be in (0, 1), got {self.label_balance}")
        for name in ("n_samples", "d_in", "n_genes", "latent_dim", "n_causal_genes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.n_p_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad bag-size range {self.n_p_range}")
        if self.n_genes < self.d_in:
            raise ConfigError(f"n_genes ({self.n_genes}) must be >= d_in ({self.d_in})")
        if min(self.d_in, self.n_genes) < 2 * self.latent_dim:
            raise ConfigError(f"d_in and n_genes must be >= 2 * latent_dim ({2 * self.latent_dim}) "
                              f"so the latent blocks embed losslessly")
        if self.n_causal_genes > self.n_genes:
            raise ConfigError("n_causal_genes exceeds n_genes")
        if self.noise_scale < 0 or self.signal_strength < 0:
            raise ConfigError("scales must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "n_p_range" in d:
            d["n_p_range"] = tuple(d["n_p_range"])
        return cls(**d)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple["dataio.Dataset", dict]:
    """Write a synthetic cohort (embeddings, manifest, survival CSV, truth file).

    Returns the dataset re-loaded through the ingestion path (so in-memory
    values match the float32 on-disk representation exactly) and a truth dict
    naming the causal genes and the decisive-norm split.
    """
    out_dir = Path(out_dir)
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    lat = spec.latent_dim
    s = spec.signal_strength
    v_gen, v_path, v_gene = (_orthonormal_columns(rng, lat, 1)[:, 0] for _ in range(3))
    A_p = _orthonormal_columns(rng, spec.d_in, 2 * lat)
    A_g = _orthonormal_columns(rng, spec.n_genes, 2 * lat)
    causal = sorted(int(g) for g in rng.choice(spec.n_genes, spec.n_causal_genes, replace=False))
    w_causal = np.ones(spec.n_causal_genes) / np.sqrt(spec.n_causal_genes)

    entries = []
    records = []
    jitter_sd = spec.latent_jitter * spec.noise_scale / np.sqrt(lat)
    for i in range(spec.n_samples):
        sid = f"s{i:04d}"
        y = int(rng.random() < spec.label_balance)
        sign = 2.0 * y - 1.0
        u_gen = sign * spec.gamma * s * v_gen + jitter_sd * rng.standard_normal(lat)
        u_path = sign * (1.0 - spec.gamma) * s * v_path + jitter_sd * rng.standard_normal(lat)
        u_gene = sign * (1.0 - spec.gamma) * s * v_gene + jitter_sd * rng.standard_normal(lat)

        n_p = int(rng.integers(spec.n_p_range[0], spec.n_p_range[1] + 1))
        n_carriers = max(1, int(round(spec.carrier_fraction * n_p)))
        carriers = rng.choice(n_p, size=n_carriers, replace=False)
        bag = spec.noise_scale * rng.standard_normal((n_p, spec.d_in))
        bag[carriers] += A_p @ np.concatenate([u_gen, u_path])

        expression = A_g @ np.concatenate([u_gen, u_gene])
        expression += spec.genomic_noise_factor * spec.noise_scale * rng.standard_normal(spec.n_genes)

        hazard = 0.05 * np.exp(spec.survival_effect * float(expression[causal] @ w_causal))
        t_event = rng.exponential(1.0 / hazard)
        t_censor = rng.exponential(1.0 / (0.05 / 3.0))
        time = float(max(min(t_event, t_censor), 1e-9))
        event = int(t_event <= t_censor)

        genomic = reshape_genomic(expression, spec.d_in, sid)
        dataio.write_embedding(emb_dir / f"{sid}_path.mkde", bag)
        dataio.write_embedding(emb_dir / f"{sid}_gen.mkde", genomic.features)
        entries.append({"id": sid,
                        "pathology": f"embeddings/{sid}_path.mkde",
                        "genomic": f"embeddings/{sid}_gen.mkde",
                        "labels": {"er": y, "pr": y, "her2": y},
                        "survival": {"time_days": time, "event": event}})
        records.append(SurvivalRecord(sid, time, event, expression))

    manifest_path = out_dir / "manifest.json"
    dataio.write_manifest(manifest_path, entries)
    write_survival_csv(out_dir / "survival.csv", records)
    truth = {"causal_genes": causal,
             "gamma": spec.gamma,
             "decisive_norms": {"general": spec.gamma * s,
                                "pathology": (1.0 - spec.gamma) * s,
                                "genomic": (1.0 - spec.gamma) * s},
             "seed": spec.seed}
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return dataio.load_manifest(manifest_path), truth
