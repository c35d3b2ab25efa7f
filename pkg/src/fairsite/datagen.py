"""Synthetic trial/site dataset generation.

The pipeline mirrors how the real dataset was assembled: build a site pool
with static features and bigram-sampled code histories, walk through trials
in random order while a labeler assigns enrollments (so histories accumulate),
then duplicate every trial with random modality masks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .records import (
    RACE_GROUPS,
    DataError,
    DatasetManifest,
    RankingInstance,
    SiteRecord,
    TrialRecord,
)

DESK_DIMENSIONS = dict(n_t=32, n_t_prime=24, n_s=16, n_c=50, n_d=20, n_p=12, n_h=8, M=10, K=5)
FULL_DIMENSIONS = dict(n_t=1827, n_t_prime=1827 - 300, n_s=669, n_c=500, n_d=260, n_p=100, n_h=50, M=20, K=10)

# Rough US aggregate shares, in RACE_GROUPS order.
DEFAULT_RACE_MEANS = (0.60, 0.17, 0.13, 0.06, 0.03, 0.01)
DEFAULT_RACE_STDDEVS = (0.20, 0.10, 0.10, 0.05, 0.02, 0.01)


class ConfigError(ValueError):
    """Raised when a generator or training configuration is invalid."""


@dataclass(frozen=True)
class LabelerConfig:
    """Coefficients of the parametric enrollment labeler.

    enrollment = round(intercept
                       + amplitude * (softplus(affinity) - log 2)
                       + momentum_weight * mean(last ``momentum_window`` history enrollments)
                       + specialty_bonus * [trial area == site specialty]
                       + N(0, noise_std)), clipped at 0

    where ``affinity`` = trial . P . static + u . static with seeded random
    ``P`` and ``u`` scaled by ``affinity_scale``.
    """

    intercept: float = 6.0
    amplitude: float = 6.0
    affinity_scale: float = 1.0
    momentum_weight: float = 0.5
    momentum_window: int = 3
    specialty_bonus: float = 6.0
    noise_std: float = 1.0
    max_enrollment: int = 50


@dataclass(frozen=True)
class GeneratorConfig:
    pool_size: int = 500
    n_trials: int = 300
    dimensions: DatasetManifest = field(default_factory=lambda: DatasetManifest(**DESK_DIMENSIONS))
    p_present: float = 0.8
    copies_per_trial: int = 10
    seed: int = 0
    specialty_count: int = 4
    specialty_probs: Optional[tuple] = None
    race_prior_means: tuple = DEFAULT_RACE_MEANS
    race_prior_stddevs: tuple = DEFAULT_RACE_STDDEVS
    bigram_concentration: float = 0.3
    initial_concentration: float = 0.5
    labeler: LabelerConfig = field(default_factory=LabelerConfig)

    def __post_init__(self):
        dims = self.dimensions
        if not (0.0 < self.p_present <= 1.0):
            raise ConfigError(f"p_present must be in (0, 1], got {self.p_present}")
        if self.copies_per_trial < 1:
            raise ConfigError(f"copies_per_trial must be >= 1, got {self.copies_per_trial}")
        if self.pool_size < dims.M:
            raise ConfigError(f"pool_size={self.pool_size} smaller than M={dims.M}")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.specialty_count < 1:
            raise ConfigError("specialty_count must be >= 1")
        if self.specialty_count + len(RACE_GROUPS) > dims.n_s:
            raise ConfigError(
                f"n_s={dims.n_s} too small to hold {self.specialty_count} specialty flags and race shares"
            )
        if self.specialty_count > dims.n_t_prime:
            raise ConfigError("n_t_prime must be able to hold the trial's therapeutic-area flags")
        if len(self.race_prior_means) != 6 or len(self.race_prior_stddevs) != 6:
            raise ConfigError("race priors must have 6 entries")
        if any(s < 0 for s in self.race_prior_stddevs) or sum(self.race_prior_means) <= 0:
            raise ConfigError("race prior means must have positive mass and stddevs must be >= 0")
        if self.specialty_probs is not None:
            probs = np.asarray(self.specialty_probs, dtype=float)
            if probs.shape != (self.specialty_count,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
                raise ConfigError("specialty_probs must be a distribution over specialty_count entries")

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        """Build from a parsed config mapping, rejecting unknown keys."""
        data = dict(data)
        scale = data.pop("scale", "desk")
        if scale not in ("desk", "full"):
            raise ConfigError(f"scale must be 'desk' or 'full', got {scale!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator config fields: {sorted(unknown)}")
        dims = dict(FULL_DIMENSIONS if scale == "full" else DESK_DIMENSIONS)
        if "dimensions" in data:
            extra = set(data["dimensions"]) - set(DatasetManifest.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown dimensions fields: {sorted(extra)}")
            dims.update(data.pop("dimensions"))
        try:
            data["dimensions"] = DatasetManifest(**dims)
        except DataError as exc:
            raise ConfigError(f"dimensions: {exc}") from exc
        if "labeler" in data:
            lab = data.pop("labeler")
            extra = set(lab) - {f.name for f in fields(LabelerConfig)}
            if extra:
                raise ConfigError(f"unknown labeler fields: {sorted(extra)}")
            data["labeler"] = LabelerConfig(**lab)
        for key in ("race_prior_means", "race_prior_stddevs", "specialty_probs"):
            if data.get(key) is not None:
                data[key] = tuple(float(x) for x in data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        """Inverse of :meth:`from_dict` (config files round-trip through this)."""
        data = asdict(self)
        data["dimensions"] = {k: data["dimensions"][k] for k in DESK_DIMENSIONS}
        for key in ("race_prior_means", "race_prior_stddevs", "specialty_probs"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data


# -- bigram code histories ----------------------------------------------------


class BigramTable:
    """Specialty-conditioned initial distributions plus a row-stochastic transition matrix."""

    def __init__(self, initial: np.ndarray, transition: np.ndarray):
        initial = np.asarray(initial, dtype=np.float64)
        transition = np.asarray(transition, dtype=np.float64)
        n = transition.shape[0]
        if transition.shape != (n, n) or initial.ndim != 2 or initial.shape[1] != n:
            raise ConfigError("bigram table shapes inconsistent")
        for name, mat in (("initial", initial), ("transition", transition)):
            if np.any(mat < 0) or not np.all(np.isfinite(mat)):
                raise ConfigError(f"{name} probabilities must be finite and nonnegative")
            sums = mat.sum(axis=1)
            if np.any(sums == 0):
                raise ConfigError(f"degenerate all-zero row in {name} table")
            if np.any(np.abs(sums - 1.0) > 1e-9):
                raise ConfigError(f"{name} rows must sum to 1")
        self.initial = initial
        self.transition = transition
        self._initial_cdf = np.cumsum(initial, axis=1)
        self._transition_cdf = np.cumsum(transition, axis=1)

    @property
    def n_codes(self) -> int:
        return self.transition.shape[0]

    @classmethod
    def random(cls, n_codes: int, n_specialties: int, rng: np.random.Generator,
               concentration: float = 0.3, initial_concentration: float = 0.5) -> "BigramTable":
        transition = rng.dirichlet(np.full(n_codes, concentration), size=n_codes)
        initial = rng.dirichlet(np.full(n_codes, initial_concentration), size=n_specialties)
        # Dirichlet draws with tiny concentration can underflow to exact zeros.
        transition = _renormalize_rows(transition + 1e-12)
        initial = _renormalize_rows(initial + 1e-12)
        return cls(initial, transition)


def _renormalize_rows(mat: np.ndarray) -> np.ndarray:
    return mat / mat.sum(axis=1, keepdims=True)


def _draw(cdf_row: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cdf_row, u * cdf_row[-1], side="right"))
    return min(idx, cdf_row.size - 1)


def sample_code_sequence(table: BigramTable, specialty: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Markov-chain sample: first code from the specialty row, then transitions."""
    out = np.empty(length, dtype=np.int64)
    if length == 0:
        return out
    u = rng.random(length)
    out[0] = _draw(table._initial_cdf[specialty], u[0])
    for j in range(1, length):
        out[j] = _draw(table._transition_cdf[out[j - 1]], u[j])
    return out


# -- site pool ------------------------------------------------------------------


@dataclass
class PoolSite:
    """Mutable generator-side site state (history grows during simulation)."""

    site_id: str
    specialty: int
    static: np.ndarray
    diagnoses: np.ndarray
    prescriptions: np.ndarray
    race: np.ndarray
    history: list = field(default_factory=list)


def sample_race(means: Sequence[float], stddevs: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    draw = np.clip(rng.normal(means, stddevs), 0.0, None)
    if draw.sum() <= 0:
        draw = np.asarray(means, dtype=np.float64)
    return draw / draw.sum()


def build_site_pool(config: GeneratorConfig, rng: np.random.Generator,
                    tables: Optional[tuple] = None) -> list[PoolSite]:
    """Create ``config.pool_size`` unlabeled sites with empty enrollment histories.

    Static layout: specialty one-hot, race shares, then standard-normal
    filler for the remaining site descriptors.
    """
    dims = config.dimensions
    if tables is None:
        tables = make_bigram_tables(config, rng)
    diag_table, rx_table = tables
    probs = (np.full(config.specialty_count, 1.0 / config.specialty_count)
             if config.specialty_probs is None else np.asarray(config.specialty_probs))
    n_fill = dims.n_s - config.specialty_count - len(RACE_GROUPS)
    pool = []
    width = len(str(config.pool_size - 1))
    for i in range(config.pool_size):
        specialty = int(rng.choice(config.specialty_count, p=probs))
        race = sample_race(config.race_prior_means, config.race_prior_stddevs, rng)
        onehot = np.zeros(config.specialty_count)
        onehot[specialty] = 1.0
        static = np.concatenate([onehot, race, rng.standard_normal(n_fill)])
        diagnoses = sample_code_sequence(diag_table, specialty, dims.n_c, rng)
        prescriptions = sample_code_sequence(rx_table, specialty, dims.n_c, rng)
        pool.append(PoolSite(f"S{i:0{width}d}", specialty, static, diagnoses, prescriptions, race))
    return pool


def make_bigram_tables(config: GeneratorConfig, rng: np.random.Generator) -> tuple[BigramTable, BigramTable]:
    dims = config.dimensions
    diag = BigramTable.random(dims.n_d, config.specialty_count, rng,
                              config.bigram_concentration, config.initial_concentration)
    rx = BigramTable.random(dims.n_p, config.specialty_count, rng,
                            config.bigram_concentration, config.initial_concentration)
    return diag, rx


def make_trials(config: GeneratorConfig, rng: np.random.Generator) -> list[TrialRecord]:
    """Seeded stand-ins for scraped trial vectors.

    The first ``specialty_count`` entries one-hot the therapeutic area; the
    last ``n_t - n_t_prime`` entries play the eligibility-criteria block that
    reduced vectors drop.
    """
    dims = config.dimensions
    trials = []
    width = len(str(config.n_trials - 1))
    for i in range(config.n_trials):
        area = int(rng.integers(config.specialty_count))
        feats = rng.standard_normal(dims.n_t)
        feats[: config.specialty_count] = 0.0
        feats[area] = 1.0
        trials.append(TrialRecord(f"T{i:0{width}d}", feats, feats[: dims.n_t_prime].copy()))
    return trials


# -- labeler --------------------------------------------------------------------


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class EnrollmentLabeler:
    """Deterministic parametric stand-in for a learned enrollment model."""

    def __init__(self, cfg: LabelerConfig, projection: np.ndarray, site_weights: np.ndarray, specialty_count: int):
        self.cfg = cfg
        self.projection = projection
        self.site_weights = site_weights
        self.specialty_count = specialty_count

    def expected_input(self, trial: TrialRecord, static: np.ndarray, history) -> float:
        """Pre-noise, pre-rounding enrollment value."""
        cfg = self.cfg
        affinity = float(trial.features @ self.projection @ static + self.site_weights @ static)
        recent = [row[-1] for row in list(history)[-cfg.momentum_window:]] if len(history) else []
        momentum = float(np.mean(recent)) if recent else 0.0
        sc = self.specialty_count
        match = float(trial.features[:sc] @ static[:sc])
        return (cfg.intercept
                + cfg.amplitude * (_softplus(affinity) - math.log(2.0))
                + cfg.momentum_weight * momentum
                + cfg.specialty_bonus * match)

    def __call__(self, trial: TrialRecord, static: np.ndarray, history, rng: np.random.Generator) -> int:
        noise = rng.normal(0.0, self.cfg.noise_std) if self.cfg.noise_std > 0 else 0.0
        value = round(self.expected_input(trial, static, history) + noise)
        return int(min(max(value, 0), self.cfg.max_enrollment))


def default_labeler(config: GeneratorConfig, rng: Optional[np.random.Generator] = None) -> EnrollmentLabeler:
    dims = config.dimensions
    if rng is None:
        rng = np.random.default_rng([config.seed, 1])
    scale = config.labeler.affinity_scale
    projection = rng.standard_normal((dims.n_t, dims.n_s)) * scale / math.sqrt(dims.n_t * dims.n_s)
    site_weights = rng.standard_normal(dims.n_s) * scale / math.sqrt(dims.n_s)
    return EnrollmentLabeler(config.labeler, projection, site_weights, config.specialty_count)


# -- simulation -----------------------------------------------------------------


def _snapshot(site: PoolSite, n_t_prime: int, enrollment: int) -> SiteRecord:
    hist = np.array(site.history, dtype=np.float64) if site.history else None
    mask = (True, True, True, hist is not None)
    return SiteRecord(
        site_id=site.site_id,
        static=site.static,
        diagnoses=site.diagnoses,
        prescriptions=site.prescriptions,
        enrollment_history=hist,
        mask=mask,
        enrollment=enrollment,
        race=site.race,
    )


def simulate_trials(pool: list[PoolSite], trials: Sequence[TrialRecord], labeler: Callable,
                    config: GeneratorConfig, rng: np.random.Generator) -> list[RankingInstance]:
    """Label trials one after another, growing site histories as we go.

    Each trial gets ``M`` distinct sites drawn uniformly from the pool; the
    labeler sees each site's history as it stood *before* this trial.
    """
    dims = config.dimensions
    if len(pool) < dims.M:
        raise ConfigError(f"pool of {len(pool)} sites cannot supply M={dims.M}")
    instances = []
    for trial in trials:
        chosen = rng.choice(len(pool), size=dims.M, replace=False)
        labels = [labeler(trial, pool[i].static, pool[i].history, rng) for i in chosen]
        records = [_snapshot(pool[i], dims.n_t_prime, e) for i, e in zip(chosen, labels)]
        instances.append(RankingInstance(trial, records, dims.K))
        for i, e in zip(chosen, labels):
            site = pool[i]
            site.history.append(np.append(trial.reduced_features, float(e)))
            if len(site.history) > dims.n_h:
                del site.history[: len(site.history) - dims.n_h]
    return instances


def match_top_sites(trial: TrialRecord, candidates: Sequence[SiteRecord], pool: Sequence[SiteRecord],
                    M: int, K: int, rng: np.random.Generator) -> RankingInstance:
    """Real-data matching: the top-``M`` sites by enrollment, padded from the pool.

    Padding sites are drawn uniformly from pool sites not already chosen and
    get enrollment 0 for this trial.
    """
    ranked = sorted(candidates, key=lambda s: -s.enrollment)[:M]
    taken = {s.site_id for s in ranked}
    spare = [s for s in pool if s.site_id not in taken]
    need = M - len(ranked)
    if need > len(spare):
        raise ConfigError(f"pool too small to pad trial {trial.trial_id} to M={M}")
    if need > 0:
        picks = rng.choice(len(spare), size=need, replace=False)
        ranked += [replace(spare[i], enrollment=0) for i in picks]
    return RankingInstance(trial, ranked, K)


# -- missingness ------------------------------------------------------------------


def sample_mask(p_present: float, rng: np.random.Generator, available: Sequence[bool] = (True,) * 4) -> tuple:
    """Independent Bernoulli bits, redrawn until a visible modality exists."""
    available = np.asarray(available, dtype=bool)
    if not available.any():
        raise DataError("site has no modality content to reveal")
    while True:
        bits = (rng.random(4) < p_present) & available
        if bits.any():
            return tuple(bool(b) for b in bits)


def apply_missingness(instances: Sequence[RankingInstance], p_present: float, copies_per_trial: int,
                      rng: np.random.Generator) -> list[RankingInstance]:
    """Duplicate each instance and draw a fresh per-site mask for every copy.

    Hidden modalities keep their content; only the mask changes. A modality
    with no content (e.g. an empty history) can never be revealed.
    """
    out = []
    for inst in instances:
        for c in range(copies_per_trial):
            sites = []
            for site in inst.sites:
                available = [site.modality(k) is not None and np.size(site.modality(k)) > 0 for k in range(4)]
                sites.append(site.with_mask(sample_mask(p_present, rng, available)))
            out.append(RankingInstance(inst.trial, sites, inst.K,
                                       instance_id=f"{inst.trial.trial_id}#{c}", copy=c))
    return out


def admissible_mask_distribution(p_present: float) -> dict:
    """Exact law of :func:`sample_mask` with every modality available."""
    probs = {}
    for code in range(1, 16):
        bits = tuple(bool(code >> k & 1) for k in range(4))
        on = sum(bits)
        probs[bits] = p_present**on * (1 - p_present) ** (4 - on)
    z = sum(probs.values())
    return {k: v / z for k, v in probs.items()}


def full_data_variant(instances: Sequence[RankingInstance]) -> list[RankingInstance]:
    """One copy per base trial with every available modality revealed."""
    seen = {}
    for inst in instances:
        if inst.trial.trial_id in seen:
            continue
        sites = []
        for s in inst.sites:
            avail = [s.modality(k) is not None and np.size(s.modality(k)) > 0 for k in range(4)]
            sites.append(s.with_mask(avail))
        seen[inst.trial.trial_id] = RankingInstance(inst.trial, sites, inst.K,
                                                    instance_id=inst.trial.trial_id, copy=0)
    return list(seen.values())


# -- end to end -----------------------------------------------------------------


def generate_dataset(config: GeneratorConfig) -> tuple[DatasetManifest, list[RankingInstance]]:
    """Full generation; deterministic in ``config`` (including its seed)."""
    root = np.random.SeedSequence(config.seed)
    pool_ss, trial_ss, label_ss, sim_ss, mask_ss = root.spawn(5)
    pool_rng = np.random.default_rng(pool_ss)
    tables = make_bigram_tables(config, pool_rng)
    pool = build_site_pool(config, pool_rng, tables)
    trial_rng = np.random.default_rng(trial_ss)
    trials = make_trials(config, trial_rng)
    order = trial_rng.permutation(len(trials))
    trials = [trials[i] for i in order]
    labeler = default_labeler(config, np.random.default_rng(label_ss))
    labeled = simulate_trials(pool, trials, labeler, config, np.random.default_rng(sim_ss))
    augmented = apply_missingness(labeled, config.p_present, config.copies_per_trial,
                                  np.random.default_rng(mask_ss))
    manifest = replace(config.dimensions, seed=config.seed, record_count=len(augmented))
    return manifest, augmented
