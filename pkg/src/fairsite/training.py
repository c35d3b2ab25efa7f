"""Training, evaluation and lambda sweeps for the site-selection model."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datagen import ConfigError, full_data_variant
from .metrics import (
    RewardConfig,
    ndcg,
    population_distribution,
    population_entropy,
    ranking_reward,
    relative_error,
)
from .model import SiteSelectionModel, collate, tensorize
from .policy import LOGPROB_MODES, sample_orders, reinforce_surrogate, SampledRanking
from .records import RACE_GROUPS, DatasetManifest, RankingInstance

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "fairsite-checkpoint/1"
REPORT_KEYS = ("lambda", "relative_error_mean", "relative_error_ci", "ndcg_mean", "ndcg_ci", "entropy_mean")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
# none: raw rewards; moving_average: running mean over recent trials;
# leave_one_out: mean reward of the other samples drawn for the same trial.
BASELINES = ("none", "moving_average", "leave_one_out")


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss or parameter."""


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or manifest mismatches."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 35
    learning_rate: float = 1e-5
    lam: float = 0.0
    samples_per_trial: int = 4
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    seed: int = 0
    fusion_kind: str = "mcat"
    dataset_variant: str = "missing"
    objective: str = "reinforce"
    logprob: str = "estimate"
    baseline: str = "none"
    baseline_decay: float = 0.9
    trials_per_step: int = 1
    grad_clip: Optional[float] = None
    n_emb: int = 128
    n_heads: int = 4
    n_layers: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.trials_per_step < 1:
            raise ConfigError("trials_per_step must be >= 1")
        if self.samples_per_trial < 1:
            raise ConfigError("samples_per_trial must be >= 1")
        if self.baseline == "leave_one_out" and self.samples_per_trial < 2:
            raise ConfigError("the leave_one_out baseline needs samples_per_trial >= 2")
        for name in ("test_fraction", "val_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        choices = {
            "fusion_kind": ("mcat", "fc"),
            "dataset_variant": ("missing", "full"),
            "objective": ("reinforce", "regression"),
            "logprob": LOGPROB_MODES,
            "baseline": BASELINES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.n_emb % self.n_heads or (2 * self.n_emb) % self.n_heads:
            raise ConfigError("n_emb must be divisible by n_heads")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -- splitting ---------------------------------------------------------------


def split_dataset(instances: Sequence[RankingInstance], test_fraction: float = 0.2, val_fraction: float = 0.1,
                  rng: Optional[np.random.Generator] = None, seed: int = 0):
    """Split by base trial id so every missingness copy of a trial stays together."""
    if not instances:
        raise ConfigError("cannot split an empty dataset")
    if rng is None:
        rng = np.random.default_rng([seed, 11])
    trial_ids = list(dict.fromkeys(inst.trial.trial_id for inst in instances))
    n = len(trial_ids)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * (n - n_test)))
    if n_test < 1 or n_val < 1 or n - n_test - n_val < 1:
        raise ConfigError(f"{n} trials are too few to populate train/val/test splits")
    shuffled = [trial_ids[i] for i in rng.permutation(n)]
    test_ids = set(shuffled[:n_test])
    val_ids = set(shuffled[n_test:n_test + n_val])
    train, val, test = [], [], []
    for inst in instances:
        tid = inst.trial.trial_id
        (test if tid in test_ids else val if tid in val_ids else train).append(inst)
    return train, val, test


def prepare_splits(instances, config: TrainConfig):
    train, val, test = split_dataset(instances, config.test_fraction, config.val_fraction, seed=config.seed)
    if config.dataset_variant == "full":
        train, val, test = (full_data_variant(part) for part in (train, val, test))
    return train, val, test


# -- execution mode ----------------------------------------------------------


def set_execution_mode(deterministic: bool = True, threads: Optional[int] = None) -> None:
    """Fixed execution mode pins reduction order: deterministic kernels, one thread by default."""
    if threads is not None:
        torch.set_num_threads(threads)
    elif deterministic:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(deterministic)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    dims: DatasetManifest
    manifest_hash: str
    val_reward: float
    epoch: int
    history: list = field(default_factory=list)

    def build_model(self) -> SiteSelectionModel:
        cfg = self.config
        model = SiteSelectionModel(self.dims, cfg.fusion_kind, cfg.n_emb, cfg.n_heads, cfg.n_layers, seed=cfg.seed)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model.to(torch.float64) if next(iter(state.values())).dtype == torch.float64 else model


def _snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a byte-reproducible zip: meta.json plus one .npy blob per tensor."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "manifest_hash": ckpt.manifest_hash,
        "dims": ckpt.dims.to_dict(),
        "config": ckpt.config.to_dict(),
        "val_reward": ckpt.val_reward,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "params": sorted(ckpt.params),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1).encode())
        for name in sorted(ckpt.params):
            buf = io.BytesIO()
            np.save(buf, ckpt.params[name], allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path, manifest: Optional[DatasetManifest] = None, force: bool = False) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
            params = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                      for name in meta["params"]}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    ckpt = Checkpoint(
        params=params,
        config=TrainConfig.from_dict(meta["config"]),
        dims=DatasetManifest.from_dict(meta["dims"]),
        manifest_hash=meta["manifest_hash"],
        val_reward=meta["val_reward"],
        epoch=meta["epoch"],
        history=meta.get("history", []),
    )
    if manifest is not None and manifest.dims_hash() != ckpt.manifest_hash and not force:
        raise CheckpointError(
            f"{path}: checkpoint was trained on dataset {ckpt.manifest_hash}, "
            f"not {manifest.dims_hash()} (use --force to override)"
        )
    return ckpt


# -- training ------------------------------------------------------------------


def _check_finite(model, loss, epoch, inst):
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss at epoch {epoch}, trial {inst.instance_id}")
    for name, p in model.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise NumericError(f"non-finite parameter {name} at epoch {epoch}, trial {inst.instance_id}")


def validation_reward(model: SiteSelectionModel, instances: Sequence[RankingInstance], lam: float) -> float:
    """Mean reward of the deterministic (argsort) ranking."""
    if not instances:
        return float("nan")
    cfg = RewardConfig(lam)
    total = 0.0
    for inst in instances:
        order = np.argsort(-model.score(inst), kind="stable")
        total += ranking_reward(inst, order, cfg).R
    return total / len(instances)


def train(train_set: Sequence[RankingInstance], val_set: Sequence[RankingInstance], config: TrainConfig,
          dims: DatasetManifest, dtype=torch.float32,
          progress: Optional[Callable[[int, float, float], None]] = None) -> Checkpoint:
    """Train one model and return the checkpoint with the best validation reward.

    Instances are visited in a fresh seeded order every epoch, ``trials_per_step``
    at a time (each trial is its own policy episode; their losses are averaged).
    """
    if not train_set:
        raise ConfigError("empty training set")
    model = SiteSelectionModel(dims, config.fusion_kind, config.n_emb, config.n_heads, config.n_layers,
                               seed=config.seed).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 23])
    reward_cfg = RewardConfig(config.lam)
    tensors = [tensorize(inst, dims, dtype) for inst in train_set]
    baseline = 0.0
    best = None
    history = []
    step_size = config.trials_per_step

    for epoch in range(1, config.epochs + 1):
        running = 0.0
        visit = rng.permutation(len(train_set))
        for start in range(0, len(visit), step_size):
            chunk = visit[start:start + step_size]
            q = model(collate([tensors[i] for i in chunk]))
            if config.objective == "regression":
                target = torch.as_tensor(np.stack([train_set[i].enrollments for i in chunk]), dtype=dtype)
                loss = torch.mean((q - target) ** 2)
                running -= float(loss.detach()) * len(chunk)
            else:
                q64 = q.to(torch.float64)
                qn = q64.detach().cpu().numpy()
                b = baseline if config.baseline == "moving_average" else 0.0
                terms, chunk_rewards = [], []
                for row, i in enumerate(chunk):
                    inst = train_set[i]
                    orders = sample_orders(qn[row], inst.K, config.samples_per_trial, rng)
                    rankings = [SampledRanking(o, inst.K, rng.permutation(inst.K)) for o in orders]
                    rewards = np.array([ranking_reward(inst, o, reward_cfg).R for o in orders])
                    if config.baseline == "leave_one_out":
                        b = (rewards.sum() - rewards) / (len(rewards) - 1)
                    terms.append(reinforce_surrogate(q64[row], rankings, rewards, config.logprob, b))
                    chunk_rewards.append(float(np.mean(rewards)))
                loss = -torch.stack(terms).mean()
                running += sum(chunk_rewards)
                for r in chunk_rewards:
                    baseline = config.baseline_decay * baseline + (1 - config.baseline_decay) * r
            opt.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            _check_finite(model, loss, epoch, train_set[chunk[0]])
        val = validation_reward(model, val_set, config.lam)
        mean_train = running / len(train_set)
        history.append({"epoch": epoch, "train_reward": mean_train, "val_reward": val})
        log.info("epoch %d train %.4f val %.4f", epoch, mean_train, val)
        if progress:
            progress(epoch, mean_train, val)
        if best is None or val > best[0] or (math.isnan(best[0]) and not math.isnan(val)):
            best = (val, epoch, _snapshot(model))

    val, epoch, params = best
    return Checkpoint(params, config, dims, dims.dims_hash(), float(val), epoch, history)


# -- evaluation ------------------------------------------------------------------


Scorer = Callable[[int, RankingInstance], np.ndarray]


def model_scorer(model: SiteSelectionModel) -> Scorer:
    return lambda idx, inst: model.score(inst)


def oracle_scorer() -> Scorer:
    """Scores equal the true enrollment labels (upper bound)."""
    return lambda idx, inst: inst.enrollments.copy()


def random_scorer(seed: int = 0) -> Scorer:
    """Uniformly random selection, reproducible per instance position."""
    return lambda idx, inst: np.random.default_rng([seed, 31, idx]).standard_normal(inst.M)


def _ci95(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def evaluate(scorer: Scorer, instances: Sequence[RankingInstance], lam: float = 0.0, label: str = "model") -> dict:
    """Deterministic top-K selection on every instance; flat metric report."""
    if not instances:
        raise ConfigError("cannot evaluate on an empty set")
    re, nd, ent, rew, dists = [], [], [], [], []
    cfg = RewardConfig(lam)
    for idx, inst in enumerate(instances):
        q = np.asarray(scorer(idx, inst), dtype=np.float64)
        order = np.argsort(-q, kind="stable")
        chosen = order[: inst.K]
        e = inst.enrollments
        re.append(relative_error(chosen, inst))
        nd.append(ndcg(e[order], inst.K))
        ent.append(population_entropy(chosen, inst))
        rew.append(ranking_reward(inst, order, cfg).R)
        dist = population_distribution(chosen, inst)
        if dist is not None:
            dists.append(dist)
    re, nd = np.array(re), np.array(nd)
    report = {
        "lambda": float(lam),
        "relative_error_mean": float(re.mean()),
        "relative_error_ci": _ci95(re),
        "ndcg_mean": float(nd.mean()),
        "ndcg_ci": _ci95(nd),
        "entropy_mean": float(np.mean(ent)),
        "reward_mean": float(np.mean(rew)),
        "model": label,
        "n_instances": len(instances),
    }
    race = np.mean(dists, axis=0) if dists else np.full(len(RACE_GROUPS), float("nan"))
    for group, value in zip(RACE_GROUPS, race):
        report[f"race_{group.lower()}_mean"] = float(value)
    return report


def evaluate_checkpoint(ckpt: Checkpoint, test_set: Sequence[RankingInstance], label: str = "model") -> dict:
    model = ckpt.build_model()
    model.eval()
    return evaluate(model_scorer(model), test_set, ckpt.config.lam, label)


def sweep_lambda(instances: Sequence[RankingInstance], dims: DatasetManifest, base: TrainConfig,
                 lambdas: Sequence[float], dtype=torch.float32, label: str = "model",
                 on_checkpoint: Optional[Callable[[float, Checkpoint], None]] = None) -> list[dict]:
    """Train and evaluate one model per lambda on shared splits; rows sorted by lambda."""
    if not lambdas:
        raise ConfigError("need at least one lambda")
    train_set, val_set, test_set = prepare_splits(instances, base)
    rows = []
    for lam in sorted(float(x) for x in lambdas):
        ckpt = train(train_set, val_set, replace(base, lam=lam), dims, dtype)
        if on_checkpoint:
            on_checkpoint(lam, ckpt)
        rows.append(evaluate_checkpoint(ckpt, test_set, label))
    return rows
