"""Domain records and the line-delimited dataset format.

A dataset file is UTF-8 JSON lines: the first line is the manifest, every
following line is one ranking instance (a trial and its ``M`` candidate
sites). Absent modalities are written as ``null``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

SCHEMA_VERSION = "fairsite-dataset/1"
RACE_GROUPS = ("White", "Hispanic", "Black", "Asian", "Mixed", "Others")
MODALITIES = ("static", "diagnoses", "prescriptions", "enrollment_history")


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DatasetManifest:
    n_t: int
    n_t_prime: int
    n_s: int
    n_c: int
    n_d: int
    n_p: int
    n_h: int
    M: int
    K: int
    schema_version: str = SCHEMA_VERSION
    record_count: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_t", "n_t_prime", "n_s", "n_c", "n_d", "n_p", "n_h", "M", "K"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise DataError(f"manifest field {name} must be a positive integer, got {value!r}")
        if self.K > self.M:
            raise DataError(f"manifest K={self.K} exceeds M={self.M}")
        if self.n_t_prime > self.n_t:
            raise DataError("n_t_prime cannot exceed n_t")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "n_t": self.n_t,
            "n_t_prime": self.n_t_prime,
            "n_s": self.n_s,
            "n_c": self.n_c,
            "n_d": self.n_d,
            "n_p": self.n_p,
            "n_h": self.n_h,
            "M": self.M,
            "K": self.K,
            "record_count": self.record_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)

    def dims_hash(self) -> str:
        """Hash of everything that fixes model shapes and data identity."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    features: np.ndarray
    reduced_features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))
        object.__setattr__(self, "reduced_features", _frozen(self.reduced_features))


@dataclass(frozen=True)
class SiteRecord:
    """One candidate site with four possibly-missing modalities.

    ``mask[k]`` says whether modality ``k`` is visible to the model. A field
    may still hold content while its mask bit is off: augmentation hides
    modalities without deleting them.
    """

    site_id: str
    static: Optional[np.ndarray]
    diagnoses: Optional[np.ndarray]
    prescriptions: Optional[np.ndarray]
    enrollment_history: Optional[np.ndarray]
    mask: tuple
    enrollment: int
    race: np.ndarray

    def __post_init__(self):
        if self.static is not None:
            object.__setattr__(self, "static", _frozen(self.static))
        for name in ("diagnoses", "prescriptions"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value, np.int64))
        if self.enrollment_history is not None:
            hist = np.array(self.enrollment_history, dtype=np.float64)
            if hist.ndim == 1 and hist.size == 0:
                hist = hist.reshape(0, 0)
            hist.flags.writeable = False
            object.__setattr__(self, "enrollment_history", hist)
        object.__setattr__(self, "mask", tuple(bool(b) for b in self.mask))
        object.__setattr__(self, "race", _frozen(self.race))

    def modality(self, k: int):
        return getattr(self, MODALITIES[k])

    def with_mask(self, mask: Sequence[bool]) -> "SiteRecord":
        return replace(self, mask=tuple(bool(b) for b in mask))


@dataclass(frozen=True)
class RankingInstance:
    trial: TrialRecord
    sites: tuple
    K: int
    instance_id: str = ""
    copy: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.instance_id:
            object.__setattr__(self, "instance_id", self.trial.trial_id)
        if self.K <= 0 or self.K > len(self.sites):
            raise DataError(f"K={self.K} invalid for M={len(self.sites)}")
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate site ids in instance {self.instance_id}")

    @property
    def M(self) -> int:
        return len(self.sites)

    @property
    def enrollments(self) -> np.ndarray:
        return np.array([s.enrollment for s in self.sites], dtype=np.float64)

    @property
    def races(self) -> np.ndarray:
        return np.stack([s.race for s in self.sites])

    @property
    def masks(self) -> np.ndarray:
        return np.array([s.mask for s in self.sites], dtype=bool)


def validate_site(site: SiteRecord, manifest: DatasetManifest) -> SiteRecord:
    """Check ``site`` against the manifest dimensions.

    Race vectors given in percent (summing to 100 +/- 0.5) are converted to
    fractions; everything else is returned unchanged.
    """
    if len(site.mask) != 4:
        raise DataError(f"site {site.site_id}: mask must have 4 entries")
    if not any(site.mask):
        raise DataError(f"site {site.site_id}: no modality present")
    for k, name in enumerate(MODALITIES):
        if site.mask[k] and site.modality(k) is None:
            raise DataError(f"site {site.site_id}: mask marks {name} present but field is null")

    if site.static is not None and site.static.shape != (manifest.n_s,):
        raise DataError(f"site {site.site_id}: static has shape {site.static.shape}, expected ({manifest.n_s},)")
    for name, vocab in (("diagnoses", manifest.n_d), ("prescriptions", manifest.n_p)):
        seq = getattr(site, name)
        if seq is None:
            continue
        if seq.shape != (manifest.n_c,):
            raise DataError(f"site {site.site_id}: {name} has length {seq.shape}, expected {manifest.n_c}")
        if seq.size and (seq.min() < 0 or seq.max() >= vocab):
            raise DataError(f"site {site.site_id}: {name} index outside [0, {vocab})")
    hist = site.enrollment_history
    if hist is not None:
        if hist.size == 0:
            if site.mask[3]:
                raise DataError(f"site {site.site_id}: enrollment history marked present but empty")
        elif hist.ndim != 2 or hist.shape[1] != manifest.n_t_prime + 1 or hist.shape[0] > manifest.n_h:
            raise DataError(
                f"site {site.site_id}: enrollment history shape {hist.shape}, "
                f"expected (<= {manifest.n_h}, {manifest.n_t_prime + 1})"
            )
        elif np.any(hist[:, -1] < 0):
            raise DataError(f"site {site.site_id}: negative enrollment in history")

    if site.enrollment < 0:
        raise DataError(f"site {site.site_id}: negative enrollment {site.enrollment}")

    race = site.race
    if race.shape != (len(RACE_GROUPS),):
        raise DataError(f"site {site.site_id}: race must have {len(RACE_GROUPS)} entries, got {race.shape}")
    if not np.all(np.isfinite(race)) or np.any(race < 0):
        raise DataError(f"site {site.site_id}: race entries must be finite and nonnegative")
    total = float(race.sum())
    if abs(total - 1.0) <= 1e-6 and np.all(race <= 1.0):
        pass
    elif abs(total - 100.0) <= 0.5:
        site = replace(site, race=race / total)
    else:
        raise DataError(f"site {site.site_id}: race sums to {total}, neither a fraction nor a percentage")

    for arr in (site.static, hist):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise DataError(f"site {site.site_id}: non-finite feature values")
    return site


def validate_instance(inst: RankingInstance, manifest: DatasetManifest) -> RankingInstance:
    trial = inst.trial
    if trial.features.shape != (manifest.n_t,):
        raise DataError(f"trial {trial.trial_id}: features length {trial.features.size}, expected {manifest.n_t}")
    if trial.reduced_features.shape != (manifest.n_t_prime,):
        raise DataError(
            f"trial {trial.trial_id}: reduced_features length {trial.reduced_features.size}, "
            f"expected {manifest.n_t_prime}"
        )
    if not (np.all(np.isfinite(trial.features)) and np.all(np.isfinite(trial.reduced_features))):
        raise DataError(f"trial {trial.trial_id}: non-finite features")
    if inst.M != manifest.M or inst.K != manifest.K:
        raise DataError(f"instance {inst.instance_id}: (M, K)=({inst.M}, {inst.K}) vs manifest ({manifest.M}, {manifest.K})")
    sites = tuple(validate_site(s, manifest) for s in inst.sites)
    return replace(inst, sites=sites)


# -- serialization -----------------------------------------------------------


def _floats(arr) -> list:
    return [float(x) for x in arr]


def _site_to_dict(site: SiteRecord) -> dict:
    hist = site.enrollment_history
    return {
        "site_id": site.site_id,
        "static": None if site.static is None else _floats(site.static),
        "diagnoses": None if site.diagnoses is None else [int(x) for x in site.diagnoses],
        "prescriptions": None if site.prescriptions is None else [int(x) for x in site.prescriptions],
        "enrollment_history": None if hist is None else [_floats(row) for row in hist],
        "mask": [int(b) for b in site.mask],
        "enrollment": int(site.enrollment),
        "race": _floats(site.race),
    }


def instance_to_dict(inst: RankingInstance) -> dict:
    return {
        "instance_id": inst.instance_id,
        "copy": inst.copy,
        "trial_id": inst.trial.trial_id,
        "features": _floats(inst.trial.features),
        "reduced_features": _floats(inst.trial.reduced_features),
        "K": inst.K,
        "sites": [_site_to_dict(s) for s in inst.sites],
    }


def _site_from_dict(d: dict) -> SiteRecord:
    hist = d["enrollment_history"]
    if hist is not None:
        hist = np.array(hist, dtype=np.float64)
        if hist.size == 0:
            hist = hist.reshape(0, 0)
    return SiteRecord(
        site_id=str(d["site_id"]),
        static=d["static"],
        diagnoses=d["diagnoses"],
        prescriptions=d["prescriptions"],
        enrollment_history=hist,
        mask=tuple(d["mask"]),
        enrollment=int(d["enrollment"]),
        race=d["race"],
    )


def instance_from_dict(d: dict) -> RankingInstance:
    trial = TrialRecord(str(d["trial_id"]), d["features"], d["reduced_features"])
    sites = [_site_from_dict(s) for s in d["sites"]]
    return RankingInstance(
        trial=trial,
        sites=sites,
        K=int(d["K"]),
        instance_id=str(d.get("instance_id", d["trial_id"])),
        copy=int(d.get("copy", 0)),
    )


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(manifest: DatasetManifest, instances: Iterable[RankingInstance], path) -> DatasetManifest:
    """Write manifest plus one line per instance; returns the manifest as written."""
    instances = list(instances)
    manifest = replace(manifest, record_count=len(instances))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(manifest.to_dict()) + "\n")
        for inst in instances:
            fh.write(_dumps(instance_to_dict(inst)) + "\n")
    return manifest


def read_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        return DatasetManifest.from_dict(json.loads(first))
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"{path}:1: malformed manifest line ({exc})") from exc


def iter_dataset(path) -> tuple[DatasetManifest, Iterator[RankingInstance]]:
    """Return the manifest and a lazy stream of validated instances."""
    manifest = read_manifest(path)

    def stream():
        with open(path, encoding="utf-8") as fh:
            fh.readline()
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                record = lineno - 2
                try:
                    inst = instance_from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed record {record} ({exc})") from exc
                try:
                    yield validate_instance(inst, manifest)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: record {record}: {exc}") from exc

    return manifest, stream()


def load_dataset(path) -> tuple[DatasetManifest, list[RankingInstance]]:
    manifest, stream = iter_dataset(path)
    instances = list(stream)
    if manifest.record_count and manifest.record_count != len(instances):
        raise DataError(f"{path}: manifest declares {manifest.record_count} records, found {len(instances)}")
    return manifest, instances


def instances_equal(a: RankingInstance, b: RankingInstance) -> bool:
    """Exact structural equality (arrays compared bitwise)."""
    return _dumps(instance_to_dict(a)) == _dumps(instance_to_dict(b))


__all__ = [
    "DataError",
    "DatasetManifest",
    "MODALITIES",
    "RACE_GROUPS",
    "RankingInstance",
    "SiteRecord",
    "TrialRecord",
    "instance_from_dict",
    "instance_to_dict",
    "instances_equal",
    "iter_dataset",
    "load_dataset",
    "read_manifest",
    "save_dataset",
    "validate_instance",
    "validate_site",
]
