"""Slice- and patient-level splits, center regimes and leakage auditing.

Samples are dicts with at least ``patient_id``, ``center_id`` and
``slice_index`` (the records of a dataset manifest). A sample id is the pair
``(patient_id, slice_index)``.
"""

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("slice", "patient")
REGIMES = ("CAW", "CAG")


@dataclass(frozen=True)
class SplitSpec:
    split_kind: str = "patient"
    regime: str = "CAW"
    train_fraction: float = 0.8
    val_fraction_of_train: float = 0.2
    seed: int = 0
    centers: tuple = ("BCCV", "SMHS")  # (internal, external)

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(self.centers))
        if self.split_kind not in KINDS:
            raise ValueError(f"split_kind must be one of {KINDS}, got {self.split_kind!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("train_fraction", "val_fraction_of_train"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if len(self.centers) != 2 or self.centers[0] == self.centers[1]:
            raise ValueError(f"need two distinct centers (internal, external), got {self.centers}")


@dataclass
class SplitManifest:
    spec: SplitSpec
    train: list
    val: list
    tests: dict = field(default_factory=dict)

    def all_sets(self):
        yield "train", self.train
        yield "val", self.val
        for name in sorted(self.tests):
            yield f"test/{name}", self.tests[name]

    def summary(self):
        out = {}
        for name, ids in self.all_sets():
            out[name] = {"n_samples": len(ids), "patients": sorted({pid for pid, _ in ids})}
        return out

    def to_dict(self):
        return {
            "spec": asdict(self.spec),
            "sets": {
                "train": [list(i) for i in self.train],
                "val": [list(i) for i in self.val],
                "tests": {k: [list(i) for i in v] for k, v in sorted(self.tests.items())},
            },
            "summary": self.summary(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        sets = d["sets"]

        def ids(lst):
            return [(pid, int(k)) for pid, k in lst]

        return cls(SplitSpec(**d["spec"]), ids(sets["train"]), ids(sets["val"]),
                   {k: ids(v) for k, v in sets["tests"].items()})


def sample_id(s):
    return (s["patient_id"], int(s["slice_index"]))


def n_first(n, fraction):
    """Size of the larger part of an n-item split (round half up)."""
    return int(np.floor(fraction * n + 0.5))


def _rng(spec, *tags):
    keys = [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return np.random.default_rng([int(spec.seed), *keys])


def _patients_by_center(samples):
    out = {}
    for s in samples:
        out.setdefault(s["center_id"], set()).add(s["patient_id"])
    return {c: sorted(p) for c, p in sorted(out.items())}


def _split_slices(ids, fraction, rng):
    ids = sorted(ids)
    order = rng.permutation(len(ids))
    k = n_first(len(ids), fraction)
    return sorted(ids[i] for i in order[:k]), sorted(ids[i] for i in order[k:])


def _split_patients(samples, fraction, rng, min_patients=2):
    """Per-center partition of patient ids; returns (first, second) patient sets."""
    first, second = set(), set()
    for center, pids in _patients_by_center(samples).items():
        if len(pids) < min_patients:
            raise ValueError(f"center {center} has {len(pids)} patient(s); a patient-level split needs >= 2")
        order = rng.permutation(len(pids))
        k = n_first(len(pids), fraction)
        first |= {pids[i] for i in order[:k]}
        second |= {pids[i] for i in order[k:]}
    return first, second


def _ids_of(samples, patients):
    return sorted(sample_id(s) for s in samples if s["patient_id"] in patients)


def train_test_partition(samples, spec, tag="test"):
    """80:20 split of one dataset at the split kind's granularity: (pool ids, test ids)."""
    if not samples:
        raise ValueError("cannot split an empty dataset")
    rng = _rng(spec, spec.split_kind, tag)
    if spec.split_kind == "slice":
        return _split_slices([sample_id(s) for s in samples], spec.train_fraction, rng)
    pool_p, test_p = _split_patients(samples, spec.train_fraction, rng)
    return _ids_of(samples, pool_p), _ids_of(samples, test_p)


def train_val_split(pool_samples, spec, tag="val"):
    """Splits a train pool 80:20 into (train ids, val ids) at the parent granularity."""
    if not pool_samples:
        raise ValueError("train pool is empty")
    rng = _rng(spec, spec.split_kind, tag)
    frac = 1.0 - spec.val_fraction_of_train
    if spec.split_kind == "slice":
        train, val = _split_slices([sample_id(s) for s in pool_samples], frac, rng)
    else:
        train_p, val_p = _split_patients(pool_samples, frac, rng)
        train, val = _ids_of(pool_samples, train_p), _ids_of(pool_samples, val_p)
    if not train or not val:
        raise ValueError(f"train pool of {len(pool_samples)} samples too small for a non-empty validation set")
    return train, val


def _select(samples, ids):
    wanted = set(ids)
    return [s for s in samples if sample_id(s) in wanted]


def slice_level_split(samples, spec):
    """Slices shuffled and split regardless of patient; test set named ``test``."""
    if spec.split_kind != "slice":
        raise ValueError("slice_level_split needs split_kind='slice'")
    pool, test = train_test_partition(samples, spec)
    train, val = train_val_split(_select(samples, pool), spec)
    return SplitManifest(spec, train, val, {"test": test})


def patient_level_split(samples, spec):
    """Patients split 80:20 within each center; every slice follows its patient."""
    if spec.split_kind != "patient":
        raise ValueError("patient_level_split needs split_kind='patient'")
    pool, test = train_test_partition(samples, spec)
    train, val = train_val_split(_select(samples, pool), spec)
    return SplitManifest(spec, train, val, {"test": test})


def regime_assemble(internal, external, spec):
    """Builds the train/val/test sets of one regime.

    CAW trains on 80% of the internal center and tests on its remaining 20%
    and on all of the external center. CAG trains on 80% of each center and
    tests on the remaining 20% of each.
    """
    c_int, c_ext = spec.centers
    for name, samples, center in (("internal", internal, c_int), ("external", external, c_ext)):
        if not samples:
            raise ValueError(f"{name} dataset is empty")
        found = {s["center_id"] for s in samples}
        if found != {center}:
            raise ValueError(f"{name} dataset should only hold center {center!r}, found {sorted(found)}")
    pool_int, test_int = train_test_partition(internal, spec, tag=f"test/{c_int}")
    if spec.regime == "CAW":
        pool_samples = _select(internal, pool_int)
        test_ext = sorted(sample_id(s) for s in external)
    else:
        pool_ext, test_ext = train_test_partition(external, spec, tag=f"test/{c_ext}")
        pool_samples = _select(internal, pool_int) + _select(external, pool_ext)
    train, val = train_val_split(pool_samples, spec)
    return SplitManifest(spec, train, val, {"internal": test_int, "external": test_ext})


def split_by_center(samples, spec):
    """Separates a combined dataset into (internal, external) sample lists."""
    c_int, c_ext = spec.centers
    internal = [s for s in samples if s["center_id"] == c_int]
    external = [s for s in samples if s["center_id"] == c_ext]
    other = {s["center_id"] for s in samples} - {c_int, c_ext}
    if other:
        raise ValueError(f"dataset holds centers {sorted(other)} outside the spec's {spec.centers}")
    return internal, external


def leakage_audit(manifest):
    """Patients shared between train+val and each test set.

    Returns ``{test_name: {"patient_overlap": sorted ids,
    "overlap_slice_count": test slices from shared patients,
    "overlap_train_slice_count": train+val slices from shared patients}}``.
    """
    fit_ids = list(manifest.train) + list(manifest.val)
    fit_patients = {pid for pid, _ in fit_ids}
    out = {}
    for name in sorted(manifest.tests):
        test = manifest.tests[name]
        shared = fit_patients & {pid for pid, _ in test}
        out[name] = {
            "patient_overlap": sorted(shared),
            "overlap_slice_count": sum(1 for pid, _ in test if pid in shared),
            "overlap_train_slice_count": sum(1 for pid, _ in fit_ids if pid in shared),
        }
    return out


def check_disjoint(manifest):
    """Raises if any two sets share a sample."""
    seen = {}
    for name, ids in manifest.all_sets():
        for i in ids:
            if i in seen:
                raise AssertionError(f"sample {i} in both {seen[i]} and {name}")
            seen[i] = name
    return len(seen)
