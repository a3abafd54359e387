"""Config-driven experiment pipeline with hashed, cached, lock-guarded stages.

Stages: phantom (per center) -> dataset (per input mode) -> split -> train
-> evaluate, the last three once per grid cell. A cell is named
``<split_kind>-<regime>[-<input_mode>]``, e.g. ``patient-CAG`` or
``slice-CAW-PPC``.

Every stage directory holds a ``STAGE.json`` marker with the stage's config
hash once it has completed; a stage that started but did not finish leaves
an ``INCOMPLETE`` marker instead. Timestamps only ever go to ``run.log``.
"""

import copy
import csv
import hashlib
import json
import logging
import shutil
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock

from . import datasplit as ds
from . import metrics as M
from .classifier import (
    ModelConfig,
    TrainConfig,
    build_model,
    load_model,
    save_model_checkpoint,
    score_dataset,
    train,
)
from .phantom import generator as gen
from .phantom.volio import write_cohort
from .preprocess import MODES, build_slice_dataset, format_summary, load_dataset

log = logging.getLogger(__name__)

PRESETS = {"bccv": gen.bccv_like, "smhs": gen.smhs_like}
DEFAULT_CELLS = ("slice-CAW", "slice-CAG", "patient-CAW", "patient-CAG")

DEFAULT_CONFIG = {
    "master_seed": 0,
    "output_dir": "runs/desk",
    "phantom": {
        "internal": {"preset": "bccv", "n_patients": 20},
        "external": {"preset": "smhs", "n_patients": 20},
    },
    "preprocess": {"input_mode": "PPP", "input_size": [64, 64], "median_window": 5},
    "split": {"train_fraction": 0.8, "val_fraction_of_train": 0.2},
    "model": {},
    "train": {"epochs": 40, "batch_size": 64},
    "evaluate": {"threshold": 0.5, "bin_width": 1.0},
    "grid": {"cells": list(DEFAULT_CELLS)},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Config, hashing and seeds
# ---------------------------------------------------------------------------

def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def derive_seed(master_seed, stage):
    """seed = first 4 bytes (little endian) of SHA-256("<master>:<stage>")."""
    digest = hashlib.sha256(f"{int(master_seed)}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None):
    """Reads a YAML (or JSON) config, fills defaults and validates it."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, raw)
    cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def center_profile(section):
    sec = dict(section)
    preset = sec.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown phantom preset {preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[preset](**sec)
    return gen.CenterProfile(**sec)


def parse_cell(name, default_mode):
    parts = name.split("-")
    if len(parts) not in (2, 3):
        raise ConfigError(f"grid cell {name!r} should look like 'patient-CAG' or 'slice-CAW-PPC'")
    kind, regime = parts[0], parts[1]
    mode = parts[2] if len(parts) == 3 else default_mode
    if kind not in ds.KINDS or regime not in ds.REGIMES or mode not in MODES:
        raise ConfigError(f"grid cell {name!r}: bad split kind, regime or input mode")
    return kind, regime, mode


def validate_config(cfg):
    try:
        profiles = [center_profile(cfg["phantom"][k]) for k in ("internal", "external")]
        if profiles[0].name == profiles[1].name:
            raise ConfigError("internal and external centers need distinct names")
        pre = cfg["preprocess"]
        if pre["input_mode"] not in MODES:
            raise ConfigError(f"preprocess.input_mode must be one of {MODES}")
        ModelConfig(input_size=tuple(pre["input_size"]), **cfg["model"])
        TrainConfig(**cfg["train"])
        ds.SplitSpec(centers=(profiles[0].name, profiles[1].name), **cfg["split"])
        cells = cfg["grid"]["cells"]
        if not cells:
            raise ConfigError("grid.cells is empty")
        for c in cells:
            parse_cell(c, pre["input_mode"])
        int(cfg["master_seed"])
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------

class Stage:
    """One cached stage directory; use as ``with Stage(...) as st: if st.needs_run: ...``."""

    def __init__(self, directory, name, stage_hash, force=False):
        self.dir = Path(directory)
        self.name = name
        self.hash = stage_hash
        self.force = force
        self.lock = FileLock(str(self.dir) + ".lock")
        self.needs_run = True

    @property
    def marker(self):
        return self.dir / "STAGE.json"

    def is_complete(self):
        if not self.marker.exists():
            return False
        try:
            return json.loads(self.marker.read_text()).get("hash") == self.hash
        except json.JSONDecodeError:
            return False

    def __enter__(self):
        self.dir.parent.mkdir(parents=True, exist_ok=True)
        self.lock.acquire()
        if self.is_complete() and not self.force:
            self.needs_run = False
            log.info("stage %s: cache hit (%s)", self.name, self.hash)
        else:
            if self.dir.exists():
                shutil.rmtree(self.dir)
            self.dir.mkdir(parents=True)
            (self.dir / "INCOMPLETE").write_text(f"stage {self.name} hash {self.hash} did not finish\n")
            log.info("stage %s: running (%s)", self.name, self.hash)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None and self.needs_run:
                self.marker.write_text(json.dumps({"stage": self.name, "hash": self.hash}, sort_keys=True) + "\n")
                (self.dir / "INCOMPLETE").unlink()
            elif exc_type is not None:
                (self.dir / "INCOMPLETE").write_text(
                    f"stage {self.name} hash {self.hash} failed:\n"
                    + "".join(traceback.format_exception(exc_type, exc, tb))
                )
        finally:
            self.lock.release()
        if exc_type is not None and not isinstance(exc, StageError):
            raise StageError(self.name, f"{exc_type.__name__}: {exc}") from exc
        return False


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

class Experiment:
    def __init__(self, cfg, out_dir=None, force=False):
        self.cfg = cfg
        self.out = Path(out_dir or cfg["output_dir"])
        self.force = force
        self.seed = int(cfg["master_seed"])
        # where results go is not part of what they are
        self.hash = config_hash({k: v for k, v in cfg.items() if k != "output_dir"})
        self.profiles = {k: center_profile(cfg["phantom"][k]) for k in ("internal", "external")}
        self.centers = (self.profiles["internal"].name, self.profiles["external"].name)
        self._datasets = {}

    # -- logging ---------------------------------------------------------
    def _attach_log(self):
        self.out.mkdir(parents=True, exist_ok=True)
        root = logging.getLogger("petslice")
        path = str((self.out / "run.log").resolve())
        if not any(isinstance(h, logging.FileHandler) and h.baseFilename == path for h in root.handlers):
            fh = logging.FileHandler(path)
            fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            root.addHandler(fh)
            if root.level == logging.NOTSET or root.level > logging.INFO:
                root.setLevel(logging.INFO)

    def write_config(self):
        self._attach_log()
        _write_json(self.out / "config.json", {"config": self.cfg, "config_hash": self.hash})

    # -- stages ----------------------------------------------------------
    def phantom_hash(self, which):
        return config_hash({"profile": self.profiles[which].to_dict(),
                            "seed": derive_seed(self.seed, f"phantom/{self.profiles[which].name}")})

    def phantom(self, which):
        prof = self.profiles[which]
        h = self.phantom_hash(which)
        st_dir = self.out / "cache" / "phantom" / f"{prof.name}-{h}"
        with Stage(st_dir, f"phantom/{prof.name}", h, self.force) as st:
            if st.needs_run:
                vols = gen.generate_cohort(prof, derive_seed(self.seed, f"phantom/{prof.name}"))
                write_cohort(st_dir, vols, config_hash=self.hash)
                _write_json(st_dir / "stats.json", gen.cohort_stats(vols))
        return st_dir / "cohort.json", h

    def dataset_hash(self, mode):
        pre = dict(self.cfg["preprocess"], input_mode=mode)
        return config_hash({"preprocess": pre, "phantom": [self.phantom_hash(k) for k in ("internal", "external")]})

    def dataset(self, mode):
        paths = [self.phantom(k)[0] for k in ("internal", "external")]
        h = self.dataset_hash(mode)
        st_dir = self.out / "cache" / "dataset" / f"{mode}-{h}"
        pre = self.cfg["preprocess"]
        with Stage(st_dir, f"dataset/{mode}", h, self.force) as st:
            if st.needs_run:
                man = build_slice_dataset(paths, st_dir, mode, tuple(pre["input_size"]), pre["median_window"],
                                          config_hash=self.hash)
                text = format_summary(man["summary"])
                (st_dir / "summary.txt").write_text(text + "\n")
                log.info("dataset %s:\n%s", mode, text)
        return st_dir, h

    def load_dataset(self, mode):
        if mode not in self._datasets:
            st_dir, _ = self.dataset(mode)
            x, samples, _ = load_dataset(st_dir)
            self._datasets[mode] = (x, samples, {ds.sample_id(s): i for i, s in enumerate(samples)})
        return self._datasets[mode]

    def cell_dir(self, cell):
        return self.out / "cells" / cell

    def split_spec(self, cell):
        kind, regime, _ = parse_cell(cell, self.cfg["preprocess"]["input_mode"])
        return ds.SplitSpec(kind, regime, seed=derive_seed(self.seed, f"split/{cell}"), centers=self.centers,
                            **self.cfg["split"])

    def split_hash(self, cell):
        _, _, mode = parse_cell(cell, self.cfg["preprocess"]["input_mode"])
        return config_hash({"spec": asdict(self.split_spec(cell)), "dataset": self.dataset_hash(mode)})

    def split(self, cell):
        _, _, mode = parse_cell(cell, self.cfg["preprocess"]["input_mode"])
        h = self.split_hash(cell)
        st_dir = self.cell_dir(cell) / "split"
        with Stage(st_dir, f"split/{cell}", h, self.force) as st:
            if st.needs_run:
                _, samples, _ = self.load_dataset(mode)
                spec = self.split_spec(cell)
                internal, external = ds.split_by_center(samples, spec)
                man = ds.regime_assemble(internal, external, spec)
                ds.check_disjoint(man)
                d = man.to_dict()
                d["config_hash"] = self.hash
                d["leakage_audit"] = ds.leakage_audit(man)
                _write_json(st_dir / "split.json", d)
        return ds.SplitManifest.from_dict(json.loads((st_dir / "split.json").read_text()))

    def train_hash(self, cell):
        return config_hash({"model": self.cfg["model"], "train": self.cfg["train"],
                            "input_size": self.cfg["preprocess"]["input_size"],
                            "split": self.split_hash(cell), "seed": derive_seed(self.seed, f"train/{cell}")})

    def model_config(self):
        return ModelConfig(input_size=tuple(self.cfg["preprocess"]["input_size"]), **self.cfg["model"])

    def train(self, cell):
        _, _, mode = parse_cell(cell, self.cfg["preprocess"]["input_mode"])
        man = self.split(cell)
        h = self.train_hash(cell)
        st_dir = self.cell_dir(cell) / "train"
        with Stage(st_dir, f"train/{cell}", h, self.force) as st:
            if st.needs_run:
                x, samples, index = self.load_dataset(mode)
                seed = derive_seed(self.seed, f"train/{cell}")
                tr = np.array([index[i] for i in man.train])
                va = np.array([index[i] for i in man.val])
                y = np.array([s["label"] for s in samples], dtype=np.float64)
                mcfg = self.model_config()
                tcfg = TrainConfig(seed=seed, **self.cfg["train"])
                model = build_model(mcfg, seed=seed)
                best, history = train(model, x[tr], y[tr], x[va], y[va], tcfg)
                M.write_csv(st_dir / "train_log.csv", ["epoch", "train_loss", "val_loss", "checkpoint_saved"],
                            [(r["epoch"], r["train_loss"], r["val_loss"], int(r["checkpoint_saved"]))
                             for r in history], self.hash)
                save_model_checkpoint(st_dir / "model.ckpt", best, mcfg, seed,
                                      extra={"config_hash": self.hash, "cell": cell})
        return st_dir / "model.ckpt"

    def evaluate_hash(self, cell):
        return config_hash({"evaluate": self.cfg["evaluate"], "train": self.train_hash(cell)})

    def evaluate(self, cell):
        _, _, mode = parse_cell(cell, self.cfg["preprocess"]["input_mode"])
        ckpt = self.train(cell)
        man = self.split(cell)
        h = self.evaluate_hash(cell)
        st_dir = self.cell_dir(cell) / "evaluate"
        ev = self.cfg["evaluate"]
        with Stage(st_dir, f"evaluate/{cell}", h, self.force) as st:
            if st.needs_run:
                x, samples, index = self.load_dataset(mode)
                model, _ = load_model(ckpt)
                for name in sorted(man.tests):
                    ids = [index[i] for i in man.tests[name]]
                    rows = score_dataset(model, x[ids], [samples[i] for i in ids], ev["threshold"])
                    write_scores(st_dir / f"scores_{name}.csv", rows, self.hash)
                    center = self.centers[0] if name == "internal" else self.centers[1]
                    rep = M.evaluate(rows, name=name, threshold=ev["threshold"], bin_width=ev["bin_width"],
                                     config_hash=self.hash, extra={"cell": cell, "center": center})
                    M.write_report(rep, st_dir, f"report_{name}")
        return {name: st_dir / f"report_{name}.json" for name in sorted(man.tests)}

    def run_cells(self, cells=None):
        self.write_config()
        cells = list(cells or self.cfg["grid"]["cells"])
        reports = {}
        for cell in cells:
            parse_cell(cell, self.cfg["preprocess"]["input_mode"])
            reports[cell] = self.evaluate(cell)
        return reports

    def grid(self, cells=None):
        reports = self.run_cells(cells)
        table = summary_table(reports)
        write_summary(self.out, table, self.hash)
        return reports, table


def write_scores(path, rows, cfg_hash):
    M.write_csv(path, ["sample_id", "patient_id", "center_id", "p", "pred", "label", "tumor_suvmax"],
                [(r["sample_id"], r["patient_id"], r["center_id"], r["p"], r["pred"], r["label"],
                  r["tumor_suvmax"]) for r in rows], cfg_hash)


def read_scores(path):
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.append({"sample_id": r["sample_id"], "patient_id": r["patient_id"], "center_id": r["center_id"],
                     "p": float(r["p"]), "pred": int(r["pred"]), "label": int(r["label"]),
                     "tumor_suvmax": float(r["tumor_suvmax"]) if r["tumor_suvmax"] else None})
    return rows


# ---------------------------------------------------------------------------
# Summary and comparison tables
# ---------------------------------------------------------------------------

def summary_table(reports):
    """Rows (test set, metric) x columns (cells) of AUROC/AUPRC."""
    cells = list(reports)
    tests = sorted({t for r in reports.values() for t in r})
    rows = []
    for test in tests:
        for metric in ("auroc", "auprc"):
            vals = []
            for cell in cells:
                path = reports[cell].get(test)
                vals.append(M.load_report(path)[metric] if path else None)
            rows.append({"test_set": test, "metric": metric, "values": dict(zip(cells, vals))})
    return {"cells": cells, "rows": rows}


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def format_table(table):
    cells = table["cells"]
    width = max([len(c) for c in cells] + [8])
    head = f"{'test set':<10} {'metric':<7} " + " ".join(f"{c:>{width}}" for c in cells)
    lines = [head, "-" * len(head)]
    for r in table["rows"]:
        lines.append(f"{r['test_set']:<10} {r['metric']:<7} "
                     + " ".join(f"{_fmt(r['values'][c]):>{width}}" for c in cells))
    return "\n".join(lines)


def write_summary(out_dir, table, cfg_hash):
    out_dir = Path(out_dir)
    (out_dir / "summary.txt").write_text(f"config_hash={cfg_hash}\n" + format_table(table) + "\n")
    M.write_csv(out_dir / "summary.csv", ["test_set", "metric"] + table["cells"],
                [[r["test_set"], r["metric"]] + [r["values"][c] for c in table["cells"]] for r in table["rows"]],
                cfg_hash)


COMPARE_METRICS = ("auroc", "auprc") + M.METRIC_NAMES


def compare_reports(paths, force=False):
    """Aligns metrics across reports and computes deltas against the first.

    Returns ``{"columns": [...], "rows": [...], "long": [...]}``. Reports
    with different schema versions are always rejected; reports produced
    under different config hashes only with ``force``.
    """
    if len(paths) < 2:
        raise ValueError("compare needs at least two reports")
    reports = [M.load_report(p) for p in paths]
    versions = {r.get("schema_version") for r in reports}
    if len(versions) != 1:
        raise ValueError(f"incompatible report schema versions: {sorted(map(str, versions))}")
    hashes = {r.get("config_hash") for r in reports}
    if len(hashes) != 1 and not force:
        raise ValueError(f"reports come from different configs {sorted(map(str, hashes))}; use --force")

    def value(rep, m):
        return rep[m] if m in ("auroc", "auprc") else rep["metrics"][m]

    base = reports[0]
    rows, long = [], []
    for path, rep in zip(paths, reports):
        label = f"{rep.get('extra', {}).get('cell', Path(path).parent.name)}/{rep['name']}"
        row = {"report": label, "path": str(path)}
        for m in COMPARE_METRICS:
            v, b = value(rep, m), value(base, m)
            d = v - b if v is not None and b is not None else None
            row[m] = v
            row[f"delta_{m}"] = d
            long.append({"report": label, "metric": m, "value": v, "delta": d})
        rows.append(row)
    columns = ["report"] + [c for m in COMPARE_METRICS for c in (m, f"delta_{m}")]
    return {"columns": columns, "rows": rows, "long": long}


def write_comparison(out_dir, comparison, cfg_hash=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = comparison["columns"]
    M.write_csv(out_dir / "comparison.csv", cols, [[r[c] for c in cols] for r in comparison["rows"]], cfg_hash)
    M.write_csv(out_dir / "comparison_long.csv", ["report", "metric", "value", "delta"],
                [[r["report"], r["metric"], r["value"], r["delta"]] for r in comparison["long"]], cfg_hash)
    _write_json(out_dir / "comparison.json", comparison)
    text = format_comparison(comparison)
    (out_dir / "comparison.txt").write_text(text + "\n")
    return text


def format_comparison(comparison):
    width = max(len(r["report"]) for r in comparison["rows"]) + 2
    head = f"{'report':<{width}}" + "".join(f"{m:>10}{'d_' + m:>12}" for m in ("auroc", "auprc"))
    lines = [head]
    for r in comparison["rows"]:
        lines.append(f"{r['report']:<{width}}" + "".join(
            f"{_fmt(r[m]):>10}{_fmt(r['delta_' + m]):>12}" for m in ("auroc", "auprc")))
    return "\n".join(lines)
