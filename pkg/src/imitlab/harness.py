"""Experiment orchestration: configs, seed derivation, runs, comparisons, sweeps
and their persisted reports.

Seeds: a master seed expands into one integer per ``(seed_index, purpose)``
through ``numpy.random.SeedSequence(master, spawn_key=(seed_index, purpose_id))``.
Purposes are fixed (``collect``, ``train``, ``test``, ``eval``), so the test set of
seed ``i`` is the same for every method and adding a method never shifts
another method's randomness.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, envs
from .active import (
    ActiveLearningConfig,
    CollectionResult,
    collect_rand_on_policy,
    run_active_learning,
    train_dart,
    train_passive,
)
from .control import CONTROLLERS, ControllerConfig, FailureMonitorConfig, run_episodes
from .failure import FailureReport, evaluate_failure_prediction
from .models import TrainConfig
from .numkit import make_rng
from .uncertainty import calibrate_threshold

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("PL", "AL", "rand_on_policy", "DART")
PURPOSES = {"collect": 0, "train": 1, "test": 2, "eval": 3}
OUTPUT_ENV = "IMITLAB_OUT"

METRIC_FIELDS = (
    "seed_index",
    "method",
    "controller",
    "successes",
    "test_set_size",
    "mean_energy",
    "n_demos",
    "n_transitions",
    "f1",
    "error",
)


def derive_seed(master: int, seed_index: int, purpose: str) -> int:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence(int(master), spawn_key=(int(seed_index), PURPOSES[purpose]))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def test_instances(env_kind: str, master: int, seed_index: int, m: int) -> list[envs.TaskInstance]:
    return envs.sample_instances(make_rng(derive_seed(master, seed_index, "test")), m, env_kind)


def instances_digest(insts: Sequence[envs.TaskInstance]) -> str:
    text = json.dumps([i.to_dict() for i in insts], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class MonitorSettings:
    """Failure-monitor knobs; the threshold itself is calibrated per trained model."""

    enabled: bool = False
    rollout_steps: int = 10
    u_thr_mult: float = 1.5

    def __post_init__(self):
        if self.rollout_steps < 0:
            raise ValueError("rollout_steps must be >= 0")
        if self.u_thr_mult <= 1.0:
            raise ValueError("u_thr_mult must exceed 1")


@dataclass
class ExperimentConfig:
    env_kind: str = envs.PUSH_BLOCK
    method: str = "PL"
    controller: str = "bc_only"
    active: ActiveLearningConfig = field(default_factory=ActiveLearningConfig)
    control: ControllerConfig = field(default_factory=ControllerConfig)
    monitor: MonitorSettings = field(default_factory=MonitorSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    test_set_size: int = 50
    n_seeds: int = 10
    master_seed: int = 0
    dart_noise: float = 0.01
    output_path: str | None = None

    def __post_init__(self):
        if isinstance(self.active, dict):
            self.active = ActiveLearningConfig(**self.active)
        if isinstance(self.control, dict):
            self.control = ControllerConfig(**self.control)
        if isinstance(self.monitor, dict):
            self.monitor = MonitorSettings(**self.monitor)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.env_kind not in envs.ENV_KINDS:
            raise ValueError(f"env_kind must be one of {envs.ENV_KINDS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.controller not in CONTROLLERS or self.controller == "expert":
            raise ValueError("controller must be bc_only or hybrid")
        if self.test_set_size < 1 or self.n_seeds < 1:
            raise ValueError("test_set_size and n_seeds must be positive")
        if self.dart_noise < 0:
            raise ValueError("dart_noise must be non-negative")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "env_kind": self.env_kind,
            "method": self.method,
            "controller": self.controller,
            "active": self.active.to_dict(),
            "control": self.control.to_dict(),
            "monitor": asdict(self.monitor),
            "train": self.train.to_dict(),
            "test_set_size": self.test_set_size,
            "n_seeds": self.n_seeds,
            "master_seed": self.master_seed,
            "dart_noise": self.dart_noise,
            "output_path": self.output_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r} (expected {SCHEMA_VERSION})")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_method(self, method: str, controller: str | None = None) -> "ExperimentConfig":
        return replace(self, method=method, controller=controller or self.controller)


@dataclass
class SeedResult:
    seed_index: int
    successes: int | None
    test_set_size: int
    test_digest: str
    mean_energy: float = float("nan")
    n_demos: int = 0
    n_transitions: int = 0
    episodes: list[dict] = field(default_factory=list)
    collection_log: dict | None = None
    failure: dict | None = None
    error: str | None = None

    def metric_row(self, method: str, controller: str) -> dict:
        f1 = self.failure["f1"] if self.failure else float("nan")
        return {
            "seed_index": self.seed_index,
            "method": method,
            "controller": controller,
            "successes": "" if self.successes is None else self.successes,
            "test_set_size": self.test_set_size,
            "mean_energy": _fmt(self.mean_energy),
            "n_demos": self.n_demos,
            "n_transitions": self.n_transitions,
            "f1": _fmt(f1),
            "error": self.error or "",
        }


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest round-trip string and platform independent
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


@dataclass
class ExperimentReport:
    config: dict
    seeds: list[SeedResult]
    tool_version: str = __version__

    @property
    def method(self) -> str:
        return self.config["method"]

    @property
    def controller(self) -> str:
        return self.config["controller"]

    def success_counts(self) -> dict[int, int]:
        return {s.seed_index: s.successes for s in self.seeds if s.successes is not None}

    def metric_rows(self) -> list[dict]:
        return [s.metric_row(self.method, self.controller) for s in sorted(self.seeds, key=lambda s: s.seed_index)]

    def metrics_csv(self) -> str:
        return rows_to_csv(self.metric_rows(), METRIC_FIELDS)

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config": self.config,
            "seeds": [asdict(s) for s in self.seeds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config"], [SeedResult(**s) for s in d["seeds"]], d.get("tool_version", "unknown"))

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        (out / "metrics.csv").write_text(self.metrics_csv())
        return out

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentReport":
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        return cls.from_dict(json.loads(p.read_text()))


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def collect_and_train(cfg: ExperimentConfig, seed_index: int) -> CollectionResult:
    collect_seed = derive_seed(cfg.master_seed, seed_index, "collect")
    tcfg = cfg.train.with_seed(derive_seed(cfg.master_seed, seed_index, "train"))
    al = replace(cfg.active, seed=collect_seed)
    if cfg.method == "PL":
        return train_passive(cfg.env_kind, al.n_total, collect_seed, tcfg, al.max_steps)
    if cfg.method == "AL":
        return run_active_learning(cfg.env_kind, al, tcfg)
    if cfg.method == "rand_on_policy":
        return collect_rand_on_policy(cfg.env_kind, al, tcfg)
    return train_dart(cfg.env_kind, al.n_total, collect_seed, tcfg, cfg.dart_noise)


def _run_seed(cfg: ExperimentConfig, seed_index: int) -> SeedResult:
    test = test_instances(cfg.env_kind, cfg.master_seed, seed_index, cfg.test_set_size)
    res = SeedResult(seed_index, None, cfg.test_set_size, instances_digest(test))
    try:
        coll = collect_and_train(cfg, seed_index)
        eval_seed = derive_seed(cfg.master_seed, seed_index, "eval")
        eps = run_episodes(
            cfg.env_kind, test, cfg.controller, coll.models, cfg.control, None, eval_seed, cfg.active.max_steps
        )
        res.successes = sum(e.success for e in eps)
        energies = [x for e in eps for x in e.energy_trace]
        res.mean_energy = float(np.mean(energies)) if energies else float("nan")
        res.episodes = [e.to_dict() for e in eps]
        res.n_demos = len(coll.dataset)
        res.n_transitions = sum(len(t) for t in coll.dataset.trajectories)
        res.collection_log = coll.log.to_dict()
        if cfg.monitor.enabled:
            thr = calibrate_threshold(coll.models.dae, coll.dataset, cfg.monitor.u_thr_mult)
            mcfg = FailureMonitorConfig(thr, cfg.monitor.rollout_steps)
            rep = evaluate_failure_prediction(
                cfg.env_kind, test, coll.models, [mcfg], cfg.controller, cfg.control, eval_seed
            )[0]
            res.failure = rep.to_dict()
    except Exception as exc:  # one bad seed must not sink the others
        log.exception("seed %d failed", seed_index)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_experiment(cfg: ExperimentConfig, save: bool = True) -> ExperimentReport:
    seeds = [_run_seed(cfg, i) for i in range(cfg.n_seeds)]
    report = ExperimentReport(cfg.to_dict(), seeds)
    if save and cfg.output_path:
        report.save(cfg.output_path)
    return report


@dataclass
class ComparisonTable:
    name_a: str
    name_b: str
    rows: list[dict]
    wins: int
    losses: int
    ties: int

    @property
    def n_seeds(self) -> int:
        return self.wins + self.losses + self.ties

    @property
    def win_pct(self) -> float:
        """A's share of the non-tied experiments, in percent (nan if all tied)."""
        decided = self.wins + self.losses
        return 100.0 * self.wins / decided if decided else float("nan")

    def summary(self) -> str:
        if math.isnan(self.win_pct):
            return f"{self.name_a} vs {self.name_b}: all {self.ties} tied"
        a = round(self.win_pct)
        return f"{self.name_a} {a}% - {self.name_b} {100 - a}% ({self.ties} ties)"

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ("seed_index", "a", "b", "outcome"))


def compare(a: ExperimentReport, b: ExperimentReport) -> ComparisonTable:
    """Per-seed success-count comparison of two reports on matched test sets."""
    sa = {s.seed_index: s for s in a.seeds}
    sb = {s.seed_index: s for s in b.seeds}
    if set(sa) != set(sb):
        raise ValueError(f"reports cover different seeds: {sorted(sa)} vs {sorted(sb)}")
    rows = []
    wins = losses = ties = 0
    for i in sorted(sa):
        if sa[i].test_digest != sb[i].test_digest:
            raise ValueError(f"seed {i}: test sets differ")
        if sa[i].successes is None or sb[i].successes is None:
            raise ValueError(f"seed {i}: missing result ({sa[i].error or sb[i].error})")
        x, y = sa[i].successes, sb[i].successes
        if x > y:
            wins, outcome = wins + 1, "win"
        elif x < y:
            losses, outcome = losses + 1, "loss"
        else:
            ties, outcome = ties + 1, "tie"
        rows.append({"seed_index": i, "a": x, "b": y, "outcome": outcome})
    return ComparisonTable(_label(a), _label(b), rows, wins, losses, ties)


def _label(r: ExperimentReport) -> str:
    return r.method if r.controller == "bc_only" else f"{r.method}+{r.controller}"


def mean_successes(report: ExperimentReport) -> float:
    c = list(report.success_counts().values())
    return float(np.mean(c)) if c else float("nan")


def sweep_gamma(base: ExperimentConfig, gammas: Sequence[float]) -> list[dict]:
    """One AL experiment per active ratio on matched seeds.

    A ratio that is invalid for the base budget is reported with its error
    and skipped; the remaining entries still run.
    """
    if not gammas:
        raise ValueError("empty gamma list")
    rows = []
    for g in gammas:
        try:
            al = replace(base.active, active_ratio=float(g))
        except ValueError as exc:
            warnings.warn(f"gamma={g} rejected: {exc}")
            rows.append({"gamma": _fmt(g), "mean_successes": "", "total_successes": "", "error": str(exc)})
            continue
        rep = run_experiment(replace(base, method="AL", active=al, output_path=None), save=False)
        rows.append(
            {
                "gamma": _fmt(g),
                "mean_successes": _fmt(mean_successes(rep)),
                "total_successes": sum(rep.success_counts().values()),
                "error": "",
            }
        )
    return rows


GAMMA_FIELDS = ("gamma", "mean_successes", "total_successes", "error")


@dataclass
class UthrSweep:
    mults: list[float]
    passive: ExperimentReport
    active: dict[float, ExperimentReport]

    def rows(self) -> list[dict]:
        pl = sum(self.passive.success_counts().values())
        out = []
        for m in self.mults:
            rep = self.active[m]
            out.append(
                {
                    "u_thr_mult": _fmt(m),
                    "al_successes": sum(rep.success_counts().values()),
                    "pl_successes": pl,
                    "al_mean": _fmt(mean_successes(rep)),
                    "pl_mean": _fmt(mean_successes(self.passive)),
                }
            )
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), ("u_thr_mult", "al_successes", "pl_successes", "al_mean", "pl_mean"))


def _dedupe_mults(mults: Sequence[float]) -> list[float]:
    if len(mults) == 0:
        raise ValueError("empty u_thr_mult list")
    out: list[float] = []
    for m in mults:
        m = float(m)
        if m <= 1.0:
            raise ValueError(f"u_thr_mult must exceed 1, got {m}")
        if m in out:
            warnings.warn(f"duplicate u_thr_mult {m} ignored")
            continue
        out.append(m)
    return out


def sweep_uthr(
    base: ExperimentConfig, mults: Sequence[float], passive: ExperimentReport | None = None
) -> UthrSweep:
    """AL at each threshold multiplier plus one PL control, all on matched seeds."""
    ms = _dedupe_mults(mults)
    if passive is None:
        passive = run_experiment(replace(base, method="PL", output_path=None), save=False)
    active = {}
    for m in ms:
        cfg = replace(base, method="AL", active=replace(base.active, u_thr_mult=m), output_path=None)
        active[m] = run_experiment(cfg, save=False)
    return UthrSweep(ms, passive, active)


IMAGINATION_FIELDS = ("seed_index", "rollout_steps", "precision", "recall", "f1", "mean_steps_to_predict", "tp", "fp", "fn", "tn")


def sweep_imagination(
    env_kind: str,
    n_demos: int,
    steps: Sequence[int],
    u_thr_mult: float = 1.5,
    test_set_size: int = 50,
    master_seed: int = 0,
    n_seeds: int = 1,
    train_cfg: TrainConfig | None = None,
) -> list[dict]:
    """Failure-monitor quality as a function of imagination length.

    Each seed trains a deliberately small-data policy, calibrates the threshold
    on its own training set and runs every monitor setting on one shared test set.
    """
    if not steps:
        raise ValueError("empty rollout_steps list")
    train_cfg = train_cfg or TrainConfig()
    rows = []
    for i in range(n_seeds):
        coll = train_passive(
            env_kind,
            n_demos,
            derive_seed(master_seed, i, "collect"),
            train_cfg.with_seed(derive_seed(master_seed, i, "train")),
        )
        thr = calibrate_threshold(coll.models.dae, coll.dataset, u_thr_mult)
        test = test_instances(env_kind, master_seed, i, test_set_size)
        reports: list[FailureReport] = evaluate_failure_prediction(
            env_kind,
            test,
            coll.models,
            [FailureMonitorConfig(thr, int(k)) for k in steps],
            seed=derive_seed(master_seed, i, "eval"),
        )
        for r in reports:
            d = r.to_dict()
            rows.append({"seed_index": i, **{k: _fmt(v) if isinstance(v, float) else v for k, v in d.items()}})
    return rows
