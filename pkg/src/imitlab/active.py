"""Demonstration collection: passive, uncertainty-triggered active learning,
random on-policy stops, and DART-style noise injection.

Seed layout under one collection seed ``s``:

* ``(s, 1)`` passive instances (the active/random-stop warm start reuses a
  prefix of this stream, so it matches the passive baseline's first demos)
* ``(s, 2)`` instances for on-policy attempts
* ``(s, 3)`` random stop steps
* ``(s, 4)`` DART instances and noise
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import envs
from .models import DemoDataset, ModelBundle, TrainConfig, Trajectory, policy_action, train_all
from .numkit import make_rng
from .uncertainty import CalibratedThreshold, calibrate_threshold, unc_rollout_batch

log = logging.getLogger(__name__)

PASSIVE_STREAM, ON_POLICY_STREAM, STOP_STREAM, DART_STREAM = 1, 2, 3, 4
ATTEMPT_CAP = 10

ExpertFn = Callable[[envs.EnvState], np.ndarray]


class CollectionError(RuntimeError):
    pass


@dataclass
class ActiveLearningConfig:
    n_total: int = 40
    active_ratio: float = 0.5
    retrain_every: int = 5
    u_thr_mult: float = 1.5
    rollout_steps: int = 10
    seed: int = 0
    max_steps: int = envs.MAX_STEPS

    def __post_init__(self):
        if self.n_total < 1 or self.retrain_every < 1 or self.rollout_steps < 1:
            raise ValueError("n_total, retrain_every and rollout_steps must be positive")
        if not 0.0 < self.active_ratio < 1.0:
            raise ValueError("active_ratio must lie strictly between 0 and 1")
        if self.u_thr_mult <= 1.0:
            raise ValueError("u_thr_mult must exceed 1")
        n_act = self.active_ratio * self.n_total
        if abs(n_act - round(n_act)) > 1e-9:
            raise ValueError(f"active_ratio*n_total = {n_act} is not an integer")
        if self.n_active % self.retrain_every:
            raise ValueError(f"{self.n_active} active demos not divisible by retrain_every={self.retrain_every}")

    @property
    def n_active(self) -> int:
        return int(round(self.active_ratio * self.n_total))

    @property
    def n_initial(self) -> int:
        return self.n_total - self.n_active

    @property
    def n_rounds(self) -> int:
        return self.n_active // self.retrain_every

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CollectionRecord:
    trigger_step: int
    uncertainty: float
    threshold: float
    demo_length: int
    round: int
    attempt: int
    fallback: bool = False


@dataclass
class CollectionLog:
    records: list[CollectionRecord] = field(default_factory=list)
    attempts: int = 0
    discarded_completions: int = 0
    thresholds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "attempts": self.attempts,
            "discarded_completions": self.discarded_completions,
            "thresholds": list(self.thresholds),
        }


@dataclass
class CollectionResult:
    models: ModelBundle
    dataset: DemoDataset
    log: CollectionLog
    threshold: CalibratedThreshold | None = None


def _expert_demo(
    env_kind: str,
    inst: envs.TaskInstance,
    tag: str,
    expert: ExpertFn,
    max_steps: int,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    state, _ = envs.reset(env_kind, inst, max_steps)
    r = _expert_from(state, expert, noise_std, rng)
    r.instance = inst
    return Trajectory.from_rollout(r, tag)


def _expert_from(state: envs.EnvState, expert: ExpertFn, noise_std: float = 0.0, rng=None) -> envs.Rollout:
    if expert is envs.expert_action:
        r, _ = envs.expert_rollout(state, noise_std, rng)
        return r
    obs, acts = [state.observation()], []
    success = state.is_success()
    while not success and state.step_count < state.max_steps:
        a = np.asarray(expert(state), dtype=np.float64)
        executed = a + noise_std * rng.standard_normal(2) if noise_std > 0 else a
        state, res = envs.step(state, executed)
        acts.append(a)
        obs.append(res.observation)
        success = res.success
    return envs.Rollout(None, np.array(obs), np.array(acts).reshape(-1, 2), success)


def collect_passive(
    env_kind: str,
    n: int,
    rng: np.random.Generator,
    expert: ExpertFn = envs.expert_action,
    max_steps: int = envs.MAX_STEPS,
) -> DemoDataset:
    """``n`` full expert demonstrations on freshly sampled instances."""
    if n < 1:
        raise ValueError("n must be at least 1")
    ds = DemoDataset()
    for inst in envs.sample_instances(rng, n, env_kind):
        traj = _expert_demo(env_kind, inst, "passive", expert, max_steps)
        if not traj.success:
            raise CollectionError(f"expert failed on {inst}; the scripted expert should be complete")
        ds.add(traj)
    return ds


class _InstanceStream:
    def __init__(self, rng: np.random.Generator, env_kind: str):
        self.rng, self.env_kind = rng, env_kind

    def next(self) -> envs.TaskInstance:
        return envs.sample_instances(self.rng, 1, self.env_kind)[0]


StopRule = Callable[[np.ndarray, int], "tuple[bool, float]"]


def _on_policy_rounds(
    env_kind: str,
    cfg: ActiveLearningConfig,
    train_cfg: TrainConfig,
    tag: str,
    make_stop_rule: Callable[[ModelBundle, DemoDataset, CollectionLog], StopRule],
    expert: ExpertFn,
    stop_after_rounds: int | None = None,
) -> CollectionResult:
    """Shared skeleton: warm start, then rounds of on-policy attempts + retraining.

    ``make_stop_rule`` is rebuilt after every retraining and decides, from the
    current observation and step index, whether to hand over to the expert.
    """
    dataset = collect_passive(env_kind, cfg.n_initial, make_rng(cfg.seed, PASSIVE_STREAM), expert, cfg.max_steps)
    models = train_all(dataset, train_cfg)
    clog = CollectionLog()
    stream = _InstanceStream(make_rng(cfg.seed, ON_POLICY_STREAM), env_kind)
    rounds = cfg.n_rounds if stop_after_rounds is None else min(stop_after_rounds, cfg.n_rounds)
    for rnd in range(rounds):
        stop_rule = make_stop_rule(models, dataset, clog)
        new: list[Trajectory] = []
        attempts = 0
        while len(new) < cfg.retrain_every and attempts < ATTEMPT_CAP * cfg.retrain_every:
            attempts += 1
            clog.attempts += 1
            state, obs = envs.reset(env_kind, stream.next(), cfg.max_steps)
            while True:
                stop, value = stop_rule(obs, state.step_count)
                if stop:
                    r = _expert_from(state, expert)
                    if r.success:
                        new.append(Trajectory(r.observations, r.actions, tag, None, True))
                        clog.records.append(
                            CollectionRecord(state.step_count, value, _current_threshold(clog), len(r), rnd, attempts)
                        )
                    else:
                        clog.discarded_completions += 1
                    break
                a = np.clip(policy_action(models.policy, obs), -envs.A_MAX, envs.A_MAX)
                state, res = envs.step(state, a)
                obs = res.observation
                if res.done:
                    break
        while len(new) < cfg.retrain_every:
            # attempt cap hit: top up with full expert demos so the budget stays exact
            inst = stream.next()
            traj = _expert_demo(env_kind, inst, "passive", expert, cfg.max_steps)
            new.append(traj)
            clog.records.append(CollectionRecord(0, float("nan"), _current_threshold(clog), len(traj), rnd, attempts, True))
            log.warning("round %d: attempt cap reached, topped up with a passive demo", rnd)
        dataset = dataset.extended(new)
        models = train_all(dataset, train_cfg)
    return CollectionResult(models, dataset, clog)


def _current_threshold(clog: CollectionLog) -> float:
    return clog.thresholds[-1] if clog.thresholds else float("nan")


def run_active_learning(
    env_kind: str,
    cfg: ActiveLearningConfig,
    train_cfg: TrainConfig,
    expert: ExpertFn = envs.expert_action,
) -> CollectionResult:
    """Uncertainty-triggered demonstration requests with periodic retraining."""

    def make_rule(models: ModelBundle, dataset: DemoDataset, clog: CollectionLog) -> StopRule:
        thr = calibrate_threshold(models.dae, dataset, cfg.u_thr_mult)
        clog.thresholds.append(thr.threshold)

        def rule(obs: np.ndarray, t: int):
            v, _ = unc_rollout_batch(obs[None, :], models.policy, models.dynamics, models.dae, cfg.rollout_steps)
            u = float(v[0])
            # a non-finite imagination counts as an immediate trigger
            return (not np.isfinite(u)) or u > thr.threshold, u

        return rule

    res = _on_policy_rounds(env_kind, cfg, train_cfg, "active", make_rule, expert)
    res.threshold = calibrate_threshold(res.models.dae, res.dataset, cfg.u_thr_mult)
    return res


def collect_rand_on_policy(
    env_kind: str,
    cfg: ActiveLearningConfig,
    train_cfg: TrainConfig,
    expert: ExpertFn = envs.expert_action,
    forced_stop_step: int | None = None,
) -> CollectionResult:
    """Like active learning, but the hand-over step is uniform in ``[1, max_steps]``."""
    stop_rng = make_rng(cfg.seed, STOP_STREAM)

    def make_rule(models: ModelBundle, dataset: DemoDataset, clog: CollectionLog) -> StopRule:
        box = {"stop": None}

        def rule(obs: np.ndarray, t: int):
            if t == 0:
                box["stop"] = (
                    forced_stop_step if forced_stop_step is not None else int(stop_rng.integers(1, cfg.max_steps + 1))
                )
            return t >= box["stop"], float("nan")

        return rule

    return _on_policy_rounds(env_kind, cfg, train_cfg, "rand_on_policy", make_rule, expert)


def collect_dart(
    env_kind: str,
    n: int,
    noise_std: float,
    rng: np.random.Generator,
    expert: ExpertFn = envs.expert_action,
    max_steps: int = envs.MAX_STEPS,
) -> DemoDataset:
    """Expert demos executed with Gaussian action noise; labels stay clean.

    Demos that fail under noise are discarded and resampled, up to ``10 n``
    attempts in total.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if noise_std == 0.0:
        return collect_passive(env_kind, n, rng, expert, max_steps)
    ds = DemoDataset()
    attempts = 0
    while len(ds) < n:
        if attempts >= ATTEMPT_CAP * n:
            raise CollectionError(f"DART kept only {len(ds)}/{n} demos after {attempts} attempts")
        attempts += 1
        inst = envs.sample_instances(rng, 1, env_kind)[0]
        traj = _expert_demo(env_kind, inst, "dart", expert, max_steps, noise_std, rng)
        if traj.success:
            ds.add(traj)
    return ds


def train_passive(env_kind: str, n: int, seed: int, train_cfg: TrainConfig, max_steps: int = envs.MAX_STEPS) -> CollectionResult:
    ds = collect_passive(env_kind, n, make_rng(seed, PASSIVE_STREAM), max_steps=max_steps)
    return CollectionResult(train_all(ds, train_cfg), ds, CollectionLog())


def train_dart(env_kind: str, n: int, seed: int, train_cfg: TrainConfig, noise_std: float = 0.01) -> CollectionResult:
    ds = collect_dart(env_kind, n, noise_std, make_rng(seed, DART_STREAM))
    return CollectionResult(train_all(ds, train_cfg), ds, CollectionLog())
