"""Test-time control: behaviour cloning alone, or policy plus a small
uncertainty-minimising MPC correction.

The hybrid action is ``clamp(policy(s) + beta * a_plan[0])`` where ``a_plan``
is the sampled action sequence whose predicted terminal state has the lowest
imagination-rollout energy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import envs
from .models import ModelBundle, dae_error, policy_action, predict_next
from .numkit import make_rng
from .uncertainty import CalibratedThreshold, unc_rollout_batch

CONTROLLERS = ("bc_only", "hybrid", "expert")
OPTIMIZERS = ("random_shooting", "cem")


class PlannerError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    horizon: int = 5
    n_candidates: int = 64
    optimizer: str = "random_shooting"
    cem_iters: int = 3
    cem_elite_frac: float = 0.1
    action_sample_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer == "cem" and (self.cem_iters < 1 or self.n_elite < 1):
            raise ValueError("CEM needs at least one iteration and one elite")
        if self.action_sample_std <= 0:
            raise ValueError("action_sample_std must be positive")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.cem_elite_frac * self.n_candidates)))


@dataclass
class ControllerConfig:
    beta: float = 0.2
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    terminal_rollout_steps: int = 1

    def __post_init__(self):
        if isinstance(self.planner, dict):
            self.planner = PlannerConfig(**self.planner)
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.terminal_rollout_steps < 1:
            raise ValueError("terminal_rollout_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlanResult:
    actions: np.ndarray  # (horizon, 2)
    predicted_terminal_state: np.ndarray
    terminal_uncertainty: float
    candidate_objectives: np.ndarray  # objective of every evaluated candidate
    best_per_iter: list[float] = field(default_factory=list)


def _score(states: np.ndarray, seqs: np.ndarray, models: ModelBundle, terminal_steps: int):
    """Roll ``seqs`` (n, H, 2) from ``states`` (n, d); return (objectives, terminal states)."""
    s = states
    for h in range(seqs.shape[1]):
        s = predict_next(models.dynamics, s, seqs[:, h])
    obj, _ = unc_rollout_batch(s, models.policy, models.dynamics, models.dae, terminal_steps)
    obj = np.where(np.isfinite(obj), obj, np.inf)
    return obj, s


def _sample(rng: np.random.Generator, k: int, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return np.clip(mean + std * rng.standard_normal((k,) + mean.shape), -envs.A_MAX, envs.A_MAX)


def plan_batch(
    states: np.ndarray,
    models: ModelBundle,
    cfg: PlannerConfig,
    rngs: Sequence[np.random.Generator],
    terminal_steps: int = 1,
) -> list[PlanResult]:
    """Plan independently for each row of ``states``, one RNG per row.

    Candidates of all rows are scored in one vectorised pass per iteration;
    ties go to the lowest candidate index.
    """
    states = np.atleast_2d(states)
    e, d = states.shape
    k, hz = cfg.n_candidates, cfg.horizon
    means = np.zeros((e, hz, 2))
    stds = np.full((e, hz, 2), cfg.action_sample_std)
    iters = cfg.cem_iters if cfg.optimizer == "cem" else 1
    best_obj = np.full(e, np.inf)
    best_seq = np.zeros((e, hz, 2))
    best_term = np.full((e, d), np.nan)
    all_obj: list[list[np.ndarray]] = [[] for _ in range(e)]
    history: list[list[float]] = [[] for _ in range(e)]
    for _ in range(iters):
        seqs = np.stack([_sample(rngs[i], k, means[i], stds[i]) for i in range(e)])
        obj, term = _score(np.repeat(states, k, axis=0), seqs.reshape(e * k, hz, 2), models, terminal_steps)
        obj = obj.reshape(e, k)
        term = term.reshape(e, k, d)
        for i in range(e):
            all_obj[i].append(obj[i])
            j = int(np.argmin(obj[i]))
            if obj[i, j] < best_obj[i]:
                best_obj[i] = obj[i, j]
                best_seq[i] = seqs[i, j]
                best_term[i] = term[i, j]
            history[i].append(float(best_obj[i]))
            if cfg.optimizer == "cem":
                elite = seqs[i, np.argsort(obj[i], kind="stable")[: cfg.n_elite]]
                means[i] = elite.mean(axis=0)
                stds[i] = np.maximum(elite.std(axis=0), 1e-4)
    out = []
    for i in range(e):
        if not np.isfinite(best_obj[i]):
            raise PlannerError("every planner candidate diverged; dynamics model is unusable here")
        out.append(PlanResult(best_seq[i], best_term[i], float(best_obj[i]), np.concatenate(all_obj[i]), history[i]))
    return out


def plan_min_uncertainty(
    state,
    models: ModelBundle,
    cfg: PlannerConfig,
    rng: np.random.Generator | None = None,
    terminal_steps: int = 1,
) -> PlanResult:
    rng = rng if rng is not None else make_rng(cfg.seed)
    return plan_batch(np.asarray(state, dtype=np.float64)[None, :], models, cfg, [rng], terminal_steps)[0]


def combine_actions(policy_out: np.ndarray, plan_first: np.ndarray, beta: float) -> np.ndarray:
    return np.clip(policy_out + beta * plan_first, -envs.A_MAX, envs.A_MAX)


def hybrid_action(state, models: ModelBundle, cfg: ControllerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    plan = plan_min_uncertainty(s, models, cfg.planner, rng, cfg.terminal_rollout_steps)
    return combine_actions(policy_action(models.policy, s), plan.actions[0], cfg.beta)


@dataclass
class FailureMonitorConfig:
    threshold: CalibratedThreshold
    rollout_steps: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.rollout_steps < 0:
            raise ValueError("rollout_steps must be >= 0")

    @property
    def effective_steps(self) -> int:
        # 0 means "current state only", which is the 1-step rollout
        return max(self.rollout_steps, 1)


def monitor_values(states: np.ndarray, models: ModelBundle, cfg: FailureMonitorConfig) -> np.ndarray:
    if cfg.rollout_steps == 0:
        return np.atleast_1d(dae_error(models.dae, np.atleast_2d(states)))
    values, _ = unc_rollout_batch(states, models.policy, models.dynamics, models.dae, cfg.effective_steps)
    return values


@dataclass
class EpisodeResult:
    instance: envs.TaskInstance
    success: bool
    steps: int
    stop_reason: str  # success | step_limit | failure_stop
    energy_trace: list[float]  # DAE energy of every visited state before acting
    monitor_trace: list[float] = field(default_factory=list)
    trigger_step: int | None = None
    observations: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "instance": self.instance.to_dict(),
            "success": self.success,
            "steps": self.steps,
            "stop_reason": self.stop_reason,
            "trigger_step": self.trigger_step,
            "energy_trace": [float(x) for x in self.energy_trace],
            "monitor_trace": [float(x) for x in self.monitor_trace],
        }


def run_episodes(
    env_kind: str,
    instances: Sequence[envs.TaskInstance],
    controller: str,
    models: ModelBundle | None = None,
    cfg: ControllerConfig | None = None,
    monitor: FailureMonitorConfig | None = None,
    seed: int = 0,
    max_steps: int = envs.MAX_STEPS,
    keep_observations: bool = False,
) -> list[EpisodeResult]:
    """Closed-loop rollouts of many instances in lockstep.

    Episode ``i`` draws planner noise from the stream ``(seed, i)`` so the
    result of each episode depends only on its own index, instance and models
    (up to rounding differences between batch sizes).
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"controller must be one of {CONTROLLERS}")
    if controller != "expert" and models is None:
        raise ValueError(f"{controller} controller needs trained models")
    cfg = cfg or ControllerConfig()
    use_monitor = monitor is not None and monitor.enabled
    n = len(instances)
    states = [envs.reset(env_kind, inst, max_steps)[0] for inst in instances]
    rngs = [make_rng(seed, i) for i in range(n)]
    energy: list[list[float]] = [[] for _ in range(n)]
    mon: list[list[float]] = [[] for _ in range(n)]
    obs_log: list[list[np.ndarray]] = [[s.observation()] for s in states]
    results: list[EpisodeResult | None] = [None] * n

    def finish(i: int, reason: str, trigger: int | None = None) -> None:
        st = states[i]
        results[i] = EpisodeResult(
            instances[i],
            reason == "success",
            st.step_count,
            reason,
            energy[i],
            mon[i],
            trigger,
            np.array(obs_log[i]) if keep_observations else None,
        )

    active = []
    for i, st in enumerate(states):
        if st.is_success():
            finish(i, "success")
        elif st.step_count >= st.max_steps:
            finish(i, "step_limit")
        else:
            active.append(i)

    while active:
        obs = np.stack([states[i].observation() for i in active])
        if models is not None:
            e = dae_error(models.dae, obs)
            for j, i in enumerate(active):
                energy[i].append(float(e[j]))
        if use_monitor:
            vals = monitor_values(obs, models, monitor)
            keep = []
            for j, i in enumerate(active):
                mon[i].append(float(vals[j]))
                if vals[j] > monitor.threshold.threshold:
                    finish(i, "failure_stop", states[i].step_count)
                else:
                    keep.append(j)
            active = [active[j] for j in keep]
            obs = obs[keep]
            if not active:
                break
        if controller == "expert":
            acts = np.stack([envs.expert_action(states[i]) for i in active])
        else:
            acts = policy_action(models.policy, obs)
            if controller == "hybrid":
                plans = plan_batch(obs, models, cfg.planner, [rngs[i] for i in active], cfg.terminal_rollout_steps)
                first = np.stack([p.actions[0] for p in plans])
                acts = combine_actions(acts, first, cfg.beta)
            else:
                acts = np.clip(acts, -envs.A_MAX, envs.A_MAX)
        still = []
        for j, i in enumerate(active):
            states[i], res = envs.step(states[i], acts[j])
            obs_log[i].append(res.observation)
            if res.success:
                finish(i, "success")
            elif res.done:
                finish(i, "step_limit")
            else:
                still.append(i)
        active = still
    return results  # type: ignore[return-value]


def run_episode(
    env_kind: str,
    instance: envs.TaskInstance,
    controller: str,
    models: ModelBundle | None = None,
    cfg: ControllerConfig | None = None,
    monitor: FailureMonitorConfig | None = None,
    seed: int = 0,
    max_steps: int = envs.MAX_STEPS,
) -> EpisodeResult:
    return run_episodes(env_kind, [instance], controller, models, cfg, monitor, seed, max_steps)[0]

