"""Failure prediction by thresholding imagined-future energy, its evaluation,
and a supervised per-state classifier baseline for comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import envs
from .control import ControllerConfig, EpisodeResult, FailureMonitorConfig, monitor_values, run_episodes
from .models import ModelBundle, NetConfig
from .numkit import MlpParams, fit_mlp, init_mlp, make_rng, mlp_forward, sigmoid
from .uncertainty import CalibratedThreshold

__all__ = [
    "FailureMonitorConfig",
    "MonitorDecision",
    "PredictionOutcome",
    "FailureReport",
    "FailureClassifier",
    "monitor_step",
    "evaluate_failure_prediction",
    "report_from_outcomes",
    "train_supervised_baseline",
    "evaluate_classifier",
]


@dataclass(frozen=True)
class MonitorDecision:
    stop: bool
    uncertainty: float


def monitor_step(state, models: ModelBundle, cfg: FailureMonitorConfig) -> MonitorDecision:
    if not cfg.enabled:
        raise ValueError("monitor is disabled")
    v = float(monitor_values(np.asarray(state, dtype=np.float64)[None, :], models, cfg)[0])
    return MonitorDecision(v > cfg.threshold.threshold, v)


@dataclass(frozen=True)
class PredictionOutcome:
    predicted_failure: bool
    trigger_step: int | None
    actual_failure: bool

    def __post_init__(self):
        if self.predicted_failure != (self.trigger_step is not None):
            raise ValueError("trigger_step must be set exactly when a failure is predicted")


@dataclass
class FailureReport:
    precision: float
    recall: float
    f1: float
    mean_steps_to_predict: float
    tp: int
    fp: int
    fn: int
    tn: int
    outcomes: list[PredictionOutcome] = field(default_factory=list)
    rollout_steps: int | None = None

    def to_dict(self) -> dict:
        return {
            "rollout_steps": self.rollout_steps,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mean_steps_to_predict": self.mean_steps_to_predict,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def report_from_outcomes(outcomes: Sequence[PredictionOutcome], rollout_steps: int | None = None) -> FailureReport:
    tp = sum(o.predicted_failure and o.actual_failure for o in outcomes)
    fp = sum(o.predicted_failure and not o.actual_failure for o in outcomes)
    fn = sum(not o.predicted_failure and o.actual_failure for o in outcomes)
    tn = len(outcomes) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    hits = [o.trigger_step for o in outcomes if o.predicted_failure and o.actual_failure]
    steps = float(np.mean(hits)) if hits else float("nan")
    return FailureReport(precision, recall, f1_score(precision, recall), steps, tp, fp, fn, tn, list(outcomes), rollout_steps)


def evaluate_failure_prediction(
    env_kind: str,
    test_instances: Sequence[envs.TaskInstance],
    models: ModelBundle,
    cfg_sweep: Sequence[FailureMonitorConfig],
    controller: str = "bc_only",
    controller_cfg: ControllerConfig | None = None,
    seed: int = 0,
) -> list[FailureReport]:
    """Monitored run vs. unmonitored twin for every instance and monitor config.

    Ground truth (did the episode fail?) always comes from the unmonitored
    twin, which shares the monitored run's seed; the monitor only decides
    whether and when to stop.
    """
    if not test_instances:
        raise ValueError("empty test set")
    truth = run_episodes(env_kind, test_instances, controller, models, controller_cfg, None, seed)
    reports = []
    for mcfg in cfg_sweep:
        monitored = run_episodes(env_kind, test_instances, controller, models, controller_cfg, mcfg, seed)
        outcomes = [
            PredictionOutcome(m.stop_reason == "failure_stop", m.trigger_step, not t.success)
            for m, t in zip(monitored, truth)
        ]
        reports.append(report_from_outcomes(outcomes, mcfg.rollout_steps))
    return reports


def outcomes_from_traces(
    traces: Sequence[Sequence[float]], failed: Sequence[bool], threshold: float
) -> list[PredictionOutcome]:
    """Replay recorded per-step monitor values against a threshold."""
    out = []
    for trace, fail in zip(traces, failed):
        hit = next((t for t, v in enumerate(trace) if v > threshold), None)
        out.append(PredictionOutcome(hit is not None, hit, bool(fail)))
    return out


@dataclass(frozen=True)
class FailureClassifier:
    params: MlpParams
    mean: np.ndarray
    std: np.ndarray
    prob_threshold: float = 0.5

    def failure_prob(self, states) -> np.ndarray:
        z = (np.atleast_2d(states) - self.mean) / self.std
        return sigmoid(mlp_forward(self.params, z))[:, 0]


def train_supervised_baseline(
    labeled_rollouts: Sequence[tuple[np.ndarray, bool]],
    cfg: NetConfig,
    seed: int = 0,
    prob_threshold: float = 0.5,
) -> FailureClassifier:
    """Per-state classifier: every state inherits its trajectory's outcome.

    ``labeled_rollouts`` holds ``(observations, success)`` pairs; the model
    outputs the probability that the episode fails.
    """
    labels = [bool(s) for _, s in labeled_rollouts]
    if all(labels) or not any(labels):
        raise ValueError("supervised baseline needs both successful and failed trajectories")
    x = np.concatenate([np.atleast_2d(o) for o, _ in labeled_rollouts])
    y = np.concatenate([np.full((len(np.atleast_2d(o)), 1), 0.0 if s else 1.0) for o, s in labeled_rollouts])
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-6)
    rng = make_rng(seed, 7)
    params = init_mlp([x.shape[1], *cfg.hidden, 1], rng, cfg.activation)
    res = fit_mlp(params, (x - mean) / std, y, rng, cfg.epochs, cfg.batch_size, cfg.learning_rate, loss="logistic")
    return FailureClassifier(res.params, mean, std, prob_threshold)


def evaluate_classifier(
    env_kind: str,
    test_instances: Sequence[envs.TaskInstance],
    models: ModelBundle,
    clf: FailureClassifier,
    seed: int = 0,
) -> FailureReport:
    """Same protocol as the unsupervised monitor, with the classifier as the stop rule."""
    truth = run_episodes(env_kind, test_instances, "bc_only", models, None, None, seed, keep_observations=True)
    traces = []
    for ep in truth:
        # states actually acted from (the terminal observation is never acted on)
        traces.append(clf.failure_prob(ep.observations[:-1]) if ep.steps else np.zeros(0))
    outcomes = outcomes_from_traces(traces, [not ep.success for ep in truth], clf.prob_threshold)
    return report_from_outcomes(outcomes)


def collect_labeled_rollouts(
    env_kind: str, models: ModelBundle, n: int, seed: int
) -> list[tuple[np.ndarray, bool]]:
    """Run the policy on ``n`` fresh instances and label each trajectory by outcome."""
    insts = envs.sample_instances(make_rng(seed, 8), n, env_kind)
    eps: list[EpisodeResult] = run_episodes(env_kind, insts, "bc_only", models, seed=seed, keep_observations=True)
    return [(ep.observations[:-1] if ep.steps else ep.observations, ep.success) for ep in eps]


def never_threshold() -> CalibratedThreshold:
    return CalibratedThreshold.never()
