"""Imagination-rollout uncertainty and threshold calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .models import DaeModel, DemoDataset, DynamicsModel, PolicyModel, dae_error, policy_action, predict_next

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UncertaintyEstimate:
    value: float
    steps_used: int
    per_step_errors: tuple[float, ...]
    diverged: bool = False


@dataclass(frozen=True)
class CalibratedThreshold:
    err_train: float
    u_thr_mult: float
    threshold: float

    @classmethod
    def from_err(cls, err_train: float, u_thr_mult: float) -> "CalibratedThreshold":
        if u_thr_mult <= 1.0:
            raise ValueError("u_thr_mult must exceed 1")
        if err_train < 0:
            raise ValueError("err_train must be non-negative")
        return cls(float(err_train), float(u_thr_mult), float(u_thr_mult) * float(err_train))

    @classmethod
    def never(cls) -> "CalibratedThreshold":
        return cls(float("inf"), float("inf"), float("inf"))


def unc_rollout_batch(
    states: np.ndarray,
    policy: PolicyModel,
    dyn: DynamicsModel,
    dae: DaeModel,
    steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised imagination rollout.

    Returns ``(values, per_step)`` with shapes ``(n,)`` and ``(n, steps)``.
    Row ``i`` of ``per_step`` holds the energy of the current state followed
    by ``steps - 1`` imagined successors. Rows whose imagination blows up are
    saturated to ``+inf``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    per_step = np.empty((s.shape[0], steps))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(steps):
            per_step[:, i] = dae_error(dae, s)
            if i == steps - 1:
                break
            a = policy_action(policy, s)
            s = predict_next(dyn, s, a)
    bad = ~np.all(np.isfinite(per_step), axis=1)
    per_step[bad] = np.where(np.isfinite(per_step[bad]), per_step[bad], np.inf)
    # mean taken as an offset from the row minimum: exact when all entries are equal
    with np.errstate(invalid="ignore"):
        lo = per_step.min(axis=1)
        values = lo + (per_step - lo[:, None]).sum(axis=1) / steps
    values[bad] = np.inf
    return values, per_step


def unc_rollout(state, policy: PolicyModel, dyn: DynamicsModel, dae: DaeModel, steps: int) -> UncertaintyEstimate:
    """Average DAE energy over the current state and its imagined successors."""
    s = np.asarray(state, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("unc_rollout takes a single state; use unc_rollout_batch for batches")
    values, per_step = unc_rollout_batch(s[None, :], policy, dyn, dae, steps)
    v = float(values[0])
    return UncertaintyEstimate(v, steps, tuple(float(e) for e in per_step[0]), not np.isfinite(v))


def calibrate_threshold(dae: DaeModel, dataset: DemoDataset, u_thr_mult: float) -> CalibratedThreshold:
    """Threshold = ``u_thr_mult`` times the mean DAE energy over all training observations."""
    if u_thr_mult <= 1.0:
        raise ValueError("u_thr_mult must exceed 1")
    obs = dataset.observations()
    err = float(np.mean(dae_error(dae, obs)))
    if err == 0.0:
        log.warning("training energy is exactly zero; threshold degenerates to 0")
    return CalibratedThreshold.from_err(err, u_thr_mult)
