"""Analytic 2D manipulation tasks in the unit arena, with scripted experts.

Two tasks:

* ``point_reach``: move the agent to the goal. Observation ``(agent, goal)``.
* ``push_block``: push a block onto the goal. Observation ``(agent, block, goal)``.

Actions are 2D velocity commands clamped to ``[-A_MAX, A_MAX]`` per axis.
Every function here is pure; ``EnvState`` is a frozen value type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

POINT_REACH = "point_reach"
PUSH_BLOCK = "push_block"
ENV_KINDS = (POINT_REACH, PUSH_BLOCK)

A_MAX = 0.05
MAX_STEPS = 120
REACH_RADIUS = 0.03
PUSH_SUCCESS_RADIUS = 0.05
CONTACT_RADIUS = 0.05
MIN_SEPARATION = 0.2

# push_block expert geometry (arena units, radians)
_PUSH_GAP = 0.04  # agent-to-block distance held while pushing
_ORBIT_RADIUS = 0.1  # clearance kept while circling to the pushing side
_ORBIT_STEP = 0.7  # angular look-ahead of the circling waypoint
_PUSH_SPEED = 0.025
_ALIGN_ANGLE = np.pi / 6  # pushing fades out beyond this misalignment
_ALIGN_SLACK = 0.02  # ... and beyond this much extra distance from the block
# blocks are sampled away from the walls so the expert can always get behind them
_BLOCK_MARGIN = 0.15
_START_CLEARANCE = 0.15  # minimum agent-block distance at reset
_CONTACT_EPS = 1e-9


class InvalidInstance(ValueError):
    pass


def obs_dim(env_kind: str) -> int:
    return {POINT_REACH: 4, PUSH_BLOCK: 6}[_check_kind(env_kind)]


def action_dim(env_kind: str) -> int:
    _check_kind(env_kind)
    return 2


def _check_kind(env_kind: str) -> str:
    if env_kind not in ENV_KINDS:
        raise ValueError(f"unknown env kind {env_kind!r}; expected one of {ENV_KINDS}")
    return env_kind


def _vec2(v) -> tuple[float, float]:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (2,):
        raise InvalidInstance(f"expected a 2D position, got {v!r}")
    return float(a[0]), float(a[1])


def _in_arena(p: Sequence[float]) -> bool:
    return all(0.0 <= c <= 1.0 for c in p)


@dataclass(frozen=True)
class TaskInstance:
    """Start configuration plus goal.

    ``start_state`` is the agent position for point_reach and the
    concatenated agent and block positions for push_block.
    """

    start_state: tuple[float, ...]
    goal: tuple[float, float]

    @property
    def agent(self) -> tuple[float, float]:
        return self.start_state[0], self.start_state[1]

    @property
    def block(self) -> tuple[float, float] | None:
        if len(self.start_state) == 4:
            return self.start_state[2], self.start_state[3]
        return None

    def to_dict(self) -> dict:
        return {"start_state": list(self.start_state), "goal": list(self.goal)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(tuple(float(x) for x in d["start_state"]), _vec2(d["goal"]))


def validate_instance(env_kind: str, inst: TaskInstance) -> None:
    _check_kind(env_kind)
    want = 2 if env_kind == POINT_REACH else 4
    if len(inst.start_state) != want:
        raise InvalidInstance(f"{env_kind} start_state needs {want} values, got {len(inst.start_state)}")
    if not _in_arena(inst.goal) or not _in_arena(inst.start_state):
        raise InvalidInstance("start and goal must lie inside the unit arena")
    mover = inst.agent if env_kind == POINT_REACH else inst.block
    if np.hypot(mover[0] - inst.goal[0], mover[1] - inst.goal[1]) < MIN_SEPARATION:
        raise InvalidInstance(f"start-goal distance below {MIN_SEPARATION}")


@dataclass(frozen=True)
class EnvState:
    kind: str
    agent_pos: tuple[float, float]
    goal: tuple[float, float]
    block_pos: tuple[float, float] | None = None
    step_count: int = 0
    max_steps: int = MAX_STEPS

    def observation(self) -> np.ndarray:
        parts = list(self.agent_pos)
        if self.kind == PUSH_BLOCK:
            parts += list(self.block_pos)
        parts += list(self.goal)
        return np.array(parts, dtype=np.float64)

    def is_success(self) -> bool:
        if self.kind == POINT_REACH:
            d = np.hypot(self.agent_pos[0] - self.goal[0], self.agent_pos[1] - self.goal[1])
            return bool(d < REACH_RADIUS)
        d = np.hypot(self.block_pos[0] - self.goal[0], self.block_pos[1] - self.goal[1])
        return bool(d < PUSH_SUCCESS_RADIUS)


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    done: bool
    success: bool


def reset(env_kind: str, instance: TaskInstance, max_steps: int = MAX_STEPS) -> tuple[EnvState, np.ndarray]:
    validate_instance(env_kind, instance)
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    block = instance.block if env_kind == PUSH_BLOCK else None
    state = EnvState(env_kind, instance.agent, instance.goal, block, 0, max_steps)
    return state, state.observation()


def state_from_observation(env_kind: str, obs, step_count: int = 0, max_steps: int = MAX_STEPS) -> EnvState:
    """Rebuild an ``EnvState`` from a flat observation (inverse of ``observation``)."""
    o = np.asarray(obs, dtype=np.float64).reshape(-1)
    if o.size != obs_dim(env_kind):
        raise ValueError(f"{env_kind} observation needs {obs_dim(env_kind)} values")
    if env_kind == POINT_REACH:
        return EnvState(env_kind, _vec2(o[0:2]), _vec2(o[2:4]), None, step_count, max_steps)
    return EnvState(env_kind, _vec2(o[0:2]), _vec2(o[4:6]), _vec2(o[2:4]), step_count, max_steps)


def clamp_action(action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64).reshape(2), -A_MAX, A_MAX)


def _clip01(p: np.ndarray) -> tuple[float, float]:
    q = np.clip(p, 0.0, 1.0)
    return float(q[0]), float(q[1])


def step(state: EnvState, action) -> tuple[EnvState, StepResult]:
    """Advance one step. Positions are clamped to the arena.

    push_block contact: if the agent starts the step within ``CONTACT_RADIUS``
    of the block, the block moves by the non-negative component of the agent's
    displacement along the agent-to-block direction.
    """
    a = clamp_action(action)
    agent = np.array(state.agent_pos)
    new_agent = np.array(_clip01(agent + a))
    block = state.block_pos
    if state.kind == PUSH_BLOCK:
        b = np.array(block)
        rel = b - agent
        dist = float(np.hypot(rel[0], rel[1]))
        if 0.0 < dist <= CONTACT_RADIUS + _CONTACT_EPS:
            w = rel / dist
            push = float((new_agent - agent) @ w)
            if push > 0.0:
                block = _clip01(b + push * w)
    new_state = replace(
        state,
        agent_pos=(float(new_agent[0]), float(new_agent[1])),
        block_pos=block,
        step_count=state.step_count + 1,
    )
    success = new_state.is_success()
    done = success or new_state.step_count >= new_state.max_steps
    return new_state, StepResult(new_state.observation(), done, success)


def _scale_to_box(v: np.ndarray) -> np.ndarray:
    m = float(np.max(np.abs(v)))
    if m > A_MAX:
        v = v * (A_MAX / m)
    return v


def _push_expert(agent: np.ndarray, block: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Smooth vector field: circle the block toward its pushing side, then push.

    The agent tracks a waypoint on a circle around the block. The waypoint
    leads the agent's bearing toward the point directly behind the block (as
    seen from the goal) and its radius shrinks from the clearance radius to
    the push gap as the agent lines up. Once lined up, a forward push along
    block->goal is blended in.
    """
    to_goal = goal - block
    dist_goal = float(np.hypot(*to_goal))
    if dist_goal < 1e-12:
        return np.zeros(2)
    u = to_goal / dist_goal
    n = np.array([-u[1], u[0]])
    rel = agent - block
    r = float(np.hypot(*rel))
    # bearing of the agent around the block, 0 = directly behind it
    bearing = float(np.arctan2(rel @ n, -(rel @ u)))
    side = 1.0 if bearing >= 0.0 else -1.0
    off = abs(bearing)
    target_bearing = side * max(0.0, off - _ORBIT_STEP)
    radius = _PUSH_GAP + (_ORBIT_RADIUS - _PUSH_GAP) * min(1.0, off / _ORBIT_STEP)
    if off < _ORBIT_STEP and r > radius + A_MAX:
        # already on the pushing side and far away: head straight for the gap
        radius = _PUSH_GAP
    waypoint = block + radius * (-np.cos(target_bearing) * u + np.sin(target_bearing) * n)
    align = max(0.0, 1.0 - off / _ALIGN_ANGLE) * max(0.0, 1.0 - max(0.0, r - _PUSH_GAP) / _ALIGN_SLACK)
    return _scale_to_box(waypoint - agent + min(_PUSH_SPEED, dist_goal) * align * u)


def expert_action(state: EnvState) -> np.ndarray:
    """Scripted demonstrator; a pure function of the state."""
    agent = np.array(state.agent_pos)
    goal = np.array(state.goal)
    if state.kind == POINT_REACH:
        return clamp_action(goal - agent)
    return clamp_action(_push_expert(agent, np.array(state.block_pos), goal))


def sample_instances(rng: np.random.Generator, n: int, env_kind: str) -> list[TaskInstance]:
    if n < 1:
        raise ValueError("n must be at least 1")
    _check_kind(env_kind)
    out = []
    while len(out) < n:
        if env_kind == POINT_REACH:
            agent = rng.uniform(0.0, 1.0, size=2)
            goal = rng.uniform(0.0, 1.0, size=2)
            if np.hypot(*(agent - goal)) < MIN_SEPARATION:
                continue
            inst = TaskInstance(_vec2(agent), _vec2(goal))
        else:
            agent = rng.uniform(0.0, 1.0, size=2)
            block = rng.uniform(_BLOCK_MARGIN, 1.0 - _BLOCK_MARGIN, size=2)
            goal = rng.uniform(_BLOCK_MARGIN, 1.0 - _BLOCK_MARGIN, size=2)
            if np.hypot(*(block - goal)) < MIN_SEPARATION:
                continue
            if np.hypot(*(agent - block)) < _START_CLEARANCE:
                continue
            inst = TaskInstance(_vec2(agent) + _vec2(block), _vec2(goal))
        out.append(inst)
    return out


@dataclass
class Rollout:
    instance: TaskInstance | None
    observations: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, 2)
    success: bool

    def __len__(self) -> int:
        return self.actions.shape[0]


def expert_rollout(state: EnvState, noise_std: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Rollout, EnvState]:
    """Roll the expert from ``state`` until done.

    Recorded actions are always the clean expert action; with ``noise_std > 0``
    the executed action is perturbed with Gaussian noise.
    """
    obs = [state.observation()]
    acts = []
    success = state.is_success()
    while not success and state.step_count < state.max_steps:
        a = expert_action(state)
        executed = a
        if noise_std > 0.0:
            executed = a + noise_std * rng.standard_normal(2)
        state, res = step(state, executed)
        acts.append(a)
        obs.append(res.observation)
        success = res.success
    acts_arr = np.array(acts, dtype=np.float64).reshape(-1, 2)
    return Rollout(None, np.array(obs), acts_arr, success), state


def replay(env_kind: str, instance: TaskInstance, actions: Iterable, max_steps: int = MAX_STEPS) -> np.ndarray:
    state, obs = reset(env_kind, instance, max_steps)
    out = [obs]
    for a in actions:
        state, res = step(state, a)
        out.append(res.observation)
    return np.array(out)


def rollout_to_record(env_kind: str, r: Rollout) -> dict:
    """One trajectory as a JSON-friendly record (per-step observation/action/success)."""
    steps = []
    for t in range(len(r)):
        steps.append({"observation": r.observations[t].tolist(), "action": r.actions[t].tolist()})
    return {
        "env": env_kind,
        "instance": r.instance.to_dict() if r.instance is not None else None,
        "steps": steps,
        "final_observation": r.observations[-1].tolist(),
        "success": bool(r.success),
    }


def rollout_from_record(rec: dict) -> Rollout:
    inst = TaskInstance.from_dict(rec["instance"]) if rec.get("instance") else None
    obs = [s["observation"] for s in rec["steps"]] + [rec["final_observation"]]
    acts = np.array([s["action"] for s in rec["steps"]], dtype=np.float64).reshape(-1, 2)
    return Rollout(inst, np.array(obs, dtype=np.float64), acts, bool(rec["success"]))


def dumps_rollouts(env_kind: str, rollouts: Sequence[Rollout]) -> str:
    return "\n".join(json.dumps(rollout_to_record(env_kind, r)) for r in rollouts) + "\n"
