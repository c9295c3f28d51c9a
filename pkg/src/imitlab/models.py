"""The three networks trained on demonstrations.

* policy: observation -> action (behaviour cloning, MSE on normalised actions)
* dynamics: (observation, action) -> one-step state delta
* DAE: corrupted observation -> clean observation; its reconstruction error on
  a clean input is the familiarity energy used everywhere else.

All three see inputs/targets standardised with ``NormStats`` fitted on the
training set only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import envs
from .numkit import MlpParams, NumericError, ShapeError, fit_mlp, init_mlp, make_rng, mlp_forward

TAGS = ("passive", "active", "rand_on_policy", "dart")
STD_FLOOR = 1e-6

# stream ids under TrainConfig.seed
_POLICY_STREAM, _DYN_STREAM, _DAE_STREAM = 0, 1, 2


@dataclass
class Trajectory:
    observations: np.ndarray  # (T+1, obs_dim), last row is the terminal state
    actions: np.ndarray  # (T, act_dim)
    tag: str = "passive"
    instance: envs.TaskInstance | None = None
    success: bool = True

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown provenance tag {self.tag!r}")
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ShapeError("a trajectory needs exactly one more observation than actions")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def from_rollout(cls, r: envs.Rollout, tag: str) -> "Trajectory":
        return cls(r.observations, r.actions, tag, r.instance, r.success)


@dataclass
class DemoDataset:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def add(self, traj: Trajectory) -> None:
        if not traj.success:
            raise ValueError("demonstrations must end in task success")
        self.trajectories.append(traj)

    def extended(self, more: Iterable[Trajectory]) -> "DemoDataset":
        out = DemoDataset(list(self.trajectories))
        for t in more:
            out.add(t)
        return out

    def count(self, tag: str) -> int:
        return sum(t.tag == tag for t in self.trajectories)

    def observations(self) -> np.ndarray:
        self._require_nonempty()
        return np.concatenate([t.observations for t in self.trajectories])

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(s_t, a_t, s_{t+1})`` over every trajectory."""
        self._require_nonempty()
        trajs = [t for t in self.trajectories if len(t) > 0]
        if not trajs:
            raise ValueError("dataset contains no transitions")
        s = np.concatenate([t.observations[:-1] for t in trajs])
        a = np.concatenate([t.actions for t in trajs])
        s2 = np.concatenate([t.observations[1:] for t in trajs])
        return s, a, s2

    def _require_nonempty(self) -> None:
        if not self.trajectories:
            raise ValueError("empty dataset")

    def to_records(self, env_kind: str) -> list[dict]:
        recs = []
        for t in self.trajectories:
            r = envs.Rollout(t.instance, t.observations, t.actions, t.success)
            rec = envs.rollout_to_record(env_kind, r)
            rec["tag"] = t.tag
            recs.append(rec)
        return recs

    @classmethod
    def from_records(cls, recs: Sequence[dict]) -> "DemoDataset":
        return cls([Trajectory.from_rollout(envs.rollout_from_record(r), r.get("tag", "passive")) for r in recs])

    def dumps(self, env_kind: str) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records(env_kind))

    @classmethod
    def loads(cls, text: str) -> "DemoDataset":
        return cls.from_records([json.loads(line) for line in text.splitlines() if line.strip()])


@dataclass
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray

    def norm_obs(self, s):
        return (s - self.obs_mean) / self.obs_std

    def denorm_obs(self, z):
        return z * self.obs_std + self.obs_mean

    def norm_act(self, a):
        return (a - self.act_mean) / self.act_std

    def denorm_act(self, z):
        return z * self.act_std + self.act_mean

    def norm_delta(self, d):
        return (d - self.delta_mean) / self.delta_std

    def denorm_delta(self, z):
        return z * self.delta_std + self.delta_mean

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _mean_std(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def fit_norm(dataset: DemoDataset) -> NormStats:
    obs = dataset.observations()
    s, a, s2 = dataset.transitions()
    om, osd = _mean_std(obs)
    am, asd = _mean_std(a)
    dm, dsd = _mean_std(s2 - s)
    return NormStats(om, osd, am, asd, dm, dsd)


@dataclass
class NetConfig:
    hidden: tuple[int, ...]
    epochs: int
    batch_size: int = 64
    learning_rate: float = 1e-3
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


@dataclass
class TrainConfig:
    policy: NetConfig = field(default_factory=lambda: NetConfig((128, 128), epochs=300, learning_rate=3e-3))
    dynamics: NetConfig = field(default_factory=lambda: NetConfig((128, 128, 128, 128), epochs=80))
    dae: NetConfig = field(default_factory=lambda: NetConfig((8, 8), epochs=150))
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("policy", "dynamics", "dae"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, NetConfig(**v))
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.policy, self.dynamics, self.dae, self.noise_sigma, int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("policy", "dynamics", "dae"):
            d[name]["hidden"] = list(d[name]["hidden"])
        return d


@dataclass(frozen=True)
class PolicyModel:
    params: MlpParams
    norm: NormStats


@dataclass(frozen=True)
class DynamicsModel:
    params: MlpParams
    norm: NormStats


@dataclass(frozen=True)
class DaeModel:
    params: MlpParams
    norm: NormStats
    noise_sigma: float = 0.1


@dataclass(frozen=True)
class ModelBundle:
    policy: PolicyModel
    dynamics: DynamicsModel
    dae: DaeModel


def _fit(cfg: NetConfig, x, y, seed: int, stream: int, what: str, input_noise: float = 0.0) -> MlpParams:
    rng = make_rng(seed, stream)
    params = init_mlp([x.shape[1], *cfg.hidden, y.shape[1]], rng, cfg.activation)
    try:
        res = fit_mlp(params, x, y, rng, cfg.epochs, cfg.batch_size, cfg.learning_rate, input_noise)
    except NumericError as exc:
        raise NumericError(f"{what} training failed on {x.shape[0]} rows: {exc}") from exc
    return res.params


def train_policy(dataset: DemoDataset, cfg: TrainConfig, norm: NormStats | None = None) -> PolicyModel:
    norm = norm or fit_norm(dataset)
    s, a, _ = dataset.transitions()
    params = _fit(cfg.policy, norm.norm_obs(s), norm.norm_act(a), cfg.seed, _POLICY_STREAM, "policy")
    return PolicyModel(params, norm)


def train_dynamics(dataset: DemoDataset, cfg: TrainConfig, norm: NormStats | None = None) -> DynamicsModel:
    norm = norm or fit_norm(dataset)
    s, a, s2 = dataset.transitions()
    x = np.hstack([norm.norm_obs(s), norm.norm_act(a)])
    params = _fit(cfg.dynamics, x, norm.norm_delta(s2 - s), cfg.seed, _DYN_STREAM, "dynamics")
    return DynamicsModel(params, norm)


def train_dae(dataset: DemoDataset, cfg: TrainConfig, norm: NormStats | None = None) -> DaeModel:
    norm = norm or fit_norm(dataset)
    z = norm.norm_obs(dataset.observations())
    params = _fit(cfg.dae, z, z, cfg.seed, _DAE_STREAM, "dae", input_noise=cfg.noise_sigma)
    return DaeModel(params, norm, cfg.noise_sigma)


def train_all(dataset: DemoDataset, cfg: TrainConfig) -> ModelBundle:
    norm = fit_norm(dataset)
    return ModelBundle(
        train_policy(dataset, cfg, norm),
        train_dynamics(dataset, cfg, norm),
        train_dae(dataset, cfg, norm),
    )


def _check_width(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width or x.ndim not in (1, 2):
        raise ShapeError(f"{what}: expected width {width}, got shape {x.shape}")
    return x


def policy_action(model: PolicyModel, state) -> np.ndarray:
    """Raw (unclamped) policy output for one state or a batch."""
    s = _check_width(state, model.params.input_dim, "policy input")
    return model.norm.denorm_act(mlp_forward(model.params, model.norm.norm_obs(s)))


def predict_delta(model: DynamicsModel, state, action) -> np.ndarray:
    s = _check_width(state, model.norm.obs_mean.size, "dynamics state")
    a = _check_width(action, model.norm.act_mean.size, "dynamics action")
    x = np.concatenate([model.norm.norm_obs(s), model.norm.norm_act(a)], axis=-1)
    return model.norm.denorm_delta(mlp_forward(model.params, x))


def predict_next(model: DynamicsModel, state, action) -> np.ndarray:
    return np.asarray(state, dtype=np.float64) + predict_delta(model, state, action)


def dae_error(model: DaeModel, state) -> np.ndarray | float:
    """Squared reconstruction error of the clean input in normalised space.

    Returns a float for a single state and an array for a batch.
    """
    s = _check_width(state, model.params.input_dim, "dae input")
    z = model.norm.norm_obs(s)
    r = mlp_forward(model.params, z) - z
    e = np.sum(r * r, axis=-1)
    return float(e) if s.ndim == 1 else e


def bundle_to_dict(b: ModelBundle) -> dict:
    return {
        "format": "imitlab.models",
        "version": 1,
        "norm": b.policy.norm.to_dict(),
        "policy": b.policy.params.to_dict(),
        "dynamics": b.dynamics.params.to_dict(),
        "dae": b.dae.params.to_dict(),
        "noise_sigma": b.dae.noise_sigma,
    }


def bundle_from_dict(d: dict) -> ModelBundle:
    if d.get("format") != "imitlab.models" or d.get("version") != 1:
        raise ValueError("not a version-1 model checkpoint")
    norm = NormStats.from_dict(d["norm"])
    return ModelBundle(
        PolicyModel(MlpParams.from_dict(d["policy"]), norm),
        DynamicsModel(MlpParams.from_dict(d["dynamics"]), norm),
        DaeModel(MlpParams.from_dict(d["dae"]), norm, float(d["noise_sigma"])),
    )
