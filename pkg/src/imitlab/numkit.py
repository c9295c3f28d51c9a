"""Dense MLP core: forward/backward passes, Adam, seeded RNG streams, gradcheck.

Everything runs in float64. Parameters are plain numpy arrays wrapped in
small dataclasses; every update returns new objects so that callers can keep
old parameter snapshots around without copying.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
SERIAL_FORMAT = "imitlab.mlp"
SERIAL_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional stream path.

    ``make_rng(7, 2, 1)`` and ``make_rng(7, 2, 3)`` are independent streams;
    the same arguments always give the same stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ShapeError(f"layer dims must be positive, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ShapeError("layers, weights and biases must have equal length")
        for k, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if w.shape != (spec.output_dim, spec.input_dim) or b.shape != (spec.output_dim,):
                raise ShapeError(f"layer {k}: parameter shapes {w.shape}/{b.shape} do not match {spec}")
            if k > 0 and self.layers[k - 1].output_dim != spec.input_dim:
                raise ShapeError(f"layer {k} input_dim does not chain with layer {k - 1}")
        if self.layers[-1].activation != "identity":
            raise ValueError("the output layer must be linear (identity activation)")
        if not self.is_finite():
            raise NumericError("parameters contain non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(self.layers), list(arrays[0::2]), list(arrays[1::2]))

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "layers": [
                {"input_dim": s.input_dim, "output_dim": s.output_dim, "activation": s.activation}
                for s in self.layers
            ],
            "weights": [w.reshape(-1).tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpParams":
        if data.get("format") != SERIAL_FORMAT:
            raise ValueError(f"not an MLP checkpoint: format={data.get('format')!r}")
        if data.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        layers = [LayerSpec(**d) for d in data["layers"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(s.output_dim, s.input_dim)
            for s, w in zip(layers, data["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        return cls(layers, weights, biases)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "MlpParams":
        return cls.from_dict(json.loads(text))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] < 1:
            raise ShapeError("empty batch")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(
                f"inputs have {self.inputs.shape[0]} rows but targets have {self.targets.shape[0]}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class AdamState:
    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, **hyper) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, **hyper)


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> MlpParams:
    """Glorot-uniform weights, zero biases; the last layer is linear.

    ``sizes`` lists every width from input to output, e.g. ``[6, 128, 128, 2]``.
    """
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    layers, weights, biases = [], [], []
    n = len(sizes) - 1
    for k in range(n):
        fan_in, fan_out = int(sizes[k]), int(sizes[k + 1])
        act = activation if k < n - 1 else "identity"
        layers.append(LayerSpec(fan_in, fan_out, act))
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(layers, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim or x.ndim not in (1, 2):
        raise ShapeError(f"expected input of width {params.input_dim}, got shape {x.shape}")
    h = x
    for spec, w, b in zip(params.layers, params.weights, params.biases):
        h = _activate(h @ w.T + b, spec.activation)
    return h


def _forward_cache(params: MlpParams, x: np.ndarray):
    pre, post = [], [x]
    h = x
    for spec, w, b in zip(params.layers, params.weights, params.biases):
        z = h @ w.T + b
        h = _activate(z, spec.activation)
        pre.append(z)
        post.append(h)
    return pre, post


def _backprop(params: MlpParams, pre, post, g: np.ndarray) -> MlpParams:
    """Push ``g = dL/d(output)`` back through the cached forward pass."""
    gw: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        g = g * _activation_grad(pre[k], post[k + 1], params.layers[k].activation)
        gw[k] = g.T @ post[k]
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = g @ params.weights[k]
    # the constructor rejects non-finite entries
    return MlpParams(list(params.layers), gw, gb)


def _check_batch(params: MlpParams, batch: Batch) -> None:
    if batch.inputs.shape[1] != params.input_dim or batch.targets.shape[1] != params.output_dim:
        raise ShapeError(
            f"batch {batch.inputs.shape}->{batch.targets.shape} does not fit network "
            f"{params.input_dim}->{params.output_dim}"
        )


def mlp_backward(params: MlpParams, batch: Batch) -> tuple[MlpParams, float]:
    """Gradient of ``mean_n ||f(x_n) - t_n||^2`` with respect to every parameter."""
    _check_batch(params, batch)
    n = len(batch)
    pre, post = _forward_cache(params, batch.inputs)
    resid = post[-1] - batch.targets
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in backward pass")
    return _backprop(params, pre, post, (2.0 / n) * resid), loss


def mlp_backward_logistic(params: MlpParams, batch: Batch) -> tuple[MlpParams, float]:
    """Mean binary cross-entropy with the network output read as a logit.

    Targets are 0/1 labels; summed over output units, averaged over rows.
    """
    _check_batch(params, batch)
    n = len(batch)
    pre, post = _forward_cache(params, batch.inputs)
    z, t = post[-1], batch.targets
    loss = float(np.sum(np.logaddexp(0.0, z) - t * z) / n)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in backward pass")
    return _backprop(params, pre, post, (sigmoid(z) - t) / n), loss


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mse_loss(params: MlpParams, batch: Batch) -> float:
    r = mlp_forward(params, batch.inputs) - batch.targets
    return float(np.sum(r * r) / len(batch))


def adam_step(params: MlpParams, grad: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    p_arr, g_arr = params.arrays(), grad.arrays()
    m_arr, v_arr = state.first_moment.arrays(), state.second_moment.arrays()
    if [a.shape for a in p_arr] != [a.shape for a in g_arr] or [a.shape for a in p_arr] != [
        a.shape for a in m_arr
    ]:
        raise ShapeError("params, gradient and Adam moments must share shapes")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, m_arr, v_arr):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        params.with_arrays(new_m),
        params.with_arrays(new_v),
        t,
        state.learning_rate,
        b1,
        b2,
        state.epsilon,
    )
    return params.with_arrays(new_p), new_state


def gradcheck(params: MlpParams, batch: Batch, epsilon: float = 1e-5, abs_floor: float = 1e-7) -> float:
    """Worst per-parameter discrepancy between backprop and central differences.

    Relative error is used where either gradient exceeds ``abs_floor`` in
    magnitude; below that the absolute difference is reported instead.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    analytic, _ = mlp_backward(params, batch)
    worst = 0.0
    arrays = [a.copy() for a in params.arrays()]
    for idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        g_flat = analytic.arrays()[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = mse_loss(params.with_arrays(arrays), batch)
            flat[j] = orig - epsilon
            down = mse_loss(params.with_arrays(arrays), batch)
            flat[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = g_flat[j]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) / scale if scale > abs_floor else abs(a - numeric)
            worst = max(worst, err)
    return worst


@dataclass
class FitResult:
    params: MlpParams
    losses: list[float] = field(default_factory=list)


def fit_mlp(
    params: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    epochs: int,
    batch_size: int,
    learning_rate: float = 1e-3,
    input_noise: float = 0.0,
    loss: str = "mse",
) -> FitResult:
    """Minibatch Adam on the MSE objective.

    With ``input_noise > 0`` every presentation of a row is corrupted with
    fresh isotropic Gaussian noise (targets stay clean), which is how the
    denoising autoencoder is trained. ``loss="logistic"`` trains a binary
    classifier on 0/1 targets instead.
    """
    backward = {"mse": mlp_backward, "logistic": mlp_backward_logistic}[loss]
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = inputs.shape[0]
    if n == 0:
        raise ShapeError("cannot fit on an empty dataset")
    state = AdamState.fresh(params, learning_rate=learning_rate)
    losses = []
    bs = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            x = inputs[idx]
            if input_noise > 0.0:
                x = x + input_noise * rng.standard_normal(x.shape)
            grad, batch_loss = backward(params, Batch(x, targets[idx]))
            params, state = adam_step(params, grad, state)
            total += batch_loss * len(idx)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise NumericError(f"training diverged (epoch loss {epoch_loss})")
        losses.append(epoch_loss)
    return FitResult(params, losses)
