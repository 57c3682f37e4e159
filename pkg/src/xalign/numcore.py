"""Dense numerics: seeded RNG, fully-connected networks and Adam.

Parameters of a network are kept in an ordered ``dict`` mapping block names
(``"0.weight"``, ``"0.bias"``, ``"1.weight"``...) to float64 arrays. Weights
have shape ``(out, in)`` so a layer computes ``x @ W.T + b`` on a batch of row
vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

Params = dict[str, np.ndarray]

ACTIVATIONS = ("relu",)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and an optional stream path.

    ``make_rng(s, 3)`` and ``make_rng(s, 4)`` are statistically independent,
    and both are reproducible across runs and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    dropout_rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dimensions must be positive, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "dropout_rate": self.dropout_rate,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpSpec:
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            dropout_rate=float(d.get("dropout_rate", 0.0)),
            activation=d.get("activation", "relu"),
        )


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{i}.weight"] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        params[f"{i}.bias"] = np.zeros(fan_out)
    return params


def zeros_like_params(params: Params) -> Params:
    return {name: np.zeros_like(p) for name, p in params.items()}


def check_params(spec: MlpSpec, params: Params) -> None:
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w = params.get(f"{i}.weight")
        b = params.get(f"{i}.bias")
        if w is None or b is None:
            raise ShapeError(f"missing parameters for layer {i}")
        if w.shape != (fan_out, fan_in):
            raise ShapeError(f"layer {i} weight has shape {w.shape}, expected {(fan_out, fan_in)}")
        if b.shape != (fan_out,):
            raise ShapeError(f"layer {i} bias has shape {b.shape}, expected {(fan_out,)}")


@dataclass
class MlpCache:
    """Activations retained by a forward pass for the backward pass."""

    spec: MlpSpec
    params: Params
    inputs: list[np.ndarray]  # input to each layer, post-dropout
    pre_activations: list[np.ndarray]  # hidden layers only
    masks: list[np.ndarray | None]  # scaled dropout masks per hidden layer
    squeeze: bool


def mlp_forward(
    spec: MlpSpec,
    params: Params,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, MlpCache]:
    """Run the network on a vector or a batch of row vectors.

    In ``train`` mode inverted dropout is applied after every hidden
    activation: units are kept with probability ``1 - p`` and scaled by
    ``1 / (1 - p)``. The output layer is never dropped.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected (*, {spec.input_dim})")
    use_dropout = mode == "train" and spec.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train mode with dropout needs an rng")

    inputs, pre, masks = [], [], []
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[f"{i}.weight"].T + params[f"{i}.bias"]
        if i == last:
            h = z
            break
        pre.append(z)
        h = np.maximum(z, 0.0)
        if use_dropout:
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    cache = MlpCache(spec, params, inputs, pre, masks, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray) -> tuple[Params, np.ndarray]:
    """Backpropagate ``upstream`` (dLoss/dOutput) through a cached forward pass.

    Returns parameter gradients keyed like the parameters, and the gradient
    with respect to the network input.
    """
    spec, params = cache.spec, cache.params
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    expected = (cache.inputs[0].shape[0], spec.output_dim)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient has shape {g.shape}, expected {expected}")

    grads: Params = {}
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            mask = cache.masks[i]
            if mask is not None:
                g = g * mask
            g = g * (cache.pre_activations[i] > 0.0)
        grads[f"{i}.weight"] = g.T @ cache.inputs[i]
        grads[f"{i}.bias"] = g.sum(axis=0)
        g = g @ params[f"{i}.weight"]
    ordered = {name: grads[name] for name in params if name in grads}
    return ordered, (g[0] if cache.squeeze else g)


@dataclass
class AdamState:
    lr: float
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, lr: float, **kw) -> AdamState:
        return cls(lr=lr, first_moment=zeros_like_params(params),
                   second_moment=zeros_like_params(params), **kw)


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if set(grads) != set(params):
        raise ShapeError("gradient blocks do not match parameter blocks")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params: Params = {}
    m_new: Params = {}
    v_new: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.first_moment.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.second_moment.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        new_params[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        m_new[name] = m
        v_new[name] = v
    new_state = AdamState(lr=state.lr, first_moment=m_new, second_moment=v_new,
                          step_count=t, beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state
