"""Extreme-learning-machine parameterization of unknown discrete dynamics.

The model maps an input s = [x, e, 1] (state, error, constant) through a
fixed random hidden layer with sigmoid activations; only the output
weights are trained.  Hidden-layer slopes and biases come from a batch
intrinsic plasticity fit so that no neuron is constant or saturated on
the training inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .jsonio import dumps_canonical

logger = logging.getLogger(__name__)

_BIP_TARGET_LOW = 0.05
_BIP_TARGET_HIGH = 0.95
_BIP_MIN_SPREAD = 0.1
_BIP_MAX_RETRIES = 50


class InitializationError(RuntimeError):
    """Hidden-layer initialization could not produce usable neurons."""


@dataclass(frozen=True)
class ElmDims:
    """Dimensions of the network: state n, error/input m, hidden neurons n_h."""

    n: int
    m: int
    n_h: int

    def __post_init__(self):
        for name in ("n", "m", "n_h"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"ElmDims.{name} must be strictly positive")

    @property
    def input_len(self) -> int:
        return self.n + self.m + 1

    @property
    def feature_len(self) -> int:
        return self.n_h + 1


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Per-component standard deviation of the model reconstruction error."""

    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class ElmModel:
    """Immutable network parameters.

    input_weights has shape (n+m, n_h), slopes/biases length n_h, and
    output_weights shape (n_h+1, n).  The Frobenius norms of the weight
    matrices are expected to stay below the declared bounds; the output
    bound is checked softly (logged, not fatal) because the training
    program does not enforce it.
    """

    dims: ElmDims
    input_weights: np.ndarray
    slopes: np.ndarray
    biases: np.ndarray
    output_weights: np.ndarray
    weight_bound_in: float
    weight_bound_out: float

    def __post_init__(self):
        n, m, n_h = self.dims.n, self.dims.m, self.dims.n_h
        arrays = {
            "input_weights": (self.input_weights, (n + m, n_h)),
            "slopes": (self.slopes, (n_h,)),
            "biases": (self.biases, (n_h,)),
            "output_weights": (self.output_weights, (n_h + 1, n)),
        }
        for name, (arr, shape) in arrays.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=float))
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.weight_bound_in <= 0 or self.weight_bound_out <= 0:
            raise ValueError("weight bounds must be positive")
        if np.linalg.norm(self.input_weights) > self.weight_bound_in * (1 + 1e-12):
            raise ValueError("input_weights exceed weight_bound_in")
        w_norm = float(np.linalg.norm(self.output_weights))
        if w_norm > self.weight_bound_out:
            logger.warning(
                "output weight norm %.6g exceeds declared bound %.6g",
                w_norm,
                self.weight_bound_out,
            )

    def with_output_weights(self, output_weights: np.ndarray) -> "ElmModel":
        """Copy of the model with new output weights."""
        return ElmModel(
            dims=self.dims,
            input_weights=self.input_weights,
            slopes=self.slopes,
            biases=self.biases,
            output_weights=output_weights,
            weight_bound_in=self.weight_bound_in,
            weight_bound_out=self.weight_bound_out,
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Branch form: never exponentiates a positive argument, so it is
    # overflow-free for any float input.
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logit(t: np.ndarray) -> np.ndarray:
    return np.log(t / (1.0 - t))


def build_input(state: np.ndarray, error: np.ndarray) -> np.ndarray:
    """Concatenate state and error with the trailing constant 1."""
    state = np.asarray(state, dtype=float).ravel()
    error = np.asarray(error, dtype=float).ravel()
    return np.concatenate([state, error, [1.0]])


def build_inputs(states: np.ndarray, equilibrium: np.ndarray) -> np.ndarray:
    """Stack inputs [x, x - equilibrium, 1] for a batch of states (N, n)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    eq = np.asarray(equilibrium, dtype=float).ravel()
    if states.shape[1] != eq.size:
        raise ValueError("state dimension does not match equilibrium")
    ones = np.ones((states.shape[0], 1))
    return np.hstack([states, states - eq[None, :], ones])


def _check_input(model: ElmModel, inp: np.ndarray) -> np.ndarray:
    inp = np.asarray(inp, dtype=float).ravel()
    if inp.size != model.dims.input_len:
        raise ValueError(
            f"input length {inp.size} does not match expected {model.dims.input_len}"
        )
    if inp[-1] != 1.0:
        raise ValueError("trailing input element must be exactly 1")
    return inp


def feature_map(model: ElmModel, inp: np.ndarray) -> np.ndarray:
    """Hidden-layer activations for one input, with the constant 1 appended.

    Each activation is sigmoid(slope_p * (U^T z)_p + bias_p) for
    z = [state, error]; the result has length n_h + 1 and Euclidean norm
    at most sqrt(n_h + 1).
    """
    inp = _check_input(model, inp)
    z = inp[:-1]
    pre = model.slopes * (model.input_weights.T @ z) + model.biases
    return np.append(_sigmoid(pre), 1.0)


def features_from_inputs(model: ElmModel, inputs: np.ndarray) -> np.ndarray:
    """Feature vectors for a batch of ready-made inputs, shape (N, n_h + 1)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != model.dims.input_len:
        raise ValueError(
            f"inputs must have width {model.dims.input_len}, got {inputs.shape[1]}"
        )
    raw = inputs[:, :-1] @ model.input_weights
    acts = _sigmoid(raw * model.slopes[None, :] + model.biases[None, :])
    return np.hstack([acts, np.ones((acts.shape[0], 1))])


def feature_matrix(
    model: ElmModel, states: np.ndarray, equilibrium: np.ndarray
) -> np.ndarray:
    """Feature vectors for a batch of states, shape (N, n_h + 1)."""
    if model.dims.m != model.dims.n:
        raise ValueError("batch features require error dimension == state dimension")
    return features_from_inputs(model, build_inputs(states, equilibrium))


def predict_mean(model: ElmModel, inp: np.ndarray) -> np.ndarray:
    """Noise-free next state W^T g(s)."""
    return model.output_weights.T @ feature_map(model, inp)


def predict_stochastic(
    model: ElmModel, inp: np.ndarray, noise: NoiseSpec, seed
) -> np.ndarray:
    """Next state with an additive N(0, sigma^2 I) draw; reproducible per seed."""
    mean = predict_mean(model, inp)
    if noise.sigma == 0.0:
        return mean
    rng = np.random.default_rng(seed)
    return mean + noise.sigma * rng.standard_normal(model.dims.n)


def bip_initialize(
    dims: ElmDims, training_inputs: np.ndarray, seed
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw input weights and fit per-neuron slopes/biases on training data.

    Input weights are uniform on [-1, 1].  For each neuron, the raw
    projections of the training inputs are least-squares matched, through
    the inverse sigmoid, to sorted targets drawn uniformly from
    (0.05, 0.95), which spreads every neuron's activations over the data.
    Neurons whose activation range stays below 0.1 are redrawn a bounded
    number of times; degenerate (constant) inputs therefore fail loudly.

    Returns (input_weights, slopes, biases); a pure function of
    (training_inputs, seed).
    """
    inputs = np.atleast_2d(np.asarray(training_inputs, dtype=float))
    if inputs.shape[1] != dims.input_len:
        raise ValueError(
            f"training inputs must have length {dims.input_len}, got {inputs.shape[1]}"
        )
    if inputs.shape[0] < dims.n_h:
        raise ValueError(
            f"need at least n_h={dims.n_h} training inputs, got {inputs.shape[0]}"
        )
    z = inputs[:, :-1]
    rng = np.random.default_rng(seed)
    input_weights = rng.uniform(-1.0, 1.0, size=(dims.n + dims.m, dims.n_h))
    slopes = np.empty(dims.n_h)
    biases = np.empty(dims.n_h)
    for p in range(dims.n_h):
        ok = False
        for _ in range(_BIP_MAX_RETRIES):
            raw = z @ input_weights[:, p]
            if np.ptp(raw) > 1e-12:
                targets = np.sort(
                    rng.uniform(_BIP_TARGET_LOW, _BIP_TARGET_HIGH, size=raw.size)
                )
                design = np.column_stack([np.sort(raw), np.ones_like(raw)])
                coef, *_ = np.linalg.lstsq(design, _logit(targets), rcond=None)
                acts = _sigmoid(coef[0] * raw + coef[1])
                if np.ptp(acts) >= _BIP_MIN_SPREAD:
                    slopes[p], biases[p] = coef
                    ok = True
                    break
            input_weights[:, p] = rng.uniform(-1.0, 1.0, size=dims.n + dims.m)
        if not ok:
            raise InitializationError(
                f"neuron {p}: activations stay within a {_BIP_MIN_SPREAD} band on the "
                "training inputs (inputs may be constant or near-constant)"
            )
    return input_weights, slopes, biases


def initialize_model(
    dims: ElmDims, training_inputs: np.ndarray, seed, weight_bound_out: float = 10.0
) -> ElmModel:
    """BIP-initialized model with zero output weights.

    The input weight bound is set to the realized Frobenius norm so the
    boundedness assumption holds by construction.
    """
    input_weights, slopes, biases = bip_initialize(dims, training_inputs, seed)
    return ElmModel(
        dims=dims,
        input_weights=input_weights,
        slopes=slopes,
        biases=biases,
        output_weights=np.zeros((dims.n_h + 1, dims.n)),
        weight_bound_in=float(np.linalg.norm(input_weights)),
        weight_bound_out=float(weight_bound_out),
    )


def lipschitz_feature_bound(model: ElmModel) -> float:
    """Feature-map Lipschitz factor a_bar * U_bar * sqrt(n_h) / (2 sqrt(2)).

    a_bar is the Frobenius norm of diag(slopes) and U_bar the declared
    input weight bound.
    """
    a_bar = float(np.linalg.norm(model.slopes))
    return a_bar * model.weight_bound_in * np.sqrt(model.dims.n_h) / (2.0 * np.sqrt(2.0))


def save_model(path, model: ElmModel, sigma: float) -> None:
    """Write the model and its noise scale as one JSON document.

    Floats carry 17 significant digits so a load round-trips bit-exactly.
    """
    doc = {
        "dims": {"n": model.dims.n, "m": model.dims.m, "n_h": model.dims.n_h},
        "input_weights": model.input_weights.tolist(),
        "slopes": model.slopes.tolist(),
        "biases": model.biases.tolist(),
        "output_weights": model.output_weights.tolist(),
        "weight_bound_in": model.weight_bound_in,
        "weight_bound_out": model.weight_bound_out,
        "sigma": float(sigma),
    }
    with open(path, "w") as f:
        f.write(dumps_canonical(doc))
        f.write("\n")


def load_model(path) -> tuple[ElmModel, float]:
    """Read a model JSON written by save_model; returns (model, sigma)."""
    with open(path) as f:
        doc = json.load(f)
    dims = ElmDims(**doc["dims"])
    model = ElmModel(
        dims=dims,
        input_weights=np.asarray(doc["input_weights"], dtype=float),
        slopes=np.asarray(doc["slopes"], dtype=float),
        biases=np.asarray(doc["biases"], dtype=float),
        output_weights=np.asarray(doc["output_weights"], dtype=float),
        weight_bound_in=float(doc["weight_bound_in"]),
        weight_bound_out=float(doc["weight_bound_out"]),
    )
    return model, float(doc["sigma"])
