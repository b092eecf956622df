"""Prediction and surrogate-loss networks over flat parameter buffers.

Each net owns one contiguous float buffer for parameters and one for
gradients; every named block is a numpy view into those buffers, so the
optimizer and the clipper work on whole networks with a handful of
vectorized ops.  Forward passes come in two flavors: an on-tape training
pass that records backward closures, and a pure-numpy eval pass used for
scoring and for the frozen-prediction phase of bilevel training.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    Value,
    affine_const,
    batchnorm,
    compensated_colmean,
    dense,
    dropout,
    leaky_relu,
    mean_pool_rows,
    mul,
    reshape,
    stack_columns,
)

__all__ = [
    "ParamBlock",
    "ParameterBundle",
    "PredictionNet",
    "SurrogateNet",
    "ToyAffineModel",
    "init_params",
    "predict",
    "surrogate_loss",
    "AdamState",
    "adam_step",
    "clip_gradients",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


@dataclass(frozen=True)
class ParamBlock:
    name: str
    start: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self):
        return self.start + self.size


class ParameterBundle:
    """Named parameter blocks viewing one flat buffer pair."""

    def __init__(self, block_specs, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.blocks = []
        offset = 0
        for name, shape in block_specs:
            shape = tuple(shape)
            block = ParamBlock(name=name, start=offset, shape=shape)
            self.blocks.append(block)
            offset += block.size
        self.flat = np.zeros(offset, dtype=self.dtype)
        self.flat_grad = np.zeros(offset, dtype=self.dtype)
        self.params = {}
        for block in self.blocks:
            data = self.flat[block.start : block.stop].reshape(block.shape)
            grad = self.flat_grad[block.start : block.stop].reshape(block.shape)
            self.params[block.name] = Value(data, grad=grad)

    @property
    def n_params(self):
        return self.flat.size

    def param(self, name):
        return self.params[name]

    def zero_grad(self):
        self.flat_grad[...] = 0.0

    def parameters(self):
        return [self.params[b.name] for b in self.blocks]


def _leaky(x, slope):
    return np.where(x >= 0, x, slope * x)


def _init_dense_blocks(net, rng):
    # Kaiming fan-in normal scaled for the leaky rectifier; zero biases;
    # batchnorm starts as the identity map.
    gain = np.sqrt(2.0 / (1.0 + net.slope**2))
    for block in net.blocks:
        value = net.params[block.name]
        if block.name.endswith(".weight"):
            fan_in = block.shape[0]
            std = gain / np.sqrt(fan_in)
            value.data[...] = rng.normal(0.0, std, size=block.shape)
        elif block.name.endswith(".bn_scale"):
            value.data[...] = 1.0
        else:  # biases and bn_shift
            value.data[...] = 0.0


class PredictionNet(ParameterBundle):
    """Score model: dense -> batchnorm -> leaky ReLU -> dropout per hidden
    layer, then a raw linear output.  Train mode differentiates through the
    batch statistics; eval mode applies running statistics and no dropout.
    """

    kind = "prediction"

    def __init__(
        self,
        in_features,
        hidden=(100, 30, 10),
        slope=0.01,
        dropout_rate=0.2,
        bn_eps=1e-5,
        bn_momentum=0.9,
        dtype=np.float64,
    ):
        if in_features < 1:
            raise ValueError(f"in_features must be positive, got {in_features}")
        self.in_features = int(in_features)
        self.hidden = tuple(int(h) for h in hidden)
        self.slope = float(slope)
        self.dropout_rate = float(dropout_rate)
        specs = []
        fan_in = self.in_features
        for i, width in enumerate(self.hidden):
            specs.append((f"layer{i}.weight", (fan_in, width)))
            specs.append((f"layer{i}.bias", (width,)))
            specs.append((f"layer{i}.bn_scale", (width,)))
            specs.append((f"layer{i}.bn_shift", (width,)))
            fan_in = width
        specs.append(("output.weight", (fan_in, 1)))
        specs.append(("output.bias", (1,)))
        super().__init__(specs, dtype=dtype)
        self.bn_states = [
            BatchNormState(w, eps=bn_eps, momentum=bn_momentum, dtype=self.dtype)
            for w in self.hidden
        ]

    @property
    def widths(self):
        return [self.in_features, *self.hidden, 1]

    def config_dict(self):
        return {
            "in_features": self.in_features,
            "hidden": list(self.hidden),
            "slope": self.slope,
            "dropout_rate": self.dropout_rate,
            "bn_eps": self.bn_states[0].eps,
            "bn_momentum": self.bn_states[0].momentum,
        }

    def state_arrays(self):
        out = []
        for i, st in enumerate(self.bn_states):
            out.append((f"layer{i}.running_mean", st.running_mean))
            out.append((f"layer{i}.running_var", st.running_var))
        return out

    def init(self, rng):
        _init_dense_blocks(self, rng)
        for st in self.bn_states:
            st.running_mean[...] = 0.0
            st.running_var[...] = 1.0

    def forward(self, tape, x, mode="train", rng=None):
        """On-tape forward returning the (N,) score Value."""
        h = np.asarray(x, dtype=self.dtype)
        out = h
        for i in range(len(self.hidden)):
            out = dense(tape, out, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"])
            out = batchnorm(
                tape,
                out,
                self.params[f"layer{i}.bn_scale"],
                self.params[f"layer{i}.bn_shift"],
                self.bn_states[i],
                mode,
            )
            out = leaky_relu(tape, out, self.slope)
            out = dropout(tape, out, self.dropout_rate, mode, rng)
        out = dense(tape, out, self.params["output.weight"], self.params["output.bias"])
        return reshape(tape, out, (-1,))

    def forward_eval(self, x):
        """Pure-numpy eval scores: running-stat batchnorm, no dropout."""
        h = np.asarray(x, dtype=self.dtype)
        for i in range(len(self.hidden)):
            h = h @ self.params[f"layer{i}.weight"].data + self.params[f"layer{i}.bias"].data
            st = self.bn_states[i]
            k = self.params[f"layer{i}.bn_scale"].data / np.sqrt(st.running_var + st.eps)
            h = h * k + (self.params[f"layer{i}.bn_shift"].data - st.running_mean * k)
            h = _leaky(h, self.slope)
        h = h @ self.params["output.weight"].data + self.params["output.bias"].data
        return h.ravel()


class SurrogateNet(ParameterBundle):
    """Set-invariant loss model: ghat((1/N) sum g(y_i, s_i)).

    g maps each (label, score) pair through dense/leaky layers; the row
    embeddings are mean-pooled (order-robust compensated summation) and a
    second dense/leaky stack h reduces the pooled vector to one scalar.
    No batchnorm, no dropout, unconstrained output.
    """

    kind = "surrogate"

    def __init__(self, g_hidden=(30, 30), h_hidden=(10, 10), slope=0.01, dtype=np.float64):
        self.g_hidden = tuple(int(h) for h in g_hidden)
        self.h_hidden = tuple(int(h) for h in h_hidden)
        self.slope = float(slope)
        specs = []
        fan_in = 2
        for i, width in enumerate(self.g_hidden):
            specs.append((f"g{i}.weight", (fan_in, width)))
            specs.append((f"g{i}.bias", (width,)))
            fan_in = width
        for i, width in enumerate(self.h_hidden):
            specs.append((f"h{i}.weight", (fan_in, width)))
            specs.append((f"h{i}.bias", (width,)))
            fan_in = width
        specs.append(("h_out.weight", (fan_in, 1)))
        specs.append(("h_out.bias", (1,)))
        super().__init__(specs, dtype=dtype)

    @property
    def widths(self):
        return [2, *self.g_hidden, *self.h_hidden, 1]

    def config_dict(self):
        return {
            "g_hidden": list(self.g_hidden),
            "h_hidden": list(self.h_hidden),
            "slope": self.slope,
        }

    def state_arrays(self):
        return []

    def init(self, rng):
        _init_dense_blocks(self, rng)

    def forward(self, tape, y, scores):
        """On-tape surrogate loss Value for targets y and score Value/array."""
        y = np.asarray(y, dtype=self.dtype)
        out = stack_columns(tape, [y, scores])
        for i in range(len(self.g_hidden)):
            out = dense(tape, out, self.params[f"g{i}.weight"], self.params[f"g{i}.bias"])
            out = leaky_relu(tape, out, self.slope)
        pooled = mean_pool_rows(tape, out)
        out = reshape(tape, pooled, (1, -1))
        for i in range(len(self.h_hidden)):
            out = dense(tape, out, self.params[f"h{i}.weight"], self.params[f"h{i}.bias"])
            out = leaky_relu(tape, out, self.slope)
        out = dense(tape, out, self.params["h_out.weight"], self.params["h_out.bias"])
        return reshape(tape, out, ())

    def forward_eval(self, y, scores):
        """Pure-numpy surrogate loss for constant targets and scores."""
        y = np.asarray(y, dtype=self.dtype)
        scores = np.asarray(scores, dtype=self.dtype)
        h = np.column_stack([y, scores])
        for i in range(len(self.g_hidden)):
            h = h @ self.params[f"g{i}.weight"].data + self.params[f"g{i}.bias"].data
            h = _leaky(h, self.slope)
        h = compensated_colmean(h)[None, :]
        for i in range(len(self.h_hidden)):
            h = h @ self.params[f"h{i}.weight"].data + self.params[f"h{i}.bias"].data
            h = _leaky(h, self.slope)
        h = h @ self.params["h_out.weight"].data + self.params["h_out.bias"].data
        return float(h[0, 0])


class ToyAffineModel(ParameterBundle):
    """One-parameter score model s(x) = alpha * x - 1 on a single feature."""

    kind = "toy-affine"

    def __init__(self, alpha0=0.3, dtype=np.float64):
        self.alpha0 = float(alpha0)
        super().__init__([("alpha", ())], dtype=dtype)
        self.params["alpha"].data[...] = self.alpha0

    @property
    def widths(self):
        return [1, 1]

    def config_dict(self):
        return {"alpha0": self.alpha0}

    def state_arrays(self):
        return []

    def init(self, rng):
        self.params["alpha"].data[...] = self.alpha0

    @property
    def alpha(self):
        return float(self.params["alpha"].data)

    def forward(self, tape, x, mode="train", rng=None):
        x = np.asarray(x, dtype=self.dtype).reshape(-1)
        scaled = mul(tape, self.params["alpha"], x)
        return affine_const(tape, scaled, 1.0, -1.0)

    def forward_eval(self, x):
        x = np.asarray(x, dtype=self.dtype).reshape(-1)
        return self.alpha * x - 1.0


def init_params(net, rng):
    """Initialize a net's parameters (and any running stats) in place."""
    net.init(rng)


def predict(net, x, mode="eval", rng=None, tape=None):
    """Scores for feature rows x as a length-N Value.

    Train mode records the forward pass on the tape (rng drives dropout);
    eval mode runs the detached numpy path and wraps the result.
    """
    if mode == "train":
        if tape is None:
            raise ValueError("predict train mode requires a tape")
        return net.forward(tape, x, mode="train", rng=rng)
    if mode != "eval":
        raise ValueError(f"predict mode must be 'train' or 'eval', got {mode!r}")
    return Value(net.forward_eval(x))


def surrogate_loss(net, y, scores, tape=None):
    """Surrogate loss for a labeled score set.

    With a tape, returns a scalar Value whose gradient reaches both the
    surrogate parameters and (when scores is a Value) the scores.  Without
    a tape, returns a float from the detached eval path.
    """
    if tape is not None:
        return net.forward(tape, y, scores)
    scores_data = scores.data if isinstance(scores, Value) else scores
    return net.forward_eval(y, scores_data)


class AdamState:
    """Adam moment buffers for one flat parameter vector."""

    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)


def _block_of(blocks, index):
    for block in blocks:
        if block.start <= index < block.stop:
            return block.name
    return f"offset {index}"


def adam_step(state, params, grads, blocks=None):
    """One in-place Adam update of the flat params from the flat grads.

    Non-finite gradients abort with an error naming the parameter block.
    """
    if not np.isfinite(grads).all():
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        where = _block_of(blocks, bad) if blocks else f"offset {bad}"
        raise FloatingPointError(f"non-finite gradient in parameter block {where}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grads)
    mhat = state.m / (1.0 - b1**state.t)
    vhat = state.v / (1.0 - b2**state.t)
    params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def clip_gradients(grads, max_norm):
    """Scale the flat gradient vector to global L2 norm <= max_norm.

    Returns the pre-clip norm.  Gradients already within the bound are left
    bitwise untouched.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.sqrt(grads @ grads))
    if norm > max_norm:
        grads *= max_norm / norm
    return norm


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoint files."""


_MAGIC = "lossnets-checkpoint"
_KINDS = {"prediction": PredictionNet, "surrogate": SurrogateNet, "toy-affine": ToyAffineModel}


def save_checkpoint(net, path, seed=None):
    """Write net parameters and running stats to path.

    Layout: one JSON header line (kind, widths, config, parameter count,
    seed, block table), then raw little-endian float64 blocks in declaration
    order followed by the state arrays.  Round-trips bitwise.
    """
    header = {
        "format": _MAGIC,
        "version": 1,
        "kind": net.kind,
        "widths": net.widths,
        "config": net.config_dict(),
        "param_count": int(net.n_params),
        "seed": seed,
        "blocks": [[b.name, list(b.shape)] for b in net.blocks],
        "state_blocks": [[name, list(arr.shape)] for name, arr in net.state_arrays()],
    }
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    buf.write(np.ascontiguousarray(net.flat, dtype="<f8").tobytes())
    for _, arr in net.state_arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint back into a fresh net; returns (net, header)."""
    with open(path, "rb") as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != _MAGIC or header.get("version") != 1:
        raise CheckpointError(f"{path}: not a version-1 {_MAGIC} file")
    kind = header.get("kind")
    if kind not in _KINDS:
        raise CheckpointError(f"{path}: unknown net kind {kind!r}")
    net = _KINDS[kind](**header["config"])
    body = raw[newline + 1 :]
    state_arrays = net.state_arrays()
    n_state = sum(arr.size for _, arr in state_arrays)
    expected = 8 * (net.n_params + n_state)
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} payload bytes, found {len(body)}"
        )
    if header["param_count"] != net.n_params:
        raise CheckpointError(
            f"{path}: header parameter count {header['param_count']} "
            f"does not match architecture ({net.n_params})"
        )
    flat = np.frombuffer(body[: 8 * net.n_params], dtype="<f8")
    net.flat[...] = flat.astype(net.dtype)
    offset = 8 * net.n_params
    for _, arr in state_arrays:
        nbytes = 8 * arr.size
        arr[...] = np.frombuffer(body[offset : offset + nbytes], dtype="<f8").reshape(arr.shape)
        offset += nbytes
    return net, header
