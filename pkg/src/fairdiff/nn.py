"""Fixed-topology dense networks with hand-written reverse mode.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
shape ``(n, fan_in)`` maps through ``x @ W + b``. Computation runs in the
parameter dtype; losses built on top reduce in float64.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "log_softmax")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise UsageError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise UsageError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise UsageError(f"unknown output head {self.output_head!r}")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def output_dim(self):
        return self.layer_widths[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise UsageError("number of weight/bias arrays does not match the layer layout")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in, fan_out = self.spec.layer_widths[i], self.spec.layer_widths[i + 1]
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise UsageError(
                    f"layer {i}: expected W{(fan_in, fan_out)}, b{(fan_out,)}, "
                    f"got W{w.shape}, b{b.shape}"
                )

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self):
        """Flat ``[W0, b0, W1, b1, ...]`` view, the order used by gradients."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, spec, arrays):
        arrays = list(arrays)
        return cls(spec, arrays[0::2], arrays[1::2])

    def copy(self):
        return MlpParams.from_arrays(self.spec, [a.copy() for a in self.arrays()])

    def astype(self, dtype):
        return MlpParams.from_arrays(self.spec, [a.astype(dtype) for a in self.arrays()])

    def n_parameters(self):
        return sum(a.size for a in self.arrays())


@dataclass
class GradientBundle:
    param_grads: list
    input_grad: np.ndarray | None = None
    output: np.ndarray | None = None


def init_params(spec, rng=None, dtype=np.float32):
    """He (relu) or LeCun (tanh) normal initialisation, zero biases."""
    rng = np.random.default_rng(rng)
    gain = 2.0 if spec.activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        std = np.sqrt(gain / fan_in)
        weights.append((rng.standard_normal((fan_in, fan_out)) * std).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(spec, weights, biases)


def _as_batch(params, x):
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise UsageError(
            f"input has shape {np.shape(x)}, network expects last dim {params.spec.input_dim}"
        )
    return x.astype(params.dtype, copy=False), squeeze


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_finite(a, layer):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation at layer {layer}")


def _forward_trace(params, x):
    spec = params.spec
    pre_acts = []
    acts = [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        _check_finite(z, i)
        pre_acts.append(z)
        if i < spec.n_layers - 1:
            h = np.maximum(z, 0) if spec.activation == "relu" else np.tanh(z)
            acts.append(h)
        else:
            h = _log_softmax(z) if spec.output_head == "log_softmax" else z
    return h, pre_acts, acts


def forward(params, x):
    """Evaluate the network on a vector or a ``(n, d)`` batch."""
    xb, squeeze = _as_batch(params, x)
    out, _, _ = _forward_trace(params, xb)
    return out[0] if squeeze else out


def vjp(params, x):
    """Forward pass plus a pullback ``(upstream, want_input_grad) -> GradientBundle``.

    Lets a caller build the upstream cotangent from the output without
    running the network twice.
    """
    xb, squeeze = _as_batch(params, x)
    out, pre_acts, acts = _forward_trace(params, xb)
    spec = params.spec

    def pullback(upstream, want_input_grad=False):
        g = np.asarray(upstream, dtype=params.dtype)
        if squeeze:
            g = g[None, :]
        if g.shape != out.shape:
            raise UsageError(f"upstream shape {g.shape} does not match output shape {out.shape}")
        if spec.output_head == "log_softmax":
            probs = np.exp(out)
            g = g - probs * g.sum(axis=1, keepdims=True)

        n_layers = spec.n_layers
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            # the sum over rows accumulates in float64
            g64 = g.astype(np.float64, copy=False)
            grads[2 * i] = acts[i].T.astype(np.float64) @ g64
            grads[2 * i + 1] = g64.sum(axis=0)
            if i == 0 and not want_input_grad:
                break
            g = g @ params.weights[i].T
            if i > 0:
                z = pre_acts[i - 1]
                if spec.activation == "relu":
                    g = g * (z > 0)
                else:
                    h = acts[i]
                    g = g * (1.0 - h * h)
            _check_finite(g, i)

        input_grad = None
        if want_input_grad:
            input_grad = g[0] if squeeze else g
        return GradientBundle(grads, input_grad, out[0] if squeeze else out)

    return (out[0] if squeeze else out), pullback


def backward(params, x, upstream, want_input_grad=False):
    """Gradients of ``<upstream, forward(params, x)>``.

    For a batch the parameter gradients are summed over rows; scale
    ``upstream`` (for example by ``1/n``) to get gradients of a mean.
    """
    _, pullback = vjp(params, x)
    return pullback(upstream, want_input_grad)


class OptimizerState:
    """First-order optimizer; ``step`` returns new params and advances the moments."""

    def __init__(self, method="sgd", learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if method not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer {method!r}")
        if not learning_rate >= 0:
            raise UsageError("learning_rate must be non-negative")
        self.method = method
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        arrays = params.arrays()
        if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
            raise UsageError("gradient shapes do not match parameter shapes")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter array {i}")
        lr = self.learning_rate
        self.step_count += 1
        if self.method == "sgd":
            new = [a - lr * g.astype(a.dtype, copy=False) for a, g in zip(arrays, grads)]
            return MlpParams.from_arrays(params.spec, new)

        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        new = []
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            new.append(a - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return MlpParams.from_arrays(params.spec, new)

    def state_dict(self):
        return {
            "method": self.method,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": None if self.m is None else [a.copy() for a in self.m],
            "v": None if self.v is None else [a.copy() for a in self.v],
        }

    @classmethod
    def from_state_dict(cls, state):
        opt = cls(state["method"], state["learning_rate"], state["beta1"], state["beta2"], state["eps"])
        opt.step_count = int(state["step_count"])
        for key in ("m", "v"):
            arrays = state.get(key)
            setattr(opt, key, None if arrays is None else [np.array(a) for a in arrays])
        return opt


# checkpoints -----------------------------------------------------------------


def save_params(params, directory, module, **manifest_extra):
    """Write ``manifest`` plus one little-endian float32 file per tensor."""
    os.makedirs(directory, exist_ok=True)
    spec = params.spec
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "module": module,
        "layer_widths": list(spec.layer_widths),
        "activation": spec.activation,
        "head": spec.output_head,
    }
    manifest.update(manifest_extra)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        np.ascontiguousarray(w, dtype="<f4").tofile(os.path.join(directory, f"layer{i}.w"))
        np.ascontiguousarray(b, dtype="<f4").tofile(os.path.join(directory, f"layer{i}.b"))
    with open(os.path.join(directory, "manifest"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_params(directory):
    with open(os.path.join(directory, "manifest")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise UsageError(f"unsupported checkpoint format in {directory}")
    spec = MlpSpec(tuple(manifest["layer_widths"]), manifest["activation"], manifest["head"])
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        w = np.fromfile(os.path.join(directory, f"layer{i}.w"), dtype="<f4")
        b = np.fromfile(os.path.join(directory, f"layer{i}.b"), dtype="<f4")
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise UsageError(f"tensor size mismatch in layer {i} of {directory}")
        weights.append(w.reshape(fan_in, fan_out).astype(np.float32))
        biases.append(b.astype(np.float32))
    return MlpParams(spec, weights, biases), manifest


def checkpoint_hash(directory):
    """sha256 over the manifest and tensor files of a checkpoint directory."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        if name == "manifest" or name.startswith("layer"):
            h.update(name.encode())
            with open(os.path.join(directory, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
