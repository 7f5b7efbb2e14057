"""Small dense MLP with explicit forward and reverse-mode backward passes."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ParameterError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"


@dataclass
class MlpParams:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        prev = None
        for layer in self.layers:
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {layer.activation!r}")
            if layer.weight.shape[0] != layer.bias.shape[0]:
                raise ParameterError("bias length must equal layer output size")
            if prev is not None and layer.weight.shape[1] != prev:
                raise ParameterError("consecutive layer dimensions do not chain")
            prev = layer.weight.shape[0]

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self, prefix=""):
        """Named views of every parameter array, for the optimizer."""
        out = {}
        for k, l in enumerate(self.layers):
            out[f"{prefix}W{k}"] = l.weight
            out[f"{prefix}b{k}"] = l.bias
        return out

    def fingerprint(self):
        return hash(tuple(l.weight.tobytes() + l.bias.tobytes() for l in self.layers))

    def copy(self):
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    @classmethod
    def init(cls, sizes, activations, seed, zero_last=False):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        if len(activations) != len(sizes) - 1:
            raise ParameterError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            w = rng.uniform(-bound, bound, size=(b, a))
            bias = rng.uniform(-bound, bound, size=b)
            if zero_last and k == len(sizes) - 2:
                w[:] = 0.0
                bias[:] = 0.0
            layers.append(Layer(w, bias, activations[k]))
        return cls(layers)


@dataclass
class MlpCache:
    inputs: list  # per-layer input
    outputs: list  # per-layer post-activation
    fingerprint: int


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z_out, g):
    if name == "relu":
        return g * (z_out > 0)
    if name == "tanh":
        return g * (1.0 - z_out * z_out)
    if name == "sigmoid":
        return g * z_out * (1.0 - z_out)
    return g


def mlp_forward(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != params.in_dim:
        raise ParameterError(f"input dim {x.shape[-1]} != {params.in_dim}")
    inputs, outputs = [], []
    h = x
    for layer in params.layers:
        inputs.append(h)
        h = _act(layer.activation, h @ layer.weight.T + layer.bias)
        outputs.append(h)
    return h, MlpCache(inputs, outputs, params.fingerprint())


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out, check=True):
    """Returns ``(grads, grad_input)``; ``grads`` is a list of (dW, db) per layer."""
    if check and cache.fingerprint != params.fingerprint():
        raise ContractViolation("MLP parameters changed since the cached forward pass")
    g = np.asarray(grad_out, dtype=np.float64).reshape(cache.outputs[-1].shape)
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        g = _act_grad(layer.activation, cache.outputs[k], g)
        grads[k] = (g.T @ cache.inputs[k], g.sum(axis=0))
        g = g @ layer.weight
    return grads, g


def named_grads(grads, prefix=""):
    out = {}
    for k, (gw, gb) in enumerate(grads):
        out[f"{prefix}W{k}"] = gw
        out[f"{prefix}b{k}"] = gb
    return out


def pixel_decoder(seed, latent_channels=4, hidden=16):
    """Default per-pixel decoder: [latent, uv] -> 16 relu -> 16 relu -> 3 sigmoid.

    The last layer starts at zero, so a fresh decoder outputs mid-gray everywhere
    (435 parameters with 4 latent channels).
    """
    return MlpParams.init([latent_channels + 2, hidden, hidden, 3], ["relu", "relu", "sigmoid"], seed, zero_last=True)
