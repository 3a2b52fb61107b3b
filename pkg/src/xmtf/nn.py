"""Small dense networks with hand-written reverse mode and an Adam optimizer.

Every network in the package (inner fusion cells, actor, critic) is a
:class:`DenseNet`. Inputs may be a single vector ``(in,)`` or a batch
``(N, in)``; outputs follow the same convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, NonFiniteError

ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z, y, g):
    # g is dL/dy; returns dL/dz. relu subgradient at exactly 0 is 0.
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "sigmoid":
        return g * y * (1.0 - y)
    return g


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("a DenseNet needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ContractViolation(
                    f"layer {i} expects {cur.weight.shape[1]} inputs, "
                    f"layer {i - 1} produces {prev.weight.shape[0]}")
        for path, p in self.named_params():
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"non-finite values in {path}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def named_params(self):
        for i, layer in enumerate(self.layers):
            yield f"layers[{i}].weight", layer.weight
            yield f"layers[{i}].bias", layer.bias

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [
                {"activation": l.activation,
                 "shape": list(l.weight.shape),
                 "weight": l.weight.ravel().tolist(),
                 "bias": l.bias.tolist()}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        layers = []
        for ld in d["layers"]:
            w = np.asarray(ld["weight"], dtype=np.float64).reshape(ld["shape"])
            layers.append(Layer(w, np.asarray(ld["bias"], dtype=np.float64), ld["activation"]))
        net = cls(layers)
        if net.input_dim != d["input_dim"] or net.output_dim != d["output_dim"]:
            raise ContractViolation("snapshot dimensions do not match its layers")
        return net


def init_dense(sizes, activations, rng) -> DenseNet:
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists layer widths including input and output; ``activations``
    has one entry per layer (``len(sizes) - 1``), or a single string applied
    to hidden layers with identity output.
    """
    n = len(sizes) - 1
    if n < 1:
        raise ContractViolation("need at least input and output sizes")
    if isinstance(activations, str):
        activations = [activations] * (n - 1) + ["identity"]
    if len(activations) != n:
        raise ContractViolation(f"{n} layers but {len(activations)} activations")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ContractViolation(
            f"input has shape {x.shape}, network expects {net.input_dim} features")
    return xb, single


def forward_cache(net: DenseNet, x):
    """Forward pass keeping pre- and post-activations for :func:`backward_cached`."""
    xb, single = _as_batch(net, x)
    pre, post = [], [xb]
    h = xb
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    return h, (pre, post, single)


def forward(net: DenseNet, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    h = xb
    for layer in net.layers:
        h = _act(layer.activation, h @ layer.weight.T + layer.bias)
    return h[0] if single else h


def backward_cached(net: DenseNet, cache, out_grad, need_input_grad=True):
    pre, post, single = cache
    g = np.asarray(out_grad, dtype=np.float64)
    if single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != post[-1].shape:
        raise ContractViolation(
            f"out_grad has shape {np.shape(out_grad)}, expected {post[-1].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = _act_grad(layer.activation, pre[i], post[i + 1], g)
        grads[2 * i] = gz.T @ post[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        if i > 0 or need_input_grad:
            g = gz @ layer.weight
    dx = None
    if need_input_grad:
        dx = g[0] if single else g
    return grads, dx


def backward(net: DenseNet, x, out_grad):
    """Gradients of ``sum(out_grad * forward(net, x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is aligned
    with :meth:`DenseNet.params`. Batched inputs sum over the batch.
    """
    _, cache = forward_cache(net, x)
    return backward_cached(net, cache, out_grad)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], **kw)

    def to_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "first_moment": [m.ravel().tolist() for m in self.first_moment],
            "second_moment": [v.ravel().tolist() for v in self.second_moment],
            "shapes": [list(m.shape) for m in self.first_moment],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        shapes = [tuple(s) for s in d["shapes"]]
        m = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(d["first_moment"], shapes)]
        v = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(d["second_moment"], shapes)]
        return cls(m, v, d["step_count"], d["beta1"], d["beta2"], d["epsilon"])


def adam_step(params, grads, state: AdamState, lr: float, names=None):
    """Bias-corrected Adam descent step, updating ``params`` in place.

    Raises :class:`NonFiniteError` naming the offending parameter before
    anything is modified if a gradient is not finite.
    """
    if lr <= 0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ContractViolation("params, grads and optimizer moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != p.shape or state.first_moment[i].shape != p.shape:
            raise ContractViolation(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            path = names[i] if names is not None else f"params[{i}]"
            raise NonFiniteError(f"non-finite gradient for {path}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Adam bound to one network's parameter list."""

    def __init__(self, net: DenseNet, lr: float, **kw):
        self.net = net
        self.lr = lr
        self.state = AdamState.for_params(net.params(), **kw)
        self._names = [n for n, _ in net.named_params()]

    def step(self, grads, ascend=False):
        if ascend:
            grads = [-g for g in grads]
        adam_step(self.net.params(), grads, self.state, self.lr, self._names)
