"""Small tanh MLP feature extractor with hand-written backward pass, plus Adam."""
from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    weights: list  # per layer, (out, in)
    biases: list  # per layer, (out,)
    input_dim: int

    @property
    def dims(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self):
        out = []
        for i in range(len(self.weights)):
            out += [f"layer{i}.weight", f"layer{i}.bias"]
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.input_dim)


@dataclass
class ForwardCache:
    x: np.ndarray
    activations: list  # output of every layer; hidden ones are tanh outputs


def init_mlp(dims, seed):
    """Glorot-uniform weights, zero biases. ``dims=[d]`` gives a passthrough."""
    dims = [int(d) for d in dims]
    if len(dims) < 1 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, dims[0])


def forward(p, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.in_dim:
        raise ValueError(f"input shape {X.shape} does not match input dim {p.in_dim}")
    acts = []
    h = X
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return h, ForwardCache(X, acts)


def backward(p, cache, dV):
    """Gradients (dW list, db list) and the gradient w.r.t. the input batch."""
    dV = np.asarray(dV, dtype=np.float64)
    out = cache.activations[-1] if cache.activations else cache.x
    if dV.shape != out.shape:
        raise ValueError(f"upstream gradient shape {dV.shape} != output shape {out.shape}")
    n = len(p.weights)
    dWs, dbs = [None] * n, [None] * n
    delta = dV
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            a = cache.activations[i]
            delta = delta * (1.0 - a * a)
        inp = cache.activations[i - 1] if i > 0 else cache.x
        dWs[i] = delta.T @ inp
        dbs[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i]
    return dWs, dbs, delta


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])

    def copy(self):
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state, lr, names=None):
    """In-place bias-corrected Adam update of ``params`` (a list of arrays)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
