"""Small dense networks with hand-written backprop and Adam, in float64."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "relu", "identity", "steepened_sigmoid")


class DimensionMismatch(ValueError):
    pass


class MissingCache(RuntimeError):
    pass


class CheckpointIncompatible(ValueError):
    pass


def steepened_sigmoid(x, alpha: float = 10.0):
    """Logistic sigmoid of ``alpha * x``; ``alpha`` sharpens it towards a step."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return expit(alpha * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "tanh"
    alpha: float = 10.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "steepened_sigmoid" and self.alpha <= 0:
            raise ValueError("alpha must be positive")


def _activate(spec: LayerSpec, z):
    if spec.activation == "tanh":
        return np.tanh(z)
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "steepened_sigmoid":
        return expit(spec.alpha * z)
    return z


def _activation_grad(spec: LayerSpec, z, y):
    if spec.activation == "tanh":
        return 1.0 - y * y
    if spec.activation == "relu":
        return (z > 0).astype(float)
    if spec.activation == "steepened_sigmoid":
        return spec.alpha * y * (1.0 - y)
    return np.ones_like(z)


class MLP:
    """Feed-forward network; parameters are ``[W0, b0, W1, b1, ...]``.

    ``forward`` keeps the activations of its last call so that
    ``backward`` can follow it. Inputs may be a single vector or a batch
    of row vectors.
    """

    def __init__(self, specs, seed=None, params=None):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        for a, b in zip(specs[:-1], specs[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionMismatch(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.specs = tuple(specs)
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for s in specs:
                lim = 1.0 / np.sqrt(s.in_dim)
                params.append(rng.uniform(-lim, lim, (s.in_dim, s.out_dim)))
                params.append(rng.uniform(-lim, lim, s.out_dim))
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self._cache = None

    @classmethod
    def build(cls, sizes, hidden="tanh", output="identity", alpha=10.0, seed=None):
        """Network with layer widths ``sizes = [in, h1, ..., out]``."""
        specs = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if i == len(sizes) - 2 else hidden
            specs.append(LayerSpec(a, b, act, alpha))
        return cls(specs, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected input width {self.in_dim}, got {h.shape[1]}")
        inputs, pre, outs = [], [], []
        for i, spec in enumerate(self.specs):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(h)
            z = h @ W + b
            h = _activate(spec, z)
            pre.append(z)
            outs.append(h)
        self._cache = (inputs, pre, outs, single)
        return h[0] if single else h

    __call__ = forward

    def predict(self, x):
        """Forward pass that leaves the backward cache untouched."""
        cache = self._cache
        try:
            return self.forward(x)
        finally:
            self._cache = cache

    def backward(self, grad_out):
        """Gradients of ``sum(grad_out * output)`` for the last forward call.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned
        to ``self.params``.
        """
        if self._cache is None:
            raise MissingCache("backward called without a preceding forward")
        inputs, pre, outs, single = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :] if g.ndim == 1 else g
        if g.shape != outs[-1].shape:
            raise DimensionMismatch(f"upstream gradient shape {g.shape} != output {outs[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(len(self.specs))):
            g = g * _activation_grad(self.specs[i], pre[i], outs[i])
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if single else g)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {flat.size}")
        off = 0
        for p in self.params:
            p[...] = flat[off : off + p.size].reshape(p.shape)
            off += p.size

    def copy(self) -> "MLP":
        return MLP(self.specs, params=[p.copy() for p in self.params])

    def copy_from(self, other: "MLP") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def soft_update(self, other: "MLP", tau: float) -> None:
        """``theta <- tau * other + (1 - tau) * theta`` in place."""
        for p, q in zip(self.params, other.params):
            p *= 1.0 - tau
            p += tau * q


class Adam:
    """Bias-corrected Adam over a list of parameter arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Descend along ``grads``; parameters are updated in place and returned."""
        if len(params) != len(self.m):
            raise DimensionMismatch("parameter list does not match optimizer state")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise DimensionMismatch(f"gradient shape {g.shape} != parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


def chain_critic_to_actor(critic: MLP, actor: MLP, states):
    """Gradient of ``mean_j Q(s_j, mu(s_j))`` with respect to the actor parameters.

    The critic gradient with respect to its action inputs is pushed back
    through the actor. Returns ``(actor_grads, mean_q)``; both networks'
    caches are overwritten.
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if critic.in_dim != s.shape[1] + actor.out_dim:
        raise DimensionMismatch(
            f"critic input {critic.in_dim} != state {s.shape[1]} + action {actor.out_dim}"
        )
    if critic.out_dim != 1:
        raise DimensionMismatch("critic must have a single output")
    a = actor.forward(s)
    q = critic.forward(np.hstack([s, a]))
    _, g_in = critic.backward(np.full_like(q, 1.0 / len(s)))
    grads, _ = actor.backward(g_in[:, s.shape[1] :])
    return grads, float(q.mean())


# ------------------------------------------------------------- checkpoints

MAGIC = b"TLMLP\x00"
FORMAT_VERSION = 1


def save_mlp(net: MLP, path) -> None:
    """Write ``MAGIC | u16 version | u32 header length | JSON header | <f8 params``."""
    payload = net.get_flat().astype("<f8").tobytes()
    header = {
        "format": "trafficlab-mlp",
        "version": FORMAT_VERSION,
        "layers": [asdict(s) for s in net.specs],
        "n_params": net.n_params,
        "dtype": "<f8",
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_mlp(path) -> MLP:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointIncompatible(f"{path}: not a network checkpoint")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", blob, off)
    if version != FORMAT_VERSION:
        raise CheckpointIncompatible(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(blob[off : off + hlen])
    payload = blob[off + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointIncompatible(f"{path}: checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if flat.size != header["n_params"]:
        raise CheckpointIncompatible(f"{path}: parameter count mismatch")
    net = MLP([LayerSpec(**s) for s in header["layers"]], seed=0)
    net.set_flat(flat)
    return net
