"""A small float64 neural-network kernel for 1D signals.

Layers operate on batches shaped ``(B, T, C)`` (channels last) until they are
reduced to ``(B, D)`` by a global pool or a dense layer. Every layer has a
hand-written backward pass; ``grad_check`` compares it with central finite
differences.

Example
-------
>>> spec = NetSpec((Conv1d(4, 3), ReLU(), GlobalAvgPool(), Dense(2)), input_shape=(16, 3))
>>> net = Network(spec, seed=0)
>>> out, cache = net.forward(np.zeros((16, 3)))
>>> out.shape
(2,)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Conv1d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv1d"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    width: int
    kind = "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "global_avg_pool"


@dataclass(frozen=True)
class Dense:
    out_dim: int
    kind = "dense"


Layer = Union[Conv1d, ReLU, MaxPool, GlobalAvgPool, Dense]
_LAYER_TYPES = {cls.kind: cls for cls in (Conv1d, ReLU, MaxPool, GlobalAvgPool, Dense)}


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    input_shape: tuple = (128, 3)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (without batch); validates composition."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            out.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be a vector, got shape {shape}")
        return out

    @property
    def output_dim(self) -> int:
        return self.shapes()[-1][0]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": layer.kind, **asdict(layer)} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            layers.append(_LAYER_TYPES[item.pop("type")](**item))
        return cls(tuple(layers), tuple(d["input_shape"]))


def encoder_spec(embed_dim: int = 32, input_len: int = 128, channels: int = 3, head: str = "flatten") -> NetSpec:
    """Two strided conv blocks then a dense projection.

    ``head="flatten"`` max-pools after each block and projects the flattened
    feature map, which keeps coarse timing (where in the gesture a feature
    fires). ``head="gap"`` averages over time instead; it is smaller but
    discards ordering and underfits 26-way letter shapes.
    """
    if head == "flatten":
        body = (Conv1d(16, 7, stride=2, padding=3), ReLU(), MaxPool(2),
                Conv1d(32, 5, stride=2, padding=2), ReLU(), MaxPool(2))
    elif head == "gap":
        body = (Conv1d(16, 7, stride=2, padding=3), ReLU(), Conv1d(32, 5, stride=2, padding=2), ReLU(),
                GlobalAvgPool())
    else:
        raise ValueError(f"unknown encoder head {head!r}")
    return NetSpec(body + (Dense(embed_dim),), input_shape=(input_len, channels))


def _out_shape(layer, shape, i):
    name = f"layer {i} ({layer.kind})"
    if isinstance(layer, Conv1d):
        if len(shape) != 2:
            raise ShapeError(f"{name}: expects (T, C) input, got {shape}")
        t = (shape[0] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if t < 1 or layer.kernel < 1 or layer.stride < 1:
            raise ShapeError(f"{name}: kernel {layer.kernel} does not fit input length {shape[0]}")
        return (t, layer.out_channels)
    if isinstance(layer, MaxPool):
        if len(shape) != 2 or shape[0] // layer.width < 1:
            raise ShapeError(f"{name}: cannot pool {shape} with width {layer.width}")
        return (shape[0] // layer.width, shape[1])
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 2:
            raise ShapeError(f"{name}: expects (T, C) input, got {shape}")
        return (shape[1],)
    if isinstance(layer, Dense):
        return (layer.out_dim,)
    if isinstance(layer, ReLU):
        return shape
    raise ShapeError(f"{name}: unknown layer type")


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Cache:
    net_id: int
    batched: bool
    inputs: list
    extras: list
    out_shape: tuple


class Network:
    """Parameters plus forward/backward for a :class:`NetSpec`."""

    def __init__(self, spec: NetSpec, seed: int = 0, params: list | None = None):
        self.spec = spec
        self.seed = int(seed)
        if params is None:
            params = self._init_params(np.random.default_rng(self.seed))
        self.params: list[dict[str, np.ndarray]] = params

    def _init_params(self, rng):
        params = []
        shape = self.spec.input_shape
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Conv1d):
                cin, k, cout = shape[1], layer.kernel, layer.out_channels
                params.append({"W": _glorot(rng, (k, cin, cout), k * cin, k * cout), "b": np.zeros(cout)})
            elif isinstance(layer, Dense):
                d_in = int(np.prod(shape))
                params.append({"W": _glorot(rng, (d_in, layer.out_dim), d_in, layer.out_dim),
                               "b": np.zeros(layer.out_dim)})
            else:
                params.append({})
            shape = _out_shape(layer, shape, i)
        return params

    @property
    def n_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def copy(self) -> "Network":
        return Network(self.spec, self.seed, [{k: v.copy() for k, v in p.items()} for p in self.params])

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == len(self.spec.input_shape) + 1
        if not batched:
            x = x[None]
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"layer 0 ({self.spec.layers[0].kind}): expected input shape "
                             f"{self.spec.input_shape}, got {tuple(x.shape[1:])}")
        inputs, extras = [], []
        h = x
        for layer, p in zip(self.spec.layers, self.params):
            inputs.append(h)
            h, extra = _FORWARD[layer.kind](layer, p, h)
            extras.append(extra)
        cache = Cache(id(self), batched, inputs, extras, h.shape)
        return (h if batched else h[0]), cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, output_grad: np.ndarray):
        """Gradients of a scalar loss given ``d loss / d output``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` shaped like
        ``self.params``.
        """
        if not isinstance(cache, Cache) or cache.net_id != id(self) or len(cache.inputs) != len(self.params):
            raise ValueError("cache does not belong to this network")
        g = np.asarray(output_grad, dtype=np.float64)
        if not cache.batched:
            g = g[None]
        if g.shape != cache.out_shape:
            raise ShapeError(f"output grad shape {g.shape} does not match output {cache.out_shape}")
        grads: list[dict] = [None] * len(self.params)
        for i in reversed(range(len(self.params))):
            layer = self.spec.layers[i]
            g, grads[i] = _BACKWARD[layer.kind](layer, self.params[i], cache.inputs[i], cache.extras[i], g)
        return grads, (g if cache.batched else g[0])

    # -- persistence -------------------------------------------------------

    def flat_params(self) -> np.ndarray:
        parts = [p[k].ravel() for p in self.params for k in sorted(p)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.flat_params(), dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_checkpoint(self) -> dict:
        return {
            "format": "airglyph.nnkit/1",
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "params": [
                {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in sorted(p.items())}
                for p in self.params
            ],
        }

    @classmethod
    def from_checkpoint(cls, d: dict) -> "Network":
        if d.get("format") != "airglyph.nnkit/1":
            raise ValueError("not an nnkit checkpoint")
        spec = NetSpec.from_dict(d["spec"])
        params = [
            {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in p.items()}
            for p in d["params"]
        ]
        net = cls(spec, d.get("seed", 0), params)
        fresh = cls(spec, 0)
        for i, (a, b) in enumerate(zip(net.params, fresh.params)):
            if set(a) != set(b) or any(a[k].shape != b[k].shape for k in a):
                raise ValueError(f"checkpoint parameters for layer {i} do not match the spec")
        return net


# -- layer kernels ---------------------------------------------------------

def _conv_fwd(layer: Conv1d, p, x):
    B, T, C = x.shape
    if C != p["W"].shape[1]:
        raise ShapeError(f"conv1d: expected {p['W'].shape[1]} input channels, got {C}")
    P, K, S = layer.padding, layer.kernel, layer.stride
    xp = np.pad(x, ((0, 0), (P, P), (0, 0))) if P else np.ascontiguousarray(x)
    t_out = (T + 2 * P - K) // S + 1
    sb, st, sc = xp.strides
    cols = as_strided(xp, shape=(B, t_out, K, C), strides=(sb, S * st, st, sc), writeable=False)
    out = np.tensordot(cols, p["W"], axes=([2, 3], [0, 1])) + p["b"]
    return out, (xp, cols)


def _conv_bwd(layer: Conv1d, p, x, extra, g):
    xp, cols = extra
    K, S, P = layer.kernel, layer.stride, layer.padding
    t_out = g.shape[1]
    dW = np.tensordot(cols, g, axes=([0, 1], [0, 1]))
    db = g.sum(axis=(0, 1))
    dcols = np.tensordot(g, p["W"], axes=([2], [2]))
    dxp = np.zeros_like(xp)
    stop = S * (t_out - 1) + 1
    for k in range(K):
        dxp[:, k:k + stop:S, :] += dcols[:, :, k, :]
    dx = dxp[:, P:P + x.shape[1], :]
    return dx, {"W": dW, "b": db}


def _relu_fwd(layer, p, x):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(layer, p, x, mask, g):
    return g * mask, {}


def _maxpool_fwd(layer: MaxPool, p, x):
    B, T, C = x.shape
    w = layer.width
    t_out = T // w
    xr = x[:, :t_out * w].reshape(B, t_out, w, C)
    idx = xr.argmax(axis=2)
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _maxpool_bwd(layer: MaxPool, p, x, idx, g):
    B, T, C = x.shape
    w = layer.width
    t_out = g.shape[1]
    dxr = np.zeros((B, t_out, w, C))
    np.put_along_axis(dxr, idx[:, :, None, :], g[:, :, None, :], axis=2)
    dx = np.zeros_like(x)
    dx[:, :t_out * w] = dxr.reshape(B, t_out * w, C)
    return dx, {}


def _gap_fwd(layer, p, x):
    return x.mean(axis=1), None


def _gap_bwd(layer, p, x, extra, g):
    T = x.shape[1]
    return np.broadcast_to(g[:, None, :] / T, x.shape).copy(), {}


def _dense_fwd(layer: Dense, p, x):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != p["W"].shape[0]:
        raise ShapeError(f"dense: expected {p['W'].shape[0]} inputs, got {flat.shape[1]}")
    return flat @ p["W"] + p["b"], flat


def _dense_bwd(layer, p, x, flat, g):
    dW = flat.T @ g
    db = g.sum(axis=0)
    dx = (g @ p["W"].T).reshape(x.shape)
    return dx, {"W": dW, "b": db}


_FORWARD = {"conv1d": _conv_fwd, "relu": _relu_fwd, "maxpool": _maxpool_fwd,
            "global_avg_pool": _gap_fwd, "dense": _dense_fwd}
_BACKWARD = {"conv1d": _conv_bwd, "relu": _relu_bwd, "maxpool": _maxpool_bwd,
             "global_avg_pool": _gap_bwd, "dense": _dense_bwd}


# -- losses ------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    probs = softmax(logits)
    n = logits.shape[0]
    loss = -float(np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")


def adam_step(state: AdamState, params: Sequence[dict], grads: Sequence[dict]) -> Sequence[dict]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        state.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for k in p:
            if g[k].shape != p[k].shape:
                raise ShapeError(f"gradient shape {g[k].shape} does not match parameter {p[k].shape}")
            m[k] *= b1
            m[k] += (1.0 - b1) * g[k]
            v[k] *= b2
            v[k] += (1.0 - b2) * g[k] * g[k]
            p[k] -= state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return params


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int

    def __float__(self):
        return self.max_rel_error


def check_gradients(loss: Callable[[], float], arrays: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
                    h: float = 1e-4, pattern: Callable[[], bytes] | None = None,
                    max_per_array: int | None = None, seed: int = 0) -> GradCheckResult:
    """Max relative error between ``analytic`` gradients and central differences.

    ``loss`` re-evaluates the scalar loss from the current contents of
    ``arrays``, which are perturbed in place and restored. If ``pattern``
    is given it returns a signature of the piecewise-linear branches taken
    (ReLU masks, pooling winners, hinge activity); coordinates whose +h or -h
    perturbation changes the signature straddle a kink, where no derivative
    exists, and are skipped. ``max_per_array`` caps the coordinates probed
    per array (a seeded random subset).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    base = pattern() if pattern is not None else None
    for arr, ga in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(ga).reshape(-1)
        coords = range(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            coords = np.sort(rng.choice(flat.size, max_per_array, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            kink = pattern is not None and pattern() != base
            flat[i] = orig - h
            lm = loss()
            kink = kink or (pattern is not None and pattern() != base)
            flat[i] = orig
            if kink:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative_error(float(gflat[i]), (lp - lm) / (2 * h)))
    return GradCheckResult(worst, checked, skipped)


def activation_pattern(net: Network, x: np.ndarray) -> bytes:
    out, cache = net.forward(x)
    parts = []
    for layer, extra in zip(net.spec.layers, cache.extras):
        if layer.kind in ("relu", "maxpool"):
            parts.append(np.ascontiguousarray(extra).tobytes())
    return b"".join(parts)


def projection_loss(out_shape: tuple, seed: int = 1234):
    """A fixed random linear read-out ``sum(R * out)``: every output matters."""
    R = np.random.default_rng(seed).normal(size=out_shape)
    return (lambda out: float(np.sum(R * out))), R


def grad_check(net: Network, x: np.ndarray, h: float = 1e-4, include_input: bool = False,
               grad_fn: Callable | None = None, max_per_array: int | None = 256,
               seed: int = 0) -> GradCheckResult:
    """Finite-difference check of ``net.backward`` on input ``x``.

    Every coordinate of arrays with at most ``max_per_array`` entries is
    probed; larger arrays are sampled (``None`` probes everything).
    ``grad_fn`` may replace the analytic gradient (used to test the checker
    itself with a deliberately wrong gradient).
    """
    x = np.array(x, dtype=np.float64)
    out, cache = net.forward(x)
    f, R = projection_loss(out.shape)
    if grad_fn is None:
        pgrads, xgrad = net.backward(cache, R)
    else:
        pgrads, xgrad = grad_fn(net, cache, R)
    arrays = [p[k] for p in net.params for k in sorted(p)]
    analytic = [g[k] for g in pgrads for k in sorted(g)]
    if include_input:
        arrays.append(x)
        analytic.append(xgrad)
    return check_gradients(lambda: f(net.predict(x)), arrays, analytic, h,
                           pattern=lambda: activation_pattern(net, x), max_per_array=max_per_array, seed=seed)
