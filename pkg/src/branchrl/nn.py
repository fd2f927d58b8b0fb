"""Small float64 multilayer perceptrons with hand-written reverse-mode gradients.

Parameters of a network live in one flat buffer; per-layer weight and bias
arrays are views into it. Gradients are produced in the same layout, so an
optimizer or a polyak average is a single vectorized operation.

A network may carry a leading *member* axis (``n_members``), in which case
every layer is a stack of independent weight matrices and a forward pass
evaluates all members at once with batched matmuls. Ensembles of dynamics
models and the twin critics use this.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced inf/nan."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = ("tanh", "relu", "swish", "identity")


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "swish":
        return z * _sigmoid(z)
    return z


def _activation_grad(name, z, h):
    """Derivative of the activation given pre-activation z and output h."""
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "swish":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    return np.ones_like(z)


class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation``; the output layer is linear.
    With ``n_members`` set, weights have shape ``(B, fan_in, fan_out)`` and
    inputs may be ``(N, d)`` (shared by all members) or ``(B, N, d)``.
    """

    def __init__(
        self,
        widths: Sequence[int],
        activation: str = "tanh",
        n_members: int | None = None,
        rng: np.random.Generator | None = None,
        out_scale: float = 1.0,
    ):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.n_members = None if n_members is None else int(n_members)
        lead = () if self.n_members is None else (self.n_members,)

        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w_shape = lead + (fan_in, fan_out)
            b_shape = (lead + (1, fan_out)) if lead else (fan_out,)
            self._shapes.append((w_shape, b_shape))
            offset += int(np.prod(w_shape)) + int(np.prod(b_shape))
        self.params = np.zeros(offset)
        self.weights, self.biases = self._views(self.params)

        if rng is not None:
            self.init_params(rng, out_scale)

    @property
    def n_layers(self) -> int:
        return len(self._shapes)

    @property
    def size(self) -> int:
        return self.params.size

    def _views(self, flat):
        ws, bs = [], []
        offset = 0
        for w_shape, b_shape in self._shapes:
            n = int(np.prod(w_shape))
            ws.append(flat[offset:offset + n].reshape(w_shape))
            offset += n
            n = int(np.prod(b_shape))
            bs.append(flat[offset:offset + n].reshape(b_shape))
            offset += n
        return ws, bs

    def grad_views(self, grad):
        return self._views(grad)

    def init_params(self, rng: np.random.Generator, out_scale: float = 1.0) -> None:
        """Fan-in scaled uniform weights, zero biases."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            bound = 1.0 / np.sqrt(w.shape[-2])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            if i == self.n_layers - 1:
                w *= out_scale
            b[...] = 0.0

    def copy(self) -> "Mlp":
        other = Mlp(self.widths, self.activation, self.n_members)
        other.params[:] = self.params
        return other

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {h.shape[-1]} != {self.widths[0]}")
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = _activate(self.activation, h)
        return h

    def forward_train(self, x: np.ndarray):
        """Forward pass keeping what ``backward`` needs."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {h.shape[-1]} != {self.widths[0]}")
        inputs, pre = [], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                pre.append(z)
                h = _activate(self.activation, z)
            else:
                h = z
        return h, (inputs, pre)

    def backward(self, cache, dy: np.ndarray, input_grad: bool = False):
        """Reverse pass. Returns ``(flat_grad, dx)``; ``dx`` is None unless requested.

        For a member-stacked network fed a shared ``(N, d)`` input, ``dx`` is
        summed over members.
        """
        inputs, pre = cache
        grad = np.empty_like(self.params)
        gw, gb = self._views(grad)
        shared_input = self.n_members is not None and inputs[0].ndim == 2
        g = dy
        for i in range(self.n_layers - 1, -1, -1):
            x = inputs[i]
            if self.n_members is None:
                gw[i][...] = x.T @ g
                gb[i][...] = g.sum(axis=0)
            else:
                gw[i][...] = np.swapaxes(x, -1, -2) @ g
                gb[i][...] = g.sum(axis=-2, keepdims=True)
            if i == 0 and not input_grad:
                break
            g = g @ np.swapaxes(self.weights[i], -1, -2)
            if i > 0:
                h = inputs[i]
                g = g * _activation_grad(self.activation, pre[i - 1], h)
        dx = None
        if input_grad:
            dx = g.sum(axis=0) if shared_input else g
        return grad, dx

    def check_finite(self, cache) -> None:
        """Raise NonFiniteError naming the first layer whose activations blew up."""
        inputs, _ = cache
        for i, x in enumerate(inputs):
            if not np.all(np.isfinite(x)):
                raise NonFiniteError("non-finite activation", layer=i)


# ---------------------------------------------------------------------------
# Gaussian output head

def soft_clamp(raw: np.ndarray, lo: float, hi: float):
    """Softly clamp ``raw`` into [lo, hi]; returns ``(value, d value / d raw)``.

    ``v = hi' - softplus(hi' - raw)`` then ``v = lo + softplus(v - lo)``. The
    inner upper bound ``hi'`` sits a hair below ``hi`` so the composition can
    never exceed ``hi``.
    """
    hi_in = _inner_upper(lo, hi)
    u = hi_in - _softplus(hi_in - raw)
    du = _sigmoid(hi_in - raw)
    v = lo + _softplus(u - lo)
    dv = _sigmoid(u - lo) * du
    return np.minimum(v, hi), dv


def _inner_upper(lo, hi):
    # fixed point of h + log1p(exp(-(h - lo))) = hi
    h = hi
    for _ in range(4):
        h = hi - np.log1p(np.exp(-(h - lo)))
    return h


@dataclass
class GaussianHead:
    """Splits a network output into a mean and a soft-clamped log-variance."""

    dim: int
    log_var_bounds: tuple[float, float] = (-10.0, 0.5)

    def split(self, out: np.ndarray):
        mean = out[..., :self.dim]
        log_var, dlv = soft_clamp(out[..., self.dim:], *self.log_var_bounds)
        return mean, log_var, dlv

    def join_grad(self, d_mean, d_log_var, dlv):
        return np.concatenate([d_mean, d_log_var * dlv], axis=-1)


# ---------------------------------------------------------------------------
# losses

def gaussian_nll(mean, log_var, target) -> float:
    """Negative log density of ``target`` under N(mean, exp(log_var)), summed over the last axis.

    Returns the mean over all leading axes.
    """
    mean, log_var, target = np.broadcast_arrays(mean, log_var, target)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var)) and np.all(np.isfinite(target))):
        raise NonFiniteError("non-finite input to gaussian_nll")
    per = 0.5 * (LOG_2PI + log_var + (target - mean) ** 2 * np.exp(-log_var))
    return float(per.sum(axis=-1).mean())


def gaussian_nll_grad(mean, log_var, target):
    """Gradient of ``gaussian_nll`` w.r.t. mean and log_var (same averaging)."""
    n = int(np.prod(np.shape(mean)[:-1])) or 1
    inv_var = np.exp(-log_var)
    diff = mean - target
    d_mean = diff * inv_var / n
    d_log_var = 0.5 * (1.0 - diff * diff * inv_var) / n
    return d_mean, d_log_var


def squared_error(pred, target) -> float:
    """0.5 * squared error summed over the last axis, averaged over the rest."""
    d = np.asarray(pred) - np.asarray(target)
    return float(0.5 * (d * d).sum(axis=-1).mean())


def squared_error_grad(pred, target):
    d = np.asarray(pred) - np.asarray(target)
    n = int(np.prod(d.shape[:-1])) or 1
    return d / n


_LOSSES: dict[str, Callable] = {}


def register_loss(tag: str, fn: Callable) -> None:
    """``fn(net, batch) -> (loss, flat_grad)``."""
    _LOSSES[tag] = fn


def _nll_loss(net: Mlp, batch):
    head = batch.get("head") or GaussianHead(net.widths[-1] // 2)
    out, cache = net.forward_train(batch["x"])
    mean, log_var, dlv = head.split(out)
    loss = gaussian_nll(mean, log_var, batch["y"])
    d_mean, d_lv = gaussian_nll_grad(mean, log_var, batch["y"])
    grad, _ = net.backward(cache, head.join_grad(d_mean, d_lv, dlv))
    return loss, grad


def _se_loss(net: Mlp, batch):
    out, cache = net.forward_train(batch["x"])
    loss = squared_error(out, batch["y"])
    grad, _ = net.backward(cache, squared_error_grad(out, batch["y"]))
    return loss, grad


register_loss("gaussian_nll", _nll_loss)
register_loss("squared_error", _se_loss)


def backward(net: Mlp, loss_tag: str, batch) -> tuple[float, np.ndarray]:
    """Loss value and flat parameter gradient for one of the registered losses.

    ``sac_actor`` and ``sac_critic`` are registered by :mod:`branchrl.sac`.
    """
    if loss_tag not in _LOSSES:
        if loss_tag.startswith("sac_"):
            from . import sac  # noqa: F401  registers the SAC losses
        if loss_tag not in _LOSSES:
            raise KeyError(f"unknown loss {loss_tag!r}")
    loss, grad = _LOSSES[loss_tag](net, batch)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        layer = _first_bad_layer(net, grad)
        raise NonFiniteError(f"non-finite {loss_tag} gradient", layer=layer)
    return loss, grad


def _first_bad_layer(net: Mlp, grad):
    gw, gb = net.grad_views(grad)
    for i, (w, b) in enumerate(zip(gw, gb)):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            return i
    return None


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class Adam:
    """Adaptive-moment optimizer over one flat parameter vector (updated in place)."""

    size: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.first_moment is None:
            self.first_moment = np.zeros(self.size)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != grad.shape or params.shape != self.first_moment.shape:
            raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, "
                             f"state {self.first_moment.shape}")
        self.step_count += 1
        m, v = self.first_moment, self.second_moment
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        lr_t = self.learning_rate * np.sqrt(1.0 - self.beta2 ** self.step_count) / (
            1.0 - self.beta1 ** self.step_count)
        params -= lr_t * m / (np.sqrt(v) + self.epsilon_stab)
        return params


def optimizer_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"BRNN"
VERSION = 1


def dump_mlp(net: Mlp) -> bytes:
    """Little-endian blob: magic, version, member count, activation, widths, float64 params."""
    act = _ACTIVATIONS.index(net.activation)
    members = 0 if net.n_members is None else net.n_members
    head = MAGIC + struct.pack("<IIII", VERSION, members, act, len(net.widths))
    head += struct.pack(f"<{len(net.widths)}I", *net.widths)
    return head + net.params.astype("<f8").tobytes()


def load_mlp(blob: bytes, offset: int = 0) -> tuple[Mlp, int]:
    """Inverse of :func:`dump_mlp`; returns the network and the offset just past it."""
    if blob[offset:offset + 4] != MAGIC:
        raise ValueError("not a network checkpoint")
    version, members, act, n = struct.unpack_from("<IIII", blob, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = offset + 20
    widths = struct.unpack_from(f"<{n}I", blob, pos)
    pos += 4 * n
    net = Mlp(widths, _ACTIVATIONS[act], members or None)
    nbytes = 8 * net.size
    net.params[:] = np.frombuffer(blob, dtype="<f8", count=net.size, offset=pos)
    return net, pos + nbytes
