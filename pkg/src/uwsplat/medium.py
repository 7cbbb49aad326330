"""Medium appearance model: encoded (depth, direction) -> per-Gaussian water parameters.

The net is a plain numpy MLP with hand-written reverse mode so the whole
training loop stays in one array library.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteActivation

HEADS = ("T_D", "T_B", "beta_d", "beta_b", "b")
BETA_EPS = 1e-4


def pos_encode(x, num_freqs: int) -> np.ndarray:
    """[sin(2^k pi x), cos(2^k pi x)] for k < num_freqs, per input component.

    `x` is a scalar, a d-vector, or an (N, d) batch. Output layout per
    component is (sin_0, cos_0, sin_1, cos_1, ...).
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    xb = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = xb[:, :, None] * freqs  # (N, d, F)
    out = np.stack([np.sin(ang), np.cos(ang)], -1).reshape(xb.shape[0], -1)
    return out if batched else out[0]


def pos_encode_backward(x, num_freqs, d_out):
    x = np.asarray(x, dtype=np.float64)
    xb = x.reshape(x.shape[0], -1)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = xb[:, :, None] * freqs
    g = np.asarray(d_out).reshape(xb.shape[0], xb.shape[1], num_freqs, 2)
    return np.sum((g[..., 0] * np.cos(ang) - g[..., 1] * np.sin(ang)) * freqs, axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MediumParams:
    T_D: np.ndarray
    T_B: np.ndarray
    beta_d: np.ndarray
    beta_b: np.ndarray
    b: np.ndarray

    def __iter__(self):
        return iter((self.T_D, self.T_B, self.beta_d, self.beta_b, self.b))

    @classmethod
    def zeros_like(cls, other: "MediumParams") -> "MediumParams":
        return cls(*(np.zeros_like(a) for a in other))

    @classmethod
    def identity(cls, n, dtype=np.float64) -> "MediumParams":
        """Clear water: no attenuation, no backscatter."""
        one, zero = np.ones((n, 3), dtype), np.zeros((n, 3), dtype)
        return cls(one, one.copy(), zero, zero.copy(), zero.copy())

    def __add__(self, other):
        return MediumParams(*(a + b for a, b in zip(self, other)))


class MediumNet:
    """Backbone of two ReLU dense layers followed by five 3-wide heads.

    Head activations: sigmoid for T_D, T_B and b, softplus for the two
    attenuation coefficients.
    """

    def __init__(self, z_freqs=4, dir_freqs=4, hidden=64, seed=0, dtype=np.float32):
        self.z_freqs = z_freqs
        self.dir_freqs = dir_freqs
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        shapes = self.layer_shapes()
        for name, (fan_in, fan_out) in shapes.items():
            # torch.nn.Linear default init
            bound = 1.0 / np.sqrt(fan_in)
            self.params["W_" + name] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)
            self.params["b_" + name] = rng.uniform(-bound, bound, (1, fan_out)).astype(self.dtype)

    @property
    def in_width(self):
        return 2 * self.z_freqs + 6 * self.dir_freqs

    def layer_shapes(self):
        shapes = {"fc1": (self.in_width, self.hidden), "fc2": (self.hidden, self.hidden)}
        for h in HEADS:
            shapes[h] = (self.hidden, 3)
        return shapes

    def param_order(self):
        return [p + name for name in self.layer_shapes() for p in ("W_", "b_")]

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_order()])

    def set_flat(self, vec):
        i = 0
        for k in self.param_order():
            p = self.params[k]
            self.params[k] = np.asarray(vec[i:i + p.size], dtype=self.dtype).reshape(p.shape)
            i += p.size

    def copy(self) -> "MediumNet":
        net = MediumNet.__new__(MediumNet)
        net.__dict__.update(self.__dict__)
        net.params = {k: v.copy() for k, v in self.params.items()}
        return net

    def astype(self, dtype) -> "MediumNet":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return net

    def zero_heads(self):
        for h in HEADS:
            self.params["W_" + h][:] = 0
            self.params["b_" + h][:] = 0


@dataclass
class MediumCache:
    z_in: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    pre: dict
    scene_radius: float


def medium_forward(net: MediumNet, z, theta, scene_radius=1.0):
    """Evaluate the medium net for each (distance, direction) pair.

    Distances are divided by `scene_radius` before encoding. Returns
    (MediumParams, cache); the cache feeds :func:`medium_backward`.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    zn = z / scene_radius
    dt = net.dtype
    x = np.concatenate(
        [pos_encode(zn[:, None], net.z_freqs), pos_encode(theta, net.dir_freqs)], axis=1
    ).astype(dt)
    P = net.params
    h1 = np.maximum(x @ P["W_fc1"] + P["b_fc1"], 0)
    h2 = np.maximum(h1 @ P["W_fc2"] + P["b_fc2"], 0)
    pre = {h: h2 @ P["W_" + h] + P["b_" + h] for h in HEADS}
    out = MediumParams(
        T_D=_sigmoid(pre["T_D"]), T_B=_sigmoid(pre["T_B"]),
        beta_d=softplus(pre["beta_d"]), beta_b=softplus(pre["beta_b"]),
        b=_sigmoid(pre["b"]),
    )
    if not all(np.all(np.isfinite(a)) for a in out):
        raise NonFiniteActivation("medium net produced non-finite parameters")
    return out, MediumCache(zn, theta, x, h1, h2, pre, scene_radius)


def medium_backward(net: MediumNet, cache: MediumCache, grads: MediumParams):
    """Reverse mode through heads, backbone and encoding.

    Returns (weight grads keyed like ``net.params``, d_z, d_theta) where d_z is
    w.r.t. the un-normalized distance.
    """
    P = net.params
    dt = net.dtype
    g = {}
    d_h2 = 0.0
    for name, up in zip(HEADS, grads):
        pre = cache.pre[name]
        up = np.asarray(up, dtype=dt)
        if name in ("beta_d", "beta_b"):
            d_pre = up * _sigmoid(pre)
        else:
            s = _sigmoid(pre)
            d_pre = up * s * (1 - s)
        g["W_" + name] = cache.h2.T @ d_pre
        g["b_" + name] = d_pre.sum(axis=0, keepdims=True)
        d_h2 = d_h2 + d_pre @ P["W_" + name].T
    d_h2 = d_h2 * (cache.h2 > 0)
    g["W_fc2"] = cache.h1.T @ d_h2
    g["b_fc2"] = d_h2.sum(axis=0, keepdims=True)
    d_h1 = (d_h2 @ P["W_fc2"].T) * (cache.h1 > 0)
    g["W_fc1"] = cache.x.T @ d_h1
    g["b_fc1"] = d_h1.sum(axis=0, keepdims=True)
    d_x = (d_h1 @ P["W_fc1"].T).astype(np.float64)
    nz = 2 * net.z_freqs
    d_zn = pos_encode_backward(cache.z_in[:, None], net.z_freqs, d_x[:, :nz])[:, 0]
    d_theta = pos_encode_backward(cache.theta, net.dir_freqs, d_x[:, nz:])
    return g, d_zn / cache.scene_radius, d_theta


def transform_color(c, params: MediumParams):
    """Affine medium transform: T_D * c + (1 - T_B) * b, channel-wise."""
    return params.T_D * c + (1.0 - params.T_B) * params.b


def transform_color_backward(c, params: MediumParams, d_cm):
    """Returns (d_c, MediumParams of grads)."""
    d_cm = np.asarray(d_cm)
    grads = MediumParams(
        T_D=d_cm * c, T_B=-d_cm * params.b, beta_d=np.zeros_like(d_cm),
        beta_b=np.zeros_like(d_cm), b=d_cm * (1.0 - params.T_B),
    )
    return d_cm * params.T_D, grads


def implied_depth(params: MediumParams, eps=BETA_EPS):
    """Distance implied by each (factor, coefficient) pair: -ln(T) / beta.

    Returns an array (..., 2, 3): index 0 is the direct pair (T_D, beta_d),
    index 1 the backscatter pair (T_B, beta_b).
    """
    zd = -np.log(params.T_D) / np.maximum(params.beta_d, eps)
    zb = -np.log(params.T_B) / np.maximum(params.beta_b, eps)
    return np.stack([zd, zb], axis=-2)
