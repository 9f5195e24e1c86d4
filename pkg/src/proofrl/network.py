"""Actor-critic network: conv stem, five full pre-activation residual units,
a fully connected layer, and actor/critic heads.

Observations are channels-first ``(N, C, H, W)`` arrays. All parameters live
in one flat vector; ``views`` exposes named reshaped windows into it, so an
optimiser can treat the network as a single array.
"""
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError

KERNEL = 3


def relu(x):
    return np.maximum(x, 0.0)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _conv_out(size, stride):
    return (size + 2 - KERNEL) // stride + 1


def conv_forward(x, w, b, stride):
    """3x3 convolution with zero padding 1. Returns output and im2col view."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], cols


def conv_backward(dout, cols, w, x_shape, stride):
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    n, c, h, wd = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


class PolicyNet:
    """Actor-critic network over ``input_size``-square observations.

    Units listed in ``downsample`` use stride 2 on their first convolution;
    their skip path subsamples the input the same way.
    """

    def __init__(self, in_channels, action_count, input_size=128, width=32, n_units=5,
                 fc_size=256, downsample=(0, 2, 4), seed=0, dtype=np.float64):
        self.in_channels = int(in_channels)
        self.action_count = int(action_count)
        self.input_size = int(input_size)
        self.width = int(width)
        self.n_units = int(n_units)
        self.fc_size = int(fc_size)
        self.downsample = tuple(sorted(downsample))
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

        size = self.input_size
        for u in range(self.n_units):
            if u in self.downsample:
                size = _conv_out(size, 2)
        self.feature_size = size
        flat = self.width * size * size

        shapes = OrderedDict()
        shapes["conv0.w"] = (self.width, self.in_channels, KERNEL, KERNEL)
        shapes["conv0.b"] = (self.width,)
        for u in range(self.n_units):
            for c in (1, 2):
                shapes[f"unit{u}.conv{c}.w"] = (self.width, self.width, KERNEL, KERNEL)
                shapes[f"unit{u}.conv{c}.b"] = (self.width,)
        shapes["fc.w"] = (flat, self.fc_size)
        shapes["fc.b"] = (self.fc_size,)
        shapes["actor.w"] = (self.fc_size, self.action_count)
        shapes["actor.b"] = (self.action_count,)
        shapes["critic.w"] = (self.fc_size, 1)
        shapes["critic.b"] = (1,)
        self.shapes = shapes
        self.params = np.zeros(sum(int(np.prod(s)) for s in shapes.values()), dtype=self.dtype)
        self.views = self._make_views(self.params)
        self._init_params()

    def _make_views(self, vec):
        views, offset = OrderedDict(), 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            views[name] = vec[offset:offset + size].reshape(shape)
            offset += size
        return views

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        for name, view in self.views.items():
            if name.endswith(".b") or name.startswith(("actor", "critic")):
                continue
            fan_in = int(np.prod(view.shape[1:])) if view.ndim == 4 else view.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            view[...] = rng.uniform(-bound, bound, size=view.shape)

    @property
    def groups(self):
        return list(self.shapes)

    def group_slices(self):
        out, offset = OrderedDict(), 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    def config(self):
        return {
            "in_channels": self.in_channels,
            "action_count": self.action_count,
            "input_size": self.input_size,
            "width": self.width,
            "n_units": self.n_units,
            "fc_size": self.fc_size,
            "downsample": list(self.downsample),
            "seed": self.seed,
        }

    def copy(self):
        other = PolicyNet(**self.config(), dtype=self.dtype)
        other.set_params(self.params)
        return other

    def set_params(self, vec):
        vec = np.asarray(vec)
        if vec.shape != self.params.shape:
            raise DimensionError(f"expected {self.params.size} parameters, got {vec.size}")
        self.params[...] = vec

    def _check_obs(self, obs):
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.ndim == 3:
            obs = obs[None]
        expected = (self.in_channels, self.input_size, self.input_size)
        if obs.ndim != 4 or obs.shape[1:] != expected:
            raise DimensionError(f"observation shape {obs.shape[1:]} does not match {expected}")
        return obs

    def forward(self, obs, params=None):
        """Return ``(logits, values)`` for a batch (or a single observation)."""
        single = np.ndim(obs) == 3
        logits, values, _ = self.forward_cache(obs, params)
        if single:
            return logits[0], float(values[0])
        return logits, values

    def forward_cache(self, obs, params=None):
        v = self.views if params is None else self._make_views(np.asarray(params, dtype=self.dtype))
        x = self._check_obs(obs)
        cache = {"x0": x}
        x, cache["conv0"] = conv_forward(x, v["conv0.w"], v["conv0.b"], 1)
        for u in range(self.n_units):
            stride = 2 if u in self.downsample else 1
            a1 = relu(x)
            c1, cols1 = conv_forward(a1, v[f"unit{u}.conv1.w"], v[f"unit{u}.conv1.b"], stride)
            a2 = relu(c1)
            c2, cols2 = conv_forward(a2, v[f"unit{u}.conv2.w"], v[f"unit{u}.conv2.b"], 1)
            skip = x[:, :, ::stride, ::stride] if stride > 1 else x
            cache[f"unit{u}"] = (x, a1, c1, a2, cols1, cols2, stride)
            x = skip + c2
        top = relu(x)
        flat = top.reshape(top.shape[0], -1)
        pre = flat @ v["fc.w"] + v["fc.b"]
        hidden = relu(pre)
        logits = hidden @ v["actor.w"] + v["actor.b"]
        values = (hidden @ v["critic.w"] + v["critic.b"])[:, 0]
        cache.update(x_top=x, flat=flat, pre=pre, hidden=hidden, views=v)
        return logits, values, cache

    def backward(self, cache, dlogits, dvalues):
        """Gradient of ``sum(dlogits * logits) + sum(dvalues * values)`` w.r.t. all parameters."""
        v = cache["views"]
        grad = np.zeros_like(self.params)
        g = self._make_views(grad)
        hidden = cache["hidden"]
        dvalues = np.asarray(dvalues, dtype=self.dtype).reshape(-1, 1)
        g["actor.w"][...] = hidden.T @ dlogits
        g["actor.b"][...] = dlogits.sum(axis=0)
        g["critic.w"][...] = hidden.T @ dvalues
        g["critic.b"][...] = dvalues.sum(axis=0)
        dhidden = dlogits @ v["actor.w"].T + dvalues @ v["critic.w"].T
        dpre = dhidden * (cache["pre"] > 0)
        g["fc.w"][...] = cache["flat"].T @ dpre
        g["fc.b"][...] = dpre.sum(axis=0)
        x_top = cache["x_top"]
        dx = (dpre @ v["fc.w"].T).reshape(x_top.shape) * (x_top > 0)
        for u in reversed(range(self.n_units)):
            x, a1, c1, a2, cols1, cols2, stride = cache[f"unit{u}"]
            da2, dw2, db2 = conv_backward(dx, cols2, v[f"unit{u}.conv2.w"], a2.shape, 1)
            g[f"unit{u}.conv2.w"][...] = dw2
            g[f"unit{u}.conv2.b"][...] = db2
            dc1 = da2 * (c1 > 0)
            da1, dw1, db1 = conv_backward(dc1, cols1, v[f"unit{u}.conv1.w"], a1.shape, stride)
            g[f"unit{u}.conv1.w"][...] = dw1
            g[f"unit{u}.conv1.b"][...] = db1
            dskip = np.zeros_like(x)
            if stride > 1:
                dskip[:, :, ::stride, ::stride] = dx
            else:
                dskip = dx
            dx = dskip + da1 * (x > 0)
        _, dw0, db0 = conv_backward(dx, cache["conv0"], v["conv0.w"], cache["x0"].shape, 1)
        g["conv0.w"][...] = dw0
        g["conv0.b"][...] = db0
        return grad
