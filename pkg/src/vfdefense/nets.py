"""Minimal feed-forward network toolkit: dense/conv layers, reverse-mode
gradients with respect to parameters and inputs, Adam updates, and a flat
binary checkpoint format.

Parameters and activations are float32; losses and metrics accumulate in
float64. Networks are plain sequential layer stacks; anything fancier
(the multiplicative action transform of the frame predictor) composes
networks from the outside.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

DTYPE = np.float32

MAGIC = b"FGN1"


class NetError(ValueError):
    """Raised for shape mismatches, bad layer configs, or NaN gradients."""


class LossKind(Enum):
    MSE = "mse"
    HUBER = "huber"
    XENT = "xent"  # cross-entropy against an action index, via softmax


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer. Params live in `self.params` (name -> float32 array)."""

    params: dict

    def __init__(self):
        self.params = {}

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """x: (N, *in_shape) -> (y, cache)."""
        raise NotImplementedError

    def backward(self, dout, cache):
        """Returns (dx, grads) where grads mirrors self.params."""
        raise NotImplementedError

    def descriptor(self):
        raise NotImplementedError


class Affine(Layer):
    """Fully connected layer; flattens any trailing input dims."""

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if rng is None:
            w = np.zeros((self.in_features, self.out_features))
        else:
            scale = np.sqrt(2.0 / self.in_features)
            w = rng.standard_normal((self.in_features, self.out_features)) * scale
        self.params = {
            "w": w.astype(DTYPE),
            "b": np.zeros(self.out_features, dtype=DTYPE),
        }

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise NetError(
                f"affine expects {self.in_features} inputs, got shape {in_shape}"
            )
        return (self.out_features,)

    def forward(self, x):
        n = x.shape[0]
        flat = x.reshape(n, -1)
        y = flat @ self.params["w"] + self.params["b"]
        return y, (flat, x.shape)

    def backward(self, dout, cache):
        flat, x_shape = cache
        grads = {
            "w": flat.T @ dout,
            "b": dout.sum(axis=0),
        }
        dx = (dout @ self.params["w"].T).reshape(x_shape)
        return dx, grads

    def descriptor(self):
        return f"affine {self.in_features} {self.out_features}"


class Relu(Layer):
    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        y = np.maximum(x, 0)
        return y, (x > 0)

    def backward(self, dout, cache):
        return dout * cache, {}

    def descriptor(self):
        return "relu"


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise NetError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x):
        n = x.shape[0]
        return x.reshape((n,) + self.shape), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}

    def descriptor(self):
        return "reshape " + " ".join(str(s) for s in self.shape)


def _im2col(x, k, stride):
    """x: (N, C, H, W) -> (N, Ho, Wo, C*k*k) patches, valid padding."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, ho, wo, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return patches.reshape(n, ho, wo, c * k * k), ho, wo


class Conv2d(Layer):
    """Valid-padding convolution on (C, H, W) inputs."""

    def __init__(self, in_channels, out_channels, kernel, stride, rng=None):
        super().__init__()
        self.cin = int(in_channels)
        self.cout = int(out_channels)
        self.k = int(kernel)
        self.stride = int(stride)
        if self.k < 1 or self.stride < 1:
            raise NetError("conv kernel and stride must be positive")
        fan_in = self.cin * self.k * self.k
        if rng is None:
            w = np.zeros((fan_in, self.cout))
        else:
            w = rng.standard_normal((fan_in, self.cout)) * np.sqrt(2.0 / fan_in)
        self.params = {
            "w": w.astype(DTYPE),
            "b": np.zeros(self.cout, dtype=DTYPE),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise NetError(f"conv expects ({self.cin}, H, W), got {in_shape}")
        _, h, w = in_shape
        if h < self.k or w < self.k:
            raise NetError(f"conv kernel {self.k} larger than input {in_shape}")
        if (h - self.k) % self.stride or (w - self.k) % self.stride:
            raise NetError(
                f"conv stride {self.stride} does not tile input {in_shape}"
            )
        ho = (h - self.k) // self.stride + 1
        wo = (w - self.k) // self.stride + 1
        return (self.cout, ho, wo)

    def forward(self, x):
        cols, ho, wo = _im2col(x, self.k, self.stride)
        y = cols @ self.params["w"] + self.params["b"]  # (N, Ho, Wo, Cout)
        return np.moveaxis(y, 3, 1), (x.shape, cols)

    def backward(self, dout, cache):
        x_shape, cols = cache
        n, c, h, w = x_shape
        dcols_flat = np.moveaxis(dout, 1, 3)  # (N, Ho, Wo, Cout)
        grads = {
            "w": np.tensordot(cols, dcols_flat, axes=([0, 1, 2], [0, 1, 2])),
            "b": dcols_flat.sum(axis=(0, 1, 2)),
        }
        dcols = dcols_flat @ self.params["w"].T  # (N, Ho, Wo, C*k*k)
        ho, wo = dcols.shape[1], dcols.shape[2]
        dcols = dcols.reshape(n, ho, wo, c, self.k, self.k)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for i in range(self.k):
            for j in range(self.k):
                dx[
                    :,
                    :,
                    i : i + ho * self.stride : self.stride,
                    j : j + wo * self.stride : self.stride,
                ] += np.moveaxis(dcols[:, :, :, :, i, j], 3, 1)
        return dx, grads

    def descriptor(self):
        return f"conv {self.cin} {self.cout} {self.k} {self.stride}"


class Deconv2d(Layer):
    """Non-overlapping transposed convolution (kernel == stride): each input
    pixel expands into a k x k block. Exactly inverts the spatial downsampling
    of a stride-k conv, which is all the decoder needs."""

    def __init__(self, in_channels, out_channels, kernel, rng=None):
        super().__init__()
        self.cin = int(in_channels)
        self.cout = int(out_channels)
        self.k = int(kernel)
        if self.k < 1:
            raise NetError("deconv kernel must be positive")
        fan_in = self.cin
        if rng is None:
            w = np.zeros((self.cin, self.cout * self.k * self.k))
        else:
            w = rng.standard_normal(
                (self.cin, self.cout * self.k * self.k)
            ) * np.sqrt(2.0 / fan_in)
        self.params = {
            "w": w.astype(DTYPE),
            "b": np.zeros(self.cout, dtype=DTYPE),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise NetError(f"deconv expects ({self.cin}, H, W), got {in_shape}")
        _, h, w = in_shape
        return (self.cout, h * self.k, w * self.k)

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.k
        flat = np.moveaxis(x, 1, 3).reshape(-1, c)  # (N*H*W, Cin)
        blocks = flat @ self.params["w"]  # (N*H*W, Cout*k*k)
        blocks = blocks.reshape(n, h, w, self.cout, k, k)
        y = np.moveaxis(blocks, 3, 1)  # (N, Cout, H, W, k, k)
        y = y.transpose(0, 1, 2, 4, 3, 5).reshape(n, self.cout, h * k, w * k)
        y += self.params["b"][None, :, None, None]
        return y, (x.shape, flat)

    def backward(self, dout, cache):
        x_shape, flat = cache
        n, c, h, w = x_shape
        k = self.k
        d = dout.reshape(n, self.cout, h, k, w, k).transpose(0, 1, 2, 4, 3, 5)
        dblocks = np.moveaxis(d, 1, 3).reshape(-1, self.cout * k * k)
        grads = {
            "w": flat.T @ dblocks,
            "b": dout.sum(axis=(0, 2, 3)),
        }
        dx_flat = dblocks @ self.params["w"].T
        dx = np.moveaxis(dx_flat.reshape(n, h, w, c), 3, 1)
        return dx, grads

    def descriptor(self):
        return f"deconv {self.cin} {self.cout} {self.k}"


# ---------------------------------------------------------------------------
# network


class Network:
    """Sequential layer stack with fixed input shape.

    Immutable by convention once training finishes; forward passes never
    mutate parameters.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)  # raises NetError on bad chains
        self.output_shape = shape

    # -- parameter plumbing

    def named_params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out[f"{i}.{name}"] = value
        return out

    def set_params(self, named):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = named[f"{i}.{name}"].astype(DTYPE)

    def copy(self):
        clone = Network.__new__(Network)
        clone.input_shape = self.input_shape
        clone.output_shape = self.output_shape
        clone.layers = []
        for layer in self.layers:
            twin = object.__new__(type(layer))
            twin.__dict__ = dict(layer.__dict__)
            twin.params = {k: v.copy() for k, v in layer.params.items()}
            clone.layers.append(twin)
        return clone

    # -- evaluation

    def _check_batch(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise NetError(
            f"input shape {x.shape} does not match network input "
            f"{self.input_shape}"
        )

    def forward(self, x, dropout=None):
        """Batched forward. `dropout` is an optional (layer_indices, rate,
        rng) triple; masks are applied to the inputs of the listed layers
        with inverted scaling."""
        y, _ = self._forward_cached(x, dropout)
        return y

    def _forward_cached(self, x, dropout=None):
        if tuple(x.shape[1:]) != self.input_shape:
            raise NetError(
                f"batch shape {x.shape} does not match network input "
                f"{self.input_shape}"
            )
        caches = []
        y = x
        for i, layer in enumerate(self.layers):
            if dropout is not None and i in dropout[0]:
                rate = dropout[1]
                mask = (dropout[2].random(y.shape) >= rate).astype(DTYPE)
                y = y * mask / DTYPE(1.0 - rate)
            y, cache = layer.forward(y)
            caches.append(cache)
        return y, caches

    def backward(self, dout, caches):
        """Backprop from an output gradient; returns (dx, grads)."""
        grads = {}
        dx = dout
        for i in reversed(range(len(self.layers))):
            dx, layer_grads = self.layers[i].backward(dx, caches[i])
            for name, g in layer_grads.items():
                grads[f"{i}.{name}"] = g
        return dx, grads


def forward_eval(net, x):
    """Single-sample forward pass. Pure: no parameter mutation."""
    batch, single = net._check_batch(x)
    y = net.forward(batch)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# losses


def loss_and_output_grad(kind, output, target):
    """Scalar loss (float64) and d(loss)/d(output) for a batched output.

    XENT targets are integer action indices; the loss is cross-entropy of
    softmax(output) against them. MSE/HUBER targets are arrays shaped like
    the output; both average over the batch and sum over remaining dims.
    """
    n = output.shape[0]
    if kind is LossKind.XENT:
        if output.ndim != 2:
            raise NetError("cross-entropy needs a 1-D network output")
        idx = np.asarray(target, dtype=np.int64).reshape(n)
        z = output.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum(p[np.arange(n), idx], 1e-300)).mean()
        dout = p
        dout[np.arange(n), idx] -= 1.0
        return float(loss), (dout / n).astype(DTYPE)
    diff = output.astype(np.float64) - np.asarray(target, dtype=np.float64)
    if kind is LossKind.MSE:
        loss = (diff**2).sum() / n
        dout = 2.0 * diff / n
    elif kind is LossKind.HUBER:
        a = np.abs(diff)
        loss = np.where(a <= 1.0, 0.5 * diff**2, a - 0.5).sum() / n
        dout = np.clip(diff, -1.0, 1.0) / n
    else:
        raise NetError(f"unknown loss kind {kind}")
    return float(loss), dout.astype(DTYPE)


def input_gradient(net, x, loss, target):
    """d(loss)/d(input), same shape as x. Parameters are untouched."""
    batch, single = net._check_batch(x)
    out, caches = net._forward_cached(batch)
    _, dout = loss_and_output_grad(loss, out, target)
    dx, _ = net.backward(dout, caches)
    return dx[0] if single else dx


def input_gradient_from_output_grad(net, x, dout):
    """Backprop an externally supplied output gradient to the input."""
    batch, single = net._check_batch(x)
    out, caches = net._forward_cached(batch)
    dout = np.asarray(dout, dtype=DTYPE).reshape(out.shape)
    dx, _ = net.backward(dout, caches)
    return dx[0] if single else dx


def param_gradients(net, x, loss, target, dropout=None):
    """(loss value, gradient dict) for a training step."""
    batch, _ = net._check_batch(x)
    out, caches = net._forward_cached(batch, dropout)
    value, dout = loss_and_output_grad(loss, out, target)
    _, grads = net.backward(dout, caches)
    return value, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place Adam update. Rejects non-finite gradients so the training
    loop sees divergence instead of silently corrupted parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NetError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(DTYPE)
    return params, state


# ---------------------------------------------------------------------------
# distributions


def softmax_temp(logits, temperature):
    """Temperature softmax with max-subtraction; returns float64 probs."""
    if not temperature > 0:
        raise NetError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64).ravel() / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return p


# ---------------------------------------------------------------------------
# serialization: magic, length-prefixed descriptor lines, then little-endian
# float32 parameter blocks in declaration order.


def _build_layer(desc, rng=None):
    parts = desc.split()
    kind, args = parts[0], [int(a) for a in parts[1:]]
    if kind == "affine":
        return Affine(*args, rng=rng)
    if kind == "relu":
        return Relu()
    if kind == "reshape":
        return Reshape(args)
    if kind == "conv":
        return Conv2d(*args, rng=rng)
    if kind == "deconv":
        return Deconv2d(*args, rng=rng)
    raise NetError(f"unknown layer descriptor {desc!r}")


def build_network(input_shape, descriptors, rng):
    return Network(input_shape, [_build_layer(d, rng) for d in descriptors])


def _write_text(fh, text):
    data = text.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_text(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_network(net, path_or_file):
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "wb") as fh:
            save_network(net, fh)
        return
    fh = path_or_file
    fh.write(MAGIC)
    _write_text(fh, " ".join(str(s) for s in net.input_shape))
    _write_text(fh, str(len(net.layers)))
    for layer in net.layers:
        _write_text(fh, layer.descriptor())
    for layer in net.layers:
        for name in sorted(layer.params):
            block = np.ascontiguousarray(layer.params[name], dtype="<f4")
            fh.write(struct.pack("<Q", block.size))
            fh.write(block.tobytes())


def load_network(path_or_file):
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "rb") as fh:
            return load_network(fh)
    fh = path_or_file
    if fh.read(4) != MAGIC:
        raise NetError("bad checkpoint magic")
    input_shape = tuple(int(s) for s in _read_text(fh).split())
    n_layers = int(_read_text(fh))
    layers = [_build_layer(_read_text(fh)) for _ in range(n_layers)]
    net = Network(input_shape, layers)
    for layer in net.layers:
        for name in sorted(layer.params):
            (size,) = struct.unpack("<Q", fh.read(8))
            flat = np.frombuffer(fh.read(size * 4), dtype="<f4")
            layer.params[name] = flat.reshape(layer.params[name].shape).astype(DTYPE)
    return net


def network_bytes(net):
    buf = io.BytesIO()
    save_network(net, buf)
    return buf.getvalue()
