"""Minimal feed-forward network engine.

Dense and convolutional ReLU networks over 64-bit float tensors: forward
passes that record every intermediate activation, reverse-mode gradients,
and a small deterministic minibatch-SGD trainer. Networks and tensors are
immutable after construction; every operation here is a pure function of
its inputs, so independent calls are safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

LAYER_KINDS = ("Dense", "Conv2D", "ReLU", "SumPool", "AvgPool", "MaxPool", "Flatten")
WEIGHTED_KINDS = ("Dense", "Conv2D")
POOL_KINDS = ("SumPool", "AvgPool", "MaxPool")


def as_tensor(values, name="tensor"):
    """Copy `values` into a float64 array, rejecting NaN/Inf entries."""
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _frozen_tensor(values, name):
    arr = as_tensor(values, name)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of a feed-forward network.

    Dense weights are (in, out) with one bias per output unit. Conv2D weights
    are (out_channels, in_channels, kh, kw) with one bias per output channel.
    `stride`/`padding` apply to Conv2D and pooling layers, `window` to pooling
    layers only. Padding is always zero-fill.
    """

    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.kind == "Dense":
            w = _frozen_tensor(self.weights, "Dense weights")
            if w.ndim != 2:
                raise ValueError("Dense weights must be a 2-D (in, out) matrix")
            b = np.zeros(w.shape[1]) if self.bias is None else as_tensor(self.bias, "Dense bias")
            if b.shape != (w.shape[1],):
                raise ValueError("Dense bias must have one entry per output unit")
            b.setflags(write=False)
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "bias", b)
        elif self.kind == "Conv2D":
            w = _frozen_tensor(self.weights, "Conv2D weights")
            if w.ndim != 4:
                raise ValueError("Conv2D weights must be 4-D (out_ch, in_ch, kh, kw)")
            b = np.zeros(w.shape[0]) if self.bias is None else as_tensor(self.bias, "Conv2D bias")
            if b.shape != (w.shape[0],):
                raise ValueError("Conv2D bias must have one entry per output channel")
            b.setflags(write=False)
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "bias", b)
        elif self.kind in POOL_KINDS:
            if self.weights is not None or self.bias is not None:
                raise ValueError(f"{self.kind} takes no weights")
            if self.window is None:
                raise ValueError(f"{self.kind} requires a pooling window")
            window = tuple(int(v) for v in self.window)
            if len(window) != 2 or min(window) < 1:
                raise ValueError("pool window must be two positive extents")
            object.__setattr__(self, "window", window)
        else:  # ReLU, Flatten
            if self.weights is not None or self.bias is not None or self.window is not None:
                raise ValueError(f"{self.kind} takes no parameters")


def dense(weights, bias=None):
    return LayerSpec("Dense", weights=weights, bias=bias)


def conv2d(weights, bias=None, stride=1, padding=0):
    return LayerSpec("Conv2D", weights=weights, bias=bias, stride=stride, padding=padding)


def relu():
    return LayerSpec("ReLU")


def flatten():
    return LayerSpec("Flatten")


def _pool(kind, window, stride, padding):
    window = tuple(int(v) for v in window)
    if stride is None:
        if window[0] != window[1]:
            raise ValueError("stride required for non-square pool windows")
        stride = window[0]
    return LayerSpec(kind, stride=stride, padding=padding, window=window)


def sum_pool(window, stride=None, padding=0):
    return _pool("SumPool", window, stride, padding)


def avg_pool(window, stride=None, padding=0):
    return _pool("AvgPool", window, stride, padding)


def max_pool(window, stride=None, padding=0):
    return _pool("MaxPool", window, stride, padding)


def _out_extent(extent, k, stride, padding):
    span = extent + 2 * padding - k
    if span < 0:
        raise ValueError(f"window of {k} does not fit extent {extent} with padding {padding}")
    return span // stride + 1


def layer_output_shape(layer, in_shape):
    """Shape produced by `layer` on an input of `in_shape` (raises on mismatch)."""
    kind = layer.kind
    if kind == "Dense":
        if len(in_shape) != 1 or in_shape[0] != layer.weights.shape[0]:
            raise ValueError(f"Dense expects a ({layer.weights.shape[0]},) input, got {in_shape}")
        return (layer.weights.shape[1],)
    if kind == "ReLU":
        return tuple(in_shape)
    if kind == "Flatten":
        return (int(np.prod(in_shape)),)
    if len(in_shape) != 3:
        raise ValueError(f"{kind} expects a (channels, height, width) input, got {in_shape}")
    c, h, w = in_shape
    if kind == "Conv2D":
        f, cw, kh, kw = layer.weights.shape
        if cw != c:
            raise ValueError(f"Conv2D expects {cw} input channels, got {c}")
        return (f, _out_extent(h, kh, layer.stride, layer.padding),
                _out_extent(w, kw, layer.stride, layer.padding))
    kh, kw = layer.window
    return (c, _out_extent(h, kh, layer.stride, layer.padding),
            _out_extent(w, kw, layer.stride, layer.padding))


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered layer sequence ending in a vector of `class_count` logits."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int
    activation_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if min(self.input_shape, default=0) < 1:
            raise ValueError("input_shape extents must be positive")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer_output_shape(layer, shapes[-1]))
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.class_count,):
            raise ValueError(
                f"network output shape {shapes[-1]} does not match ({self.class_count},) logits")
        object.__setattr__(self, "activation_shapes", tuple(shapes))


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Recorded activations of one forward pass.

    `inputs[i]`/`outputs[i]` are the tensors entering/leaving layer i; `aux[i]`
    holds the MaxPool winner-index map (flat index into the padded plane per
    output cell) and None for every other layer kind.
    """

    inputs: tuple
    outputs: tuple
    aux: tuple

    @property
    def input(self):
        return self.inputs[0]

    @property
    def logits(self):
        return self.outputs[-1]


class WindowGeom(NamedTuple):
    channels: int
    in_h: int
    in_w: int
    pad_h: int
    pad_w: int
    kh: int
    kw: int
    stride: int
    padding: int
    out_h: int
    out_w: int


def _window_geometry(in_shape, window, stride, padding):
    c, h, w = in_shape
    kh, kw = window
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    return WindowGeom(c, h, w, h + 2 * padding, w + 2 * padding,
                      kh, kw, stride, padding, oh, ow)


def window_columns(x, window, stride, padding):
    """Extract pooling/convolution windows of a (C, H, W) tensor.

    Returns (cols, geom) where cols has shape (C, kh*kw, out_h*out_w) and the
    window axis is ordered row-major, i.e. by ascending linear index inside
    the window.
    """
    geom = _window_geometry(x.shape, window, stride, padding)
    p = geom.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((geom.channels, geom.kh * geom.kw, geom.out_h * geom.out_w))
    for i in range(geom.kh):
        for j in range(geom.kw):
            patch = xp[:, i:i + geom.stride * geom.out_h:geom.stride,
                       j:j + geom.stride * geom.out_w:geom.stride]
            cols[:, i * geom.kw + j, :] = patch.reshape(geom.channels, -1)
    return cols, geom


def window_scatter(cols, geom):
    """Adjoint of window_columns: scatter-add window values back to (C, H, W)."""
    xp = np.zeros((geom.channels, geom.pad_h, geom.pad_w))
    vals = cols.reshape(geom.channels, geom.kh * geom.kw, geom.out_h, geom.out_w)
    for i in range(geom.kh):
        for j in range(geom.kw):
            xp[:, i:i + geom.stride * geom.out_h:geom.stride,
               j:j + geom.stride * geom.out_w:geom.stride] += vals[:, i * geom.kw + j]
    p = geom.padding
    return xp[:, p:geom.pad_h - p, p:geom.pad_w - p] if p else xp


def _winner_flat_index(arg, geom):
    # arg: (C, n) window-cell argmax -> flat index into the padded (pad_h*pad_w) plane
    win_i, win_j = np.divmod(arg, geom.kw)
    cell = np.arange(geom.out_h * geom.out_w)
    top = (cell // geom.out_w) * geom.stride
    left = (cell % geom.out_w) * geom.stride
    return (top[None, :] + win_i) * geom.pad_w + (left[None, :] + win_j)


def scatter_to_winners(values, winner, geom):
    """Scatter (C, oh, ow) values onto their recorded winner positions."""
    c = geom.channels
    planes = np.zeros(c * geom.pad_h * geom.pad_w)
    offsets = np.arange(c)[:, None] * (geom.pad_h * geom.pad_w)
    np.add.at(planes, (winner.reshape(c, -1) + offsets).ravel(), values.reshape(c, -1).ravel())
    planes = planes.reshape(c, geom.pad_h, geom.pad_w)
    p = geom.padding
    return planes[:, p:geom.pad_h - p, p:geom.pad_w - p] if p else planes


def conv_apply(weights, x, stride, padding):
    """Cross-correlate (out_ch, in_ch, kh, kw) weights with a (C, H, W) tensor (no bias)."""
    f, c, kh, kw = weights.shape
    cols, geom = window_columns(x, (kh, kw), stride, padding)
    out = weights.reshape(f, c * kh * kw) @ cols.reshape(c * kh * kw, -1)
    return out.reshape(f, geom.out_h, geom.out_w)


def conv_transpose_apply(weights, s, stride, padding, in_shape):
    """Adjoint of conv_apply: push (F, oh, ow) values back to the input shape."""
    f, c, kh, kw = weights.shape
    geom = _window_geometry(in_shape, (kh, kw), stride, padding)
    cols = weights.reshape(f, c * kh * kw).T @ s.reshape(f, -1)
    return window_scatter(cols.reshape(c, kh * kw, -1), geom)


def _conv_param_grads(x, g, layer):
    f, c, kh, kw = layer.weights.shape
    cols, _ = window_columns(x, (kh, kw), layer.stride, layer.padding)
    gw = g.reshape(f, -1) @ cols.reshape(c * kh * kw, -1).T
    return gw.reshape(layer.weights.shape), g.sum(axis=(1, 2))


def _layer_forward(layer, x):
    kind = layer.kind
    if kind == "Dense":
        return x @ layer.weights + layer.bias, None
    if kind == "ReLU":
        return np.maximum(x, 0.0), None
    if kind == "Flatten":
        return x.reshape(-1), None
    if kind == "Conv2D":
        y = conv_apply(layer.weights, x, layer.stride, layer.padding)
        return y + layer.bias[:, None, None], None
    cols, geom = window_columns(x, layer.window, layer.stride, layer.padding)
    if kind == "SumPool":
        pooled, extra = cols.sum(axis=1), None
    elif kind == "AvgPool":
        pooled, extra = cols.mean(axis=1), None
    else:  # MaxPool; argmax takes the first maximum = lowest in-window linear index
        arg = cols.argmax(axis=1)
        pooled = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]
        extra = _winner_flat_index(arg, geom).reshape(geom.channels, geom.out_h, geom.out_w)
    return pooled.reshape(geom.channels, geom.out_h, geom.out_w), extra


def _layer_backward(layer, x, extra, g):
    kind = layer.kind
    if kind == "Dense":
        return layer.weights @ g
    if kind == "ReLU":
        # derivative at 0 is taken as 0
        return g * (x > 0.0)
    if kind == "Flatten":
        return g.reshape(x.shape)
    if kind == "Conv2D":
        return conv_transpose_apply(layer.weights, g, layer.stride, layer.padding, x.shape)
    geom = _window_geometry(x.shape, layer.window, layer.stride, layer.padding)
    if kind == "MaxPool":
        return scatter_to_winners(g, extra, geom)
    share = g if kind == "SumPool" else g / (geom.kh * geom.kw)
    cols = np.broadcast_to(share.reshape(geom.channels, 1, -1),
                           (geom.channels, geom.kh * geom.kw, geom.out_h * geom.out_w))
    return window_scatter(cols, geom)


def forward(network, x):
    """Run the network on one input, recording every intermediate activation."""
    x = as_tensor(x, "input")
    if x.shape != network.input_shape:
        raise ValueError(f"input shape {x.shape} does not match network input "
                         f"{network.input_shape}")
    inputs, outputs, aux = [], [], []
    for i, layer in enumerate(network.layers):
        try:
            y, extra = _layer_forward(layer, x)
        except ValueError as exc:
            raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        inputs.append(x)
        outputs.append(y)
        aux.append(extra)
        x = y
    return ActivationTrace(tuple(inputs), tuple(outputs), tuple(aux))


def seeded_gradient(network, trace, output_seed):
    """Gradient of `output_seed . logits` with respect to the network input."""
    g = as_tensor(output_seed, "output seed")
    if g.shape != (network.class_count,):
        raise ValueError(f"output seed must have shape ({network.class_count},)")
    for idx in reversed(range(len(network.layers))):
        g = _layer_backward(network.layers[idx], trace.inputs[idx], trace.aux[idx], g)
    return g


def gradient(network, x=None, class_index=0, trace=None):
    """Gradient of the selected logit with respect to the input.

    Either an input tensor or a previously recorded trace must be supplied.
    """
    if trace is None:
        if x is None:
            raise ValueError("gradient needs an input tensor or an activation trace")
        trace = forward(network, x)
    if not 0 <= class_index < network.class_count:
        raise ValueError(f"class_index {class_index} out of range [0, {network.class_count})")
    seed = np.zeros(network.class_count)
    seed[class_index] = 1.0
    return seeded_gradient(network, trace, seed)


def log_softmax(logits):
    """Numerically stable log-probabilities of a 1-D logit vector."""
    v = as_tensor(logits, "logits")
    if v.ndim != 1:
        raise ValueError("log_softmax expects a 1-D logit vector")
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits):
    return np.exp(log_softmax(logits))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    nonpositive_bias: bool = False


def _backprop_param_grads(network, trace, seed, grads):
    g = seed
    for idx in reversed(range(len(network.layers))):
        layer = network.layers[idx]
        x = trace.inputs[idx]
        if layer.kind == "Dense":
            grads[idx][0] += np.outer(x, g)
            grads[idx][1] += g
        elif layer.kind == "Conv2D":
            gw, gb = _conv_param_grads(x, g, layer)
            grads[idx][0] += gw
            grads[idx][1] += gb
        g = _layer_backward(layer, x, trace.aux[idx], g)


def _with_params(network, params):
    layers = []
    for idx, layer in enumerate(network.layers):
        if idx in params:
            w, b = params[idx]
            layers.append(LayerSpec(layer.kind, weights=w, bias=b,
                                    stride=layer.stride, padding=layer.padding))
        else:
            layers.append(layer)
    return Network(tuple(layers), network.input_shape, network.class_count)


def train_sgd(network, inputs, labels, config, verbose=False):
    """Minibatch SGD on cross-entropy over log-softmax; returns a new Network.

    Deterministic for a fixed config seed. With `nonpositive_bias` set, biases
    are projected to <= 0 after every update.
    """
    data = as_tensor(inputs, "inputs")
    targets = np.asarray(labels)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[1:] != network.input_shape:
        raise ValueError(f"dataset samples have shape {data.shape[1:]}, "
                         f"network expects {network.input_shape}")
    if targets.shape != (data.shape[0],):
        raise ValueError("labels must be one integer per sample")
    if targets.min() < 0 or targets.max() >= network.class_count:
        raise ValueError(f"labels must lie in [0, {network.class_count})")

    params = {idx: [np.array(layer.weights), np.array(layer.bias)]
              for idx, layer in enumerate(network.layers) if layer.kind in WEIGHTED_KINDS}
    rng = np.random.default_rng(config.seed)
    net = _with_params(network, params)
    n = data.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = {idx: [np.zeros_like(w), np.zeros_like(b)]
                     for idx, (w, b) in params.items()}
            for i in batch:
                trace = forward(net, data[i])
                logp = log_softmax(trace.logits)
                losses.append(-logp[targets[i]])
                seed = np.exp(logp)
                seed[targets[i]] -= 1.0
                _backprop_param_grads(net, trace, seed, grads)
            scale = config.learning_rate / len(batch)
            for idx, (gw, gb) in grads.items():
                params[idx][0] -= scale * gw
                params[idx][1] -= scale * gb
                if config.nonpositive_bias:
                    params[idx][1] = np.minimum(params[idx][1], 0.0)
            net = _with_params(network, params)
        if verbose:
            print(f"epoch {epoch + 1}/{config.epochs}: mean loss {np.mean(losses):.6f}")
    return net


def random_network(input_shape, plan, seed):
    """Build a He-initialized network from a compact layer plan.

    Plan items: ("dense", out), ("conv", out_ch, kh, kw, stride, padding),
    ("relu",), ("flatten",), ("maxpool"|"sumpool"|"avgpool", ph, pw, stride, padding).
    The final layer must produce a 1-D vector, which becomes the logits.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in input_shape)
    layers = []
    for item in plan:
        head = item[0]
        if head == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense layer needs a flat input, got {shape} "
                                 "(insert a flatten first)")
            out = int(item[1])
            w = rng.standard_normal((shape[0], out)) * np.sqrt(2.0 / shape[0])
            layers.append(dense(w))
        elif head == "conv":
            out_ch, kh, kw, stride, padding = (int(v) for v in item[1:])
            if len(shape) != 3:
                raise ValueError(f"conv layer needs a (c, h, w) input, got {shape}")
            fan_in = shape[0] * kh * kw
            w = rng.standard_normal((out_ch, shape[0], kh, kw)) * np.sqrt(2.0 / fan_in)
            layers.append(conv2d(w, stride=stride, padding=padding))
        elif head == "relu":
            layers.append(relu())
        elif head == "flatten":
            layers.append(flatten())
        elif head in ("maxpool", "sumpool", "avgpool"):
            ph, pw, stride, padding = (int(v) for v in item[1:])
            kind = {"maxpool": max_pool, "sumpool": sum_pool, "avgpool": avg_pool}[head]
            layers.append(kind((ph, pw), stride=stride, padding=padding))
        else:
            raise ValueError(f"unknown plan item {head!r}")
        shape = layer_output_shape(layers[-1], shape)
    if len(shape) != 1:
        raise ValueError("plan must end with a 1-D logit vector")
    return Network(tuple(layers), tuple(int(v) for v in input_shape), shape[0])
