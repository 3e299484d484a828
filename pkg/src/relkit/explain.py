"""Explanation of individual predictions by relevance decomposition.

Backward relevance propagation with per-layer rules (alpha/beta excitatory
split, epsilon-stabilized, squared-weight and bounded-input first-layer
rules, pooling policies), plus the gradient-based sensitivity and simple
Taylor explainers. All explainers emit input-shaped Heatmaps.

Dense and convolutional layers share the same four-step redistribution
scheme: z <- restricted-forward(a); s <- R / z; c <- restricted-backward(s);
R <- a * c. Denominators smaller in magnitude than the stabilizer absorb
their unit's relevance instead of being inflated; when the inhibitory branch
of the alpha/beta rule is empty the unit falls back to purely excitatory
redistribution so that layer conservation survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netcore import (POOL_KINDS, WEIGHTED_KINDS, as_tensor, conv_apply,
                      conv_transpose_apply, forward, log_softmax,
                      scatter_to_winners, seeded_gradient, softmax,
                      window_columns, window_scatter, _window_geometry)

_EXPLAINED_OUTPUTS = ("logit", "log_probability")


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Input-shaped relevance scores plus what they decompose."""

    scores: np.ndarray
    total: float
    explained_value: float
    method_tag: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, explained_value, method_tag, meta=None):
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, float(np.sum(scores)), float(explained_value),
                   method_tag, dict(meta or {}))


@dataclass(frozen=True)
class AlphaBeta:
    """Split redistribution into excitatory/inhibitory parts; alpha - beta = 1."""

    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError("AlphaBeta requires alpha - beta = 1")
        if self.beta < 0:
            raise ValueError("AlphaBeta requires beta >= 0")


@dataclass(frozen=True)
class Epsilon:
    """Sign-stabilized proportional redistribution; includes the bias in z."""

    epsilon: float = 1e-9

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("Epsilon requires a positive epsilon")


@dataclass(frozen=True)
class WSquare:
    """First-layer rule for unbounded real inputs: shares by squared weight."""


@dataclass(frozen=True, eq=False)
class ZBounds:
    """First-layer rule for box-bounded inputs with low <= 0 <= high."""

    low: np.ndarray | float
    high: np.ndarray | float

    def __post_init__(self):
        low = np.array(self.low, dtype=np.float64)
        high = np.array(self.high, dtype=np.float64)
        if np.any(low > 0) or np.any(high < 0):
            raise ValueError("ZBounds requires low <= 0 <= high elementwise")
        low.setflags(write=False)
        high.setflags(write=False)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)


@dataclass(frozen=True)
class PoolProportional:
    """Redistribute pool relevance proportionally to the pooled activations."""


@dataclass(frozen=True)
class PoolWinnerTakeAll:
    """Give all pool relevance to the recorded maximum (MaxPool only)."""


@dataclass(frozen=True)
class PassThrough:
    """Shape-only layers (ReLU, Flatten) hand relevance through unchanged."""


_HIDDEN_RULES = (AlphaBeta, Epsilon)
_INPUT_ONLY_RULES = (WSquare, ZBounds)
_POOL_RULES = (PoolProportional, PoolWinnerTakeAll)


@dataclass(frozen=True, eq=False)
class RuleConfig:
    """Per-layer rule assignment for one relevance propagation run."""

    layer_rules: tuple
    stabilizer: float = 1e-9
    explained_output: str = "logit"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layer_rules", tuple(self.layer_rules))
        if self.stabilizer <= 0:
            raise ValueError("stabilizer must be positive")
        if self.explained_output not in _EXPLAINED_OUTPUTS:
            raise ValueError(f"explained_output must be one of {_EXPLAINED_OUTPUTS}")


@dataclass(frozen=True, eq=False)
class RelevanceTrace:
    """Per-layer relevance tensors from the output back to the input.

    relevances[i] is aligned with the input of layer i; the final entry is the
    one-hot initialization at the logits.
    """

    relevances: tuple
    explained_value: float
    class_index: int
    method_tag: str
    meta: dict

    def heatmap(self):
        scores = self.relevances[0]
        meta = dict(self.meta)
        hm = Heatmap.from_scores(scores, self.explained_value, self.method_tag, meta)
        hm.meta["conservation_gap"] = self.explained_value - hm.total
        return hm


def safe_divide(numerator, denominator, stabilizer):
    """Divide elementwise, zeroing entries whose |denominator| < stabilizer."""
    ok = np.abs(denominator) >= stabilizer
    return np.where(ok, numerator / np.where(ok, denominator, 1.0), 0.0)


def _two_branch_redistribute(a, r_upper, z_pos, z_neg, back_pos, back_neg,
                             alpha, beta, stabilizer):
    # Four-step pass over the positive part, mirrored over the negative part.
    # Units whose positive denominator vanishes absorb their relevance; units
    # with an empty negative branch redistribute with alpha_eff = 1 so the
    # layer total is conserved.
    pos_ok = np.abs(z_pos) >= stabilizer
    if beta == 0.0:
        s = np.where(pos_ok, r_upper / np.where(pos_ok, z_pos, 1.0), 0.0)
        return a * back_pos(s)
    neg_ok = np.abs(z_neg) >= stabilizer
    alpha_eff = np.where(neg_ok, alpha, 1.0)
    s_pos = np.where(pos_ok, alpha_eff * r_upper / np.where(pos_ok, z_pos, 1.0), 0.0)
    s_neg = np.where(pos_ok & neg_ok, beta * r_upper / np.where(neg_ok, z_neg, 1.0), 0.0)
    return a * back_pos(s_pos) - a * back_neg(s_neg)


def lrp_dense_alphabeta(a, weights, r_upper, alpha, beta, stabilizer=1e-9):
    """Alpha/beta redistribution through one dense layer (bias excluded)."""
    AlphaBeta(alpha, beta)  # validates the parameter constraints
    a = np.asarray(a, dtype=np.float64)
    w_pos = np.maximum(weights, 0.0)
    w_neg = np.minimum(weights, 0.0)
    return _two_branch_redistribute(
        a, np.asarray(r_upper, dtype=np.float64),
        a @ w_pos, a @ w_neg,
        lambda s: w_pos @ s, lambda s: w_neg @ s,
        alpha, beta, stabilizer)


def lrp_dense_epsilon(a, weights, bias, r_upper, epsilon):
    """Epsilon-stabilized redistribution; z includes the bias term."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.asarray(a, dtype=np.float64)
    z = a @ weights + bias
    # sign(0) is taken as +1 so a zero denominator stays finite
    denom = np.where(z >= 0, z + epsilon, z - epsilon)
    s = np.asarray(r_upper, dtype=np.float64) / denom
    return a * (weights @ s)


def lrp_input_wsquare(weights, r_upper):
    """Input-independent first-layer shares proportional to squared weights."""
    w2 = np.asarray(weights, dtype=np.float64) ** 2
    z = w2.sum(axis=0)
    ok = z > 0.0  # all-zero weight columns drop their unit's relevance
    s = np.where(ok, np.asarray(r_upper, dtype=np.float64) / np.where(ok, z, 1.0), 0.0)
    return w2 @ s


def lrp_input_zb(x, weights, r_upper, low, high, stabilizer=1e-9):
    """First-layer rule for inputs confined to [low, high] boxes."""
    x = np.asarray(x, dtype=np.float64)
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), x.shape)
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), x.shape)
    if np.any(low > 0) or np.any(high < 0):
        raise ValueError("bounds must satisfy low <= 0 <= high elementwise")
    w = np.asarray(weights, dtype=np.float64)
    w_pos = np.maximum(w, 0.0)
    w_neg = np.minimum(w, 0.0)
    z = x @ w - low @ w_pos - high @ w_neg
    s = safe_divide(np.asarray(r_upper, dtype=np.float64), z, stabilizer)
    return x * (w @ s) - low * (w_pos @ s) - high * (w_neg @ s)


def lrp_pool(layer, x, winner, r_upper, policy, stabilizer=1e-9):
    """Redistribute pooled relevance back over the pool windows."""
    if layer.kind not in POOL_KINDS:
        raise ValueError(f"lrp_pool applies to pooling layers, not {layer.kind}")
    if isinstance(policy, PoolWinnerTakeAll):
        if layer.kind != "MaxPool" or winner is None:
            raise ValueError("winner-take-all needs a MaxPool winner map")
        geom = _window_geometry(x.shape, layer.window, layer.stride, layer.padding)
        return scatter_to_winners(np.asarray(r_upper, dtype=np.float64), winner, geom)
    if not isinstance(policy, PoolProportional):
        raise ValueError(f"unknown pool policy {policy!r}")
    cols, geom = window_columns(x, layer.window, layer.stride, layer.padding)
    r_flat = np.asarray(r_upper, dtype=np.float64).reshape(geom.channels, -1)
    s = safe_divide(r_flat, cols.sum(axis=1), stabilizer)
    return window_scatter(cols * s[:, None, :], geom)


def _conv_alphabeta(layer, x, r_upper, alpha, beta, stabilizer):
    w_pos = np.maximum(layer.weights, 0.0)
    w_neg = np.minimum(layer.weights, 0.0)
    stride, padding = layer.stride, layer.padding
    return _two_branch_redistribute(
        x, r_upper,
        conv_apply(w_pos, x, stride, padding), conv_apply(w_neg, x, stride, padding),
        lambda s: conv_transpose_apply(w_pos, s, stride, padding, x.shape),
        lambda s: conv_transpose_apply(w_neg, s, stride, padding, x.shape),
        alpha, beta, stabilizer)


def _conv_epsilon(layer, x, r_upper, epsilon):
    z = conv_apply(layer.weights, x, layer.stride, layer.padding) + layer.bias[:, None, None]
    denom = np.where(z >= 0, z + epsilon, z - epsilon)
    s = r_upper / denom
    return x * conv_transpose_apply(layer.weights, s, layer.stride, layer.padding, x.shape)


def _conv_wsquare(layer, x, r_upper):
    w2 = layer.weights ** 2
    z = conv_apply(w2, np.ones_like(x), layer.stride, layer.padding)
    ok = z > 0.0
    s = np.where(ok, r_upper / np.where(ok, z, 1.0), 0.0)
    return conv_transpose_apply(w2, s, layer.stride, layer.padding, x.shape)


def _conv_zbounds(layer, x, r_upper, low, high, stabilizer):
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), x.shape)
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), x.shape)
    if np.any(low > 0) or np.any(high < 0):
        raise ValueError("bounds must satisfy low <= 0 <= high elementwise")
    w = layer.weights
    w_pos = np.maximum(w, 0.0)
    w_neg = np.minimum(w, 0.0)
    stride, padding = layer.stride, layer.padding
    z = (conv_apply(w, x, stride, padding)
         - conv_apply(w_pos, low, stride, padding)
         - conv_apply(w_neg, high, stride, padding))
    s = safe_divide(r_upper, z, stabilizer)
    back = lambda wk: conv_transpose_apply(wk, s, stride, padding, x.shape)
    return x * back(w) - low * back(w_pos) - high * back(w_neg)


def _first_weighted_index(network):
    for idx, layer in enumerate(network.layers):
        if layer.kind in WEIGHTED_KINDS:
            return idx
    return None


def _check_rules(network, config):
    if len(config.layer_rules) != len(network.layers):
        raise ValueError(f"rule config assigns {len(config.layer_rules)} rules "
                         f"to a network with {len(network.layers)} layers")
    first_weighted = _first_weighted_index(network)
    for idx, (layer, rule) in enumerate(zip(network.layers, config.layer_rules)):
        if rule is None:
            raise ValueError(f"layer {idx} ({layer.kind}) has no rule assigned")
        ok: bool
        if layer.kind in WEIGHTED_KINDS:
            ok = isinstance(rule, _HIDDEN_RULES + _INPUT_ONLY_RULES)
            if isinstance(rule, _INPUT_ONLY_RULES) and idx != first_weighted:
                raise ValueError(f"layer {idx} ({layer.kind}): "
                                 f"{type(rule).__name__} applies only to the first "
                                 "weighted layer")
        elif layer.kind in POOL_KINDS:
            ok = isinstance(rule, _POOL_RULES)
            if isinstance(rule, PoolWinnerTakeAll) and layer.kind != "MaxPool":
                raise ValueError(f"layer {idx} ({layer.kind}): winner-take-all "
                                 "needs a MaxPool layer")
        else:
            ok = isinstance(rule, PassThrough)
        if not ok:
            raise ValueError(f"layer {idx} ({layer.kind}): rule "
                             f"{type(rule).__name__} does not apply to this layer kind")


def _propagate_layer(layer, x, extra, r_upper, rule, stabilizer):
    kind = layer.kind
    if kind == "ReLU":
        return r_upper
    if kind == "Flatten":
        return r_upper.reshape(x.shape)
    if kind == "Dense":
        if isinstance(rule, AlphaBeta):
            return lrp_dense_alphabeta(x, layer.weights, r_upper,
                                       rule.alpha, rule.beta, stabilizer)
        if isinstance(rule, Epsilon):
            return lrp_dense_epsilon(x, layer.weights, layer.bias, r_upper, rule.epsilon)
        if isinstance(rule, WSquare):
            return lrp_input_wsquare(layer.weights, r_upper)
        return lrp_input_zb(x, layer.weights, r_upper, rule.low, rule.high, stabilizer)
    if kind == "Conv2D":
        if isinstance(rule, AlphaBeta):
            return _conv_alphabeta(layer, x, r_upper, rule.alpha, rule.beta, stabilizer)
        if isinstance(rule, Epsilon):
            return _conv_epsilon(layer, x, r_upper, rule.epsilon)
        if isinstance(rule, WSquare):
            return _conv_wsquare(layer, x, r_upper)
        return _conv_zbounds(layer, x, r_upper, rule.low, rule.high, stabilizer)
    return lrp_pool(layer, x, extra, r_upper, rule, stabilizer)


def _explained_value(logits, class_index, explained_output):
    if explained_output == "logit":
        return float(logits[class_index])
    return float(log_softmax(logits)[class_index])


def _backward_sweep(network, trace, class_index, config, mask_at=None, mask=None):
    value = _explained_value(trace.logits, class_index, config.explained_output)
    r = np.zeros_like(trace.logits)
    r[class_index] = value
    masked_total = None
    if mask_at == len(network.layers):
        r = r * mask
        masked_total = float(np.sum(r))
    rels = [r]
    for idx in reversed(range(len(network.layers))):
        layer = network.layers[idx]
        r = _propagate_layer(layer, trace.inputs[idx], trace.aux[idx], r,
                             config.layer_rules[idx], config.stabilizer)
        if idx == mask_at:
            r = r * mask
            masked_total = float(np.sum(r))
        rels.append(r)
    rels.reverse()
    return rels, value, masked_total


def lrp(network, trace, class_index, config):
    """Propagate the selected output back to the input under `config` rules.

    The output layer starts with the explained value at `class_index` and zero
    elsewhere; every layer is then propagated by its assigned rule.
    """
    _check_rules(network, config)
    if not 0 <= class_index < network.class_count:
        raise ValueError(f"class_index {class_index} out of range [0, {network.class_count})")
    rels, value, _ = _backward_sweep(network, trace, class_index, config)
    meta = {"class_index": class_index,
            "explained_output": config.explained_output,
            "rules": config.name,
            "stabilizer": config.stabilizer}
    return RelevanceTrace(tuple(rels), value, class_index, f"lrp:{config.name}", meta)


def lrp_heatmap(network, x, class_index, config):
    """Forward pass plus relevance propagation, packaged as a Heatmap."""
    trace = forward(network, x)
    return lrp(network, trace, class_index, config).heatmap()


def filter_relevance(network, trace, class_index, config, layer_index, mask):
    """Keep only relevance flowing through the masked part of one layer.

    The mask (entries in [0, 1]) multiplies the relevance tensor aligned with
    the input of `layer_index` before propagation continues; passing
    len(network.layers) masks the logits themselves.
    """
    _check_rules(network, config)
    if not 0 <= layer_index <= len(network.layers):
        raise ValueError(f"layer_index {layer_index} out of range")
    mask = as_tensor(mask, "mask")
    expected = (trace.logits.shape if layer_index == len(network.layers)
                else trace.inputs[layer_index].shape)
    if mask.shape != expected:
        raise ValueError(f"mask shape {mask.shape} does not match the layer's "
                         f"relevance shape {expected}")
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("mask entries must lie in [0, 1]")
    rels, value, masked_total = _backward_sweep(network, trace, class_index, config,
                                                mask_at=layer_index, mask=mask)
    meta = {"class_index": class_index,
            "explained_output": config.explained_output,
            "rules": config.name,
            "filter_layer": layer_index,
            "masked_layer_total": masked_total}
    hm = Heatmap.from_scores(rels[0], value, f"lrp-filtered:{config.name}", meta)
    hm.meta["conservation_gap"] = masked_total - hm.total
    return hm


def _output_seed(logits, class_index, explained_output):
    seed = np.zeros(logits.shape[0])
    seed[class_index] = 1.0
    if explained_output == "log_probability":
        seed -= softmax(logits)
    return seed


def sensitivity(network, x, class_index, explained_output="logit"):
    """Squared partial derivatives; decomposes the squared gradient norm."""
    if not 0 <= class_index < network.class_count:
        raise ValueError(f"class_index {class_index} out of range [0, {network.class_count})")
    trace = forward(network, x)
    seed = _output_seed(trace.logits, class_index, explained_output)
    g = seeded_gradient(network, trace, seed)
    scores = g * g
    meta = {"class_index": class_index, "explained_output": explained_output}
    return Heatmap.from_scores(scores, float(np.sum(scores)), "sensitivity", meta)


def simple_taylor(network, x, class_index, explained_output="logit"):
    """Gradient times input; exact for zero-bias ReLU networks.

    The unexplained part explained_value - total is reported under the
    "residual" metadata key (zero only in the homogeneous case).
    """
    if not 0 <= class_index < network.class_count:
        raise ValueError(f"class_index {class_index} out of range [0, {network.class_count})")
    trace = forward(network, x)
    seed = _output_seed(trace.logits, class_index, explained_output)
    g = seeded_gradient(network, trace, seed)
    scores = g * trace.input
    value = _explained_value(trace.logits, class_index, explained_output)
    hm = Heatmap.from_scores(scores, value, "simple_taylor",
                             {"class_index": class_index,
                              "explained_output": explained_output})
    hm.meta["residual"] = value - hm.total
    return hm


def _rules_for(network, hidden_rule, input_rule, pool_rule):
    first_weighted = _first_weighted_index(network)
    rules = []
    for idx, layer in enumerate(network.layers):
        if layer.kind in WEIGHTED_KINDS:
            rules.append(input_rule if idx == first_weighted else hidden_rule)
        elif layer.kind in POOL_KINDS:
            rules.append(pool_rule)
        else:
            rules.append(PassThrough())
    return tuple(rules)


def deep_taylor_config(network, input_domain="relu", low=None, high=None,
                       stabilizer=1e-9, explained_output="logit"):
    """Default rule stack: excitatory-only hidden layers, proportional pools,
    and a first-layer rule chosen by input domain.

    input_domain: "relu" (non-negative inputs, excitatory rule), "pixel"
    (box-bounded inputs, requires low/high), or "real" (unbounded inputs,
    squared-weight rule).
    """
    if input_domain == "relu":
        input_rule = AlphaBeta(1.0, 0.0)
    elif input_domain == "pixel":
        if low is None or high is None:
            raise ValueError("pixel input domain requires low/high bounds")
        input_rule = ZBounds(low, high)
    elif input_domain == "real":
        input_rule = WSquare()
    else:
        raise ValueError(f"unknown input domain {input_domain!r}")
    rules = _rules_for(network, AlphaBeta(1.0, 0.0), input_rule, PoolProportional())
    return RuleConfig(rules, stabilizer, explained_output, name="deeptaylor")


def alphabeta_config(network, alpha, beta, stabilizer=1e-9, explained_output="logit"):
    """Uniform alpha/beta rule on every weighted layer."""
    rule = AlphaBeta(alpha, beta)
    rules = _rules_for(network, rule, rule, PoolProportional())
    return RuleConfig(rules, stabilizer, explained_output,
                      name=f"alpha{alpha:g}beta{beta:g}")


def epsilon_config(network, epsilon=1e-9, stabilizer=1e-9, explained_output="logit"):
    """Uniform epsilon rule on every weighted layer."""
    rule = Epsilon(epsilon)
    rules = _rules_for(network, rule, rule, PoolProportional())
    return RuleConfig(rules, stabilizer, explained_output, name="epsilon")
