"""Quantitative explanation-quality metrics.

pixel_flip measures selectivity: features (or square patches) are removed in
descending order of their heatmap relevance, the model output is re-recorded
after every removal, and the area under the resulting curve summarizes how
fast the output collapses (lower is more selective). continuity_estimate
probes how violently an explanation can change under small input
perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import as_tensor, forward, log_softmax


@dataclass(frozen=True)
class FlipConfig:
    """Removal granularity and fill value for pixel-flipping.

    patch=1 removes single features; patch=p removes p-by-p squares (which
    must tile the spatial extent exactly). Removed entries are set to `fill`.
    """

    patch: int = 1
    fill: float = 0.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch side must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


@dataclass(frozen=True)
class FlipCurve:
    """Recorded output values after 0..n removals, plus the removal order."""

    values: tuple[float, ...]
    order: tuple[int, ...]
    auc: float
    meta: dict


def auc(curve):
    """Step-averaged trapezoid area: a constant curve of value c scores c."""
    values = np.asarray(curve.values if isinstance(curve, FlipCurve) else curve,
                        dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("need at least one recorded value")
    if values.size == 1:
        return float(values[0])
    area = values[1:-1].sum() + 0.5 * (values[0] + values[-1])
    return float(area / (values.size - 1))


def _patch_regions(shape, patch):
    """Row-major list of index regions; each region is removed as one unit."""
    if patch == 1:
        return [np.unravel_index(i, shape) for i in range(int(np.prod(shape)))]
    if len(shape) < 2:
        raise ValueError("patch flipping needs at least a 2-D input")
    h, w = shape[-2], shape[-1]
    if h % patch or w % patch:
        raise ValueError(f"{patch}x{patch} patches do not tile a {h}x{w} input")
    lead = (slice(None),) * (len(shape) - 2)
    regions = []
    for r in range(0, h, patch):
        for c in range(0, w, patch):
            regions.append(lead + (slice(r, r + patch), slice(c, c + patch)))
    return regions


def _model_value(network, x, class_index, explained_output):
    logits = forward(network, x).logits
    if explained_output == "log_probability":
        return float(log_softmax(logits)[class_index])
    return float(logits[class_index])


def pixel_flip(network, x, heatmap, config=FlipConfig()):
    """Greedy removal by descending relevance of the original heatmap.

    The order is fixed up front from the given heatmap (ties broken by lowest
    linear index) and never re-derived from the mutated input. The explained
    class and output mode are taken from the heatmap metadata.
    """
    x = as_tensor(x, "input")
    scores = np.asarray(heatmap.scores, dtype=np.float64)
    if scores.shape != x.shape:
        raise ValueError(f"heatmap shape {scores.shape} does not match input {x.shape}")
    if "class_index" not in heatmap.meta:
        raise ValueError("heatmap metadata lacks class_index")
    class_index = int(heatmap.meta["class_index"])
    mode = heatmap.meta.get("explained_output", "logit")

    regions = _patch_regions(x.shape, config.patch)
    pooled = np.array([scores[region].sum() for region in regions])
    order = np.argsort(-pooled, kind="stable")  # stable: ties keep ascending index
    steps = len(regions) if config.max_steps is None else min(config.max_steps, len(regions))

    work = x.copy()
    values = [_model_value(network, work, class_index, mode)]
    for region_id in order[:steps]:
        work[regions[region_id]] = config.fill
        values.append(_model_value(network, work, class_index, mode))
    meta = {"auc_normalization": "step-averaged trapezoid over unit-spaced removals",
            "patch": config.patch,
            "fill": config.fill,
            "class_index": class_index,
            "explained_output": mode,
            "method_tag": heatmap.method_tag}
    return FlipCurve(tuple(float(v) for v in values),
                     tuple(int(i) for i in order[:steps]),
                     auc(values), meta)


def _heatmap_scores(result):
    return np.asarray(getattr(result, "scores", result), dtype=np.float64)


def continuity_estimate(explainer, network, probes, delta, trials, seed):
    """Sampled lower bound of the explanation's worst variation ratio.

    For each probe, `trials` random perturbations of L2 norm `delta` are
    drawn and the largest ||R(x) - R(x')||_1 / ||x - x'||_2 is returned.
    Deterministic for a fixed seed; trials are drawn in an outer loop so a
    longer run extends (never reshuffles) the sample stream.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    probes = [as_tensor(p, "probe") for p in probes]
    base = [_heatmap_scores(explainer(network, p)) for p in probes]
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(trials):
        for p, r0 in zip(probes, base):
            direction = rng.standard_normal(p.shape)
            norm = np.linalg.norm(direction)
            if norm == 0.0:
                continue
            perturbed = p + (delta / norm) * direction
            r1 = _heatmap_scores(explainer(network, perturbed))
            ratio = np.abs(r0 - r1).sum() / np.linalg.norm(p - perturbed)
            best = max(best, float(ratio))
    return best
