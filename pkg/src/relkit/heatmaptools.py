"""Heatmap post-processing: region pooling, translation averaging, sliding
window explanation of oversized images, pattern masking, and PPM rendering."""

from __future__ import annotations

import warnings

import numpy as np

from .explain import Heatmap, lrp
from .netcore import as_tensor, forward


def pool_relevance(heatmap, partition):
    """Sum heatmap scores per region id; region sums preserve the total.

    `partition` assigns a non-negative integer region id to every feature and
    must have the heatmap's shape. Returns an array indexed by region id.
    """
    ids = np.asarray(partition)
    scores = np.asarray(heatmap.scores, dtype=np.float64)
    if ids.shape != scores.shape:
        raise ValueError(f"partition shape {ids.shape} does not cover the "
                         f"heatmap shape {scores.shape}")
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0:
        raise ValueError("region ids must be non-negative integers")
    return np.bincount(ids.ravel(), weights=scores.ravel())


def pixel_partition(shape):
    """One region per spatial position, pooling channels together."""
    if len(shape) < 2:
        raise ValueError("pixel partition needs at least a 2-D shape")
    h, w = shape[-2], shape[-1]
    plane = np.arange(h * w).reshape(h, w)
    return np.broadcast_to(plane, shape).copy()


def quadrant_partition(shape):
    """Four regions: top-left 0, top-right 1, bottom-left 2, bottom-right 3."""
    if len(shape) < 2:
        raise ValueError("quadrant partition needs at least a 2-D shape")
    h, w = shape[-2], shape[-1]
    rows = (np.arange(h) >= (h + 1) // 2).astype(int)
    cols = (np.arange(w) >= (w + 1) // 2).astype(int)
    plane = rows[:, None] * 2 + cols[None, :]
    return np.broadcast_to(plane, shape).copy()


def shift_image(image, shift):
    """Shift the last two axes by integer (dy, dx), filling with zeros."""
    dy, dx = (int(v) for v in shift)
    out = np.zeros_like(image)
    h, w = image.shape[-2], image.shape[-1]
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[..., dst_r, dst_c] = image[..., src_r, src_c]
    return out


def translation_average(explainer, network, image, shifts, require_identity=True):
    """Average inverse-shifted explanations of shifted copies of the image.

    Content moved outside the frame is zero-filled and contributes nothing on
    the way back, so shifts should be small relative to the image content.
    """
    image = as_tensor(image, "image")
    shifts = [tuple(int(v) for v in s) for s in shifts]
    if not shifts:
        raise ValueError("shift set is empty")
    if require_identity and (0, 0) not in shifts:
        raise ValueError("shift set lacks the identity shift "
                         "(pass require_identity=False to allow this)")
    acc = None
    value_sum = 0.0
    first_meta = {}
    tag = ""
    for s in shifts:
        hm = explainer(network, shift_image(image, s))
        restored = shift_image(np.asarray(hm.scores, dtype=np.float64), (-s[0], -s[1]))
        acc = restored if acc is None else acc + restored
        value_sum += hm.explained_value
        if not first_meta:
            first_meta = dict(hm.meta)
            tag = hm.method_tag
    mean = acc / len(shifts)
    meta = dict(first_meta)
    meta["shifts"] = shifts
    return Heatmap.from_scores(mean, value_sum / len(shifts),
                               f"translation_average:{tag}", meta)


def sliding_window_explain(network, big_image, stride, rule_config, class_index):
    """Explain an oversized image by accumulating per-window relevance.

    The network's input shape is slid over the image at the given stride;
    every window is explained independently and the heatmaps are added, so
    the result decomposes the sum of the per-window outputs. Metadata carries
    the per-pixel coverage counts for an optional normalized display.
    """
    big = as_tensor(big_image, "image")
    window = network.input_shape
    if big.ndim != len(window):
        raise ValueError(f"image rank {big.ndim} does not match network input "
                         f"rank {len(window)}")
    if big.ndim == 2:
        wh, ww = window
        big_c, (h, w) = None, big.shape
    elif big.ndim == 3:
        if big.shape[0] != window[0]:
            raise ValueError(f"image has {big.shape[0]} channels, network expects {window[0]}")
        big_c, wh, ww = window
        h, w = big.shape[1], big.shape[2]
    else:
        raise ValueError("sliding window expects a 2-D or (channels, h, w) image")
    if stride < 1:
        raise ValueError("stride must be positive")
    if h < wh or w < ww:
        raise ValueError(f"image {big.shape} is smaller than the network window {window}")

    acc = np.zeros_like(big)
    coverage = np.zeros(big.shape, dtype=np.int64)
    total_value = 0.0
    count = 0
    for top in range(0, h - wh + 1, stride):
        for left in range(0, w - ww + 1, stride):
            region = (..., slice(top, top + wh), slice(left, left + ww))
            trace = forward(network, big[region])
            hm = lrp(network, trace, class_index, rule_config).heatmap()
            acc[region] += hm.scores
            coverage[region] += 1
            total_value += hm.explained_value
            count += 1
    meta = {"class_index": class_index,
            "explained_output": rule_config.explained_output,
            "rules": rule_config.name,
            "stride": stride,
            "windows": count,
            "coverage": coverage}
    return Heatmap.from_scores(acc, total_value, f"sliding_window:{rule_config.name}", meta)


def pattern(image, heatmap, normalization="clip", percentile=99.0):
    """Mask the image by its normalized heatmap: P = x * R_normalized.

    Negative scores are clipped to zero first. "clip" caps scores at the given
    percentile before rescaling to [0, 1]; "rescale" divides by the maximum
    directly. The result stays inside the image's value range.
    """
    image = as_tensor(image, "image")
    scores = np.asarray(heatmap.scores, dtype=np.float64)
    if scores.shape != image.shape:
        raise ValueError(f"heatmap shape {scores.shape} does not match image {image.shape}")
    if normalization not in ("rescale", "clip"):
        raise ValueError('normalization must be "rescale" or "clip"')
    mask = np.maximum(scores, 0.0)
    if normalization == "clip":
        mask = np.minimum(mask, np.percentile(mask, percentile))
    top = mask.max()
    if top == 0.0:
        warnings.warn("all-zero heatmap: pattern is a zero image")
        return np.zeros_like(image)
    return image * (mask / top)


def render_heatmap(heatmap, colormap="diverging"):
    """Render a 2-D (or channel-pooled) heatmap as binary PPM (P6) bytes.

    The diverging map is symmetric around zero (positive red, negative blue,
    zero white), so negating the heatmap swaps the red and blue channels
    exactly. The sequential map runs black to red over [min, max].
    """
    scores = np.asarray(heatmap.scores, dtype=np.float64)
    if scores.ndim == 3:
        scores = scores.sum(axis=0)
    if scores.ndim != 2:
        raise ValueError("rendering needs a 2-D or (channels, h, w) heatmap")
    h, w = scores.shape
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    if colormap == "diverging":
        limit = np.abs(scores).max()
        t = scores / limit if limit > 0 else np.zeros_like(scores)
        fade_pos = np.rint(255.0 * (1.0 - np.maximum(t, 0.0))).astype(np.uint8)
        fade_neg = np.rint(255.0 * (1.0 + np.minimum(t, 0.0))).astype(np.uint8)
        rgb[..., 0] = np.where(t >= 0, 255, fade_neg)
        rgb[..., 1] = np.where(t >= 0, fade_pos, fade_neg)
        rgb[..., 2] = np.where(t >= 0, fade_pos, 255)
    elif colormap == "sequential":
        lo, hi = scores.min(), scores.max()
        t = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
        rgb[..., 0] = np.rint(255.0 * t).astype(np.uint8)
        rgb[..., 1] = 0
        rgb[..., 2] = 0
    else:
        raise ValueError(f"unknown colormap {colormap!r}")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + rgb.tobytes()
