"""Serialization: model JSON files, IDX image/label datasets, and the CSV
formats used for heatmaps, prototypes, and flip curves.

Model files are UTF-8 JSON with sorted keys and round-trip-exact decimal
floats, so saving is deterministic and loading reproduces forward outputs
bit-exactly. Datasets use the IDX binary container (big-endian header,
unsigned bytes rescaled to [0, 1]).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .explain import Heatmap
from .netcore import LayerSpec, Network, as_tensor
from .prototype import RbmExpert

FORMAT_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_MAX_IDX_ELEMENTS = 1 << 28


class ModelFormatError(ValueError):
    """Raised for malformed or unsupported model files."""


@dataclass(frozen=True, eq=False)
class ModelFile:
    """A loaded model document: the network plus optional extras."""

    network: Network
    expert: RbmExpert | None = None
    input_low: np.ndarray | None = None
    input_high: np.ndarray | None = None


def _layer_doc(layer):
    doc = {"kind": layer.kind}
    if layer.kind == "Dense":
        doc["weights"] = layer.weights.tolist()
        doc["bias"] = layer.bias.tolist()
    elif layer.kind == "Conv2D":
        doc["weights"] = layer.weights.tolist()
        doc["bias"] = layer.bias.tolist()
        doc["stride"] = layer.stride
        doc["padding"] = layer.padding
    elif layer.window is not None:
        doc["window"] = list(layer.window)
        doc["stride"] = layer.stride
        doc["padding"] = layer.padding
    return doc


def save_model(network, path, expert=None, input_bounds=None):
    """Write the network (and optional expert / input bounds) as JSON."""
    doc = {"format_version": FORMAT_VERSION,
           "input_shape": list(network.input_shape),
           "class_count": network.class_count,
           "layers": [_layer_doc(layer) for layer in network.layers]}
    if expert is not None:
        doc["expert"] = {"factor_weights": expert.factor_weights.tolist(),
                         "factor_biases": expert.factor_biases.tolist(),
                         "precision": expert.precision.tolist()}
    if input_bounds is not None:
        low, high = input_bounds
        doc["input_bounds"] = {"low": np.asarray(low, dtype=np.float64).tolist(),
                               "high": np.asarray(high, dtype=np.float64).tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def _require(doc, key, where):
    if key not in doc:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return doc[key]


def _parse_layer(doc, index):
    where = f"layer {index}"
    kind = _require(doc, "kind", where)
    try:
        if kind == "Dense":
            return LayerSpec("Dense", weights=_require(doc, "weights", where),
                             bias=_require(doc, "bias", where))
        if kind == "Conv2D":
            return LayerSpec("Conv2D", weights=_require(doc, "weights", where),
                             bias=_require(doc, "bias", where),
                             stride=int(doc.get("stride", 1)),
                             padding=int(doc.get("padding", 0)))
        if kind in ("SumPool", "AvgPool", "MaxPool"):
            window = _require(doc, "window", where)
            return LayerSpec(kind, window=tuple(window),
                             stride=int(doc.get("stride", 1)),
                             padding=int(doc.get("padding", 0)))
        if kind in ("ReLU", "Flatten"):
            return LayerSpec(kind)
    except ValueError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None
    raise ModelFormatError(f"{where}: unsupported layer kind {kind!r}")


def load_model_file(path):
    """Load a full model document (network, optional expert and bounds)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed JSON in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: expected a JSON object at the top level")
    version = _require(doc, "format_version", str(path))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r} "
                               f"(this build reads version {FORMAT_VERSION})")
    layers = [_parse_layer(layer_doc, i)
              for i, layer_doc in enumerate(_require(doc, "layers", str(path)))]
    try:
        network = Network(tuple(layers),
                          tuple(_require(doc, "input_shape", str(path))),
                          int(_require(doc, "class_count", str(path))))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None

    expert = None
    if "expert" in doc:
        e = doc["expert"]
        try:
            expert = RbmExpert(_require(e, "factor_weights", "expert"),
                               _require(e, "factor_biases", "expert"),
                               _require(e, "precision", "expert"))
        except ValueError as exc:
            raise ModelFormatError(f"expert: {exc}") from None
    low = high = None
    if "input_bounds" in doc:
        b = doc["input_bounds"]
        low = as_tensor(_require(b, "low", "input_bounds"), "input low bound")
        high = as_tensor(_require(b, "high", "input_bounds"), "input high bound")
    return ModelFile(network, expert, low, high)


def load_model(path):
    """Load just the network from a model file."""
    return load_model_file(path).network


def load_idx(path):
    """Read an IDX file: images as floats in [0, 1] or labels as integers."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: wrong magic 0x{magic:08X} (expected image "
                         f"0x{IDX_IMAGE_MAGIC:08X} or label 0x{IDX_LABEL_MAGIC:08X})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if count > _MAX_IDX_ELEMENTS:
        raise ValueError(f"{path}: dimension overflow ({dims})")
    payload = raw[header:]
    if len(payload) != count:
        raise ValueError(f"{path}: dimensions {dims} need {count} bytes, "
                         f"payload has {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8)
    if magic == IDX_LABEL_MAGIC:
        return data.astype(np.int64)
    return data.reshape(dims).astype(np.float64) / 255.0


def save_idx_images(path, images):
    """Write float images in [0, 1] (or uint8) as an IDX image file."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be a (count, height, width) array")
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def save_idx_labels(path, labels):
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.min() < 0 or arr.max() > 255:
        raise ValueError("labels must be a 1-D array of bytes")
    header = struct.pack(">II", IDX_LABEL_MAGIC, arr.shape[0])
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def _jsonable_meta(meta):
    clean = {}
    for key, value in meta.items():
        if isinstance(value, np.ndarray):
            clean[key] = value.tolist()
        elif isinstance(value, (np.integer,)):
            clean[key] = int(value)
        elif isinstance(value, (np.floating,)):
            clean[key] = float(value)
        else:
            clean[key] = value
    return clean


def save_tensor_csv(path, array, meta):
    """Flat one-value-per-line CSV with shape and JSON metadata comments."""
    arr = np.asarray(array, dtype=np.float64)
    lines = ["# relkit-tensor v1",
             "# shape: " + ",".join(str(v) for v in arr.shape),
             "# meta: " + json.dumps(_jsonable_meta(meta), sort_keys=True)]
    lines.extend(repr(float(v)) for v in arr.ravel())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tensor_csv(path):
    """Read back a tensor CSV; returns (array, meta)."""
    shape = None
    meta = {}
    values = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("shape:"):
                shape = tuple(int(v) for v in body[len("shape:"):].split(",") if v.strip())
            elif body.startswith("meta:"):
                meta = json.loads(body[len("meta:"):])
            continue
        values.append(float(line))
    if shape is None:
        raise ValueError(f"{path}: missing shape header")
    arr = np.array(values, dtype=np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: {arr.size} values do not fill shape {shape}")
    return arr.reshape(shape), meta


def save_heatmap_csv(path, heatmap):
    meta = dict(heatmap.meta)
    meta["method_tag"] = heatmap.method_tag
    meta["explained_value"] = heatmap.explained_value
    meta["total"] = heatmap.total
    save_tensor_csv(path, heatmap.scores, meta)


def load_heatmap_csv(path):
    scores, meta = load_tensor_csv(path)
    method_tag = meta.pop("method_tag", "loaded")
    explained = meta.pop("explained_value", float(np.sum(scores)))
    meta.pop("total", None)
    return Heatmap.from_scores(scores, explained, method_tag, meta)


def save_curve_csv(path, curve):
    """Write a flip curve as (step, value) rows with metadata comments."""
    lines = ["# relkit-flipcurve v1",
             "# meta: " + json.dumps(_jsonable_meta(curve.meta), sort_keys=True),
             "# auc: " + repr(float(curve.auc)),
             "# order: " + ",".join(str(i) for i in curve.order),
             "step,value"]
    lines.extend(f"{step},{repr(float(v))}" for step, v in enumerate(curve.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
