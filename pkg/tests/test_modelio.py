"""Model JSON round trips, IDX parsing, and the CSV tensor/curve formats."""

import json
import struct

import numpy as np
import pytest

import relkit
from relkit.modelio import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, ModelFormatError


def test_max_network_round_trip_is_bit_exact(max_network, tmp_path):
    path = tmp_path / "model.json"
    relkit.save_model(max_network, path)
    loaded = relkit.load_model(path)
    rng = np.random.default_rng(199)
    for _ in range(20):
        x = rng.standard_normal(2)
        assert np.array_equal(relkit.forward(loaded, x).logits,
                              relkit.forward(max_network, x).logits)


def test_random_network_round_trip_100_inputs(tmp_path):
    net = relkit.random_network(
        (1, 6, 6),
        [("conv", 3, 3, 3, 1, 1), ("relu",), ("maxpool", 2, 2, 2, 0),
         ("flatten",), ("dense", 4)],
        seed=23)
    path = tmp_path / "model.json"
    relkit.save_model(net, path)
    loaded = relkit.load_model(path)
    rng = np.random.default_rng(211)
    for _ in range(100):
        x = rng.random((1, 6, 6))
        assert np.array_equal(relkit.forward(loaded, x).logits,
                              relkit.forward(net, x).logits)


def test_save_is_deterministic(max_network, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    relkit.save_model(max_network, a)
    relkit.save_model(max_network, b)
    assert a.read_bytes() == b.read_bytes()


def test_expert_and_bounds_round_trip(tmp_path):
    rng = np.random.default_rng(223)
    expert = relkit.RbmExpert(rng.standard_normal((3, 4)), rng.standard_normal(3),
                              np.eye(4) * 2.0)
    net = relkit.random_network((4,), [("dense", 2)], seed=1)
    path = tmp_path / "model.json"
    relkit.save_model(net, path, expert=expert, input_bounds=(0.0, 1.0))
    loaded = relkit.load_model_file(path)
    assert np.array_equal(loaded.expert.factor_weights, expert.factor_weights)
    assert np.array_equal(loaded.expert.precision, expert.precision)
    assert loaded.input_low == 0.0
    assert loaded.input_high == 1.0


def test_truncated_file_is_structured_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"format_version": 1, "layers": [')
    with pytest.raises(ModelFormatError, match="malformed JSON"):
        relkit.load_model(path)


def test_unknown_layer_kind_names_the_kind(tmp_path):
    doc = {"format_version": 1, "input_shape": [2], "class_count": 2,
           "layers": [{"kind": "BatchNorm"}]}
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="BatchNorm"):
        relkit.load_model(path)


def test_unsupported_version_rejected(tmp_path):
    doc = {"format_version": 99, "input_shape": [2], "class_count": 2, "layers": []}
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="format_version"):
        relkit.load_model(path)


def test_shape_inconsistency_names_layer(tmp_path):
    doc = {"format_version": 1, "input_shape": [2], "class_count": 1,
           "layers": [{"kind": "Dense", "weights": [[1.0], [1.0]], "bias": [0.0]},
                      {"kind": "Dense", "weights": [[1.0, 1.0], [1.0, 1.0]],
                       "bias": [0.0, 0.0]}]}
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="layer 1"):
        relkit.load_model(path)


def test_idx_image_rescaling(tmp_path):
    path = tmp_path / "imgs.idx"
    payload = bytes([0, 255, 128, 0])
    path.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 1, 2, 2) + payload)
    images = relkit.load_idx(path)
    assert images.shape == (1, 2, 2)
    assert np.array_equal(images[0].ravel(), [0.0, 1.0, 128 / 255, 0.0])


def test_idx_wrong_magic_rejected(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 8)
    with pytest.raises(ValueError, match="magic"):
        relkit.load_idx(path)


def test_idx_payload_length_mismatch_rejected(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 2, 2) + b"\x00" * 7)
    with pytest.raises(ValueError, match="payload"):
        relkit.load_idx(path)


def test_idx_dimension_overflow_rejected(tmp_path):
    path = tmp_path / "huge.idx"
    path.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2 ** 30, 2 ** 10, 2 ** 10))
    with pytest.raises(ValueError, match="overflow"):
        relkit.load_idx(path)


def test_idx_label_round_trip(tmp_path):
    path = tmp_path / "labels.idx"
    labels = np.array([0, 1, 1, 0, 1])
    relkit.save_idx_labels(path, labels)
    assert np.array_equal(relkit.load_idx(path), labels)
    raw = path.read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == IDX_LABEL_MAGIC


def test_idx_image_round_trip(tmp_path):
    rng = np.random.default_rng(227)
    images = np.rint(rng.random((3, 4, 4)) * 255) / 255.0
    path = tmp_path / "imgs.idx"
    relkit.save_idx_images(path, images)
    assert np.allclose(relkit.load_idx(path), images, rtol=0, atol=1e-12)


def test_heatmap_csv_round_trip(tmp_path):
    rng = np.random.default_rng(229)
    hm = relkit.Heatmap.from_scores(rng.standard_normal((2, 3)), 1.25, "lrp:test",
                                    {"class_index": 1, "explained_output": "logit"})
    path = tmp_path / "heat.csv"
    relkit.save_heatmap_csv(path, hm)
    loaded = relkit.load_heatmap_csv(path)
    assert np.array_equal(loaded.scores, hm.scores)
    assert loaded.explained_value == hm.explained_value
    assert loaded.method_tag == hm.method_tag
    assert loaded.meta["class_index"] == 1


def test_curve_csv_contains_steps_and_auc(tmp_path):
    curve = relkit.FlipCurve((3.0, 1.0, 0.0), (1, 0), 1.25,
                             {"patch": 1, "fill": 0.0})
    path = tmp_path / "curve.csv"
    relkit.save_curve_csv(path, curve)
    text = path.read_text()
    assert "step,value" in text
    assert "0,3.0" in text and "2,0.0" in text
    assert "# auc: 1.25" in text
