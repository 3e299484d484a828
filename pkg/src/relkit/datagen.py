"""Synthetic two-class digit images for demos and offline testing.

Class 0 is a soft elliptical ring, class 1 a near-vertical stroke, both with
randomized geometry, amplitude, and additive noise. Images are grayscale
floats in [0, 1] at a configurable size (default 28x28), so they drop into
the same IDX pipeline as real handwritten-digit data.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .modelio import save_idx_images, save_idx_labels


def _ring(ys, xs, rng, size):
    cy = size / 2 + rng.uniform(-2.0, 2.0)
    cx = size / 2 + rng.uniform(-2.0, 2.0)
    ry = rng.uniform(0.25 * size, 0.34 * size)
    rx = rng.uniform(0.16 * size, 0.27 * size)
    theta = rng.uniform(-0.3, 0.3)
    dy, dx = ys - cy, xs - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    dist = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    thickness = rng.uniform(1.0, 1.6)
    return np.exp(-(((dist - 1.0) * (rx + ry) / 2.0) / thickness) ** 2)


def _stroke(ys, xs, rng, size):
    x_top = size / 2 + rng.uniform(-0.12 * size, 0.12 * size)
    x_bot = x_top + rng.uniform(-0.1 * size, 0.1 * size)
    y_top = rng.uniform(0.14 * size, 0.25 * size)
    y_bot = rng.uniform(0.75 * size, 0.86 * size)
    # distance from each pixel to the stroke segment
    px, py = x_bot - x_top, y_bot - y_top
    norm2 = px * px + py * py
    t = np.clip(((xs - x_top) * px + (ys - y_top) * py) / norm2, 0.0, 1.0)
    dist = np.sqrt((xs - (x_top + t * px)) ** 2 + (ys - (y_top + t * py)) ** 2)
    thickness = rng.uniform(1.0, 1.5)
    return np.exp(-(dist / thickness) ** 2)


def make_digits(count, seed, size=28, noise=0.03):
    """Generate `count` labeled digit images; deterministic for a seed."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((count, size, size))
    labels = rng.integers(0, 2, size=count)
    for i in range(count):
        drawing = _ring if labels[i] == 0 else _stroke
        img = drawing(ys, xs, rng, size) * rng.uniform(0.75, 1.0)
        img += rng.normal(0.0, noise, size=(size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def write_dataset(directory, prefix, images, labels):
    """Write an (images, labels) pair as IDX files; returns the two paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{prefix}-images.idx"
    label_path = directory / f"{prefix}-labels.idx"
    save_idx_images(image_path, images)
    save_idx_labels(label_path, labels)
    return image_path, label_path


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Generate a synthetic two-class digit dataset as IDX files.")
    parser.add_argument("out", help="output directory")
    parser.add_argument("--train", type=int, default=600, help="training images")
    parser.add_argument("--test", type=int, default=100, help="test images")
    parser.add_argument("--size", type=int, default=28, help="image side length")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    train_x, train_y = make_digits(args.train, args.seed, size=args.size)
    test_x, test_y = make_digits(args.test, args.seed + 1, size=args.size)
    write_dataset(args.out, "train", train_x, train_y)
    write_dataset(args.out, "test", test_x, test_y)
    print(f"wrote {args.train} train / {args.test} test images to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
