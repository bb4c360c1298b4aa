"""
Generate a synthetic 28x28 image classification task and save it as IDX files,
so the CNN configs can run without the MNIST downloads.

Usage: python scripts/generate_synthetic_idx.py --out data/synthetic --train 12000 --test 2000
"""
import argparse
import logging
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from flsim.datasets import gen_synthetic, write_mnist_idx  # noqa: E402


def setup_logging():
    """Configure logging for the script."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )


def to_pixels(x):
    """
    Squash real features into uint8 pixels with a logistic curve.

    Args:
        x (np.ndarray): features, one row per image

    Returns:
        np.ndarray: uint8 array of shape (n, 28, 28)
    """
    scaled = 1.0 / (1.0 + np.exp(-x))
    return np.rint(scaled * 255).astype(np.uint8).reshape(len(x), 28, 28)


def generate_idx_dataset(out_dir, n_train, n_test, classes=10, margin=4.0, seed=0):
    """
    Write train-images/labels and t10k-images/labels IDX files to out_dir.

    Args:
        out_dir (str): target directory (created if missing)
        n_train (int): training examples
        n_test (int): test examples
        classes (int): number of classes (at most 10 for IDX labels)
        margin (float): distance between class centres
        seed (int): generator seed

    Returns:
        None
    """
    os.makedirs(out_dir, exist_ok=True)
    data = gen_synthetic(classes, 28 * 28, n_train + n_test, seed, margin)
    pixels = to_pixels(data.x)
    splits = {
        "train": (pixels[:n_train], data.y[:n_train]),
        "t10k": (pixels[n_train:], data.y[n_train:]),
    }
    for prefix, (images, labels) in splits.items():
        images_path = os.path.join(out_dir, f"{prefix}-images-idx3-ubyte")
        labels_path = os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte")
        write_mnist_idx(images, labels, images_path, labels_path)
        logging.info(f"Saved {len(labels)} examples to {images_path} and {labels_path}")


def main():
    setup_logging()
    parser = argparse.ArgumentParser(description="Generate a synthetic IDX image dataset.")
    parser.add_argument('--out', type=str, required=True, help="output directory")
    parser.add_argument('--train', type=int, default=12000, help="number of training examples")
    parser.add_argument('--test', type=int, default=2000, help="number of test examples")
    parser.add_argument('--classes', type=int, default=10, help="number of classes")
    parser.add_argument('--margin', type=float, default=4.0, help="distance between class centres")
    parser.add_argument('--seed', type=int, default=0, help="generator seed")
    args = parser.parse_args()

    if args.classes > 10:
        logging.error("IDX labels are stored as digits, use at most 10 classes")
        sys.exit(1)
    generate_idx_dataset(args.out, args.train, args.test, args.classes, args.margin, args.seed)


if __name__ == "__main__":
    main()
