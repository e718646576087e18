"""Shared fixtures: deterministic datasets materialized once per session."""

import csv

import numpy as np
import pytest

from kronfisher.data_io import Dataset, load_mnist_idx, write_synthetic_digits
from kronfisher.tensor import SeededRng, gaussian_fill


@pytest.fixture(scope="session")
def digits_paths(tmp_path_factory):
    """IDX files for the synthetic digit corpus (2000 train / 500 test)."""
    out = tmp_path_factory.mktemp("digits")
    return write_synthetic_digits(out, seed=9, n_train=2000, n_test=500)


@pytest.fixture(scope="session")
def digits_train(digits_paths) -> Dataset:
    return load_mnist_idx(digits_paths["train_images"], digits_paths["train_labels"])


@pytest.fixture(scope="session")
def digits_test(digits_paths) -> Dataset:
    return load_mnist_idx(digits_paths["test_images"], digits_paths["test_labels"])


IRIS_HEADER = ["sepal_length", "sepal_width", "petal_length", "petal_width", "species"]
IRIS_MEANS = {
    "setosa": (5.0, 3.4, 1.5, 0.25),
    "versicolor": (5.9, 2.8, 4.3, 1.3),
    "virginica": (6.6, 3.0, 5.6, 2.0),
}


def make_iris_rows(seed: int = 5):
    rng = SeededRng(seed)
    rows = []
    for species, mean in IRIS_MEANS.items():
        feats = gaussian_fill(rng, (50, 4), std=0.25) + np.asarray(mean)
        for i in range(50):
            rows.append([f"{feats[i, j]:.3f}" for j in range(4)] + [species])
    return rows


@pytest.fixture(scope="session")
def iris_csv(tmp_path_factory):
    """150x4 three-class CSV fixture in the classic layout."""
    path = tmp_path_factory.mktemp("csv") / "iris_like.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IRIS_HEADER)
        writer.writerows(make_iris_rows())
    return path


MLP_784 = [
    {"kind": "dense", "in": 784, "out": 64},
    {"kind": "relu"},
    {"kind": "dense", "in": 64, "out": 10},
]

TOY_CONV = [
    {"kind": "conv2d", "c_in": 1, "c_out": 4, "k_h": 3, "k_w": 3, "stride": 2, "padding": 1},
    {"kind": "relu"},
    {"kind": "conv2d", "c_in": 4, "c_out": 8, "k_h": 3, "k_w": 3, "stride": 2, "padding": 1},
    {"kind": "relu"},
    {"kind": "dense", "in": 8 * 7 * 7, "out": 64},
    {"kind": "relu"},
    {"kind": "dense", "in": 64, "out": 10},
]

MLP_483 = [
    {"kind": "dense", "in": 4, "out": 8},
    {"kind": "tanh"},
    {"kind": "dense", "in": 8, "out": 3},
]
