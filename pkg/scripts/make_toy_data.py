"""Regenerate the toy CSV files shipped in src/idsgan/assets/.

toy_binary.csv      500 rows, 8 features, 2 roughly balanced classes
toy_imbalanced.csv  2000 rows, 10 features, minority class at 5%
"""

import csv
import os

import numpy as np

ASSETS = os.path.join(os.path.dirname(__file__), "..", "src", "idsgan", "assets")


def write(path, X, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, labels):
            w.writerow([f"{v:.6f}" for v in row] + [lab])


def toy_binary(rng):
    n, d = 500, 8
    y = rng.permutation(np.r_[np.zeros(250, int), np.ones(250, int)])
    centres = np.array([[20, 5, 40, 3, 10, 60, 2, 30], [35, 9, 25, 6, 18, 45, 5, 50]], float)
    X = centres[y] + rng.normal(0, 6, size=(n, d))
    return np.abs(X), np.where(y == 1, "attack", "normal")


def toy_imbalanced(rng):
    n, d, n_min = 2000, 10, 100
    y = rng.permutation(np.r_[np.zeros(n - n_min, int), np.ones(n_min, int)])
    X = rng.normal(0.0, 1.0, size=(n, d))
    # minority shifted on half the features, overlapping the majority
    X[y == 1, :5] += 1.6
    X = X * 10 + 50
    return X, np.where(y == 1, "attack", "normal")


if __name__ == "__main__":
    rng = np.random.default_rng(20240601)
    write(os.path.join(ASSETS, "toy_binary.csv"), *toy_binary(rng))
    write(os.path.join(ASSETS, "toy_imbalanced.csv"), *toy_imbalanced(rng))
