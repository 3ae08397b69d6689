"""
    Brownian Distance Covariance over the channels of a token matrix.

    For tokens x (M×k), K = xᵀx, the squared channel distances are D̂ᵢⱼ = Kᵢᵢ + Kⱼⱼ − 2Kᵢⱼ, Â = √(D̂ + eps) and
    B = Â − (1/k)(JÂ + ÂJ) + (1/k²)JÂJ with J the k×k all-ones matrix.
"""

import logging
from dataclasses import dataclass

import numpy as np

from dalip.errors import ShapeError
from dalip.numcore import Tape, Tensor, as_tensor

LOGGER = logging.getLogger("BDC")

# Stabilizer under the square root during training. The diagonal of D̂ is exactly 0
DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class BdcMatrix:
    dim: int
    values: Tensor

    def asymmetry(self):
        return float(np.abs(self.values - self.values.T).max(initial=0.0))

    def max_margin_sum(self):
        """ Largest absolute row or column sum (0 for a double-centered matrix) """
        return float(max(np.abs(self.values.sum(axis=0)).max(), np.abs(self.values.sum(axis=1)).max()))


def _check_tokens(shape):
    if shape[0] < 1 or shape[1] < 1:
        raise ShapeError(f"BDC needs at least one token and one channel, got ({shape[0]}×{shape[1]})")


def bdc_node(tape: Tape, x: int, eps=DEFAULT_EPS):
    """ Records the BDC matrix of the token node {x} on {tape} and returns its node """

    _check_tokens(tape.value(x).shape)
    k = tape.value(x).shape[1]

    gram = tape.gram(x)
    ones = tape.constant(np.ones((k, k)))
    diag = tape.hadamard(gram, tape.constant(np.eye(k)))

    # 2·sym(J(K∘I)) − 2K with sym(A) = (A + Aᵀ)/2
    sq_dist = tape.subtract(tape.add(tape.matmul(ones, diag), tape.matmul(diag, ones)), tape.scale(gram, 2.0))
    dist = tape.safe_sqrt(sq_dist, eps)

    row_col = tape.add(tape.matmul(ones, dist), tape.matmul(dist, ones))
    grand = tape.matmul(tape.matmul(ones, dist), ones)

    return tape.add(tape.subtract(dist, tape.scale(row_col, 1.0 / k)), tape.scale(grand, 1.0 / (k * k)))


def bdc_forward(x, eps=DEFAULT_EPS) -> BdcMatrix:
    """ BDC matrix of the token matrix {x} (M×k) """

    tape = Tape()
    node = bdc_node(tape, tape.constant(x), eps)
    values = tape.value(node)

    return BdcMatrix(dim=values.shape[0], values=values)


def bdc_oracle(x) -> BdcMatrix:
    """
        Reference BDC built from explicit column-pair distances and per-entry double centering.

        Shares no code with bdc_forward and uses no stabilizer.
    """

    x = np.asarray(x, dtype=np.float64)

    if x.ndim != 2:
        raise ShapeError(f"BDC oracle needs a 2-D token matrix, got shape {x.shape}")

    _check_tokens(x.shape)
    k = x.shape[1]

    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            dist[i, j] = np.sqrt(np.sum((x[:, i] - x[:, j]) ** 2))

    row_mean = [sum(dist[i, j] for j in range(k)) / k for i in range(k)]
    col_mean = [sum(dist[i, j] for i in range(k)) / k for j in range(k)]
    grand_mean = sum(row_mean) / k

    centered = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            centered[i, j] = dist[i, j] - row_mean[i] - col_mean[j] + grand_mean

    return BdcMatrix(dim=k, values=as_tensor(centered))
