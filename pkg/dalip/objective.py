"""
    Contrastive objectives and retrieval scoring.

    InfoNCE is the symmetric cross-entropy of the similarity logits S/τ in both retrieval directions. The DALIP
    objective combines InfoNCE over the first-order embeddings with InfoNCE over the (normalized) second-order
    embeddings: λ1·L(f_I, f_T) + λ2·L(z_I, z_T).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from dataclasses_json import dataclass_json

from dalip.errors import ContractError, EmptyBatchError, ParameterError, ShapeError
from dalip.numcore import L2_EPS, Tape, Tensor, as_tensor

LOGGER = logging.getLogger("Objective")

DEFAULT_TAU = 0.07

# Unit-norm tolerance of first-order embedding rows
UNIT_TOL = 1e-9


class Reduction(Enum):
    SUM = "sum"
    MEAN = "mean"


class SimilarityMode(Enum):
    COMBINED = "combined"
    FIRST = "first"
    SECOND = "second"


@dataclass_json
@dataclass
class DalipObjectiveConfig:
    """
        Loss weights and temperature.

        τ = exp(log_tau) is learnable and never drops below min_tau. With unit_sum set, λ1 + λ2 must be 1.
    """

    lambda1: float = 0.4
    lambda2: float = 0.6
    log_tau: float = math.log(DEFAULT_TAU)
    normalize_second_order: bool = True
    reduction: str = Reduction.MEAN.value
    min_tau: float = 0.01
    unit_sum: bool = True

    @property
    def tau(self):
        return math.exp(self.log_tau)

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError(f"Loss weights must be nonnegative, got λ1={self.lambda1}, λ2={self.lambda2}")

        if self.unit_sum and abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise ParameterError(f"Loss weights must sum to 1, got λ1 + λ2 = {self.lambda1 + self.lambda2}")

        if not math.isfinite(self.log_tau):
            raise ParameterError(f"Temperature must be positive and finite, got log τ = {self.log_tau}")

        if self.min_tau <= 0:
            raise ParameterError(f"Minimum temperature must be positive, got {self.min_tau}")

        Reduction(self.reduction)

        return self


@dataclass
class EmbeddingBatch:
    """ N paired embeddings, first-order rows (N×d) and second-order rows (N×d̃) per modality """

    image_first: Tensor
    text_first: Tensor
    image_second: Tensor
    text_second: Tensor

    def __post_init__(self):
        for name in ("image_first", "text_first", "image_second", "text_second"):
            setattr(self, name, as_tensor(getattr(self, name)))

        n = self.image_first.shape[0]

        if any(t.shape[0] != n for t in (self.text_first, self.image_second, self.text_second)):
            raise ShapeError("Embedding batch has differing row counts")

        if self.image_first.shape != self.text_first.shape or self.image_second.shape != self.text_second.shape:
            raise ShapeError(f"Image and text embeddings differ in width: {self.image_first.shape} vs {self.text_first.shape}, "
                             f"{self.image_second.shape} vs {self.text_second.shape}")

    def __len__(self):
        return self.image_first.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices)
        return EmbeddingBatch(self.image_first[indices], self.text_first[indices],
                              self.image_second[indices], self.text_second[indices])

    def check_unit_rows(self):
        for name in ("image_first", "text_first"):
            norms = np.linalg.norm(getattr(self, name), axis=1)

            if np.abs(norms - 1.0).max(initial=0.0) > UNIT_TOL:
                raise ContractError(f"Rows of {name} must have unit norm")


def _reduce(tape: Tape, total: int, n, reduction):
    if Reduction(reduction) is Reduction.MEAN:
        return tape.scale(total, 1.0 / n)

    return total


def infonce_node(tape: Tape, image: int, text: int, log_tau: int, reduction=Reduction.SUM.value):
    """
        Records the symmetric InfoNCE loss of the paired rows of {image} and {text} at temperature exp({log_tau}).

        The sum reduction adds up both directional cross-entropies over all N rows. The mean reduction divides by N.
    """

    n = tape.value(image).shape[0]

    if n == 0:
        raise EmptyBatchError("InfoNCE needs at least one pair")

    if tape.value(image).shape != tape.value(text).shape:
        raise ShapeError(f"InfoNCE operands differ: {tape.value(image).shape} vs {tape.value(text).shape}")

    inv_tau = tape.exp(tape.scale(log_tau, -1.0))
    logits = tape.scale_by(tape.matmul(image, tape.transpose(text)), inv_tau)

    diag = tape.sum_all(tape.hadamard(logits, tape.constant(np.eye(n))))
    image_to_text = tape.sum_all(tape.log_sum_exp_rows(logits))
    text_to_image = tape.sum_all(tape.log_sum_exp_rows(tape.transpose(logits)))

    total = tape.subtract(tape.add(image_to_text, text_to_image), tape.scale(diag, 2.0))

    return _reduce(tape, total, n, reduction)


def _log_tau(tau, log_tau):
    if log_tau is not None:
        return log_tau

    if not tau > 0:
        raise ParameterError(f"Temperature must be positive, got τ = {tau}")

    return math.log(tau)


def infonce(image, text, tau=DEFAULT_TAU, reduction=Reduction.SUM.value, log_tau: Optional[float] = None):
    """ Symmetric InfoNCE of two paired embedding matrices. Either {tau} or {log_tau} sets the temperature """

    tape = Tape()
    node = infonce_node(tape, tape.constant(image), tape.constant(text), tape.constant([[_log_tau(tau, log_tau)]]), reduction)

    return float(tape.value(node)[0, 0])


def dalip_loss_nodes(tape: Tape, image_first: int, text_first: int, image_second: int, text_second: int, log_tau: int,
                     cfg: DalipObjectiveConfig) -> Tuple[int, int, int]:
    """
        Records the DALIP loss and returns the (total, first, second) nodes.

        A term with zero weight is left out of the total, so the total is exactly λ·InfoNCE of the other term.
    """

    first = infonce_node(tape, image_first, text_first, log_tau, cfg.reduction)

    if cfg.normalize_second_order:
        image_second = tape.l2_normalize(image_second)
        text_second = tape.l2_normalize(text_second)

    second = infonce_node(tape, image_second, text_second, log_tau, cfg.reduction)

    terms = [tape.scale(node, weight) for node, weight in ((first, cfg.lambda1), (second, cfg.lambda2)) if weight != 0]

    if not terms:
        total = tape.scale(first, 0.0)
    elif len(terms) == 1:
        total = terms[0]
    else:
        total = tape.add(terms[0], terms[1])

    return total, first, second


def dalip_loss(batch: EmbeddingBatch, cfg: DalipObjectiveConfig) -> float:
    """ DALIP loss of {batch} """

    cfg.validate()

    if len(batch) == 0:
        raise EmptyBatchError("DALIP loss needs at least one pair")

    batch.check_unit_rows()

    tape = Tape()
    nodes = [tape.constant(t) for t in (batch.image_first, batch.text_first, batch.image_second, batch.text_second)]
    total, _, _ = dalip_loss_nodes(tape, *nodes, tape.constant([[cfg.log_tau]]), cfg)

    return float(tape.value(total)[0, 0])


def _normalize_rows(z):
    return z / np.sqrt(np.sum(z * z, axis=1, keepdims=True) + L2_EPS)


def similarity_matrix(batch: EmbeddingBatch, lambda1, lambda2, mode=SimilarityMode.COMBINED, normalize=True):
    """ N×N retrieval scores λ1·f_I f_Tᵀ + λ2·ẑ_I ẑ_Tᵀ, or one of the two terms alone """

    mode = SimilarityMode(mode)
    image_second, text_second = batch.image_second, batch.text_second

    if normalize:
        image_second, text_second = _normalize_rows(image_second), _normalize_rows(text_second)

    first = batch.image_first @ batch.text_first.T
    second = image_second @ text_second.T

    if mode is SimilarityMode.FIRST:
        return first
    if mode is SimilarityMode.SECOND:
        return second

    return lambda1 * first + lambda2 * second


def retrieval_hits(sims, k=1):
    """
        Number of rows i whose true match i ranks within the top {k} of row i of {sims}.

        Rank counts the strictly larger scores plus equal scores at lower indices, so ties go to the lower index.
    """

    sims = np.asarray(sims)
    n = sims.shape[0]

    if not 1 <= k <= n:
        raise ParameterError(f"Top-k needs 1 ≤ k ≤ N, got k={k} for N={n}")

    true = np.diag(sims)[:, None]
    lower = np.tril(np.ones((n, n), dtype=bool), k=-1)
    rank = np.sum(sims > true, axis=1) + np.sum((sims == true) & lower, axis=1)

    return int(np.sum(rank < k))


def retrieval_topk(batch: EmbeddingBatch, lambda1, lambda2, k=1, mode=SimilarityMode.COMBINED, normalize=True) -> float:
    """ Image-to-text top-{k} accuracy over {batch} """

    if len(batch) == 0:
        raise EmptyBatchError("Retrieval needs at least one pair")

    sims = similarity_matrix(batch, lambda1, lambda2, mode, normalize)

    return retrieval_hits(sims, k) / len(batch)
