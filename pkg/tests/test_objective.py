import math

import numpy as np
import pytest

from dalip.errors import ContractError, EmptyBatchError, ParameterError, ShapeError
from dalip.gradcheck import finite_diff_check
from dalip.objective import (DalipObjectiveConfig, EmbeddingBatch, SimilarityMode, dalip_loss, dalip_loss_nodes,
                             infonce, retrieval_hits, retrieval_topk, similarity_matrix)

ORTHONORMAL_LOSS = 4.0 * math.log(1.0 + math.exp(-1.0))


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_single_pair_loss_is_zero():
    assert infonce([[1.0, 0.0]], [[1.0, 0.0]], tau=0.5) == 0.0


def test_orthonormal_pair_closed_form():
    assert infonce(np.eye(2), np.eye(2), tau=1.0) == pytest.approx(ORTHONORMAL_LOSS, abs=1e-9)
    assert ORTHONORMAL_LOSS == pytest.approx(1.2530468, abs=1e-6)


@pytest.mark.parametrize("n", [2, 3, 8])
def test_identical_embeddings(n):
    same = np.tile([[0.6, 0.8]], (n, 1))
    assert infonce(same, same, tau=0.3) == pytest.approx(2 * n * math.log(n), rel=1e-12)


def test_mean_reduction_divides_by_n(rng):
    img, txt = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    assert infonce(img, txt, reduction="mean") == pytest.approx(infonce(img, txt, reduction="sum") / 5, rel=1e-12)


def test_infonce_errors():
    with pytest.raises(ParameterError):
        infonce(np.eye(2), np.eye(2), tau=0.0)

    with pytest.raises(EmptyBatchError):
        infonce(np.zeros((0, 2)), np.zeros((0, 2)))

    with pytest.raises(ShapeError):
        infonce(np.eye(2), np.eye(3))


def test_infonce_is_nonnegative_and_permutation_invariant(rng):
    for _ in range(10):
        img, txt = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        perm = rng.permutation(6)
        loss = infonce(img, txt)

        assert loss >= 0.0
        assert infonce(img[perm], txt[perm]) == pytest.approx(loss, abs=1e-12)


def test_smaller_temperature_sharpens():
    assert infonce(np.eye(2), np.eye(2), tau=0.01) < infonce(np.eye(2), np.eye(2), tau=1.0)


def batch_of(first, second):
    return EmbeddingBatch(first, first, second, second)


def test_dalip_loss_without_second_term_is_bit_exact(rng):
    img, txt = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    cfg = DalipObjectiveConfig(lambda1=0.7, lambda2=0.0, unit_sum=False, reduction="sum")
    batch = EmbeddingBatch(img, txt, rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))

    assert dalip_loss(batch, cfg) == 0.7 * infonce(img, txt, reduction="sum", log_tau=cfg.log_tau)


def test_dalip_loss_second_order_closed_form():
    cfg = DalipObjectiveConfig(lambda1=0.0, lambda2=0.6, log_tau=0.0, unit_sum=False, reduction="sum")
    first = np.tile([[1.0, 0.0]], (2, 1))

    assert dalip_loss(EmbeddingBatch(first, first, np.eye(2), np.eye(2)), cfg) == pytest.approx(0.6 * ORTHONORMAL_LOSS, abs=1e-9)


def test_dalip_loss_equal_weights_on_identical_pairs(rng):
    img, txt = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    cfg = DalipObjectiveConfig(lambda1=0.5, lambda2=0.5, reduction="sum")

    assert dalip_loss(EmbeddingBatch(img, txt, img, txt), cfg) == pytest.approx(
        infonce(img, txt, reduction="sum", log_tau=cfg.log_tau), rel=1e-9)


def test_dalip_loss_validation(rng):
    img = unit_rows(rng, 3, 2)
    batch = batch_of(img, img)

    with pytest.raises(ParameterError):
        dalip_loss(batch, DalipObjectiveConfig(lambda1=-0.1, lambda2=1.1))

    with pytest.raises(ParameterError):
        dalip_loss(batch, DalipObjectiveConfig(lambda1=0.5, lambda2=0.6))

    with pytest.raises(ContractError):
        dalip_loss(batch_of(2 * img, img), DalipObjectiveConfig())


def test_embedding_batch_shapes(rng):
    with pytest.raises(ShapeError):
        EmbeddingBatch(np.eye(3), np.eye(3), np.eye(2), np.eye(2))

    with pytest.raises(ShapeError):
        EmbeddingBatch(np.eye(2), np.eye(2), np.ones((2, 3)), np.ones((2, 4)))


def test_loss_gradient_including_temperature(rng):
    cfg = DalipObjectiveConfig()
    tensors = [rng.standard_normal((4, 3)) for _ in range(4)] + [np.array([[math.log(0.5)]])]

    def fn(tape, nodes):
        image_first, text_first = tape.l2_normalize(nodes[0]), tape.l2_normalize(nodes[1])
        total, _, _ = dalip_loss_nodes(tape, image_first, text_first, nodes[2], nodes[3], nodes[4], cfg)
        return total

    assert finite_diff_check(fn, tensors).passed


#
#   Retrieval
#

def test_identical_sets_retrieve_perfectly(rng):
    first, second = unit_rows(rng, 6, 4), rng.standard_normal((6, 3))
    assert retrieval_topk(batch_of(first, second), 0.4, 0.6) == 1.0


def test_reversed_pairing_retrieves_nothing():
    eye = np.eye(4)
    batch = EmbeddingBatch(eye, eye[::-1], eye, eye[::-1])

    assert retrieval_topk(batch, 0.4, 0.6) == 0.0


def test_constant_scores_give_one_over_n():
    assert retrieval_hits(np.zeros((5, 5)), 1) == 1
    assert retrieval_hits(np.zeros((5, 5)), 3) == 3


def brute_force_hits(sims, k):
    hits = 0

    for i, row in enumerate(sims):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += order.index(i) < k

    return hits


def test_hits_match_brute_force(rng):
    for trial in range(20):
        sims = np.round(rng.standard_normal((16, 16)), 1 if trial % 2 else 8)

        for k in (1, 5, 16):
            assert retrieval_hits(sims, k) == brute_force_hits(sims, k)


def test_topk_range():
    with pytest.raises(ParameterError):
        retrieval_hits(np.eye(3), 4)

    with pytest.raises(ParameterError):
        retrieval_hits(np.eye(3), 0)


def test_second_order_scale_is_absorbed(rng):
    batch = EmbeddingBatch(unit_rows(rng, 8, 4), unit_rows(rng, 8, 4), rng.standard_normal((8, 3)), rng.standard_normal((8, 3)))
    scaled = EmbeddingBatch(batch.image_first, batch.text_first, 7.5 * batch.image_second, 7.5 * batch.text_second)

    for k in (1, 3):
        assert retrieval_topk(scaled, 0.4, 0.6, k) == retrieval_topk(batch, 0.4, 0.6, k)


def test_similarity_modes(rng):
    batch = EmbeddingBatch(unit_rows(rng, 3, 2), unit_rows(rng, 3, 2), rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    first = similarity_matrix(batch, 0.4, 0.6, SimilarityMode.FIRST)
    second = similarity_matrix(batch, 0.4, 0.6, "second")

    np.testing.assert_allclose(similarity_matrix(batch, 0.4, 0.6), 0.4 * first + 0.6 * second)
