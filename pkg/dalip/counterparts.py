"""
    Pooling heads for ablations. Every head turns a token matrix (M×d) into one row vector and exposes the same
    interface, so the towers and the ablation harness can swap them freely.
"""

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Dict

import numpy as np

from dalip.bdc import DEFAULT_EPS
from dalip.errors import ConfigurationError, DegenerateSampleError
from dalip.mbdc import (MbdcParams, constant_nodes, mbdc_forward, mbdc_init, mbdc_node, projection_node,
                        triu_size)
from dalip.numcore import Tape, Tensor, as_tensor

LOGGER = logging.getLogger("Pooling")


class PoolingHeadKind(Enum):
    FIRST_ORDER_MEAN = "mean"
    MBDC = "mbdc"
    SINGLE_HEAD_BDC = "bdc"
    COVARIANCE = "cov"


def first_order_mean(x) -> Tensor:
    """ Arithmetic mean over the tokens of {x} (M×d), as a 1×d row """

    tape = Tape()
    return tape.value(tape.mean_rows(tape.constant(x)))


def covariance_statistic_node(tape: Tape, x: int):
    """ Upper triangle (1×d(d+1)/2) of the unbiased channel covariance of the token node {x} """

    m, d = tape.value(x).shape

    if m < 2:
        raise DegenerateSampleError(f"Covariance pooling needs at least 2 tokens, got {m}")

    means = tape.matmul(tape.constant(np.ones((m, 1))), tape.mean_rows(x))
    cov = tape.scale(tape.gram(tape.subtract(x, means)), 1.0 / (m - 1))

    return tape.triu_vec(cov)


def covariance_statistic(x) -> Tensor:
    """ Pre-projection covariance vector of {x} """

    tape = Tape()
    return tape.value(covariance_statistic_node(tape, tape.constant(x)))


def covariance_triu(x, params: MbdcParams) -> Tensor:
    """ Covariance pooling of {x} projected by the layer norm and feed-forward network of {params} (h = 1) """

    params.check()
    tape = Tape()
    node = projection_node(tape, covariance_statistic_node(tape, tape.constant(x)), constant_nodes(tape, params.tensors()))

    return tape.value(node)


def single_head_bdc(x, params: MbdcParams) -> Tensor:
    """ BDC pooling without head splitting, identical to MBDC with h = 1 """

    if params.h != 1:
        raise ConfigurationError(f"Single-head BDC needs parameters with h=1, got h={params.h}")

    return mbdc_forward(x, params)


class PoolingHead(ABC):
    """
        A token pooling head.

        Arguments:
            - d: Token width
    """

    kind: PoolingHeadKind

    def __init__(self, d):
        self.d = d

    @property
    @abstractmethod
    def output_dim(self) -> int:
        pass

    @abstractmethod
    def init_params(self, seed=0) -> Dict[str, Tensor]:
        """ Fresh trainable tensors of this head """

    def zero_params(self) -> Dict[str, Tensor]:
        return {name: as_tensor(np.zeros_like(value)) for name, value in self.init_params().items()}

    @abstractmethod
    def node(self, tape: Tape, x: int, nodes: Dict[str, int]) -> int:
        """ Records the pooled row of the token node {x}, using the parameter nodes {nodes} """

    def forward(self, x, tensors: Dict[str, Tensor]) -> Tensor:
        tape = Tape()
        return tape.value(self.node(tape, tape.constant(x), constant_nodes(tape, tensors)))

    def describe(self):
        return f"{self.kind.value} pooling ({self.d} → {self.output_dim})"


class MeanHead(PoolingHead):
    kind = PoolingHeadKind.FIRST_ORDER_MEAN

    @property
    def output_dim(self):
        return self.d

    def init_params(self, seed=0):
        return {}

    def node(self, tape, x, nodes):
        return tape.mean_rows(x)


class MbdcHead(PoolingHead):
    kind = PoolingHeadKind.MBDC

    def __init__(self, d, h, d_tilde=None, q=None, eps=DEFAULT_EPS):
        super().__init__(d)
        self.template = mbdc_init(h, d, d_tilde, q, 0, eps)

    @property
    def h(self):
        return self.template.h

    @property
    def output_dim(self):
        return self.template.d_tilde

    def params(self, tensors: Dict[str, Tensor]) -> MbdcParams:
        return self.template.with_tensors(tensors)

    def init_params(self, seed=0):
        t = self.template
        return mbdc_init(t.h, t.d, t.d_tilde, t.q, seed, t.eps).tensors()

    def node(self, tape, x, nodes):
        return mbdc_node(tape, x, self.template.h, self.template.eps, nodes)

    def describe(self):
        t = self.template
        return f"{self.kind.value} pooling (h={t.h}, l={t.l}, q={t.q}, {t.d} → {t.d_tilde})"


class SingleHeadBdcHead(MbdcHead):
    kind = PoolingHeadKind.SINGLE_HEAD_BDC

    def __init__(self, d, d_tilde=None, q=None, eps=DEFAULT_EPS):
        super().__init__(d, 1, d_tilde, q, eps)


class CovarianceHead(MbdcHead):
    """ Covariance pooling with its own layer norm and feed-forward projection (same shapes as h = 1) """

    kind = PoolingHeadKind.COVARIANCE

    def __init__(self, d, d_tilde=None, q=None):
        super().__init__(d, 1, d_tilde, q, 0.0)

    def node(self, tape, x, nodes):
        return projection_node(tape, covariance_statistic_node(tape, x), nodes)

    def describe(self):
        t = self.template
        return f"{self.kind.value} pooling (l={triu_size(t.d)}, q={t.q}, {t.d} → {t.d_tilde})"


def make_head(kind: PoolingHeadKind, d, h=4, d_tilde=None, q=None, eps=DEFAULT_EPS) -> PoolingHead:
    """ Builds the pooling head of {kind} for tokens of width {d} """

    kind = PoolingHeadKind(kind)

    if kind is PoolingHeadKind.FIRST_ORDER_MEAN:
        head = MeanHead(d)
    elif kind is PoolingHeadKind.MBDC:
        head = MbdcHead(d, h, d_tilde, q, eps)
    elif kind is PoolingHeadKind.SINGLE_HEAD_BDC:
        head = SingleHeadBdcHead(d, d_tilde, q, eps)
    else:
        head = CovarianceHead(d, d_tilde, q)

    LOGGER.debug(f"Built {head.describe()}")

    return head

