"""
    Dense 2-D tensor arithmetic with a define-by-run reverse-mode differentiation tape.

    A Tensor is a read-only, finite, 2-D float64 numpy array. Every primitive on a Tape records one TapeNode and
    has exactly one backward rule registered in BACKWARD_RULES. Node identifiers are plain integers in
    creation order, so the tape is a DAG in topological order by construction.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from dalip.errors import ShapeError, ParameterError, ContractError, NonFiniteError

LOGGER = logging.getLogger("NumCore")

Tensor = np.ndarray

# Stabilizer under the row norm of l2_normalize, keeps all-zero rows finite
L2_EPS = 1e-12


def _freeze(array):
    """ Checks that {array} is a finite 2-D float64 array and makes it read-only """

    if array.ndim != 2:
        raise ShapeError(f"Tensors are 2-D, got shape {array.shape}")

    if not np.isfinite(array).all():
        raise NonFiniteError(f"Tensor of shape {array.shape} contains NaN or Inf")

    array.flags.writeable = False
    return array


def as_tensor(values):
    """
        Converts {values} into a Tensor (copying).

        Scalars become 1×1 and flat sequences become a single row.
    """

    array = np.array(values, dtype=np.float64)

    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)

    return _freeze(array)


def shape_str(array):
    return f"({array.shape[0]}×{array.shape[1]})"


class Primitive(Enum):
    """ Tags of the recorded operations """

    LEAF = "leaf"
    CONSTANT = "constant"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    ADD = "add"
    SUBTRACT = "subtract"
    SCALE = "scale"
    HADAMARD = "hadamard"
    SAFE_SQRT = "safe_sqrt"
    RELU = "relu"
    LAYER_NORM = "layer_norm"
    L2_NORMALIZE = "l2_normalize"
    MEAN_ROWS = "mean_rows"
    GRAM = "gram"
    CONCAT_COLS = "concat_cols"
    CONCAT_ROWS = "concat_rows"
    SPLIT_COLS = "split_cols"
    TRIU_VEC = "triu_vec"
    SUM_ALL = "sum_all"
    LOG_SUM_EXP_ROWS = "log_sum_exp_rows"
    EXP = "exp"
    SCALE_BY = "scale_by"


@dataclass
class TapeNode:
    id: int
    value: Tensor
    primitive: Primitive
    parents: Tuple[int, ...] = ()
    saved: Dict[str, object] = field(default_factory=dict)


class Tape:
    """
        Records primitive applications in order. One tape per forward pass and per thread.

        All primitive methods take and return node identifiers.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.names: Dict[int, str] = {}

    def __len__(self):
        return len(self.nodes)

    def _node(self, node_id):
        if not isinstance(node_id, (int, np.integer)) or not (0 <= node_id < len(self.nodes)):
            raise ContractError(f"Unknown tape node: {node_id}")

        return self.nodes[node_id]

    def value(self, node_id) -> Tensor:
        return self._node(node_id).value

    def _record(self, primitive, value, parents=(), **saved):
        for parent in parents:
            self._node(parent)

        try:
            value = _freeze(np.asarray(value, dtype=np.float64))
        except NonFiniteError:
            raise NonFiniteError(f"Primitive '{primitive.value}' produced non-finite values (node {len(self.nodes)})")

        node = TapeNode(len(self.nodes), value, primitive, tuple(int(p) for p in parents), saved)
        self.nodes.append(node)

        return node.id

    #
    #   Inputs
    #

    def leaf(self, value, name=None):
        """ Adds a differentiable input """

        node = self._record(Primitive.LEAF, as_tensor(value))

        if name is not None:
            self.names[node] = name

        return node

    def constant(self, value):
        """ Adds an input whose gradient is not of interest """
        return self._record(Primitive.CONSTANT, as_tensor(value))

    #
    #   Primitives
    #

    def matmul(self, a, b):
        av, bv = self.value(a), self.value(b)

        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {shape_str(av)} and {shape_str(bv)} don't align")

        return self._record(Primitive.MATMUL, av @ bv, (a, b))

    def transpose(self, a):
        return self._record(Primitive.TRANSPOSE, np.ascontiguousarray(self.value(a).T), (a,))

    def _same_shape(self, name, a, b):
        av, bv = self.value(a), self.value(b)

        if av.shape != bv.shape:
            raise ShapeError(f"{name}: shapes {shape_str(av)} and {shape_str(bv)} differ")

        return av, bv

    def add(self, a, b):
        av, bv = self._same_shape("add", a, b)
        return self._record(Primitive.ADD, av + bv, (a, b))

    def subtract(self, a, b):
        av, bv = self._same_shape("subtract", a, b)
        return self._record(Primitive.SUBTRACT, av - bv, (a, b))

    def scale(self, a, factor):
        factor = float(factor)

        if not np.isfinite(factor):
            raise ParameterError(f"scale: factor must be finite, got {factor}")

        return self._record(Primitive.SCALE, self.value(a) * factor, (a,), factor=factor)

    def hadamard(self, a, b):
        av, bv = self._same_shape("hadamard", a, b)
        return self._record(Primitive.HADAMARD, av * bv, (a, b))

    def safe_sqrt(self, a, eps):
        """ Element-wise √(max(x, 0) + eps). Negative inputs from rounding are clamped at 0 """

        if eps < 0:
            raise ParameterError(f"safe_sqrt: eps must be nonnegative, got {eps}")

        root = np.sqrt(np.maximum(self.value(a), 0.0) + eps)

        return self._record(Primitive.SAFE_SQRT, root, (a,), root=root)

    def relu(self, a):
        return self._record(Primitive.RELU, np.maximum(self.value(a), 0.0), (a,))

    def layer_norm(self, x, gain, bias, eps_ln=1e-5):
        """
            Normalizes each row of {x} to zero mean and unit population variance, then applies the row-vector
            affine pair {gain}, {bias}.
        """

        xv, gv, bv = self.value(x), self.value(gain), self.value(bias)

        if gv.shape != (1, xv.shape[1]) or bv.shape != (1, xv.shape[1]):
            raise ShapeError(f"layer_norm: input {shape_str(xv)} needs gain/bias of shape (1×{xv.shape[1]}), "
                             f"got {shape_str(gv)} and {shape_str(bv)}")

        if eps_ln <= 0:
            raise ParameterError(f"layer_norm: eps_ln must be positive, got {eps_ln}")

        centered = xv - xv.mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps_ln)
        normed = centered * inv_std

        return self._record(Primitive.LAYER_NORM, normed * gv + bv, (x, gain, bias), normed=normed, inv_std=inv_std)

    def l2_normalize(self, a):
        """ Scales every row to unit Euclidean norm (all-zero rows stay zero) """

        av = self.value(a)
        norm = np.sqrt((av ** 2).sum(axis=1, keepdims=True) + L2_EPS)

        return self._record(Primitive.L2_NORMALIZE, av / norm, (a,), norm=norm)

    def mean_rows(self, a):
        """ Column means as one row. Summation runs over sorted columns, so row order never changes the result """

        av = self.value(a)

        return self._record(Primitive.MEAN_ROWS, np.sort(av, axis=0).sum(axis=0, keepdims=True) / av.shape[0], (a,))

    def gram(self, a):
        """ aᵀa, summing the per-row products in sorted order so that permuting rows of {a} is exact """

        av = self.value(a)
        products = av[:, :, None] * av[:, None, :]

        return self._record(Primitive.GRAM, np.sort(products, axis=0).sum(axis=0), (a,))

    def concat_cols(self, parts: Sequence[int]):
        if len(parts) == 0:
            raise ShapeError("concat_cols: nothing to concatenate")

        values = [self.value(p) for p in parts]

        if len({v.shape[0] for v in values}) != 1:
            raise ShapeError(f"concat_cols: row counts differ: {[shape_str(v) for v in values]}")

        return self._record(Primitive.CONCAT_COLS, np.concatenate(values, axis=1), tuple(parts),
                            widths=[v.shape[1] for v in values])

    def concat_rows(self, parts: Sequence[int]):
        if len(parts) == 0:
            raise ShapeError("concat_rows: nothing to concatenate")

        values = [self.value(p) for p in parts]

        if len({v.shape[1] for v in values}) != 1:
            raise ShapeError(f"concat_rows: column counts differ: {[shape_str(v) for v in values]}")

        return self._record(Primitive.CONCAT_ROWS, np.concatenate(values, axis=0), tuple(parts),
                            heights=[v.shape[0] for v in values])

    def split_cols(self, a, parts):
        """ Splits {a} into {parts} contiguous column blocks of equal width """

        av = self.value(a)

        if parts < 1 or av.shape[1] % parts != 0:
            raise ShapeError(f"split_cols: {av.shape[1]} columns can't be split into {parts} equal blocks")

        width = av.shape[1] // parts
        blocks = []

        for j in range(parts):
            start = j * width
            blocks.append(self._record(Primitive.SPLIT_COLS, av[:, start:start + width].copy(), (a,),
                                       start=start, stop=start + width))

        return blocks

    def triu_vec(self, a):
        """ Vectorizes the upper triangle (with diagonal) of a square matrix into one row, row-major """

        av = self.value(a)

        if av.shape[0] != av.shape[1]:
            raise ShapeError(f"triu_vec: matrix must be square, got {shape_str(av)}")

        rows, cols = np.triu_indices(av.shape[0])

        return self._record(Primitive.TRIU_VEC, av[rows, cols].reshape(1, -1), (a,))

    def sum_all(self, a):
        return self._record(Primitive.SUM_ALL, np.array([[self.value(a).sum()]]), (a,))

    def log_sum_exp_rows(self, a):
        """ Numerically stable log Σ_j exp(a_ij) per row, as a column """

        av = self.value(a)
        peak = av.max(axis=1, keepdims=True)
        shifted = np.exp(av - peak)
        total = shifted.sum(axis=1, keepdims=True)

        return self._record(Primitive.LOG_SUM_EXP_ROWS, peak + np.log(total), (a,), softmax=shifted / total)

    def exp(self, a):
        result = np.exp(self.value(a))
        return self._record(Primitive.EXP, result, (a,), result=result)

    def scale_by(self, a, s):
        """ Multiplies {a} by the 1×1 node {s} """

        av, sv = self.value(a), self.value(s)

        if sv.shape != (1, 1):
            raise ShapeError(f"scale_by: scale node must be 1×1, got {shape_str(sv)}")

        return self._record(Primitive.SCALE_BY, av * sv[0, 0], (a, s))


#
#   Backward rules
#

BACKWARD_RULES: Dict[Primitive, Callable] = {}


def backward_rule(primitive):
    """ Registers the decorated function as the backward rule of {primitive} """

    def register(fn):
        if primitive in BACKWARD_RULES:
            raise ContractError(f"Duplicate backward rule for '{primitive.value}'")

        BACKWARD_RULES[primitive] = fn
        return fn

    return register


# Rules get the node, the upstream gradient and the parent values, and return one gradient per parent

@backward_rule(Primitive.LEAF)
@backward_rule(Primitive.CONSTANT)
def _input_backward(node, g, inputs):
    return ()


@backward_rule(Primitive.MATMUL)
def _matmul_backward(node, g, inputs):
    a, b = inputs
    return g @ b.T, a.T @ g


@backward_rule(Primitive.TRANSPOSE)
def _transpose_backward(node, g, inputs):
    return (g.T,)


@backward_rule(Primitive.ADD)
def _add_backward(node, g, inputs):
    return g, g


@backward_rule(Primitive.SUBTRACT)
def _subtract_backward(node, g, inputs):
    return g, -g


@backward_rule(Primitive.SCALE)
def _scale_backward(node, g, inputs):
    return (g * node.saved["factor"],)


@backward_rule(Primitive.HADAMARD)
def _hadamard_backward(node, g, inputs):
    a, b = inputs
    return g * b, g * a


@backward_rule(Primitive.SAFE_SQRT)
def _safe_sqrt_backward(node, g, inputs):
    root = node.saved["root"]

    # eps = 0 at an exact zero has unbounded slope, its subgradient is taken as 0
    slope = np.divide(0.5, root, out=np.zeros_like(root), where=root > 0)

    return (g * slope,)


@backward_rule(Primitive.RELU)
def _relu_backward(node, g, inputs):
    return (g * (inputs[0] > 0),)


@backward_rule(Primitive.LAYER_NORM)
def _layer_norm_backward(node, g, inputs):
    x, gain, bias = inputs
    normed, inv_std = node.saved["normed"], node.saved["inv_std"]

    d_normed = g * gain
    dx = inv_std * (d_normed - d_normed.mean(axis=1, keepdims=True)
                    - normed * (d_normed * normed).mean(axis=1, keepdims=True))

    return dx, (g * normed).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


@backward_rule(Primitive.L2_NORMALIZE)
def _l2_normalize_backward(node, g, inputs):
    a = inputs[0]
    norm = node.saved["norm"]

    return (g / norm - a * (a * g).sum(axis=1, keepdims=True) / norm ** 3,)


@backward_rule(Primitive.MEAN_ROWS)
def _mean_rows_backward(node, g, inputs):
    a = inputs[0]
    return (np.broadcast_to(g / a.shape[0], a.shape).copy(),)


@backward_rule(Primitive.GRAM)
def _gram_backward(node, g, inputs):
    a = inputs[0]
    return (a @ (g + g.T),)


@backward_rule(Primitive.CONCAT_COLS)
def _concat_cols_backward(node, g, inputs):
    edges = np.cumsum(node.saved["widths"])[:-1]
    return tuple(np.split(g, edges, axis=1))


@backward_rule(Primitive.CONCAT_ROWS)
def _concat_rows_backward(node, g, inputs):
    edges = np.cumsum(node.saved["heights"])[:-1]
    return tuple(np.split(g, edges, axis=0))


@backward_rule(Primitive.SPLIT_COLS)
def _split_cols_backward(node, g, inputs):
    full = np.zeros_like(inputs[0])
    full[:, node.saved["start"]:node.saved["stop"]] = g

    return (full,)


@backward_rule(Primitive.TRIU_VEC)
def _triu_vec_backward(node, g, inputs):
    full = np.zeros_like(inputs[0])
    rows, cols = np.triu_indices(full.shape[0])
    full[rows, cols] = g.ravel()

    return (full,)


@backward_rule(Primitive.SUM_ALL)
def _sum_all_backward(node, g, inputs):
    return (np.full(inputs[0].shape, g[0, 0]),)


@backward_rule(Primitive.LOG_SUM_EXP_ROWS)
def _log_sum_exp_rows_backward(node, g, inputs):
    return (g * node.saved["softmax"],)


@backward_rule(Primitive.EXP)
def _exp_backward(node, g, inputs):
    return (g * node.saved["result"],)


@backward_rule(Primitive.SCALE_BY)
def _scale_by_backward(node, g, inputs):
    a, s = inputs
    return g * s[0, 0], np.array([[(g * a).sum()]])


missing_rules = set(Primitive) - set(BACKWARD_RULES)
if missing_rules:
    raise ContractError(f"Primitives without backward rule: {sorted(p.value for p in missing_rules)}")


class Gradients(Mapping):
    """ Read-only mapping from node identifier to the gradient of the root w.r.t. that node """

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node):
        return self._grads[node]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def of(self, node):
        """ Returns the gradient of {node}, zeros if the root doesn't depend on it """

        if node in self._grads:
            return self._grads[node]

        return np.zeros_like(self._tape.value(node))


def backward(tape: Tape, root: int) -> Gradients:
    """
        Reverse-mode pass from the scalar node {root}.

        Gradients over fan-out are accumulated additively. Nodes the root doesn't depend on are absent.
    """

    root_value = tape.value(root)

    if root_value.shape != (1, 1):
        raise ContractError(f"backward needs a 1×1 root, node {root} has shape {shape_str(root_value)}")

    grads = {root: np.ones((1, 1))}

    for node in reversed(tape.nodes[:root + 1]):
        upstream = grads.get(node.id)

        if upstream is None:
            continue

        inputs = [tape.nodes[p].value for p in node.parents]
        parent_grads = BACKWARD_RULES[node.primitive](node, upstream, inputs)

        for parent, grad in zip(node.parents, parent_grads):
            if parent in grads:
                grads[parent] = grads[parent] + grad
            else:
                grads[parent] = grad

    for grad in grads.values():
        grad.flags.writeable = False

    return Gradients(tape, grads)
