"""
    Multi-head BDC pooling.

    The token matrix (M×d) is split into h column blocks. Each block yields one BDC matrix whose upper triangle
    is flattened. The h vectors are concatenated, layer-normalized and projected by a two-layer feed-forward
    network to the second-order embedding of width d̃.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
from dataclasses_json import dataclass_json

from dalip.bdc import DEFAULT_EPS, BdcMatrix, bdc_node
from dalip.blob import read_blob, write_blob
from dalip.errors import ConfigurationError, ParameterError, ShapeError
from dalip.numcore import Tape, Tensor, as_tensor
from utils.misc import LAB_VERSION, check_manifest_version

LOGGER = logging.getLogger("MBDC")

LN_EPS = 1e-5

# Trainable tensors of a projection head, in checkpoint order
PARAM_NAMES = ("w1", "w2", "ln_gain", "ln_bias")


def triu_size(k):
    """ Number of upper-triangle entries (diagonal included) of a k×k matrix """
    return k * (k + 1) // 2


def head_dim(h, d):
    if h < 1 or d % h != 0:
        raise ConfigurationError(f"Head count h={h} must be positive and divide the embedding dimension d={d}")

    return d // h


@dataclass
class MbdcParams:
    """
        Hyperparameters and trainable tensors of an MBDC head.

        w1 is (h·l)×q, w2 is q×d̃ with l = (d/h)(d/h + 1)/2. The layer norm acts on the h·l concatenated vector.
    """

    h: int
    d: int
    d_tilde: int
    q: int
    eps: float
    w1: Tensor
    w2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @property
    def l(self):
        return triu_size(head_dim(self.h, self.d))

    @property
    def representation_width(self):
        return self.h * self.l

    def tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_tensors(self, tensors: Dict[str, Tensor]):
        return replace(self, **{name: as_tensor(tensors[name]) for name in PARAM_NAMES})

    def check(self):
        width = self.representation_width
        expected = {
            "w1": (width, self.q),
            "w2": (self.q, self.d_tilde),
            "ln_gain": (1, width),
            "ln_bias": (1, width),
        }

        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"MBDC parameter '{name}' has shape {getattr(self, name).shape}, expected {shape}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return as_tensor(rng.uniform(-bound, bound, size=shape))


def mbdc_init(h, d, d_tilde=None, q=None, seed=0, eps=DEFAULT_EPS) -> MbdcParams:
    """
        Draws MBDC parameters with uniform(±1/√fan_in) weights, unit layer-norm gain and zero bias.

        Defaults: d̃ = d and q = l (the per-head triangle size).
    """

    l = triu_size(head_dim(h, d))
    d_tilde = d if d_tilde is None else d_tilde
    q = l if q is None else q

    if d_tilde < 1 or q < 1:
        raise ConfigurationError(f"MBDC widths must be positive, got d̃={d_tilde}, q={q}")

    if eps < 0:
        raise ParameterError(f"BDC eps must be nonnegative, got {eps}")

    if d >= 2 and h * l >= d * d:
        LOGGER.warning(f"MBDC representation ({h * l}) is not smaller than the full d² = {d * d}")

    rng = np.random.Generator(np.random.Philox(seed))

    return MbdcParams(
        h=h, d=d, d_tilde=d_tilde, q=q, eps=eps,
        w1=_uniform(rng, (h * l, q), h * l),
        w2=_uniform(rng, (q, d_tilde), q),
        ln_gain=as_tensor(np.ones((1, h * l))),
        ln_bias=as_tensor(np.zeros((1, h * l))),
    )


def split_heads(x, h) -> List[Tensor]:
    """ Splits the token matrix {x} into {h} contiguous column blocks """

    x = as_tensor(x)
    k = head_dim(h, x.shape[1])

    return [as_tensor(x[:, j * k:(j + 1) * k]) for j in range(h)]


def projection_node(tape: Tape, rep: int, nodes: Dict[str, int]):
    """ Layer norm followed by the relu feed-forward projection of the 1×(h·l) node {rep} """

    normed = tape.layer_norm(rep, nodes["ln_gain"], nodes["ln_bias"], LN_EPS)
    hidden = tape.relu(tape.matmul(normed, nodes["w1"]))

    return tape.matmul(hidden, nodes["w2"])


def mbdc_representation_node(tape: Tape, x: int, h, eps=DEFAULT_EPS):
    """ Concatenated per-head BDC triangles (1×h·l) of the token node {x} """

    head_dim(h, tape.value(x).shape[1])
    blocks = tape.split_cols(x, h)

    return tape.concat_cols([tape.triu_vec(bdc_node(tape, block, eps)) for block in blocks])


def mbdc_node(tape: Tape, x: int, h, eps, nodes: Dict[str, int]):
    """ Records the MBDC embedding (1×d̃) of the token node {x} with parameter nodes {nodes} """
    return projection_node(tape, mbdc_representation_node(tape, x, h, eps), nodes)


def constant_nodes(tape: Tape, tensors: Dict[str, Tensor]):
    return {name: tape.constant(value) for name, value in tensors.items()}


def _check_width(x, params):
    width = as_tensor(x).shape[1]

    if width != params.d:
        raise ShapeError(f"MBDC parameters expect {params.d} channels, tokens have {width}")


def mbdc_forward(x, params: MbdcParams) -> Tensor:
    """ MBDC embedding (1×d̃) of the token matrix {x} (M×d) """

    params.check()
    _check_width(x, params)
    tape = Tape()
    node = mbdc_node(tape, tape.constant(x), params.h, params.eps, constant_nodes(tape, params.tensors()))

    return tape.value(node)


def head_matrices(x, params: MbdcParams) -> List[BdcMatrix]:
    """ Per-head BDC matrices of {x}, for inspection """

    _check_width(x, params)
    tape = Tape()
    blocks = tape.split_cols(tape.constant(x), params.h)
    matrices = []

    for block in blocks:
        values = tape.value(bdc_node(tape, block, params.eps))
        matrices.append(BdcMatrix(dim=values.shape[0], values=values))

    return matrices


@dataclass_json
@dataclass
class MbdcManifest:
    version: str
    h: int
    d: int
    d_tilde: int
    q: int
    eps: float
    tensors: List[str] = field(default_factory=lambda: list(PARAM_NAMES))


def save_params(params: MbdcParams, directory):
    """ Writes {params} as one blob per tensor plus manifest.json to {directory} """

    params.check()
    os.makedirs(directory, exist_ok=True)

    for name, value in params.tensors().items():
        write_blob(os.path.join(directory, f"{name}.blob"), value)

    manifest = MbdcManifest(version=LAB_VERSION, h=params.h, d=params.d, d_tilde=params.d_tilde, q=params.q, eps=params.eps)

    with open(os.path.join(directory, "manifest.json"), "w") as mf:
        mf.write(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))


def load_params(directory) -> MbdcParams:
    """ Reads MBDC parameters written by save_params """

    manifest_path = os.path.join(directory, "manifest.json")

    if not os.path.isfile(manifest_path):
        raise ConfigurationError(f"No MBDC manifest at {manifest_path}")

    with open(manifest_path, "r") as mf:
        manifest = MbdcManifest.from_dict(json.load(mf))

    check_manifest_version(manifest.version, manifest_path)

    tensors = {name: read_blob(os.path.join(directory, f"{name}.blob")) for name in PARAM_NAMES}
    params = MbdcParams(h=manifest.h, d=manifest.d, d_tilde=manifest.d_tilde, q=manifest.q, eps=manifest.eps, **tensors)
    params.check()

    LOGGER.debug(f"Loaded MBDC parameters (h={params.h}, d={params.d}, d̃={params.d_tilde}) from {directory}")

    return params

