"""
    Central finite-difference verification of tape gradients.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from dataclasses_json import dataclass_json

from dalip.errors import ContractError, DeterminismError, ParameterError
from dalip.numcore import Tape, as_tensor, backward

LOGGER = logging.getLogger("GradCheck")

# Floor of the relative-error denominator
REL_FLOOR = 1e-8


@dataclass_json
@dataclass
class ParamCheck:
    name: str
    shape: List[int]
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass_json
@dataclass
class GradCheckReport:
    step: float
    tol: float
    atol: float
    params: List[ParamCheck] = field(default_factory=list)

    @property
    def passed(self):
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)


def relative_error(analytic, numeric):
    """ |a − n| / max(1e-8, |a| + |n|), element-wise """
    return np.abs(analytic - numeric) / np.maximum(REL_FLOOR, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(fn: Callable[[Tape, List[int]], int], params: Sequence, step=1e-5, tol=1e-4, atol=1e-8,
                      names: Optional[Sequence[str]] = None, sample: Optional[int] = None, seed=0):
    """
        Compares the tape gradients of a scalar function against central differences.

        Arguments:
            - fn: Builds the function on a fresh tape from the leaf nodes of {params} and returns the 1×1 root node
            - params: The parameter tensors
            - step: Central-difference step
            - tol: Maximum allowed relative error
            - atol: Entries with |analytic − numeric| ≤ atol count as agreeing
            - names: Parameter names for the report
            - sample: If set, only this many seeded random entries per parameter are checked

        Returns: GradCheckReport
    """

    if step <= 0:
        raise ParameterError(f"Finite-difference step must be positive, got {step}")

    params = [as_tensor(p) for p in params]
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]

    def build(values):
        tape = Tape()
        nodes = [tape.leaf(v, name) for v, name in zip(values, names)]
        root = fn(tape, nodes)

        if tape.value(root).shape != (1, 1):
            raise ContractError("Function under check must return a 1×1 node")

        return tape, nodes, root

    def scalar(values):
        tape, _, root = build(values)
        return tape.value(root)[0, 0]

    tape, nodes, root = build(params)

    if scalar(params) != tape.value(root)[0, 0]:
        raise DeterminismError("Two forward passes over identical parameters disagree")

    grads = backward(tape, root)
    rng = np.random.Generator(np.random.Philox(seed))
    report = GradCheckReport(step=step, tol=tol, atol=atol)

    for k, (param, name) in enumerate(zip(params, names)):
        analytic = grads.of(nodes[k]).ravel()

        if sample is not None and sample < param.size:
            indices = np.sort(rng.choice(param.size, size=sample, replace=False))
        else:
            indices = np.arange(param.size)

        def central(flat, h):
            shifted = list(params)
            nudged = np.array(param)

            nudged.flat[flat] += h
            shifted[k] = nudged
            upper = scalar(shifted)

            nudged.flat[flat] -= 2 * h
            lower = scalar(shifted)

            return (upper - lower) / (2 * h)

        picked = analytic[indices]
        numeric = np.array([central(flat, step) for flat in indices])
        abs_error = np.abs(picked - numeric)
        rel_error = np.where(abs_error <= atol, 0.0, relative_error(picked, numeric))

        # An entry straddling a relu kink disagrees at one step size only, a wrong rule at all of them
        for i in np.flatnonzero(rel_error > tol):
            for h in (step / 10, step / 100):
                retry_num = central(indices[i], h)
                retry_abs = abs(picked[i] - retry_num)
                retry_rel = 0.0 if retry_abs <= atol else float(relative_error(picked[i], retry_num))

                if retry_rel < rel_error[i]:
                    abs_error[i], rel_error[i] = retry_abs, retry_rel

        check = ParamCheck(
            name=name,
            shape=list(param.shape),
            checked=len(indices),
            max_rel_error=float(rel_error.max(initial=0.0)),
            max_abs_error=float(abs_error.max(initial=0.0)),
            passed=bool(rel_error.max(initial=0.0) <= tol),
        )
        report.params.append(check)

        LOGGER.debug(f"{name} {tuple(param.shape)}: max rel error {check.max_rel_error:.3e} over {check.checked} entries")

    return report
