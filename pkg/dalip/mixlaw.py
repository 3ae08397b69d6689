"""
    Exponential data-mixing laws.

    Accuracy on domain i is modelled as P(x) = α + β·exp(γ·x), with x the share of domain 1 (r) for the first
    domain and the share of domain 2 (1 − r) for the second. Fits use variable projection: for a fixed γ the
    law is linear in (α, β), so γ is searched on a grid and refined with bounded Brent minimization.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import chardet
import numpy as np
from dataclasses_json import dataclass_json
from scipy.optimize import least_squares, minimize_scalar

from dalip.errors import (AgreementError, ConfigurationError, CsvParseError, DegenerateFitError, DegenerateSlopeError,
                          ParameterError, UnderdeterminedError)

LOGGER = logging.getLogger("MixLaw")

CSV_HEADER = ["domain", "ratio", "accuracy"]

# Largest allowed gap between the closed-form and the numeric optimum
AGREEMENT_TOL = 1e-6


class Argument(Enum):
    R = "r"
    ONE_MINUS_R = "1-r"

    def of(self, r):
        return r if self is Argument.R else 1.0 - r


@dataclass_json
@dataclass
class MixObservation:
    domain: str
    ratio: float
    accuracy: float

    def validate(self):
        if not (math.isfinite(self.ratio) and 0.0 <= self.ratio <= 1.0):
            raise ParameterError(f"Mixing ratio must lie in [0, 1], got {self.ratio}")

        if not math.isfinite(self.accuracy):
            raise ParameterError(f"Accuracy must be finite, got {self.accuracy}")

        return self


@dataclass_json
@dataclass
class FitSettings:
    gamma_min: float = -20.0
    gamma_max: float = 20.0
    grid_points: int = 4000
    gamma_exclude: float = 1e-6
    xtol: float = 1e-8

    def validate(self):
        if not self.gamma_min < self.gamma_max or self.grid_points < 3:
            raise ConfigurationError(f"γ grid needs gamma_min < gamma_max and at least 3 points, got "
                                     f"[{self.gamma_min}, {self.gamma_max}] with {self.grid_points}")

        if self.gamma_exclude < 0 or self.xtol <= 0:
            raise ConfigurationError(f"gamma_exclude must be ≥ 0 and xtol > 0, got {self.gamma_exclude}, {self.xtol}")

        return self


@dataclass_json
@dataclass
class DomainLaw:
    """ Fitted law of one domain. {argument} names the share the exponent is applied to """

    domain: str
    alpha: float
    beta: float
    gamma: float
    rss: float = 0.0
    argument: str = Argument.R.value
    observations: int = 0

    def __call__(self, r):
        x = Argument(self.argument).of(np.asarray(r, dtype=np.float64))
        return self.alpha + self.beta * np.exp(self.gamma * x)

    @property
    def trend(self):
        """ Direction of the law in its own argument, monotone on [0, 1] for any β·γ """

        slope = self.beta * self.gamma
        return "flat" if slope == 0 else ("increasing" if slope > 0 else "decreasing")


@dataclass_json
@dataclass
class OptimalRatio:
    r_star: float
    boundary: bool
    objective: float
    closed_form: Optional[float] = None
    numeric: Optional[float] = None
    weights: List[float] = field(default_factory=lambda: [1.0, 1.0])


@dataclass_json
@dataclass
class MixLawFit:
    laws: List[DomainLaw]
    optimum: Optional[OptimalRatio] = None

    def law(self, domain) -> DomainLaw:
        for law in self.laws:
            if law.domain == domain:
                return law

        raise ConfigurationError(f"No fitted law for domain '{domain}'")


def _design(gamma, x):
    return np.column_stack([np.ones_like(x), np.exp(gamma * x)])


def projected_rss(gamma, x, y, exclude=1e-6):
    """ Residual sum of squares of the best (α, β) for fixed {gamma}, inf inside the excluded band around 0 """

    if abs(gamma) < exclude:
        return math.inf

    design = _design(gamma, x)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)

    if rank < 2 or not np.isfinite(coef).all():
        return math.inf

    residual = design @ coef - y
    value = float(residual @ residual)

    return value if math.isfinite(value) else math.inf


def _refine(x, y, lo, hi, settings: FitSettings):
    result = minimize_scalar(projected_rss, bounds=(lo, hi), args=(x, y, settings.gamma_exclude), method="bounded",
                             options={"xatol": settings.xtol})
    return float(result.x), float(result.fun)


def _polish(x, y, alpha, beta, gamma, value, settings: FitSettings):
    """
        Joint Levenberg-Marquardt refinement of (α, β, γ) from the projected solution. The bounded 1-D search resolves γ
        only to about √ε·|γ|. Kept only if it lowers the residual.
    """

    def residual(p):
        return p[0] + p[1] * np.exp(p[2] * x) - y

    def jacobian(p):
        e = np.exp(p[2] * x)
        return np.column_stack([np.ones_like(x), e, p[1] * x * e])

    try:
        result = least_squares(residual, [alpha, beta, gamma], jac=jacobian, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    except (ValueError, FloatingPointError):
        return alpha, beta, gamma, value

    polished = float(result.fun @ result.fun)
    a, b, g = (float(v) for v in result.x)

    if np.isfinite(result.x).all() and polished < value and settings.gamma_min <= g <= settings.gamma_max \
            and abs(g) >= settings.gamma_exclude:
        return a, b, g, polished

    return alpha, beta, gamma, value


def fit_law(ratios, accuracies, settings: Optional[FitSettings] = None, domain="domain1", argument=Argument.R) -> DomainLaw:
    """
        Fits α + β·exp(γ·x) to the points ({ratios} mapped by {argument}, {accuracies}).

        Points are sorted before fitting, so the result doesn't depend on their order.
    """

    settings = (settings or FitSettings()).validate()
    argument = Argument(argument)

    points = sorted(zip((float(r) for r in ratios), (float(a) for a in accuracies)))

    if len(points) < 4:
        raise UnderdeterminedError(f"Domain '{domain}' has {len(points)} observations, the fit needs at least 4")

    distinct = len({r for r, _ in points})

    if distinct == 1:
        raise DegenerateFitError(f"All observations of domain '{domain}' share one ratio, the linear system is singular")

    if distinct < 3:
        raise UnderdeterminedError(f"Domain '{domain}' has {distinct} distinct ratios, the fit needs at least 3")

    x = argument.of(np.array([r for r, _ in points]))
    y = np.array([a for _, a in points])

    grid = np.linspace(settings.gamma_min, settings.gamma_max, settings.grid_points)
    grid = grid[np.abs(grid) >= settings.gamma_exclude]
    rss = np.array([projected_rss(g, x, y, settings.gamma_exclude) for g in grid])

    if not np.isfinite(rss).any():
        raise DegenerateFitError(f"No γ on the grid gives a solvable linear system for domain '{domain}'")

    best = int(np.argmin(rss))
    gamma, value = float(grid[best]), float(rss[best])

    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    intervals = [(lo, hi)]

    if lo < 0 < hi:
        intervals = [(lo, -settings.gamma_exclude), (settings.gamma_exclude, hi)]

    for a, b in intervals:
        if a < b:
            candidate, candidate_value = _refine(x, y, a, b, settings)

            if candidate_value < value:
                gamma, value = candidate, candidate_value

    coef, _, rank, _ = np.linalg.lstsq(_design(gamma, x), y, rcond=None)

    if rank < 2:
        raise DegenerateFitError(f"Linear system of domain '{domain}' is singular at γ={gamma}")

    alpha, beta, gamma, value = _polish(x, y, float(coef[0]), float(coef[1]), gamma, value, settings)

    law = DomainLaw(domain=domain, alpha=alpha, beta=beta, gamma=gamma, rss=value,
                    argument=argument.value, observations=len(points))

    LOGGER.debug(f"{domain}: α={law.alpha:.6g}, β={law.beta:.6g}, γ={law.gamma:.6g}, rss={law.rss:.3e} ({law.trend})")

    return law


def sample_law(law: DomainLaw, ratios: Sequence[float]) -> List[MixObservation]:
    """ Noise-free observations of {law} at {ratios} """
    return [MixObservation(law.domain, float(r), float(law(r))) for r in ratios]


def eval_law(law: DomainLaw, r) -> float:
    """ Accuracy predicted by {law} at domain-1 share {r}, in the law's own argument convention """
    return float(law(r))


def _objective(law1: DomainLaw, law2: DomainLaw, w1, w2):
    # law1 in r, law2 in 1 − r, whatever their recorded convention
    def total(r):
        return float(w1 * (law1.alpha + law1.beta * math.exp(law1.gamma * r))
                     + w2 * (law2.alpha + law2.beta * math.exp(law2.gamma * (1.0 - r))))

    return total


def solve_optimal_ratio(law1: DomainLaw, law2: DomainLaw, weights=(1.0, 1.0), xtol=1e-10) -> OptimalRatio:
    """
        Ratio r ∈ [0, 1] maximizing w1·P1(r) + w2·P2(1 − r).

        The interior stationary point r = [ln(w2β2γ2) + γ2 − ln(w1β1γ1)] / (γ1 + γ2) exists when both products
        w·β·γ are positive. It is compared against both endpoints. Without a stationary point the better endpoint
        is returned and flagged as a boundary result.
    """

    w1, w2 = (float(w) for w in weights)

    if w1 < 0 or w2 < 0:
        raise ParameterError(f"Domain weights must be nonnegative, got {w1}, {w2}")

    objective = _objective(law1, law2, w1, w2)
    candidates = [0.0, 1.0]
    closed = numeric = None

    p1 = w1 * law1.beta * law1.gamma
    p2 = w2 * law2.beta * law2.gamma

    if p1 > 0 and p2 > 0:
        slope = law1.gamma + law2.gamma

        if slope == 0:
            raise DegenerateSlopeError(f"γ1 + γ2 = 0 for γ1={law1.gamma}, γ2={law2.gamma}")

        closed = (math.log(p2) + law2.gamma - math.log(p1)) / slope

        if 0.0 < closed < 1.0:
            candidates.append(closed)

    r_star = max(candidates, key=lambda r: (objective(r), -abs(r - 0.5)))
    boundary = r_star in (0.0, 1.0)

    if not boundary:
        result = minimize_scalar(lambda r: -objective(r), bounds=(0.0, 1.0), method="bounded", options={"xatol": xtol})
        numeric = float(result.x)

        if abs(numeric - r_star) > AGREEMENT_TOL:
            raise AgreementError(f"Closed-form optimum {r_star} and numeric optimum {numeric} disagree")
    else:
        LOGGER.info(f"No interior optimum, the mix is best at r={r_star}")

    return OptimalRatio(r_star=float(r_star), boundary=boundary, objective=objective(r_star), closed_form=closed,
                        numeric=numeric, weights=[w1, w2])


def domain_order(observations: Sequence[MixObservation], domains: Optional[Sequence[str]] = None) -> List[str]:
    """ Domains in two-domain order: {domains} if given, else the sorted names """

    present = sorted({o.domain for o in observations})

    if domains is None:
        return present

    if sorted(domains) != present:
        raise ConfigurationError(f"Configured domains {list(domains)} don't match the observed {present}")

    return list(domains)


def fit(observations: Sequence[MixObservation], settings: Optional[FitSettings] = None,
        domains: Optional[Sequence[str]] = None, weights=(1.0, 1.0)) -> MixLawFit:
    """
        Fits one law per domain. With two domains the second is fitted in 1 − r and the optimal ratio is solved.
    """

    for o in observations:
        o.validate()

    order = domain_order(observations, domains)

    if not order:
        raise UnderdeterminedError("No observations to fit")

    if len(order) > 2:
        raise ConfigurationError(f"Mixing laws cover one or two domains, got {len(order)}: {order}")

    laws = []

    for i, domain in enumerate(order):
        points = [o for o in observations if o.domain == domain]
        argument = Argument.R if i == 0 else Argument.ONE_MINUS_R
        laws.append(fit_law([o.ratio for o in points], [o.accuracy for o in points], settings, domain, argument))

    optimum = solve_optimal_ratio(laws[0], laws[1], weights) if len(laws) == 2 else None

    return MixLawFit(laws=laws, optimum=optimum)


#
#   CSV
#

def parse_observations(text, source="<csv>") -> List[MixObservation]:
    """ Parses 'domain,ratio,accuracy' rows, raising CsvParseError with the 1-based line number """

    lines = text.splitlines()

    if not lines or [c.strip() for c in next(csv.reader([lines[0]]))] != CSV_HEADER:
        raise CsvParseError(source, 1, f"header must be {','.join(CSV_HEADER)}")

    observations = []

    for number, row in enumerate(csv.reader(io.StringIO("\n".join(lines[1:]))), start=2):
        if not row or all(not c.strip() for c in row):
            continue

        if len(row) != 3:
            raise CsvParseError(source, number, f"expected 3 fields, got {len(row)}")

        try:
            observation = MixObservation(row[0].strip(), float(row[1]), float(row[2])).validate()
        except ValueError:
            raise CsvParseError(source, number, f"ratio and accuracy must be numbers, got {row[1]!r}, {row[2]!r}")
        except ParameterError as e:
            raise CsvParseError(source, number, e.message)

        if not observation.domain:
            raise CsvParseError(source, number, "domain name is empty")

        observations.append(observation)

    return observations


def read_text(path):
    """ Reads {path} with its detected encoding """

    with open(path, "rb") as rf:
        raw = rf.read()

    encoding = chardet.detect(raw)["encoding"] or "utf-8"

    return raw.decode(encoding).lstrip("﻿")


def read_observations(path) -> List[MixObservation]:
    return parse_observations(read_text(path), source=path)


def fit_from_csv(path, settings: Optional[FitSettings] = None, domains=None, weights=(1.0, 1.0)) -> MixLawFit:
    return fit(read_observations(path), settings, domains, weights)


def fit_summary(result: MixLawFit) -> Dict:
    """ JSON document of a fit: per-domain α, β, γ, residual and argument plus the optimum """

    document = {
        "domains": {law.domain: {"alpha": law.alpha, "beta": law.beta, "gamma": law.gamma, "rss": law.rss,
                                 "argument": law.argument, "observations": law.observations, "trend": law.trend}
                    for law in result.laws},
        "order": [law.domain for law in result.laws],
    }

    if result.optimum is not None:
        document.update({"r_star": result.optimum.r_star, "boundary": result.optimum.boundary,
                         "objective_at_r_star": result.optimum.objective})

    return document


def laws_from_summary(document) -> Tuple[DomainLaw, ...]:
    """ Rebuilds the laws of a fit_summary document in its domain order """

    try:
        return tuple(DomainLaw(domain=name, alpha=float(document["domains"][name]["alpha"]),
                               beta=float(document["domains"][name]["beta"]),
                               gamma=float(document["domains"][name]["gamma"]),
                               rss=float(document["domains"][name].get("rss", 0.0)),
                               argument=document["domains"][name].get("argument", Argument.R.value))
                     for name in document["order"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Fit document is incomplete: {e}")
