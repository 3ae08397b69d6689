import math

import numpy as np
import pytest

from dalip import mixlaw
from dalip.errors import (AgreementError, ConfigurationError, CsvParseError, DegenerateFitError, DegenerateSlopeError,
                          ParameterError, UnderdeterminedError)
from dalip.mixlaw import (Argument, DomainLaw, MixObservation, eval_law, fit, fit_from_csv, fit_law, fit_summary,
                          laws_from_summary, parse_observations, read_observations, sample_law, solve_optimal_ratio)

LAW1 = DomainLaw("web", 49.74, -19.65, -9.46)
LAW2 = DomainLaw("books", 89.9, -71.6, -0.36, argument=Argument.ONE_MINUS_R.value)

EIGHT_RATIOS = np.linspace(0.0, 1.0, 8)


def assert_recovered(law, planted, rel):
    assert law.alpha == pytest.approx(planted.alpha, rel=rel)
    assert law.beta == pytest.approx(planted.beta, rel=rel)
    assert law.gamma == pytest.approx(planted.gamma, rel=rel)


def test_eval_law():
    assert eval_law(LAW1, 0.0) == pytest.approx(30.09, abs=1e-12)
    assert eval_law(LAW1, 0.2378) == pytest.approx(49.74 - 19.65 * math.exp(-9.46 * 0.2378), abs=1e-12)
    assert eval_law(LAW1, 0.2378) == pytest.approx(47.668, abs=1e-3)
    assert eval_law(LAW2, 1.0) == pytest.approx(89.9 - 71.6, abs=1e-12)


def test_trend():
    assert LAW1.trend == "increasing"
    assert DomainLaw("x", 1.0, 2.0, -1.0).trend == "decreasing"
    assert DomainLaw("x", 1.0, 0.0, 3.0).trend == "flat"


def test_noiseless_round_trip():
    observations = sample_law(LAW1, EIGHT_RATIOS)
    law = fit_law([o.ratio for o in observations], [o.accuracy for o in observations])

    assert_recovered(law, LAW1, 1e-3)
    assert law.observations == 8
    assert law.rss < 1e-8


def test_round_trip_in_complementary_share():
    observations = sample_law(LAW2, EIGHT_RATIOS)
    law = fit_law([o.ratio for o in observations], [o.accuracy for o in observations], argument=Argument.ONE_MINUS_R)

    assert_recovered(law, LAW2, 1e-3)
    assert law.argument == "1-r"


def test_random_planted_laws():
    rng = np.random.Generator(np.random.Philox(2024))

    for _ in range(50):
        planted = DomainLaw("d", rng.uniform(20, 80), rng.choice([-1, 1]) * rng.uniform(5, 50),
                            rng.choice([-1, 1]) * rng.uniform(0.1, 15))
        observations = sample_law(planted, EIGHT_RATIOS)

        assert_recovered(fit_law([o.ratio for o in observations], [o.accuracy for o in observations]), planted, 1e-3)


def test_flat_observations():
    law = fit_law([0.0, 0.3, 0.6, 1.0], [42.0] * 4)

    assert law.beta == pytest.approx(0.0, abs=1e-6)
    assert law.alpha == pytest.approx(42.0, abs=1e-6)
    assert law.rss == pytest.approx(0.0, abs=1e-12)


def test_noisy_recovery():
    planted = LAW1
    ratios = np.linspace(0.0, 1.0, 12)
    noise = np.random.Generator(np.random.Philox(5)).normal(0.0, 0.2, size=12)

    law = fit_law(ratios, planted(ratios) + noise)

    assert_recovered(law, planted, 0.1)
    assert 0.0 < law.rss < 3 * 12 * 0.2 ** 2


def test_point_order_does_not_matter():
    observations = sample_law(LAW1, EIGHT_RATIOS)
    ratios = [o.ratio for o in observations]
    accuracies = [o.accuracy + 0.01 * (-1) ** i for i, o in enumerate(observations)]
    order = np.random.Generator(np.random.Philox(1)).permutation(8)

    a = fit_law(ratios, accuracies)
    b = fit_law([ratios[i] for i in order], [accuracies[i] for i in order])

    assert (a.alpha, a.beta, a.gamma, a.rss) == (b.alpha, b.beta, b.gamma, b.rss)


def test_fit_errors():
    with pytest.raises(UnderdeterminedError):
        fit_law([0.0, 0.5, 1.0], [1.0, 2.0, 3.0])

    with pytest.raises(DegenerateFitError):
        fit_law([0.5] * 4, [1.0, 2.0, 3.0, 4.0])

    with pytest.raises(UnderdeterminedError):
        fit_law([0.0, 0.0, 1.0, 1.0], [1.0, 2.0, 3.0, 4.0])

    with pytest.raises(ConfigurationError):
        fit_law(EIGHT_RATIOS, EIGHT_RATIOS, mixlaw.FitSettings(gamma_min=1.0, gamma_max=-1.0))


#
#   Optimal ratio
#

def test_optimum_of_example_laws():
    result = solve_optimal_ratio(LAW1, LAW2)

    assert result.r_star == pytest.approx(0.2378, abs=0.005)
    assert result.closed_form == pytest.approx(0.23786, abs=1e-4)
    assert abs(result.closed_form - result.numeric) <= 1e-6
    assert not result.boundary
    assert result.objective == pytest.approx(eval_law(LAW1, result.r_star) + eval_law(LAW2, result.r_star))


def test_symmetric_laws_meet_in_the_middle():
    law = DomainLaw("a", 50.0, -20.0, -3.0)
    assert solve_optimal_ratio(law, law).r_star == pytest.approx(0.5, abs=1e-9)


def test_flat_second_law_puts_the_optimum_on_the_boundary():
    result = solve_optimal_ratio(LAW1, DomainLaw("flat", 60.0, 0.0, 1.0))

    assert result.boundary
    assert result.r_star == 1.0
    assert result.numeric is None


def test_weights_shift_the_optimum():
    heavy = solve_optimal_ratio(LAW1, LAW2, weights=(1.0, 4.0))

    assert heavy.r_star < solve_optimal_ratio(LAW1, LAW2).r_star
    assert heavy.weights == [1.0, 4.0]

    with pytest.raises(ParameterError):
        solve_optimal_ratio(LAW1, LAW2, weights=(-1.0, 1.0))


def test_opposite_exponents():
    with pytest.raises(DegenerateSlopeError):
        solve_optimal_ratio(DomainLaw("a", 50.0, -20.0, -3.0), DomainLaw("b", 50.0, 20.0, 3.0))


def test_disagreement_is_an_error(monkeypatch):
    monkeypatch.setattr(mixlaw, "AGREEMENT_TOL", -1.0)

    with pytest.raises(AgreementError):
        solve_optimal_ratio(LAW1, LAW2)


#
#   Two-domain fits and CSV
#

def example_observations():
    return sample_law(LAW1, EIGHT_RATIOS) + sample_law(LAW2, EIGHT_RATIOS)


def test_two_domain_fit():
    result = fit(example_observations(), domains=["web", "books"])

    assert [law.argument for law in result.laws] == ["r", "1-r"]
    assert_recovered(result.law("books"), LAW2, 1e-3)
    assert result.optimum.r_star == pytest.approx(0.2378, abs=0.005)

    with pytest.raises(ConfigurationError):
        result.law("news")


def test_domain_order():
    default = fit(example_observations())
    assert [law.domain for law in default.laws] == ["books", "web"]

    with pytest.raises(ConfigurationError):
        fit(example_observations(), domains=["web", "news"])

    with pytest.raises(ConfigurationError):
        fit(example_observations() + sample_law(DomainLaw("news", 1.0, 1.0, 1.0), EIGHT_RATIOS))


def test_single_domain_has_no_optimum():
    assert fit(sample_law(LAW1, EIGHT_RATIOS)).optimum is None


def test_summary_round_trip():
    result = fit(example_observations(), domains=["web", "books"])
    document = fit_summary(result)

    assert document["order"] == ["web", "books"]
    assert set(document["domains"]["web"]) >= {"alpha", "beta", "gamma", "rss"}
    assert {"r_star", "boundary", "objective_at_r_star"} <= set(document)

    law1, law2 = laws_from_summary(document)
    assert solve_optimal_ratio(law1, law2).r_star == pytest.approx(result.optimum.r_star, abs=1e-12)

    with pytest.raises(ConfigurationError):
        laws_from_summary({"order": ["web"], "domains": {}})


def write_csv(path, observations, encoding="utf-8"):
    lines = ["domain,ratio,accuracy"] + [f"{o.domain},{o.ratio!r},{o.accuracy!r}" for o in observations]
    path.write_text("\n".join(lines) + "\n", encoding=encoding)


def test_fit_from_csv(tmp_path):
    path = tmp_path / "mix.csv"
    write_csv(path, example_observations())

    result = fit_from_csv(str(path), domains=["web", "books"])

    assert result.optimum.r_star == pytest.approx(0.2378, abs=0.005)


def test_csv_in_other_encodings(tmp_path):
    path = tmp_path / "mix16.csv"
    write_csv(path, example_observations(), encoding="utf-16")

    assert len(read_observations(str(path))) == 16


@pytest.mark.parametrize("text, line", [
    ("ratio,accuracy\n0.1,2\n", 1),
    ("domain,ratio,accuracy\na,0.1,2\na,0.2\n", 3),
    ("domain,ratio,accuracy\na,0.1,2\n\na,zero,2\n", 4),
    ("domain,ratio,accuracy\na,1.5,2\n", 2),
    ("domain,ratio,accuracy\n,0.5,2\n", 2),
    ("", 1),
])
def test_csv_errors_carry_line_numbers(text, line):
    with pytest.raises(CsvParseError) as info:
        parse_observations(text, "mix.csv")

    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_csv_parsing():
    observations = parse_observations("domain , ratio , accuracy\nweb, 0.25 ,40.5\n\nbooks,1,88\n")

    assert observations == [MixObservation("web", 0.25, 40.5), MixObservation("books", 1.0, 88.0)]
