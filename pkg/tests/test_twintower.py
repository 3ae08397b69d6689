import csv
import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from dalip.counterparts import PoolingHeadKind
from dalip.errors import ConfigurationError, DivergenceError, ParameterError, ShapeError
from dalip.numcore import as_tensor
from dalip.objective import DalipObjectiveConfig, infonce
from dalip.synthdata import Dataset, Split, SyntheticDatasetSpec, build_dataset, generate, random_split
from dalip.twintower import (EPOCH_COLUMNS, LOG_TAU, PILOT_MARGIN, PILOT_SEEDS, STEP_COLUMNS, Adam, PilotCalibration,
                             StepMetrics, TowerParams, TowerSpec, TrainConfig, TrainMetrics, TwinTower, ablation,
                             cosine_lr, episodes, epoch_losses, evaluate, gradient_check, lambda_sweep, load_checkpoint,
                             param_group, pilot, save_checkpoint, train, write_metrics)

TOY_SPEC = TowerSpec(raw_dim=5, d_mid=8, d=4, heads=2)


def toy_config(**changes):
    return replace(TrainConfig(batch_size=32, epochs=1, warmup_steps=0, base_lr=1e-2, min_lr=1e-3), **changes)


def test_cosine_schedule():
    cfg = TrainConfig(base_lr=1e-2, min_lr=1e-4, warmup_steps=4)

    assert cosine_lr(0, 20, cfg) == pytest.approx(2.5e-3)
    assert cosine_lr(3, 20, cfg) == pytest.approx(1e-2)
    assert cosine_lr(4, 20, cfg) == pytest.approx(1e-2)
    assert cosine_lr(12, 20, cfg) == pytest.approx(0.5 * (1e-2 + 1e-4))
    assert cosine_lr(20, 20, cfg) == pytest.approx(1e-4)
    assert cosine_lr(50, 20, cfg) == pytest.approx(1e-4)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1).validate()

    with pytest.raises(ParameterError):
        TrainConfig(min_lr=1.0, base_lr=0.1).validate()

    with pytest.raises(ParameterError):
        TrainConfig(beta1=1.0).validate()


def test_params_are_seeded_and_grouped():
    tower = TwinTower(TOY_SPEC)
    a, b = tower.init_params(3), tower.init_params(3)

    assert a.names() == b.names()
    assert all(np.array_equal(a[n], b[n]) for n in a.names())
    assert not np.array_equal(a["image.proj1"], tower.init_params(4)["image.proj1"])
    assert {param_group(n) for n in a.names()} == {"tower", "head"}
    assert param_group(LOG_TAU) == "temperature"


def test_unshared_heads():
    names = TwinTower(replace(TOY_SPEC, shared_head=False)).init_params().names()

    assert "image.head.w1" in names and "text.head.w1" in names
    assert "head.w1" not in names


def test_check_params():
    tower = TwinTower(TOY_SPEC)
    params = tower.init_params()

    with pytest.raises(ConfigurationError):
        tower.check_params(TowerParams({"image.proj1": params["image.proj1"]}))

    wrong = dict(params.tensors)
    wrong["image.proj1"] = np.zeros((2, 2))

    with pytest.raises(ShapeError):
        tower.check_params(TowerParams(wrong))


def test_embeddings_have_unit_first_order(small_dataset):
    tower = TwinTower(TOY_SPEC)
    batch = tower.embed(tower.init_params(), small_dataset.test)

    assert batch.image_first.shape == (len(small_dataset.test), 4)
    assert batch.text_second.shape == (len(small_dataset.test), 4)
    np.testing.assert_allclose(np.linalg.norm(batch.image_first, axis=1), 1.0, atol=1e-9)


def test_episodes_take_one_pair_per_class(small_dataset):
    groups = episodes(small_dataset.test, 4, seed=1)

    assert len(groups) == 2
    for group in groups:
        assert small_dataset.test.class_ids[group].tolist() == [0, 1, 2, 3]

    assert sorted(np.concatenate(groups).tolist()) == list(range(len(small_dataset.test)))


def test_zero_weights_give_chance(small_dataset):
    tower = TwinTower(TOY_SPEC)
    result = evaluate(tower, tower.zero_params(), small_dataset.test, DalipObjectiveConfig(), num_classes=4)

    assert result.episodes == 2 and result.episode_size == 4
    assert result.top1 == 0.25
    assert result.top1_first == 0.25
    assert result.top1_second == 0.25
    assert result.top5 == 1.0


def test_one_step_moves_every_tensor(small_dataset):
    tower = TwinTower(TOY_SPEC)
    params = tower.init_params(1)
    cfg = toy_config()
    result = train(small_dataset, tower, params, cfg)

    assert len(result.metrics.steps) == 1
    assert len(result.metrics.epochs) == 1
    assert all(not np.array_equal(result.params[n], params[n]) for n in params.names())
    assert result.objective.log_tau != cfg.objective.log_tau

    step = result.metrics.steps[0]
    assert step.lr == pytest.approx(cfg.base_lr)
    assert math.isfinite(step.loss_total)


def test_training_is_deterministic(small_dataset):
    tower = TwinTower(TOY_SPEC)
    cfg = toy_config(batch_size=8, epochs=2)

    a = train(small_dataset, tower, tower.init_params(2), cfg)
    b = train(small_dataset, tower, tower.init_params(2), cfg)

    assert [s.loss_total for s in a.metrics.steps] == [s.loss_total for s in b.metrics.steps]
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params.names())


def test_trailing_partial_batch_is_dropped(small_dataset):
    tower = TwinTower(TOY_SPEC)
    result = train(small_dataset, tower, tower.init_params(), toy_config(batch_size=10, epochs=2))

    assert len(result.metrics.steps) == 6
    assert [s.epoch for s in result.metrics.steps] == [0, 0, 0, 1, 1, 1]


def test_temperature_is_clamped(small_dataset):
    tower = TwinTower(TOY_SPEC)
    objective = DalipObjectiveConfig(log_tau=math.log(0.001), min_tau=0.05)
    result = train(small_dataset, tower, tower.init_params(), toy_config(objective=objective, base_lr=1.0, min_lr=1.0))

    assert result.objective.log_tau >= math.log(0.05)
    assert all(s.tau >= 0.05 * (1 - 1e-12) for s in result.metrics.steps)


def test_divergence_reports_diagnostics(small_dataset):
    blown = Split(small_dataset.train.class_ids, small_dataset.train.sample_index, small_dataset.train.domains,
                  small_dataset.train.image * 1e200, small_dataset.train.text)
    dataset = Dataset(specs=small_dataset.specs, train=blown, test=small_dataset.test)
    tower = TwinTower(TOY_SPEC)

    with pytest.raises(DivergenceError) as info:
        train(dataset, tower, tower.init_params(), toy_config())

    assert info.value.diagnostics["step"] == 0
    assert "param_norms" in info.value.diagnostics


def test_non_finite_update_reports_diagnostics(small_dataset, monkeypatch):
    def overflowing_step(self, tensors, grads, lr):
        return {name: as_tensor(np.full(np.shape(value), np.inf)) for name, value in tensors.items()}

    monkeypatch.setattr(Adam, "step", overflowing_step)
    tower = TwinTower(TOY_SPEC)

    with pytest.raises(DivergenceError) as info:
        train(small_dataset, tower, tower.init_params(), toy_config())

    diagnostics = info.value.diagnostics

    assert diagnostics["reason"] == "non-finite update"
    assert diagnostics["step"] == 0 and diagnostics["last_step"] is None
    assert all(math.isfinite(n) for n in diagnostics["grad_norms"].values())
    assert all(math.isfinite(n) for n in diagnostics["param_norms"].values())


def test_checkpoint_round_trip(tmp_path):
    tower = TwinTower(replace(TOY_SPEC, pooling="cov", d_tilde=3))
    params = tower.init_params(5)
    objective = DalipObjectiveConfig(lambda1=0.3, lambda2=0.7)

    save_checkpoint(str(tmp_path), tower, params, objective)
    loaded_tower, loaded, loaded_objective = load_checkpoint(str(tmp_path))

    assert loaded_tower.spec == tower.spec
    assert loaded_objective == objective
    assert loaded.names() == params.names()
    assert all(np.array_equal(loaded[n], params[n]) for n in params.names())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(tmp_path))


def test_metric_tables(tmp_path, small_dataset):
    tower = TwinTower(TOY_SPEC)
    result = train(small_dataset, tower, tower.init_params(), toy_config(batch_size=16))
    write_metrics(result.metrics, str(tmp_path))

    with open(tmp_path / "steps.csv") as cf:
        steps = list(csv.reader(cf))

    with open(tmp_path / "epochs.csv") as cf:
        epochs = list(csv.reader(cf))

    assert tuple(steps[0]) == STEP_COLUMNS and len(steps) == 3
    assert tuple(epochs[0]) == EPOCH_COLUMNS and len(epochs) == 2


def test_full_model_gradients():
    spec = TowerSpec(raw_dim=6, d_mid=8, d=8, heads=2, d_tilde=8)
    tower = TwinTower(spec)
    split = random_split(4, 6, 6, seed=1)

    report = gradient_check(tower, tower.init_params(0), math.log(0.5), split, DalipObjectiveConfig(), sample=24)

    assert report.passed, report.to_dict()
    assert report.params[-1].name == LOG_TAU


@pytest.mark.parametrize("pooling", ["mean", "bdc", "cov"])
def test_counterpart_gradients(pooling):
    tower = TwinTower(TowerSpec(raw_dim=4, d_mid=6, d=4, pooling=pooling, heads=1, d_tilde=3))
    report = gradient_check(tower, tower.init_params(2), 0.0, random_split(3, 5, 4, seed=2), DalipObjectiveConfig(),
                            sample=16)

    assert report.passed, report.to_dict()


PURE_FIRST_ORDER = DalipObjectiveConfig(lambda1=1.0, lambda2=0.0)


def first_order_infonce(tower, params, split, objective):
    batch = tower.embed(params, split)
    return infonce(batch.image_first, batch.text_first, log_tau=objective.log_tau, reduction=objective.reduction)


def test_first_order_weighting_trains_plain_infonce(small_dataset):
    tower = TwinTower(TOY_SPEC)
    params = tower.init_params(4)
    full_batch = toy_config(batch_size=len(small_dataset.train), base_lr=1e-2, min_lr=1e-2, objective=PURE_FIRST_ORDER)

    steps = train(small_dataset, tower, params, replace(full_batch, epochs=4)).metrics.steps

    assert all(s.loss_total == s.loss_first for s in steps)
    assert steps[0].loss_total == pytest.approx(first_order_infonce(tower, params, small_dataset.train, PURE_FIRST_ORDER),
                                                abs=1e-10)

    for epochs in (1, 2, 3):
        result = train(small_dataset, tower, params, replace(full_batch, epochs=epochs))
        expected = first_order_infonce(tower, result.params, small_dataset.train, result.objective)

        assert steps[epochs].loss_total == pytest.approx(expected, abs=1e-10)


def test_second_order_head_is_inert_without_weight(small_dataset):
    cfg = toy_config(batch_size=8, epochs=2, objective=PURE_FIRST_ORDER)
    runs = []

    for spec in (TOY_SPEC, replace(TOY_SPEC, pooling="cov", d_tilde=3)):
        tower = TwinTower(spec)
        runs.append(train(small_dataset, tower, tower.init_params(6), cfg))

    assert [s.loss_total for s in runs[0].metrics.steps] == [s.loss_total for s in runs[1].metrics.steps]

    for name in runs[0].params.names():
        if param_group(name) == "tower":
            assert np.array_equal(runs[0].params[name], runs[1].params[name]), name


def test_lambda_sweep(small_dataset):
    rows = lambda_sweep(small_dataset, TOY_SPEC, toy_config(), lambdas=[0.0, 1.0])

    assert [(r.lambda1, r.lambda2) for r in rows] == [(0.0, 1.0), (1.0, 0.0)]
    assert all(0.0 <= r.top1 <= r.top5 <= 1.0 for r in rows)

    with pytest.raises(ParameterError):
        lambda_sweep(small_dataset, TOY_SPEC, toy_config(), lambdas=[1.5])


def test_ablation_variants(small_dataset):
    rows = ablation(small_dataset, TOY_SPEC, toy_config(), seeds=[0, 1],
                    poolings=[PoolingHeadKind.MBDC, PoolingHeadKind.COVARIANCE])

    assert len(rows) == 8
    assert [(r.variant, r.pooling) for r in rows[:4]] == [("first-only", "mbdc"), ("second-only", "mbdc"),
                                                          ("combined", "mbdc"), ("combined", "cov")]
    assert {r.seed for r in rows} == {0, 1}


@pytest.mark.slow
def test_pilot_learns_covariance_coded_classes():
    dataset = generate(SyntheticDatasetSpec(num_classes=5, samples_per_class=40, tokens=16, seed=11))
    tower = TwinTower(TowerSpec(raw_dim=8, d_mid=16, d=8, heads=2))
    cfg = TrainConfig(batch_size=16, epochs=15, warmup_steps=10, seed=11)

    result = train(dataset, tower, tower.init_params(11), cfg)
    score = evaluate(tower, result.params, dataset.test, result.objective, num_classes=5)

    assert score.top1 > 0.3


def test_epoch_losses():
    metrics = TrainMetrics(steps=[StepMetrics(step, step // 2, 1e-3, loss, loss, loss, 0.07)
                                  for step, loss in enumerate([4.0, 2.0, 3.0, 1.0, 0.5])])

    assert epoch_losses(metrics) == [3.0, 2.0, 0.5]


def test_pilot_on_toy_data(small_dataset):
    calibration = pilot(small_dataset, TOY_SPEC, toy_config(batch_size=8, epochs=2), seeds=[0, 1])

    assert [r.seed for r in calibration.runs] == [0, 1]
    assert calibration.first_only == pytest.approx(np.mean([r.first_only for r in calibration.runs]))
    assert calibration.margin == PILOT_MARGIN
    assert calibration.passed == (calibration.first_only + PILOT_MARGIN <= calibration.combined
                                  and calibration.first_only < calibration.second_only <= calibration.combined
                                  and all(r.loss_decreased() for r in calibration.runs))

    for run in calibration.runs:
        assert set(run.first_epoch_loss) == set(run.last_epoch_loss) == {"first-only", "second-only", "combined"}

    with pytest.raises(ConfigurationError):
        pilot(small_dataset, TOY_SPEC, toy_config(), seeds=[])


CALIBRATION_PATH = os.path.join(os.path.dirname(__file__), os.pardir, "calibration", "pilot.json")


@pytest.fixture(scope="module")
def default_pilot():
    return pilot(generate(SyntheticDatasetSpec()), TowerSpec(), TrainConfig(), seeds=PILOT_SEEDS)


@pytest.mark.slow
def test_combined_objective_beats_first_order_by_the_margin(default_pilot):
    assert default_pilot.first_only + PILOT_MARGIN <= default_pilot.combined
    assert default_pilot.passed


@pytest.mark.slow
def test_ablation_ordering_over_seeds(default_pilot):
    assert len(default_pilot.runs) == 3
    assert default_pilot.first_only < default_pilot.second_only <= default_pilot.combined


@pytest.mark.slow
def test_loss_falls_from_first_to_last_epoch(default_pilot):
    assert default_pilot.config.epochs == 30

    for run in default_pilot.runs:
        for name, first in run.first_epoch_loss.items():
            assert run.last_epoch_loss[name] < first, (run.seed, name)


@pytest.mark.slow
@pytest.mark.skipif(not os.path.isfile(CALIBRATION_PATH), reason="no checked-in pilot calibration")
def test_pilot_matches_checked_in_calibration(default_pilot):
    with open(CALIBRATION_PATH) as jf:
        stored = PilotCalibration.from_dict(json.load(jf))

    assert stored.tower == default_pilot.tower
    assert stored.config == default_pilot.config
    assert [r.seed for r in stored.runs] == [r.seed for r in default_pilot.runs]

    for kept, fresh in zip(stored.runs, default_pilot.runs):
        assert (kept.first_only, kept.second_only, kept.combined) == \
            pytest.approx((fresh.first_only, fresh.second_only, fresh.combined), abs=1e-9)


@pytest.mark.slow
def test_sweep_endpoints_never_beat_every_mix():
    rows = lambda_sweep(build_dataset(SyntheticDatasetSpec(coding="mixed")), TowerSpec(), TrainConfig())
    best_mix = max(r.top1 for r in rows[1:-1])

    assert (rows[0].lambda1, rows[-1].lambda1) == (0.0, 1.0)
    assert best_mix >= rows[0].top1 and best_mix >= rows[-1].top1
