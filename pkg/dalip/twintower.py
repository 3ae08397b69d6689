"""
    Toy two-tower model, training loop and episode evaluation.

    Each modality tower maps raw tokens through a relu layer to width d. The first-order embedding is the
    projected, L2-normalized token mean, the second-order embedding comes from the pooling head (MBDC by default,
    shared by both towers unless configured otherwise). Training minimizes the DALIP loss with Adam under a
    cosine learning-rate schedule with linear warmup.
"""

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dataclasses_json import dataclass_json
from pathvalidate import sanitize_filename

from dalip.bdc import DEFAULT_EPS
from dalip.blob import read_blob, write_blob
from dalip.counterparts import PoolingHead, PoolingHeadKind, make_head
from dalip.errors import (ConfigurationError, DivergenceError, EmptySplitError, NonFiniteError, ParameterError,
                          ShapeError)
from dalip.gradcheck import GradCheckReport, finite_diff_check
from dalip.numcore import Tape, Tensor, as_tensor, backward
from dalip.objective import DalipObjectiveConfig, EmbeddingBatch, SimilarityMode, dalip_loss_nodes, retrieval_hits, \
    similarity_matrix
from dalip.synthdata import Dataset, Modality, Split, SplitName
from utils.interface import progress_bar
from utils.misc import LAB_VERSION, check_manifest_version

LOGGER = logging.getLogger("Train")

LOG_TAU = "log_tau"

STEP_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_first", "loss_second", "tau")
EPOCH_COLUMNS = ("epoch", "top1", "top5", "top1_first", "top1_second")

# Rows per tape when embedding a whole split
EMBED_CHUNK = 64

DEFAULT_LAMBDAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass_json
@dataclass
class TowerSpec:
    """
        Shape of the two-tower model.

        hidden (q) defaults to the per-head triangle size and d_tilde to d. d_mid matches the latent width of the default
        synthetic data, so the token mean exposes only a few relu scale readouts to first-order retrieval.
    """

    raw_dim: int = 8
    d_mid: int = 4
    d: int = 16
    pooling: str = PoolingHeadKind.MBDC.value
    heads: int = 4
    hidden: Optional[int] = None
    d_tilde: Optional[int] = None
    eps: float = DEFAULT_EPS
    shared_head: bool = True


@dataclass
class TowerParams:
    """ Trainable tensors keyed by dotted name, e.g. image.proj1 or head.w1 """

    tensors: Dict[str, Tensor]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def replaced(self, tensors: Dict[str, Tensor]):
        return TowerParams({name: as_tensor(tensors[name]) for name in self.tensors})

    def norms(self):
        return {name: float(np.linalg.norm(value)) for name, value in sorted(self.tensors.items())}


def param_group(name):
    """ Coarse group of a trainable tensor: tower, head or temperature """

    if name == LOG_TAU:
        return "temperature"

    return "head" if "head." in name else "tower"


class TwinTower:
    """
        Image and text towers with a pooling head.

        Arguments:
            - spec: TowerSpec with the layer widths and pooling settings
    """

    def __init__(self, spec: TowerSpec):
        if min(spec.raw_dim, spec.d_mid, spec.d) < 1:
            raise ConfigurationError(f"Tower widths must be positive, got raw={spec.raw_dim}, mid={spec.d_mid}, d={spec.d}")

        self.spec = spec
        self.head: PoolingHead = make_head(PoolingHeadKind(spec.pooling), spec.d, spec.heads, spec.d_tilde, spec.hidden, spec.eps)

    def _head_prefix(self, modality: Modality):
        return "head." if self.spec.shared_head else f"{modality.value}.head."

    def _head_prefixes(self):
        return sorted({self._head_prefix(m) for m in Modality})

    def init_params(self, seed=0) -> TowerParams:
        """ Draws uniform(±1/√fan_in) tower weights and fresh head parameters from {seed} """

        children = np.random.SeedSequence(seed).spawn(len(Modality) + 1)
        s = self.spec
        tensors = {}

        for modality, child in zip(Modality, children):
            rng = np.random.Generator(np.random.Philox(child))

            for name, shape in ((f"{modality.value}.proj1", (s.raw_dim, s.d_mid)),
                                (f"{modality.value}.proj2", (s.d_mid, s.d)),
                                (f"{modality.value}.first", (s.d, s.d))):
                bound = 1.0 / math.sqrt(shape[0])
                tensors[name] = as_tensor(rng.uniform(-bound, bound, size=shape))

        head_seeds = children[-1].generate_state(len(Modality))

        for prefix, head_seed in zip(self._head_prefixes(), head_seeds):
            for name, value in self.head.init_params(int(head_seed)).items():
                tensors[prefix + name] = value

        return TowerParams(tensors)

    def zero_params(self) -> TowerParams:
        params = self.init_params()
        return params.replaced({name: np.zeros_like(value) for name, value in params.tensors.items()})

    def check_params(self, params: TowerParams):
        expected = self.init_params()

        if set(params.tensors) != set(expected.tensors):
            raise ConfigurationError(f"Parameter names don't match the tower: {sorted(set(params.tensors) ^ set(expected.tensors))}")

        for name, value in expected.tensors.items():
            if params[name].shape != value.shape:
                raise ShapeError(f"Parameter '{name}' has shape {params[name].shape}, expected {value.shape}")

    def _modality_nodes(self, tape: Tape, nodes: Dict[str, int], modality: Modality, token_mats: Sequence[Tensor]):
        prefix = self._head_prefix(modality)
        head_nodes = {name[len(prefix):]: node for name, node in nodes.items() if name.startswith(prefix)}
        m = modality.value
        firsts, seconds = [], []

        for tokens in token_mats:
            x = tape.constant(tokens)

            if tape.value(x).shape[1] != self.spec.raw_dim:
                raise ShapeError(f"Tower expects {self.spec.raw_dim} raw channels, tokens have {tape.value(x).shape[1]}")

            h = tape.matmul(tape.relu(tape.matmul(x, nodes[f"{m}.proj1"])), nodes[f"{m}.proj2"])
            firsts.append(tape.matmul(tape.mean_rows(h), nodes[f"{m}.first"]))
            seconds.append(self.head.node(tape, h, head_nodes))

        return tape.l2_normalize(tape.concat_rows(firsts)), tape.concat_rows(seconds)

    def embedding_nodes(self, tape: Tape, nodes: Dict[str, int], split: Split, indices) -> Tuple[int, int, int, int]:
        """ Records (image_first, text_first, image_second, text_second) for the pairs {indices} of {split} """

        image_first, image_second = self._modality_nodes(tape, nodes, Modality.IMAGE, [split.image[i] for i in indices])
        text_first, text_second = self._modality_nodes(tape, nodes, Modality.TEXT, [split.text[i] for i in indices])

        return image_first, text_first, image_second, text_second

    def embed(self, params: TowerParams, split: Split) -> EmbeddingBatch:
        """ Embeddings of every pair of {split} """

        if len(split) == 0:
            raise EmptySplitError("Can't embed an empty split")

        parts = []

        for start in range(0, len(split), EMBED_CHUNK):
            tape = Tape()
            nodes = {name: tape.constant(value) for name, value in params.tensors.items()}
            indices = range(start, min(start + EMBED_CHUNK, len(split)))
            parts.append([tape.value(n) for n in self.embedding_nodes(tape, nodes, split, indices)])

        return EmbeddingBatch(*[np.concatenate([p[k] for p in parts]) for k in range(4)])


#
#   Optimization
#

@dataclass_json
@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    base_lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    objective: DalipObjectiveConfig = field(default_factory=DalipObjectiveConfig)

    def validate(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"Contrastive batches need at least 2 pairs, got batch_size={self.batch_size}")

        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigurationError(f"epochs and eval_every must be positive, got {self.epochs} and {self.eval_every}")

        if not (0 <= self.min_lr <= self.base_lr) or self.warmup_steps < 0:
            raise ParameterError(f"Learning rates need 0 ≤ min_lr ≤ base_lr and warmup ≥ 0, got {self.min_lr}, "
                                 f"{self.base_lr}, {self.warmup_steps}")

        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ParameterError(f"Adam needs β in [0, 1) and eps > 0, got {self.beta1}, {self.beta2}, {self.adam_eps}")

        self.objective.validate()

        return self


def cosine_lr(step, total_steps, cfg: TrainConfig):
    """
        Learning rate at {step} (0-based): linear warmup to base_lr over warmup_steps, then a cosine decay that
        reaches min_lr after the remaining total_steps − warmup_steps steps.
    """

    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps

    span = max(total_steps - cfg.warmup_steps, 1)
    t = min(step - cfg.warmup_steps, span)

    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / span))


class Adam:
    """ Bias-corrected adaptive-moment optimizer over a dictionary of tensors """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, tensors: Dict[str, Tensor], grads: Dict[str, np.ndarray], lr) -> Dict[str, Tensor]:
        self.t += 1
        updated = {}

        for name, value in tensors.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v

            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            updated[name] = as_tensor(value - lr * m_hat / (np.sqrt(v_hat) + self.eps))

        return updated


@dataclass_json
@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_first: float
    loss_second: float
    tau: float


@dataclass_json
@dataclass
class EvalMetrics:
    top1: float
    top5: float
    top1_first: float
    top1_second: float
    episodes: int = 0
    episode_size: int = 0


@dataclass_json
@dataclass
class EpochMetrics:
    epoch: int
    top1: float
    top5: float
    top1_first: float
    top1_second: float


@dataclass
class TrainMetrics:
    steps: List[StepMetrics] = field(default_factory=list)
    epochs: List[EpochMetrics] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)


@dataclass
class TrainResult:
    params: TowerParams
    objective: DalipObjectiveConfig
    metrics: TrainMetrics
    wall_seconds: float


def _grad_norms(grads: Dict[str, np.ndarray]):
    return {name: float(np.linalg.norm(g)) for name, g in sorted(grads.items())}


def train(dataset: Dataset, tower: TwinTower, params: TowerParams, cfg: TrainConfig, progress=False) -> TrainResult:
    """
        Trains {params} on the train split of {dataset}.

        Batches are seeded shuffles of the train split with the trailing partial batch dropped. After each Adam step
        τ is clamped to at least min_tau. Raises DivergenceError with a diagnostics dictionary when the loss, a
        gradient or a parameter update becomes non-finite.
    """

    cfg.validate()
    tower.check_params(params)

    split = dataset.split(SplitName.TRAIN)
    batch_size = min(cfg.batch_size, len(split))

    if batch_size < 2:
        raise ConfigurationError(f"Train split holds {len(split)} pairs, contrastive batches need at least 2")

    steps_per_epoch = len(split) // batch_size
    total_steps = cfg.epochs * steps_per_epoch
    objective = replace(cfg.objective)
    min_log_tau = math.log(objective.min_tau)

    state = dict(params.tensors)
    state[LOG_TAU] = as_tensor([[max(objective.log_tau, min_log_tau)]])

    adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed).spawn(2)[1]))
    metrics = TrainMetrics()
    grad_norms = {}
    started = time.perf_counter()
    step = 0

    LOGGER.info(f"Training {tower.head.describe()} for {cfg.epochs} epochs × {steps_per_epoch} steps "
                f"(batch {batch_size}, λ1={objective.lambda1}, λ2={objective.lambda2})")

    with progress_bar(total_steps, "Training") if progress else _NullBar() as bar:
        for epoch in range(cfg.epochs):
            epoch_started = time.perf_counter()
            order = shuffle.permutation(len(split))

            for b in range(steps_per_epoch):
                indices = order[b * batch_size:(b + 1) * batch_size]
                lr = cosine_lr(step, total_steps, cfg)

                def diagnostics(reason):
                    return {
                        "reason": reason, "step": step, "epoch": epoch, "lr": lr,
                        "tau": math.exp(float(state[LOG_TAU][0, 0])),
                        "last_step": metrics.steps[-1].to_dict() if metrics.steps else None,
                        "grad_norms": grad_norms,
                        "param_norms": TowerParams({k: v for k, v in state.items() if k != LOG_TAU}).norms(),
                    }

                try:
                    tape = Tape()
                    nodes = {name: tape.leaf(value, name) for name, value in state.items()}
                    embeddings = tower.embedding_nodes(tape, nodes, split, indices)
                    total, first, second = dalip_loss_nodes(tape, *embeddings, nodes[LOG_TAU], objective)
                    grads = backward(tape, total)
                except NonFiniteError as e:
                    raise DivergenceError(f"Non-finite value at step {step}: {e}", diagnostics(str(e)))

                named_grads = {name: grads.of(node) for name, node in nodes.items()}
                grad_norms = _grad_norms(named_grads)

                if not all(math.isfinite(n) for n in grad_norms.values()):
                    raise DivergenceError(f"Non-finite gradient at step {step}", diagnostics("non-finite gradient"))

                try:
                    updated = adam.step(state, named_grads, lr)
                    updated[LOG_TAU] = as_tensor(np.maximum(updated[LOG_TAU], min_log_tau))
                except NonFiniteError as e:
                    raise DivergenceError(f"Non-finite update at step {step}: {e}", diagnostics("non-finite update"))

                state = updated

                metrics.steps.append(StepMetrics(
                    step=step, epoch=epoch, lr=lr,
                    loss_total=float(tape.value(total)[0, 0]),
                    loss_first=float(tape.value(first)[0, 0]),
                    loss_second=float(tape.value(second)[0, 0]),
                    tau=math.exp(float(state[LOG_TAU][0, 0])),
                ))

                step += 1
                bar()

            objective.log_tau = float(state[LOG_TAU][0, 0])

            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                current = TowerParams({k: v for k, v in state.items() if k != LOG_TAU})
                result = evaluate(tower, current, dataset.split(SplitName.TEST), objective, episode_seed=cfg.seed,
                                  num_classes=dataset.num_classes)
                metrics.epochs.append(EpochMetrics(epoch, result.top1, result.top5, result.top1_first, result.top1_second))

                LOGGER.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {metrics.steps[-1].loss_total:.4f}, "
                            f"top-1 {result.top1:.3f}, top-5 {result.top5:.3f}")

            metrics.epoch_seconds.append(time.perf_counter() - epoch_started)

    trained = TowerParams({k: v for k, v in state.items() if k != LOG_TAU})

    return TrainResult(trained, objective, metrics, time.perf_counter() - started)


class _NullBar:
    def __enter__(self):
        return lambda *args, **kwargs: None

    def __exit__(self, *exc):
        return False


#
#   Evaluation
#

def episodes(split: Split, num_classes, seed=0) -> List[np.ndarray]:
    """
        Partitions {split} into episodes of one pair per class.

        The pairs of every class are shuffled with {seed}; episode e takes the e-th pair of each class in class order.
        The number of episodes is the size of the smallest class.
    """

    keys = split.class_keys(num_classes)
    classes = np.unique(keys)
    rng = np.random.Generator(np.random.Philox(seed))
    members = [rng.permutation(np.flatnonzero(keys == c)) for c in classes]
    count = min(len(m) for m in members)

    return [np.array([m[e] for m in members]) for e in range(count)]


def evaluate(tower: TwinTower, params: TowerParams, split: Split, objective: DalipObjectiveConfig, episode_seed=0,
             num_classes=None) -> EvalMetrics:
    """
        Episode retrieval accuracy on {split}.

        Hits are counted per episode and divided by the total number of queries, so every episode weighs the same.
    """

    if len(split) == 0:
        raise EmptySplitError("Evaluation split holds no samples")

    num_classes = num_classes if num_classes is not None else int(split.class_ids.max()) + 1
    batch = tower.embed(params, split)
    groups = episodes(split, num_classes, episode_seed)
    size = len(groups[0])
    hits = {"top1": 0, "top5": 0, "top1_first": 0, "top1_second": 0}

    for indices in groups:
        sub = batch.subset(indices)

        def sims(mode):
            return similarity_matrix(sub, objective.lambda1, objective.lambda2, mode, objective.normalize_second_order)

        combined = sims(SimilarityMode.COMBINED)
        hits["top1"] += retrieval_hits(combined, 1)
        hits["top5"] += retrieval_hits(combined, min(5, size))
        hits["top1_first"] += retrieval_hits(sims(SimilarityMode.FIRST), 1)
        hits["top1_second"] += retrieval_hits(sims(SimilarityMode.SECOND), 1)

    queries = len(groups) * size

    return EvalMetrics(episodes=len(groups), episode_size=size, **{k: v / queries for k, v in hits.items()})


#
#   Harnesses
#

@dataclass_json
@dataclass
class SweepRow:
    lambda1: float
    lambda2: float
    top1: float
    top5: float
    top1_first: float
    top1_second: float


@dataclass_json
@dataclass
class AblationRow:
    variant: str
    pooling: str
    lambda1: float
    lambda2: float
    seed: int
    top1: float
    top5: float


def _fit(dataset, spec: TowerSpec, cfg: TrainConfig, seed, progress) -> Tuple[TwinTower, TrainResult]:
    tower = TwinTower(spec)
    run_cfg = replace(cfg, seed=seed, objective=replace(cfg.objective))

    return tower, train(dataset, tower, tower.init_params(seed), run_cfg, progress)


def _score(dataset, tower: TwinTower, result: TrainResult, seed) -> EvalMetrics:
    return evaluate(tower, result.params, dataset.split(SplitName.TEST), result.objective, seed, dataset.num_classes)


def _fit_and_score(dataset, spec: TowerSpec, cfg: TrainConfig, seed, progress):
    tower, result = _fit(dataset, spec, cfg, seed, progress)
    return _score(dataset, tower, result, seed)


def lambda_sweep(dataset: Dataset, spec: TowerSpec, cfg: TrainConfig, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                 progress=False) -> List[SweepRow]:
    """ Trains one model per λ1 (with λ2 = 1 − λ1) and reports its held-out retrieval """

    rows = []

    for lambda1 in lambdas:
        if not 0.0 <= lambda1 <= 1.0:
            raise ParameterError(f"Sweep values must lie in [0, 1], got {lambda1}")

        objective = replace(cfg.objective, lambda1=float(lambda1), lambda2=1.0 - float(lambda1), unit_sum=True)
        score = _fit_and_score(dataset, spec, replace(cfg, objective=objective), cfg.seed, progress)
        rows.append(SweepRow(objective.lambda1, objective.lambda2, score.top1, score.top5, score.top1_first, score.top1_second))

        LOGGER.info(f"λ1={objective.lambda1:.2f}: top-1 {score.top1:.3f}")

    return rows


ABLATION_WEIGHTS = (("first-only", 1.0, 0.0), ("second-only", 0.0, 1.0))


def ablation(dataset: Dataset, spec: TowerSpec, cfg: TrainConfig, seeds: Sequence[int] = (0,),
             poolings: Sequence[PoolingHeadKind] = (PoolingHeadKind.MBDC, PoolingHeadKind.SINGLE_HEAD_BDC,
                                                    PoolingHeadKind.COVARIANCE),
             progress=False) -> List[AblationRow]:
    """
        Runs first-only and second-only training with the configured pooling head, then the combined objective
        once per pooling head in {poolings}, for every seed.
    """

    variants = [(name, PoolingHeadKind(spec.pooling), l1, l2) for name, l1, l2 in ABLATION_WEIGHTS]
    variants += [("combined", kind, cfg.objective.lambda1, cfg.objective.lambda2) for kind in poolings]
    rows = []

    for seed in seeds:
        for name, kind, lambda1, lambda2 in variants:
            objective = replace(cfg.objective, lambda1=lambda1, lambda2=lambda2)
            score = _fit_and_score(dataset, replace(spec, pooling=kind.value), replace(cfg, objective=objective), seed, progress)
            rows.append(AblationRow(name, kind.value, lambda1, lambda2, seed, score.top1, score.top5))

            LOGGER.info(f"{name} ({kind.value}, seed {seed}): top-1 {score.top1:.3f}")

    return rows


PILOT_SEEDS = (0, 1, 2)

# Mean top-1 gain of the combined objective over first-only training a pilot must show
PILOT_MARGIN = 0.10


@dataclass_json
@dataclass
class PilotRun:
    """ Top-1 of the three objective variants for one seed, plus each variant's mean loss in its first and last epoch """

    seed: int
    first_only: float
    second_only: float
    combined: float
    first_epoch_loss: Dict[str, float]
    last_epoch_loss: Dict[str, float]

    def loss_decreased(self):
        return all(self.last_epoch_loss[name] < self.first_epoch_loss[name] for name in self.first_epoch_loss)


@dataclass_json
@dataclass
class PilotCalibration:
    version: str
    tower: TowerSpec
    config: TrainConfig
    runs: List[PilotRun]
    first_only: float
    second_only: float
    combined: float
    margin: float
    passed: bool


def epoch_losses(metrics: TrainMetrics) -> List[float]:
    """ Mean total loss of every epoch """

    epochs = sorted({s.epoch for s in metrics.steps})
    return [float(np.mean([s.loss_total for s in metrics.steps if s.epoch == e])) for e in epochs]


def pilot(dataset: Dataset, spec: TowerSpec, cfg: TrainConfig, seeds: Sequence[int] = PILOT_SEEDS,
          margin=PILOT_MARGIN, progress=False) -> PilotCalibration:
    """
        Calibration run of the toy setup: first-only, second-only and combined training for every seed.

        Passes when, averaged over the seeds, first-only trails the combined objective by at least {margin} with
        first-only < second-only ≤ combined, and every run ends with a lower epoch loss than it started with.
    """

    if not seeds:
        raise ConfigurationError("Pilot needs at least one seed")

    variants = ABLATION_WEIGHTS + (("combined", cfg.objective.lambda1, cfg.objective.lambda2),)
    runs = []

    for seed in seeds:
        top1, first_loss, last_loss = {}, {}, {}

        for name, lambda1, lambda2 in variants:
            objective = replace(cfg.objective, lambda1=lambda1, lambda2=lambda2)
            tower, result = _fit(dataset, spec, replace(cfg, objective=objective), seed, progress)
            losses = epoch_losses(result.metrics)

            top1[name] = _score(dataset, tower, result, seed).top1
            first_loss[name], last_loss[name] = losses[0], losses[-1]

            LOGGER.info(f"Pilot {name} (seed {seed}): top-1 {top1[name]:.3f}, epoch loss {losses[0]:.4f} → {losses[-1]:.4f}")

        runs.append(PilotRun(seed, top1["first-only"], top1["second-only"], top1["combined"], first_loss, last_loss))

    first = float(np.mean([r.first_only for r in runs]))
    second = float(np.mean([r.second_only for r in runs]))
    combined = float(np.mean([r.combined for r in runs]))
    passed = first + margin <= combined and first < second <= combined and all(r.loss_decreased() for r in runs)

    log = LOGGER.info if passed else LOGGER.warning
    log(f"Pilot over {len(runs)} seeds: first-only {first:.3f}, second-only {second:.3f}, combined {combined:.3f} "
        f"({'passed' if passed else 'failed'})")

    return PilotCalibration(LAB_VERSION, spec, cfg, runs, first, second, combined, margin, passed)


#
#   Persistence
#

def write_table(path, columns, rows):
    """ Writes {rows} (sequences or dicts) as CSV with the header {columns}. Floats use their shortest repr """

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    with open(path, "w", newline="") as cf:
        writer = csv.writer(cf, lineterminator="\n")
        writer.writerow(columns)

        for row in rows:
            values = [row[c] for c in columns] if isinstance(row, dict) else row
            writer.writerow([repr(v) if isinstance(v, float) else v for v in values])


def write_metrics(metrics: TrainMetrics, directory):
    """ Writes steps.csv and epochs.csv to {directory} """

    write_table(os.path.join(directory, "steps.csv"), STEP_COLUMNS, [asdict(s) for s in metrics.steps])
    write_table(os.path.join(directory, "epochs.csv"), EPOCH_COLUMNS, [asdict(e) for e in metrics.epochs])


@dataclass_json
@dataclass
class CheckpointManifest:
    version: str
    tower: TowerSpec
    objective: DalipObjectiveConfig
    tensors: Dict[str, str]


def save_checkpoint(directory, tower: TwinTower, params: TowerParams, objective: DalipObjectiveConfig):
    """ Writes one blob per tensor and manifest.json to {directory} """

    os.makedirs(directory, exist_ok=True)
    files = {}

    for name in params.names():
        filename = sanitize_filename(f"{name}.blob")
        write_blob(os.path.join(directory, filename), params[name])
        files[name] = filename

    manifest = CheckpointManifest(LAB_VERSION, tower.spec, objective, files)

    with open(os.path.join(directory, "manifest.json"), "w") as mf:
        mf.write(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))

    LOGGER.debug(f"Saved checkpoint with {len(files)} tensors to {directory}")


def load_checkpoint(directory) -> Tuple[TwinTower, TowerParams, DalipObjectiveConfig]:
    """ Reads a checkpoint written by save_checkpoint """

    manifest_path = os.path.join(directory, "manifest.json")

    if not os.path.isfile(manifest_path):
        raise ConfigurationError(f"No checkpoint manifest at {manifest_path}")

    with open(manifest_path, "r") as mf:
        raw = json.load(mf)

    check_manifest_version(raw.get("version"), manifest_path)
    manifest = CheckpointManifest.from_dict(raw)

    tower = TwinTower(manifest.tower)
    params = TowerParams({name: read_blob(os.path.join(directory, filename)) for name, filename in manifest.tensors.items()})
    tower.check_params(params)

    return tower, params, manifest.objective


def gradient_check(tower: TwinTower, params: TowerParams, log_tau, split: Split, objective: DalipObjectiveConfig,
                   step=1e-5, tol=1e-4, atol=1e-8, sample=None, seed=0) -> GradCheckReport:
    """ Finite-difference check of the full DALIP loss over all pairs of {split}, every tower tensor and log τ """

    tower.check_params(params)
    names = params.names() + [LOG_TAU]
    tensors = [params[name] for name in params.names()] + [as_tensor([[log_tau]])]
    indices = range(len(split))

    def loss(tape, nodes):
        named = dict(zip(names, nodes))
        total, _, _ = dalip_loss_nodes(tape, *tower.embedding_nodes(tape, named, split, indices), named[LOG_TAU], objective)
        return total

    return finite_diff_check(loss, tensors, step=step, tol=tol, atol=atol, names=names, sample=sample, seed=seed)
