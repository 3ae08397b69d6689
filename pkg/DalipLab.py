#!/usr/bin/python3

import os
from os import path
import argparse
import json
import math
import tomli
import dataclasses
from dataclasses import dataclass, field
from dataclasses_json import dataclass_json, config
from typing import Optional, List, Union, get_args, get_origin, get_type_hints
from utils.misc import ExcludeIfNone, LAB_VERSION, CONTROL_CODES_SUPPORTED
from enum import Enum
from pansi import ansi
import utils.interface as interface
import logging
import sys
import time
import traceback
from datetime import datetime, timezone
import psutil

from dalip.errors import DalipError, NumericFailure, ConfigValidationError, DivergenceError, GradCheckFailed
from dalip.bdc import DEFAULT_EPS, bdc_forward
from dalip.blob import read_blob, write_blob
from dalip.counterparts import PoolingHeadKind
from dalip.mbdc import mbdc_init, mbdc_forward, head_matrices, load_params, save_params
from dalip.objective import DalipObjectiveConfig, Reduction
from dalip.synthdata import Coding, SplitName, SyntheticDatasetSpec, build_dataset, load_dataset, random_split, save_dataset
from dalip import twintower
from dalip import mixlaw
from dalip import report


LOGGER = logging.getLogger("Lab")

BANNER_LOGO = f"""{ansi.weight.bold}
    {ansi.BLUE}____  ___    __    {ansi.YELLOW}________
   {ansi.BLUE}/ __ \\/   |  / /   {ansi.YELLOW}/  _/ __ \\
  {ansi.BLUE}/ / / / /| | / /    {ansi.YELLOW}/ // /_/ /
 {ansi.BLUE}/ /_/ / ___ |/ /____{ansi.YELLOW}/ // ____/
{ansi.BLUE}/_____/_/  |_/_____/{ansi.YELLOW}___/_/      {ansi.reset}
"""
BANNER_SUBTITLE = "L a b".center(38)

BANNER_TEXT = "First- and second-order contrastive pretraining toolkit"


#
#   Constants
#

NAME = "DalipLab"

SEED_ENV = "DALIP_SEED"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class LabCommand(Enum):
    """ Represents the subcommand passed to the lab """

    GEN_DATA = "gen-data"
    TRAIN = "train"
    EVAL = "eval"
    GRADCHECK = "gradcheck"
    BDC = "bdc"
    MBDC = "mbdc"
    FIT_MIXLAW = "fit-mixlaw"
    SOLVE_MIX = "solve-mix"
    REPORT = "report"
    SWEEP_LAMBDA = "sweep-lambda"
    ABLATE = "ablate"
    PILOT = "pilot"


COMMAND_HELP = {
    LabCommand.GEN_DATA: "Generate the synthetic paired dataset and its calibration record",
    LabCommand.TRAIN: "Train the two-tower model and write a checkpoint plus metrics CSVs",
    LabCommand.EVAL: "Evaluate a checkpoint with episode retrieval",
    LabCommand.GRADCHECK: "Finite-difference check of the full loss graph on random toy data",
    LabCommand.BDC: "BDC matrix of a tensor blob",
    LabCommand.MBDC: "MBDC embedding and per-head BDC matrices of a tensor blob",
    LabCommand.FIT_MIXLAW: "Fit exponential mixing laws to a domain,ratio,accuracy CSV",
    LabCommand.SOLVE_MIX: "Optimal mixing ratio of two fitted laws",
    LabCommand.REPORT: "SVG charts and a summary of metrics CSVs",
    LabCommand.SWEEP_LAMBDA: "Train once per loss weight λ1 and tabulate retrieval",
    LabCommand.ABLATE: "First-/second-order and pooling-head ablation table",
    LabCommand.PILOT: "Three-seed calibration of first-only, second-only and combined training",
}


#
#   Configuration classes
#

def _fail(path, message):
    raise ConfigValidationError(path, message)


@dataclass
class DataConfig:
    num_classes: int = 10           # Number of classes per domain
    samples_per_class: int = 200    # Pairs per class, split 80/20 into train and test
    tokens: int = 16                # Tokens per sample (M)
    latent_dim: int = 4             # Width of the latent class Gaussians
    raw_dim: int = 8                # Width of the raw tokens
    coding: str = "covariance"      # "covariance", "mean" or "mixed"
    noise_scale: float = 0.1        # Standard deviation of the isotropic token noise
    mean_scale: float = 1.0         # Scale of the class (or shared) means
    pair_coupling: float = 0.0      # Correlation of the latent draws of paired image and text tokens
    mix_ratio: float = 0.5          # Share of the covariance-coded domain for "mixed" coding
    seed: int = 0

    def validate(self):
        if self.coding not in [c.value for c in Coding]:
            _fail("data.coding", f"must be one of {[c.value for c in Coding]}, got '{self.coding}'")

        for name in ("num_classes", "samples_per_class", "tokens", "latent_dim", "raw_dim"):
            if getattr(self, name) < 1:
                _fail(f"data.{name}", f"must be positive, got {getattr(self, name)}")

        if self.samples_per_class < 2:
            _fail("data.samples_per_class", "must be at least 2 so both splits hold samples")

        if self.noise_scale < 0 or self.mean_scale < 0:
            _fail("data.noise_scale", "scales must be nonnegative")

        if not 0.0 <= self.pair_coupling <= 1.0:
            _fail("data.pair_coupling", f"must lie in [0, 1], got {self.pair_coupling}")

        if not 0.0 <= self.mix_ratio <= 1.0:
            _fail("data.mix_ratio", f"must lie in [0, 1], got {self.mix_ratio}")

    def to_spec(self):
        fields = {f.name for f in dataclasses.fields(SyntheticDatasetSpec)}
        return SyntheticDatasetSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in fields})


@dataclass
class ModelConfig:
    d_mid: int = 4                  # Width of the hidden tower layer
    d: int = 16                     # Token feature width entering the pooling head
    pooling: str = "mbdc"           # "mbdc", "bdc", "cov" or "mean"
    heads: int = 4                  # MBDC head count h, must divide d
    hidden: Optional[int] = field(metadata=config(exclude=ExcludeIfNone), default=None)     # FFN width q, defaults to l
    d_tilde: Optional[int] = field(metadata=config(exclude=ExcludeIfNone), default=None)    # Second-order width, defaults to d
    eps: float = DEFAULT_EPS        # Stabilizer under the BDC square root
    shared_head: bool = True        # Wether both towers share one pooling head

    def validate(self):
        if self.pooling not in [k.value for k in PoolingHeadKind]:
            _fail("model.pooling", f"must be one of {[k.value for k in PoolingHeadKind]}, got '{self.pooling}'")

        for name in ("d_mid", "d", "heads"):
            if getattr(self, name) < 1:
                _fail(f"model.{name}", f"must be positive, got {getattr(self, name)}")

        if self.d % self.heads != 0:
            _fail("model.heads", f"h={self.heads} must divide d={self.d}")

        for name in ("hidden", "d_tilde"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                _fail(f"model.{name}", f"must be positive, got {getattr(self, name)}")

        if self.eps < 0:
            _fail("model.eps", f"must be nonnegative, got {self.eps}")

    def to_tower_spec(self, raw_dim):
        return twintower.TowerSpec(raw_dim=raw_dim, **dataclasses.asdict(self))


@dataclass
class ObjectiveConfig:
    lambda1: float = 0.4            # Weight of the first-order InfoNCE term
    lambda2: float = 0.6            # Weight of the second-order InfoNCE term
    tau: float = 0.07               # Initial temperature (learnable during training)
    normalize_second_order: bool = True
    reduction: str = "mean"         # "mean" or "sum" over the batch
    min_tau: float = 0.01           # Lower clamp of the learned temperature
    unit_sum: bool = True           # Wether λ1 + λ2 must equal 1

    def validate(self):
        if self.lambda1 < 0:
            _fail("objective.lambda1", f"must be nonnegative, got {self.lambda1}")

        if self.lambda2 < 0:
            _fail("objective.lambda2", f"must be nonnegative, got {self.lambda2}")

        if self.unit_sum and abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            _fail("objective.lambda2", f"λ1 + λ2 must be 1 while unit_sum is set, got {self.lambda1 + self.lambda2}")

        if not self.tau > 0:
            _fail("objective.tau", f"must be positive, got {self.tau}")

        if not self.min_tau > 0:
            _fail("objective.min_tau", f"must be positive, got {self.min_tau}")

        if self.reduction not in [r.value for r in Reduction]:
            _fail("objective.reduction", f"must be 'mean' or 'sum', got '{self.reduction}'")

    def to_objective(self):
        return DalipObjectiveConfig(lambda1=self.lambda1, lambda2=self.lambda2, log_tau=math.log(self.tau),
                                    normalize_second_order=self.normalize_second_order, reduction=self.reduction,
                                    min_tau=self.min_tau, unit_sum=self.unit_sum)


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
    seed: int = 0                   # Seed of initialization, batch order and evaluation episodes
    eval_every: int = 1             # Evaluate on the test split every this many epochs

    def validate(self):
        if self.batch_size < 2:
            _fail("train.batch_size", f"must be at least 2, got {self.batch_size}")

        for name in ("epochs", "eval_every"):
            if getattr(self, name) < 1:
                _fail(f"train.{name}", f"must be positive, got {getattr(self, name)}")

        if self.warmup_steps < 0:
            _fail("train.warmup_steps", f"must be nonnegative, got {self.warmup_steps}")

        if not 0 <= self.min_lr <= self.base_lr:
            _fail("train.min_lr", f"needs 0 ≤ min_lr ≤ base_lr, got {self.min_lr} and {self.base_lr}")

        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                _fail(f"train.{name}", f"must lie in [0, 1), got {getattr(self, name)}")

        if not self.adam_eps > 0:
            _fail("train.adam_eps", f"must be positive, got {self.adam_eps}")

    def to_train_config(self, objective):
        return twintower.TrainConfig(objective=objective, **dataclasses.asdict(self))


@dataclass
class MixLawConfig:
    gamma_min: float = -20.0
    gamma_max: float = 20.0
    grid_points: int = 4000
    gamma_exclude: float = 1e-6     # |γ| below this is never fitted
    xtol: float = 1e-8              # Tolerance of the γ refinement
    weights: List[float] = field(default_factory=lambda: [1.0, 1.0])
    domains: Optional[List[str]] = field(metadata=config(exclude=ExcludeIfNone), default=None)   # Domain order, sorted names if unset

    def validate(self):
        if not self.gamma_min < self.gamma_max:
            _fail("mixlaw.gamma_max", f"must exceed gamma_min, got [{self.gamma_min}, {self.gamma_max}]")

        if self.grid_points < 3:
            _fail("mixlaw.grid_points", f"must be at least 3, got {self.grid_points}")

        if self.gamma_exclude < 0:
            _fail("mixlaw.gamma_exclude", f"must be nonnegative, got {self.gamma_exclude}")

        if not self.xtol > 0:
            _fail("mixlaw.xtol", f"must be positive, got {self.xtol}")

        if len(self.weights) != 2 or any(w < 0 for w in self.weights):
            _fail("mixlaw.weights", f"must be two nonnegative numbers, got {self.weights}")

        if self.domains is not None and (len(self.domains) not in (1, 2) or len(set(self.domains)) != len(self.domains)):
            _fail("mixlaw.domains", f"must name one or two distinct domains, got {self.domains}")

    def to_settings(self):
        return mixlaw.FitSettings(self.gamma_min, self.gamma_max, self.grid_points, self.gamma_exclude, self.xtol)


@dataclass
class OutputConfig:
    log_debug: bool = False         # Wether to include log messages with level logging.DEBUG
    log_dir: Optional[str] = field(metadata=config(exclude=ExcludeIfNone), default=None)   # Directory for a log file, none if unset

    def validate(self):
        pass


SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "objective": ObjectiveConfig,
    "train": TrainConfig,
    "mixlaw": MixLawConfig,
    "output": OutputConfig,
}


def _check_value(path, value, hint):
    """ Checks {value} against the type {hint} and returns it, with ints widened to float where needed """

    origin = get_origin(hint)

    if origin is Union:
        if value is None:
            return None

        inner = [a for a in get_args(hint) if a is not type(None)][0]
        return _check_value(path, value, inner)

    if origin in (list, List):
        if not isinstance(value, list):
            _fail(path, f"must be a list, got {type(value).__name__}")

        return [_check_value(f"{path}[{i}]", v, get_args(hint)[0]) for i, v in enumerate(value)]

    if hint is bool and not isinstance(value, bool):
        _fail(path, f"must be true or false, got {value!r}")

    if hint is int and (isinstance(value, bool) or not isinstance(value, int)):
        _fail(path, f"must be an integer, got {value!r}")

    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"must be a number, got {value!r}")

        return float(value)

    if hint is str and not isinstance(value, str):
        _fail(path, f"must be a string, got {value!r}")

    return value


@dataclass_json
@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mixlaw: MixLawConfig = field(default_factory=MixLawConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @staticmethod
    def from_document(document):
        """ Builds a RunConfig from a parsed config document, rejecting unknown keys and mistyped values """

        if not isinstance(document, dict):
            _fail("<root>", "config must be a table of sections")

        sections = {}

        for section, values in document.items():
            if section not in SECTION_TYPES:
                _fail(section, f"unknown section (known: {', '.join(SECTION_TYPES)})")

            if not isinstance(values, dict):
                _fail(section, "section must be a table")

            hints = get_type_hints(SECTION_TYPES[section])
            checked = {}

            for key, value in values.items():
                if key not in hints:
                    _fail(f"{section}.{key}", "unknown key")

                checked[key] = _check_value(f"{section}.{key}", value, hints[key])

            sections[section] = SECTION_TYPES[section](**checked)

        return RunConfig(**sections)

    @staticmethod
    def load(config_path):
        """ Reads a JSON (or .toml) config file, defaults if {config_path} is None """

        if config_path is None:
            return RunConfig()

        if not path.isfile(config_path):
            _fail("--config", f"'{config_path}' is not a file")

        try:
            if config_path.endswith(".toml"):
                with open(config_path, "rb") as tf:
                    document = tomli.load(tf)
            else:
                with open(config_path, "r") as jf:
                    document = json.load(jf)
        except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
            _fail("--config", f"'{config_path}' is not valid: {e}")

        return RunConfig.from_document(document)

    def apply_seed_env(self, environ):
        """ {SEED_ENV} overrides data.seed and train.seed """

        raw = environ.get(SEED_ENV)

        if raw is None:
            return

        try:
            seed = int(raw)
        except ValueError:
            _fail(SEED_ENV, f"must be an integer, got '{raw}'")

        self.data.seed = seed
        self.train.seed = seed

    def apply_overrides(self, overrides):
        """ Applies {(section, key): value} flag overrides """

        for (section, key), value in overrides.items():
            setattr(getattr(self, section), key, value)

    def validate(self):
        for section in SECTION_TYPES:
            getattr(self, section).validate()

        return self


#
#   Arguments
#

COMMON_SECTIONS = ("output",)

COMMAND_SECTIONS = {
    LabCommand.GEN_DATA: ("data",),
    LabCommand.TRAIN: ("data", "model", "objective", "train"),
    LabCommand.EVAL: ("data", "train"),
    LabCommand.GRADCHECK: ("model", "objective", "train"),
    LabCommand.BDC: (),
    LabCommand.MBDC: ("model", "train"),
    LabCommand.FIT_MIXLAW: ("mixlaw",),
    LabCommand.SOLVE_MIX: ("mixlaw",),
    LabCommand.REPORT: (),
    LabCommand.SWEEP_LAMBDA: ("data", "model", "objective", "train"),
    LabCommand.ABLATE: ("data", "model", "objective", "train"),
    LabCommand.PILOT: ("data", "model", "objective", "train"),
}

OVERRIDE_PREFIX = "override__"


def _parse_bool(text):
    lowered = text.strip().lower()

    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False

    raise argparse.ArgumentTypeError(f"expected true or false, got '{text}'")


def _flag_parser(hint):
    """ argparse type callable for a config field of type {hint} """

    origin = get_origin(hint)

    if origin is Union:
        inner = _flag_parser([a for a in get_args(hint) if a is not type(None)][0])
        return lambda text: None if text.strip().lower() in ("none", "null", "") else inner(text)

    if origin in (list, List):
        item = _flag_parser(get_args(hint)[0])
        return lambda text: [item(part) for part in text.split(",") if part.strip()]

    if hint is bool:
        return _parse_bool

    return hint


def add_override_flags(parser, sections):
    """ Adds one --<section>.<field> flag per config field of {sections} """

    for section in sections:
        group = parser.add_argument_group(f"{section} settings")
        defaults = SECTION_TYPES[section]()

        for f in dataclasses.fields(SECTION_TYPES[section]):
            hint = get_type_hints(SECTION_TYPES[section])[f.name]
            default = getattr(defaults, f.name)
            shown = ",".join(str(v) for v in default) if isinstance(default, list) else default

            group.add_argument(f"--{section}.{f.name}", dest=f"{OVERRIDE_PREFIX}{section}__{f.name}",
                               type=_flag_parser(hint), default=argparse.SUPPRESS, metavar=f.name.upper(),
                               help=f"overrides {section}.{f.name} (default: {shown})")


def collect_overrides(args):
    overrides = {}

    for key, value in vars(args).items():
        if key.startswith(OVERRIDE_PREFIX):
            section, name = key[len(OVERRIDE_PREFIX):].split("__", 1)
            overrides[(section, name)] = value

    return overrides


def build_parser():
    """ Builds the argument parser. The subcommand parsers are kept in {parser.command_parsers} """

    parser = interface.ArgumentParser(prog=NAME, description=BANNER_TEXT)
    subparsers = parser.add_subparsers(dest="command", type=LabCommand, action=interface.SubParserEnumStoreAction,
                                       parser_class=interface.ArgumentParser, required=True, metavar="command")
    parser.command_parsers = {}

    for command in LabCommand:
        sub = subparsers.add_parser(command, help=COMMAND_HELP[command], description=COMMAND_HELP[command])
        sub.add_argument("-c", "--config", help="JSON (or .toml) run config (default: built-in defaults)", dest="config", default=None)
        sub.add_argument("-o", "--out", help="Output directory (default: %(default)s)", dest="out", default="out")
        sub.add_argument("-l", "--log-debug", help="Also log debug messages (overrules config option)", action="store_true", dest="log_debug", default=False)

        if command in (LabCommand.TRAIN, LabCommand.EVAL, LabCommand.SWEEP_LAMBDA, LabCommand.ABLATE, LabCommand.PILOT):
            sub.add_argument("--data", help="Dataset directory written by gen-data (default: generate from the data section)", dest="data_dir", default=None)

        if command is LabCommand.EVAL:
            sub.add_argument("--checkpoint", help="Checkpoint directory written by train", required=True)
            sub.add_argument("--split", type=SplitName, action=interface.EnumStoreAction, default=SplitName.TEST, help="Split to evaluate (default: test)")
        elif command is LabCommand.GRADCHECK:
            sub.add_argument("--batch", type=int, default=4, help="Pairs per batch (default: %(default)s)")
            sub.add_argument("--tokens", type=int, default=6, help="Tokens per sample (default: %(default)s)")
            sub.add_argument("--raw-dim", type=int, default=6, dest="raw_dim", help="Raw token width (default: %(default)s)")
            sub.add_argument("--step", type=float, default=1e-5, help="Central-difference step (default: %(default)s)")
            sub.add_argument("--tol", type=float, default=1e-4, help="Maximum relative error (default: %(default)s)")
            sub.add_argument("--atol", type=float, default=1e-8, help="Absolute agreement floor (default: %(default)s)")
            sub.add_argument("--sample", type=int, default=64, help="Entries checked per tensor, 0 for all (default: %(default)s)")
        elif command is LabCommand.BDC:
            sub.add_argument("--in", dest="input", required=True, help="Token blob (M×k)")
            sub.add_argument("--eps", type=float, default=DEFAULT_EPS, help="Stabilizer under the square root (default: %(default)s)")
        elif command is LabCommand.MBDC:
            sub.add_argument("--in", dest="input", required=True, help="Token blob (M×d)")
            sub.add_argument("--params", default=None, help="MBDC parameter directory (default: fresh parameters from the model section)")
        elif command in (LabCommand.FIT_MIXLAW,):
            sub.add_argument("--in", dest="input", required=True, help="CSV with header domain,ratio,accuracy")
        elif command is LabCommand.SOLVE_MIX:
            sub.add_argument("--fit1", default=None, help="Domain-1 law in r as 'alpha,beta,gamma'")
            sub.add_argument("--fit2", default=None, help="Domain-2 law in 1-r as 'alpha,beta,gamma'")
            sub.add_argument("--fit", default=None, help="fit.json written by fit-mixlaw (instead of --fit1/--fit2)")
        elif command is LabCommand.REPORT:
            sub.add_argument("--in", dest="inputs", nargs="+", required=True, help="Metrics or mixing CSVs")
            sub.add_argument("--fit", default=None, help="fit.json whose laws are overlaid on a mixing chart")
        elif command is LabCommand.SWEEP_LAMBDA:
            sub.add_argument("--lambdas", default=",".join(str(v) for v in twintower.DEFAULT_LAMBDAS), help="λ1 values, λ2 = 1 − λ1 (default: %(default)s)")
        elif command is LabCommand.ABLATE:
            sub.add_argument("--seeds", default="0", help="Comma-separated training seeds (default: %(default)s)")
        elif command is LabCommand.PILOT:
            sub.add_argument("--seeds", default=",".join(str(s) for s in twintower.PILOT_SEEDS), help="Comma-separated training seeds (default: %(default)s)")

        add_override_flags(sub, COMMAND_SECTIONS[command] + COMMON_SECTIONS)
        parser.command_parsers[command] = sub

    return parser


def _float_list(flag, text, size=None):
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        _fail(flag, f"expected comma-separated numbers, got '{text}'")

    if size is not None and len(values) != size:
        _fail(flag, f"expected {size} numbers, got {len(values)}")

    return values


def _seed_list(text):
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        _fail("--seeds", f"expected comma-separated integers, got '{text}'")

    if not seeds:
        _fail("--seeds", "expected at least one seed")

    return seeds


#
#   Lab
#

class DalipLab:
    """
        Runs one subcommand with a resolved config and writes its results below {out_dir}.

        Arguments:
            - config: Validated RunConfig
            - out_dir: Output directory
            - command: LabCommand to run
    """

    def __init__(self, config: RunConfig, out_dir, command: LabCommand):
        self.config = config
        self.command = command
        self.out_dir = path.abspath(out_dir)
        self.outputs = []
        self.extra = {}

        os.makedirs(self.out_dir, exist_ok=True)

    def out(self, *parts):
        return path.join(self.out_dir, *parts)

    def write_json(self, name, document):
        with open(self.out(name), "w") as jf:
            jf.write(json.dumps(document, indent=2, sort_keys=True))

        self.outputs.append(name)

    def write_run_manifest(self, started, exit_code, error=None):
        """ run.json holds everything run-specific, so all other outputs are reproducible byte for byte """

        process = psutil.Process()
        manifest = {
            "command": self.command.value,
            "version": LAB_VERSION,
            "config": self.config.to_dict(encode_json=True),
            "seed": {"data": self.config.data.seed, "train": self.config.train.seed},
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_seconds": time.time() - started,
            "host": {"cpu_count": psutil.cpu_count(), "rss_bytes": process.memory_info().rss},
            "outputs": sorted(self.outputs),
            "exit_code": exit_code,
        }

        if error is not None:
            manifest["error"] = {"type": type(error).__name__, "message": str(error)}

        manifest.update(self.extra)

        with open(self.out("run.json"), "w") as jf:
            jf.write(json.dumps(manifest, indent=2, sort_keys=True))

    def dataset(self, data_dir):
        if data_dir is not None:
            LOGGER.info(f"Loading dataset from {path.abspath(data_dir)}")
            return load_dataset(data_dir)

        LOGGER.info(f"Generating {self.config.data.coding}-coded dataset (seed {self.config.data.seed})")
        return build_dataset(self.config.data.to_spec(), self.config.data.mix_ratio)

    def train_config(self):
        return self.config.train.to_train_config(self.config.objective.to_objective())

    #
    #   Subcommands
    #

    def gen_data(self, args):
        dataset = self.dataset(None)
        save_dataset(dataset, self.out("dataset"))
        self.outputs.append("dataset")

        for record in dataset.calibration:
            LOGGER.info(f"Calibration ({record.coding}): mean classifier {record.mean_accuracy:.3f}, "
                        f"QDA {record.qda_accuracy:.3f}, chance {record.chance:.3f}")

    def train(self, args):
        dataset = self.dataset(args.data_dir)
        tower = twintower.TwinTower(self.config.model.to_tower_spec(dataset.raw_dim))
        params = tower.init_params(self.config.train.seed)

        try:
            result = twintower.train(dataset, tower, params, self.train_config(), progress=True)
        except DivergenceError as e:
            self.write_json("diagnostics.json", e.diagnostics)
            raise

        twintower.save_checkpoint(self.out("checkpoint"), tower, result.params, result.objective)
        twintower.write_metrics(result.metrics, self.out_dir)
        self.outputs += ["checkpoint", "steps.csv", "epochs.csv"]

        final = result.metrics.epochs[-1]
        self.write_json("train.json", {"final": final.to_dict(), "tau": result.objective.tau,
                                       "steps": len(result.metrics.steps)})
        self.extra["timing"] = {"train_seconds": result.wall_seconds, "epoch_seconds": result.metrics.epoch_seconds}

        LOGGER.info(f"Final held-out top-1 {final.top1:.3f} (first-order {final.top1_first:.3f}, "
                    f"second-order {final.top1_second:.3f})")

    def eval(self, args):
        tower, params, objective = twintower.load_checkpoint(args.checkpoint)
        dataset = self.dataset(args.data_dir)
        metrics = twintower.evaluate(tower, params, dataset.split(args.split), objective, episode_seed=self.config.train.seed,
                                     num_classes=dataset.num_classes)

        self.write_json("eval.json", {"split": args.split.value, **metrics.to_dict()})
        LOGGER.info(f"{args.split.value} top-1 {metrics.top1:.3f}, top-5 {metrics.top5:.3f} over {metrics.episodes} episodes")

    def gradcheck(self, args):
        if min(args.batch, args.tokens, args.raw_dim) < 1:
            _fail("--batch", "batch, tokens and raw width must be positive")

        tower = twintower.TwinTower(self.config.model.to_tower_spec(args.raw_dim))
        params = tower.init_params(self.config.train.seed)
        split = random_split(args.batch, args.tokens, args.raw_dim, self.config.train.seed)
        objective = self.config.objective.to_objective()

        report_ = twintower.gradient_check(tower, params, objective.log_tau, split, objective, step=args.step, tol=args.tol,
                                           atol=args.atol, sample=args.sample or None, seed=self.config.train.seed)
        self.write_json("gradcheck.json", {"passed": report_.passed, "max_rel_error": report_.max_rel_error,
                                           **report_.to_dict()})

        for check in report_.params:
            level = logging.DEBUG if check.passed else logging.ERROR
            LOGGER.log(level, f"{check.name} ({twintower.param_group(check.name)}): max rel error {check.max_rel_error:.3e}")

        if not report_.passed:
            raise GradCheckFailed(f"Gradient check failed, max relative error {report_.max_rel_error:.3e} > {args.tol}", report_)

        LOGGER.info(f"Gradient check passed, max relative error {report_.max_rel_error:.3e}")

    def bdc(self, args):
        result = bdc_forward(read_blob(args.input), args.eps)
        write_blob(self.out("bdc.blob"), result.values)
        self.outputs.append("bdc.blob")

        LOGGER.info(f"BDC of {result.dim} channels, asymmetry {result.asymmetry():.3e}, margin sum {result.max_margin_sum():.3e}")

    def mbdc(self, args):
        x = read_blob(args.input)

        if args.params is not None:
            params = load_params(args.params)
        else:
            m = self.config.model
            params = mbdc_init(m.heads, x.shape[1], m.d_tilde, m.hidden, self.config.train.seed, m.eps)
            save_params(params, self.out("params"))
            self.outputs.append("params")

        write_blob(self.out("mbdc.blob"), mbdc_forward(x, params))
        self.outputs.append("mbdc.blob")

        for j, matrix in enumerate(head_matrices(x, params)):
            write_blob(self.out("heads", f"head{j}.blob"), matrix.values)

        self.outputs.append("heads")

    def fit_mixlaw(self, args):
        result = mixlaw.fit_from_csv(args.input, self.config.mixlaw.to_settings(), self.config.mixlaw.domains,
                                     self.config.mixlaw.weights)
        self.write_json("fit.json", mixlaw.fit_summary(result))

        for law in result.laws:
            LOGGER.info(f"{law.domain} (in {law.argument}): α={law.alpha:.4f}, β={law.beta:.4f}, γ={law.gamma:.4f}, "
                        f"rss={law.rss:.3e}")

        if result.optimum is not None:
            LOGGER.info(f"Optimal ratio r*={result.optimum.r_star:.4f}{' (boundary)' if result.optimum.boundary else ''}")

    def solve_mix(self, args):
        if args.fit is not None:
            with open(args.fit, "r") as jf:
                laws = mixlaw.laws_from_summary(json.load(jf))

            if len(laws) != 2:
                _fail("--fit", f"needs a two-domain fit, got {len(laws)} domains")
        elif args.fit1 is not None and args.fit2 is not None:
            a1, b1, g1 = _float_list("--fit1", args.fit1, 3)
            a2, b2, g2 = _float_list("--fit2", args.fit2, 3)
            laws = (mixlaw.DomainLaw("domain1", a1, b1, g1, argument=mixlaw.Argument.R.value),
                    mixlaw.DomainLaw("domain2", a2, b2, g2, argument=mixlaw.Argument.ONE_MINUS_R.value))
        else:
            _fail("--fit1", "give --fit1 and --fit2, or --fit")

        optimum = mixlaw.solve_optimal_ratio(laws[0], laws[1], self.config.mixlaw.weights)
        self.write_json("solve.json", {"r_star": optimum.r_star, "boundary": optimum.boundary,
                                       "objective_at_r_star": optimum.objective, **optimum.to_dict()})

        print(f"r_star={optimum.r_star:.6f}")

    def report(self, args):
        laws = ()

        if args.fit is not None:
            with open(args.fit, "r") as jf:
                laws = mixlaw.laws_from_summary(json.load(jf))

        summary = report.write_report(args.inputs, self.out_dir, laws)
        self.outputs += summary["charts"] + ["summary.json"]

    def sweep_lambda(self, args):
        lambdas = _float_list("--lambdas", args.lambdas)
        dataset = self.dataset(args.data_dir)
        rows = twintower.lambda_sweep(dataset, self.config.model.to_tower_spec(dataset.raw_dim), self.train_config(),
                                      lambdas, progress=True)

        columns = [f.name for f in dataclasses.fields(twintower.SweepRow)]
        twintower.write_table(self.out("lambda_sweep.csv"), columns, [r.to_dict() for r in rows])
        self.outputs.append("lambda_sweep.csv")
        self.write_json("lambda_sweep.json", {"rows": [r.to_dict() for r in rows]})

    def ablate(self, args):
        seeds = _seed_list(args.seeds)
        dataset = self.dataset(args.data_dir)
        rows = twintower.ablation(dataset, self.config.model.to_tower_spec(dataset.raw_dim), self.train_config(), seeds,
                                  progress=True)

        columns = [f.name for f in dataclasses.fields(twintower.AblationRow)]
        twintower.write_table(self.out("ablation.csv"), columns, [r.to_dict() for r in rows])
        self.outputs.append("ablation.csv")
        self.write_json("ablation.json", {"rows": [r.to_dict() for r in rows]})

    def pilot(self, args):
        seeds = _seed_list(args.seeds)
        dataset = self.dataset(args.data_dir)
        calibration = twintower.pilot(dataset, self.config.model.to_tower_spec(dataset.raw_dim), self.train_config(), seeds,
                                      progress=True)

        self.write_json("pilot.json", calibration.to_dict(encode_json=True))
        self.extra["pilot_passed"] = calibration.passed

    def run(self, args):
        handler = {
            LabCommand.GEN_DATA: self.gen_data,
            LabCommand.TRAIN: self.train,
            LabCommand.EVAL: self.eval,
            LabCommand.GRADCHECK: self.gradcheck,
            LabCommand.BDC: self.bdc,
            LabCommand.MBDC: self.mbdc,
            LabCommand.FIT_MIXLAW: self.fit_mixlaw,
            LabCommand.SOLVE_MIX: self.solve_mix,
            LabCommand.REPORT: self.report,
            LabCommand.SWEEP_LAMBDA: self.sweep_lambda,
            LabCommand.ABLATE: self.ablate,
            LabCommand.PILOT: self.pilot,
        }[self.command]

        handler(args)


def resolve_config(args, environ=None):
    """ Config file < DALIP_SEED < flags, validated as a whole """

    run_config = RunConfig.load(args.config)
    run_config.apply_seed_env(os.environ if environ is None else environ)
    run_config.apply_overrides(collect_overrides(args))

    return run_config.validate()


def print_banner():
    if not sys.stderr.isatty():
        return

    print(BANNER_LOGO, end="", file=sys.stderr)
    print(BANNER_SUBTITLE, file=sys.stderr)
    print("", file=sys.stderr)
    print(BANNER_TEXT, file=sys.stderr)
    print(f"v{LAB_VERSION}", file=sys.stderr)
    print("", file=sys.stderr)


def main(argv=None, environ=None):
    """ Runs the lab with {argv} and returns the exit code """

    interface.LabLogging.prepare()
    interface.LabLogging.setup_console()

    try:
        args = build_parser().parse_args(argv)
    except interface.IllegalArgumentError as e:
        LOGGER.error(str(e))
        return EXIT_VALIDATION

    interface.LabLogging.set_log_debug(args.log_debug)
    print_banner()

    if CONTROL_CODES_SUPPORTED == False:
        LOGGER.debug("ANSI escape codes except color codes are disabled")

    LOGGER.debug(f"CLI Command: {args.command.value}")

    started = time.time()
    lab = None

    try:
        run_config = resolve_config(args, environ)

        interface.LabLogging.set_log_debug(args.log_debug or run_config.output.log_debug)

        if run_config.output.log_dir is not None:
            interface.LabLogging.setup_logfile(run_config.output.log_dir)

        LOGGER.debug(f"Run configuration (including overrides):\n{json.dumps(run_config.to_dict(encode_json=True), indent=4)}")

        lab = DalipLab(run_config, args.out, args.command)
        lab.run(args)
    except Exception as e:
        numeric = isinstance(e, NumericFailure)
        code = EXIT_NUMERIC if numeric else EXIT_VALIDATION

        if isinstance(e, DalipError):
            LOGGER.error(f"{type(e).__name__}: {e}")
        elif isinstance(e, (OSError, ValueError)):
            LOGGER.error(f"{type(e).__name__}: {e}")
        else:
            LOGGER.critical(f"Error while running {args.command.value} ({type(e).__name__}): {e}")
            LOGGER.error(traceback.format_exc())

        if lab is not None:
            lab.write_run_manifest(started, code, e)

        return code

    lab.write_run_manifest(started, EXIT_OK)
    LOGGER.info(f"Results written to {lab.out_dir}")

    return EXIT_OK


if __name__ == "__main__":
    # Exit directly, if python version below 3.9 is discovered
    if (sys.version_info.major < 3) or ((sys.version_info.major == 3) and (sys.version_info.minor < 9)):
        print(f"ERROR: {NAME} needs at least Python 3.9 to run properly!", file=sys.stderr)
        print(f"       You are currently running version {sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}.", file=sys.stderr)
        sys.exit(1)

    sys.exit(main())
