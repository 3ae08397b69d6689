"""
    Synthetic paired image/text token data.

    Every class owns a latent Gaussian. Tokens of both modalities are latent draws of the pair's class pushed
    through a fixed per-modality linear map plus isotropic noise. With covariance coding all classes share one
    mean and differ only in the rotation of an anisotropic covariance, so first-order statistics carry no class
    information. With mean coding classes share the covariance and differ in their means.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Dict, Iterator, List, Optional

import numpy as np
from dataclasses_json import dataclass_json
from scipy.stats import multivariate_normal

from dalip.blob import read_blob, write_blob
from dalip.errors import ConfigurationError, EmptySplitError, ParameterError
from dalip.numcore import Tensor, as_tensor
from utils.misc import LAB_VERSION, check_manifest_version

LOGGER = logging.getLogger("SynthData")

TRAIN_FRACTION = 0.8

# Covariance regularizer of the calibration QDA
QDA_RIDGE = 1e-6


class Coding(Enum):
    MEAN = "mean"
    COVARIANCE = "covariance"
    MIXED = "mixed"


class Modality(Enum):
    IMAGE = "image"
    TEXT = "text"


class SplitName(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass_json
@dataclass
class SyntheticDatasetSpec:
    """
        Generation settings of one data domain.

        spectrum holds the eigenvalues of the class covariances, a geometric ramp from 4 to 0.15 if unset.
        pair_coupling is the correlation between the latent draws of an image and its paired text.
    """

    num_classes: int = 10
    samples_per_class: int = 200
    tokens: int = 16
    latent_dim: int = 4
    raw_dim: int = 8
    coding: str = Coding.COVARIANCE.value
    noise_scale: float = 0.1
    mean_scale: float = 1.0
    pair_coupling: float = 0.0
    spectrum: Optional[List[float]] = None
    seed: int = 0

    def eigenvalues(self):
        if self.spectrum is not None:
            return np.asarray(self.spectrum, dtype=np.float64)

        return np.geomspace(4.0, 0.15, self.latent_dim)

    def validate(self):
        coding = Coding(self.coding)

        if self.num_classes < 1:
            raise ConfigurationError(f"Dataset needs at least one class, got {self.num_classes}")

        if self.samples_per_class < 2:
            raise ConfigurationError(f"Each class needs at least 2 samples to fill both splits, got {self.samples_per_class}")

        if self.tokens < 1 or self.latent_dim < 1 or self.raw_dim < 1:
            raise ConfigurationError(f"Token count and dimensions must be positive, got M={self.tokens}, "
                                     f"latent={self.latent_dim}, raw={self.raw_dim}")

        if coding is Coding.COVARIANCE and self.num_classes > 1 and self.latent_dim < 2:
            raise ConfigurationError("Covariance coding needs latent_dim ≥ 2 to tell classes apart by rotation")

        if self.noise_scale < 0 or self.mean_scale < 0:
            raise ParameterError(f"Scales must be nonnegative, got noise={self.noise_scale}, mean={self.mean_scale}")

        if not 0.0 <= self.pair_coupling <= 1.0:
            raise ParameterError(f"pair_coupling must lie in [0, 1], got {self.pair_coupling}")

        eigen = self.eigenvalues()

        if eigen.shape != (self.latent_dim,) or not (eigen > 0).all():
            raise ConfigurationError(f"spectrum must hold {self.latent_dim} positive values, got {self.spectrum}")

        if coding is Coding.COVARIANCE and self.num_classes > 1 and np.allclose(eigen, eigen[0]):
            raise ConfigurationError("Covariance coding needs an anisotropic spectrum, rotations of an isotropic one coincide")

        return self


@dataclass
class SampleRecord:
    class_id: int
    modality: Modality
    tokens: Tensor
    domain: int = 0
    sample_index: int = 0


@dataclass
class Split:
    """
        Paired samples of one split. Token arrays are n×M×raw.

        Single-domain splits are ordered by (class id, sample index). Mixed splits interleave the two domains at
        seeded positions and keep the order within each domain.
    """

    class_ids: np.ndarray
    sample_index: np.ndarray
    domains: np.ndarray
    image: np.ndarray
    text: np.ndarray

    def __len__(self):
        return len(self.class_ids)

    def tokens(self, modality: Modality, i) -> Tensor:
        return as_tensor((self.image if Modality(modality) is Modality.IMAGE else self.text)[i])

    def records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            for modality in Modality:
                yield SampleRecord(int(self.class_ids[i]), modality, self.tokens(modality, i), int(self.domains[i]),
                                   int(self.sample_index[i]))

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.class_ids[indices], self.sample_index[indices], self.domains[indices],
                     self.image[indices], self.text[indices])

    def class_keys(self, num_classes):
        """ Class labels that stay distinct across domains """
        return self.domains * num_classes + self.class_ids


@dataclass_json
@dataclass
class CalibrationRecord:
    """ Separability of one domain, measured on its own train/test split of image tokens """

    coding: str
    chance: float
    mean_accuracy: float
    qda_accuracy: float
    min_frobenius_separation: float
    passed: bool


@dataclass
class Dataset:
    specs: List[SyntheticDatasetSpec]
    train: Split
    test: Split
    calibration: List[CalibrationRecord] = field(default_factory=list)
    mix_ratio: Optional[float] = None

    @property
    def tokens(self):
        return self.specs[0].tokens

    @property
    def raw_dim(self):
        return self.specs[0].raw_dim

    @property
    def num_classes(self):
        return max(s.num_classes for s in self.specs)

    def split(self, name: SplitName) -> Split:
        split = self.train if SplitName(name) is SplitName.TRAIN else self.test

        if len(split) == 0:
            raise EmptySplitError(f"Split '{SplitName(name).value}' holds no samples")

        return split


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def random_rotation(rng, n):
    """ Haar-distributed orthogonal n×n matrix """

    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class ClassLaw:
    mean: np.ndarray
    covariance: np.ndarray


def class_laws(spec: SyntheticDatasetSpec, rng) -> List[ClassLaw]:
    eigen = spec.eigenvalues()
    laws = []

    if Coding(spec.coding) is Coding.COVARIANCE:
        shared_mean = rng.standard_normal(spec.latent_dim) * spec.mean_scale

        for _ in range(spec.num_classes):
            rotation = random_rotation(rng, spec.latent_dim)
            laws.append(ClassLaw(shared_mean, rotation @ np.diag(eigen) @ rotation.T))
    else:
        for _ in range(spec.num_classes):
            laws.append(ClassLaw(rng.standard_normal(spec.latent_dim) * spec.mean_scale, np.diag(eigen)))

    return laws


def min_frobenius_separation(covariances):
    return min((float(np.linalg.norm(a - b)) for a, b in combinations(covariances, 2)), default=math.inf)


def _check_separation(spec, laws):
    if spec.num_classes < 2:
        return

    if Coding(spec.coding) is Coding.COVARIANCE:
        separation = min_frobenius_separation([law.covariance for law in laws])
    else:
        separation = min(float(np.linalg.norm(a.mean - b.mean)) for a, b in combinations(laws, 2))

    if not separation > 0:
        raise ConfigurationError(f"Class laws of the {spec.coding}-coded domain are not pairwise distinct")


def _draw_domain(spec: SyntheticDatasetSpec):
    """ Returns (class_ids, sample_index, image, text, laws, image_map) for all samples of one domain """

    rng = _rng(spec.seed)
    laws = class_laws(spec, rng)
    _check_separation(spec, laws)

    scale = 1.0 / np.sqrt(spec.latent_dim)
    image_map = rng.standard_normal((spec.raw_dim, spec.latent_dim)) * scale
    text_map = rng.standard_normal((spec.raw_dim, spec.latent_dim)) * scale

    n, m = spec.samples_per_class, spec.tokens
    rho = spec.pair_coupling
    image, text = [], []

    for law in laws:
        chol = np.linalg.cholesky(law.covariance)
        shared = rng.standard_normal((n, m, spec.latent_dim))
        own = rng.standard_normal((n, m, spec.latent_dim))

        image_latent = law.mean + shared @ chol.T
        text_latent = law.mean + (rho * shared + np.sqrt(1.0 - rho * rho) * own) @ chol.T

        image.append(image_latent @ image_map.T + spec.noise_scale * rng.standard_normal((n, m, spec.raw_dim)))
        text.append(text_latent @ text_map.T + spec.noise_scale * rng.standard_normal((n, m, spec.raw_dim)))

    class_ids = np.repeat(np.arange(spec.num_classes), n)
    sample_index = np.tile(np.arange(n), spec.num_classes)

    return class_ids, sample_index, np.concatenate(image), np.concatenate(text), laws


def _split_indices(spec: SyntheticDatasetSpec):
    """ Per class, a seeded permutation of the sample indices puts the first 80% in train """

    rng = _rng(spec.seed + 1)
    n = spec.samples_per_class
    n_train = int(math.floor(TRAIN_FRACTION * n))
    train, test = [], []

    for c in range(spec.num_classes):
        order = rng.permutation(n)
        train.extend(sorted(c * n + order[:n_train]))
        test.extend(sorted(c * n + order[n_train:]))

    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


def calibrate(spec: SyntheticDatasetSpec, train: Split, test: Split) -> CalibrationRecord:
    """
        Measures how well a first-order and a second-order classifier separate the classes on image tokens.

        The mean classifier assigns a test sample to the class centroid nearest to its token mean. The QDA fits one
        Gaussian per class to the training tokens and picks the class maximizing the summed token log-likelihood.
    """

    chance = 1.0 / spec.num_classes
    classes = range(spec.num_classes)

    sample_means = train.image.mean(axis=1)
    centroids = np.stack([sample_means[train.class_ids == c].mean(axis=0) for c in classes])
    test_means = test.image.mean(axis=1)
    nearest = np.argmin(((test_means[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
    mean_accuracy = float(np.mean(nearest == test.class_ids))

    gaussians, covariances = [], []
    ridge = QDA_RIDGE * np.eye(spec.raw_dim)

    for c in classes:
        tokens = train.image[train.class_ids == c].reshape(-1, spec.raw_dim)
        covariance = np.atleast_2d(np.cov(tokens, rowvar=False)) + ridge if len(tokens) > 1 else ridge
        gaussians.append(multivariate_normal(mean=tokens.mean(axis=0), cov=covariance))
        covariances.append(covariance)

    flat = test.image.reshape(-1, spec.raw_dim)
    loglik = np.stack([g.logpdf(flat).reshape(len(test), spec.tokens).sum(axis=1) for g in gaussians], axis=1)
    qda_accuracy = float(np.mean(np.argmax(loglik, axis=1) == test.class_ids))

    passed = qda_accuracy >= 0.95 if Coding(spec.coding) is Coding.COVARIANCE else mean_accuracy >= 0.95

    record = CalibrationRecord(
        coding=spec.coding,
        chance=chance,
        mean_accuracy=mean_accuracy,
        qda_accuracy=qda_accuracy,
        min_frobenius_separation=min_frobenius_separation(covariances) if spec.num_classes > 1 else 0.0,
        passed=bool(passed),
    )

    if not record.passed:
        LOGGER.warning(f"Calibration of the {spec.coding}-coded domain is weak: mean classifier {mean_accuracy:.3f}, "
                       f"QDA {qda_accuracy:.3f} (chance {chance:.3f})")

    return record


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """ Draws the dataset described by {spec} with its train/test split and calibration record """

    if Coding(spec.coding) is Coding.MIXED:
        raise ConfigurationError("Mixed coding spans two domains, build it with build_dataset or mix_domains")

    spec.validate()
    class_ids, sample_index, image, text, _ = _draw_domain(spec)
    domains = np.zeros(len(class_ids), dtype=np.int64)
    everything = Split(class_ids, sample_index, domains, image, text)

    train_idx, test_idx = _split_indices(spec)
    train, test = everything.subset(train_idx), everything.subset(test_idx)

    LOGGER.debug(f"Generated {spec.coding}-coded domain: {len(train)} train and {len(test)} test pairs "
                 f"of {spec.tokens}×{spec.raw_dim} tokens")

    return Dataset(specs=[spec], train=train, test=test, calibration=[calibrate(spec, train, test)])


def _merge(rng, split_a: Split, split_b: Split, r) -> Split:
    n = len(split_a)
    take_a = int(math.floor(r * n))

    picked_a = np.sort(rng.permutation(n)[:take_a])
    picked_b = np.sort(rng.permutation(n)[:n - take_a])

    # Relative order within each domain is kept, A samples land on seeded positions
    slots_a = np.zeros(n, dtype=bool)
    slots_a[rng.permutation(n)[:take_a]] = True

    def pick(field_a, field_b):
        merged = np.empty((n,) + field_a.shape[1:], dtype=field_a.dtype)
        merged[slots_a] = field_a[picked_a]
        merged[~slots_a] = field_b[picked_b]
        return merged

    return Split(
        class_ids=pick(split_a.class_ids, split_b.class_ids),
        sample_index=pick(split_a.sample_index, split_b.sample_index),
        domains=pick(split_a.domains, split_b.domains + 1),
        image=pick(split_a.image, split_b.image),
        text=pick(split_a.text, split_b.text),
    )


def mix_domains(spec_a: SyntheticDatasetSpec, spec_b: SyntheticDatasetSpec, r, seed=0) -> Dataset:
    """
        Merges two domains so that floor(r·n) of the n samples of each split come from domain A.

        Both domains must have the same split sizes, token count and raw width. r = 0 reproduces domain B and r = 1
        reproduces domain A, sample for sample.
    """

    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"Mixing ratio must lie in [0, 1], got {r}")

    a, b = generate(spec_a), generate(spec_b)

    if (a.tokens, a.raw_dim, len(a.train), len(a.test)) != (b.tokens, b.raw_dim, len(b.train), len(b.test)):
        raise ConfigurationError("Mixed domains need equal token counts, raw widths and split sizes")

    rng = _rng(seed)
    train = _merge(rng, a.train, b.train, r)
    test = _merge(rng, a.test, b.test, r)

    LOGGER.debug(f"Mixed domains at r={r}: {int(np.sum(train.domains == 0))}/{len(train)} train pairs from A")

    return Dataset(specs=[spec_a, spec_b], train=train, test=test, calibration=a.calibration + b.calibration, mix_ratio=r)


#
#   Persistence
#

@dataclass_json
@dataclass
class SplitManifest:
    class_ids: List[int]
    sample_index: List[int]
    domains: List[int]


@dataclass_json
@dataclass
class DatasetManifest:
    version: str
    tokens: int
    raw_dim: int
    specs: List[SyntheticDatasetSpec]
    calibration: List[CalibrationRecord]
    splits: Dict[str, SplitManifest]
    mix_ratio: Optional[float] = None


def _blob_name(modality: Modality, split: SplitName):
    return f"{modality.value}_{split.value}.blob"


def save_dataset(dataset: Dataset, directory):
    """ Writes manifest.json and one (n·M)×raw tensor blob per modality and split to {directory} """

    os.makedirs(directory, exist_ok=True)
    splits = {}

    for name in SplitName:
        split = dataset.train if name is SplitName.TRAIN else dataset.test
        splits[name.value] = SplitManifest(split.class_ids.tolist(), split.sample_index.tolist(), split.domains.tolist())

        for modality in Modality:
            tokens = split.image if modality is Modality.IMAGE else split.text
            write_blob(os.path.join(directory, _blob_name(modality, name)), tokens.reshape(-1, dataset.raw_dim))

    manifest = DatasetManifest(version=LAB_VERSION, tokens=dataset.tokens, raw_dim=dataset.raw_dim, specs=dataset.specs,
                               calibration=dataset.calibration, splits=splits, mix_ratio=dataset.mix_ratio)

    with open(os.path.join(directory, "manifest.json"), "w") as mf:
        mf.write(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))

    LOGGER.debug(f"Saved dataset to {directory}")


def load_dataset(directory) -> Dataset:
    """ Reads a dataset written by save_dataset """

    manifest_path = os.path.join(directory, "manifest.json")

    if not os.path.isfile(manifest_path):
        raise ConfigurationError(f"No dataset manifest at {manifest_path}")

    with open(manifest_path, "r") as mf:
        raw = json.load(mf)

    check_manifest_version(raw.get("version"), manifest_path)
    manifest = DatasetManifest.from_dict(raw)
    splits = {}

    for name in SplitName:
        if name.value not in manifest.splits:
            raise ConfigurationError(f"{manifest_path}: split '{name.value}' is missing")

        entry = manifest.splits[name.value]
        n = len(entry.class_ids)
        tokens = {}

        for modality in Modality:
            blob = read_blob(os.path.join(directory, _blob_name(modality, name)))

            if blob.shape != (n * manifest.tokens, manifest.raw_dim):
                raise ConfigurationError(f"{_blob_name(modality, name)} has shape {blob.shape}, manifest expects "
                                         f"({n * manifest.tokens}, {manifest.raw_dim})")

            tokens[modality] = np.array(blob).reshape(n, manifest.tokens, manifest.raw_dim)

        splits[name] = Split(np.array(entry.class_ids, dtype=np.int64), np.array(entry.sample_index, dtype=np.int64),
                             np.array(entry.domains, dtype=np.int64), tokens[Modality.IMAGE], tokens[Modality.TEXT])

    return Dataset(specs=manifest.specs, train=splits[SplitName.TRAIN], test=splits[SplitName.TEST],
                   calibration=manifest.calibration, mix_ratio=manifest.mix_ratio)


def build_dataset(spec: SyntheticDatasetSpec, mix_ratio=0.5) -> Dataset:
    """
        Generates the dataset of {spec}. Mixed coding merges a covariance-coded domain A with a mean-coded domain B
        (seed + 1) at {mix_ratio}.
    """

    if Coding(spec.coding) is not Coding.MIXED:
        return generate(spec)

    spec_a = replace(spec, coding=Coding.COVARIANCE.value)
    spec_b = replace(spec, coding=Coding.MEAN.value, seed=spec.seed + 1)

    return mix_domains(spec_a, spec_b, mix_ratio, seed=spec.seed)


def random_split(pairs, tokens, raw_dim, seed=0) -> Split:
    """ Standard-normal tokens for {pairs} pairs of distinct classes, for gradient checks and smoke runs """

    rng = _rng(seed)
    image = rng.standard_normal((pairs, tokens, raw_dim))
    text = rng.standard_normal((pairs, tokens, raw_dim))
    index = np.arange(pairs, dtype=np.int64)

    return Split(index, np.zeros(pairs, dtype=np.int64), np.zeros(pairs, dtype=np.int64), image, text)
