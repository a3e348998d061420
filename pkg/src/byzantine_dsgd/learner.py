"""Losses, gradients, datasets, sampling and step sizes.

Parameter vectors are flat. The linear kinds (``strongly_convex`` and
``softmax``) lay out ``W`` (classes x input_dim, row-major) followed by the
bias ``b``; the ``mlp`` kind lays out ``W1, b1, W2, b2`` for a single tanh
hidden layer.
"""

import gzip
import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, validator

from byzantine_dsgd.errors import BadMagic, DimensionMismatch, LengthMismatch
from byzantine_dsgd.models import InitSpec, LossSpec, ScheduleSpec

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Independent random streams, keyed together with the run seed.
STREAM_DATA = 1
STREAM_SAMPLING = 2
STREAM_ATTACK = 3
STREAM_INIT = 4
STREAM_VICTIM = 5
STREAM_PROBE = 6


def keyed_rng(*key: int) -> np.random.Generator:
    """Generator whose stream depends only on ``key``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


class Sample(BaseModel):
    """One labelled example."""

    features: np.ndarray
    label: int = Field(..., ge=0)

    class Config:
        arbitrary_types_allowed = True


class Dataset(BaseModel):
    """Immutable feature matrix with integer labels."""

    features: np.ndarray = Field(..., description="N x D float matrix")
    labels: np.ndarray = Field(..., description="N integer class indices")

    class Config:
        arbitrary_types_allowed = True

    def __init__(self, **data) -> None:
        super().__init__(**data)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise LengthMismatch(
                f"{self.features.shape[0]} feature rows but labels of shape {self.labels.shape}"
            )

    @validator("features", "labels")
    def frozen_copy(cls, v):
        # the caller keeps a writable original
        v = np.array(v, copy=True)
        v.setflags(write=False)
        return v

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def sample(self, i: int) -> Sample:
        return Sample(features=self.features[i], label=int(self.labels[i]))

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(features=self.features[idx], labels=self.labels[idx])


class LocalDataset(Dataset):
    """Training samples held by one honest agent."""

    agent: int = Field(..., ge=0)

    def replace(self, j: int, sample: Sample) -> "LocalDataset":
        """Copy with sample ``j`` swapped for ``sample``."""
        if not 0 <= j < len(self):
            raise IndexError(f"sample index {j} outside [0, {len(self)})")
        features = self.features.copy()
        labels = self.labels.copy()
        features[j] = sample.features
        labels[j] = sample.label
        return LocalDataset(agent=self.agent, features=features, labels=labels)


class GeneratorSpec(BaseModel):
    """Recipe of a synthetic Gaussian-mixture population."""

    classes: int
    dim: int
    separation: float
    seed: int
    means: List[List[float]]


# Losses and gradients

def _check_params(spec: LossSpec, x: np.ndarray, features: np.ndarray) -> None:
    if not spec.resolved:
        raise ValueError("loss spec has no input_dim/classes")
    if x.shape != (spec.param_count,):
        raise DimensionMismatch(f"parameter vector of shape {x.shape}, expected ({spec.param_count},)")
    if features.shape[-1] != spec.input_dim:
        raise DimensionMismatch(
            f"features of dimension {features.shape[-1]}, expected {spec.input_dim}"
        )


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    total = expz.sum(axis=1, keepdims=True)
    probs = expz / total
    rows = np.arange(logits.shape[0])
    losses = np.log(total[:, 0]) - shifted[rows, labels]
    dlogits = probs
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _mlp_split(spec: LossSpec, x: np.ndarray):
    d, c, h = spec.input_dim, spec.classes, spec.hidden
    o = 0
    w1 = x[o:o + h * d].reshape(h, d)
    o += h * d
    b1 = x[o:o + h]
    o += h
    w2 = x[o:o + c * h].reshape(c, h)
    o += c * h
    b2 = x[o:o + c]
    return w1, b1, w2, b2


def _losses_and_grads(
    spec: LossSpec, x: np.ndarray, features: np.ndarray, labels: np.ndarray, per_sample: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and either per-sample gradients (N x P) or their mean (P,)."""
    n = features.shape[0]
    if spec.kind == "mlp":
        w1, b1, w2, b2 = _mlp_split(spec, x)
        act = np.tanh(features @ w1.T + b1)
        losses, dz = _softmax_xent(act @ w2.T + b2, labels)
        dpre = (dz @ w2) * (1.0 - act ** 2)
        if per_sample:
            grads = np.concatenate(
                [
                    np.einsum("nh,nd->nhd", dpre, features).reshape(n, -1),
                    dpre,
                    np.einsum("nc,nh->nch", dz, act).reshape(n, -1),
                    dz,
                ],
                axis=1,
            )
        else:
            grads = np.concatenate(
                [
                    (dpre.T @ features).ravel() / n,
                    dpre.mean(axis=0),
                    (dz.T @ act).ravel() / n,
                    dz.mean(axis=0),
                ]
            )
    else:
        c, d = spec.classes, spec.input_dim
        w = x[:c * d].reshape(c, d)
        b = x[c * d:]
        losses, dz = _softmax_xent(features @ w.T + b, labels)
        if per_sample:
            grads = np.concatenate(
                [np.einsum("nc,nd->ncd", dz, features).reshape(n, -1), dz], axis=1
            )
        else:
            grads = np.concatenate([(dz.T @ features).ravel() / n, dz.mean(axis=0)])

    reg = spec.reg
    if reg:
        losses = losses + 0.5 * reg * float(x @ x)
        grads = grads + reg * x
    return losses, grads


def per_sample_grads(
    spec: LossSpec, x: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Losses ``(N,)`` and gradients ``(N, P)`` of every sample in a batch."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    _check_params(spec, x, features)
    return _losses_and_grads(spec, x, features, labels, per_sample=True)


def loss_and_grad(spec: LossSpec, x: np.ndarray, sample: Sample) -> Tuple[float, np.ndarray]:
    """Loss ``f(x; sample)`` and its exact gradient.

    Args:
        spec: Resolved loss spec
        x: Flat parameter vector
        sample: The example

    Returns:
        Tuple[float, np.ndarray]: loss and gradient
    """
    losses, grads = per_sample_grads(spec, x, sample.features[None, :], np.array([sample.label]))
    return float(losses[0]), grads[0]


def batch_grad(
    spec: LossSpec, x: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Mean gradient over a nonempty mini-batch."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if features.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    _check_params(spec, x, features)
    return _losses_and_grads(spec, x, features, labels, per_sample=False)[1]


def evaluate(spec: LossSpec, x: np.ndarray, data: Dataset, chunk: int = 4096) -> Tuple[float, float]:
    """Average loss and accuracy of ``x`` on ``data``."""
    _check_params(spec, x, data.features)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(data), chunk):
        feats = data.features[start:start + chunk]
        labels = data.labels[start:start + chunk]
        logits = _logits(spec, x, feats)
        shifted = logits - logits.max(axis=1, keepdims=True)
        rows = np.arange(feats.shape[0])
        losses = np.log(np.exp(shifted).sum(axis=1)) - shifted[rows, labels]
        total_loss += float(losses.sum())
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    loss = total_loss / len(data)
    if spec.reg:
        loss += 0.5 * spec.reg * float(x @ x)
    return loss, correct / len(data)


def _logits(spec: LossSpec, x: np.ndarray, features: np.ndarray) -> np.ndarray:
    if spec.kind == "mlp":
        w1, b1, w2, b2 = _mlp_split(spec, x)
        return np.tanh(features @ w1.T + b1) @ w2.T + b2
    c, d = spec.classes, spec.input_dim
    return features @ x[:c * d].reshape(c, d).T + x[c * d:]


def init_params(spec: LossSpec, init: InitSpec, seed: int) -> np.ndarray:
    """Shared initial model; ``auto`` is zero except for the mlp."""
    kind = init.kind
    if kind == "auto":
        kind = "normal" if spec.kind == "mlp" else "zero"
    if kind == "zero":
        return np.zeros(spec.param_count)
    return keyed_rng(seed, STREAM_INIT).normal(0.0, init.scale, spec.param_count)


# Sampling and step sizes

def sample_indices(seed: int, agent: int, step: int, Z: int, batch: int) -> np.ndarray:
    """Uniform, independent (with replacement) sample positions for one agent and step.

    The stream is keyed by ``(seed, agent, step)`` only, so two runs on
    datasets of equal size draw the same positions.
    """
    return keyed_rng(seed, STREAM_SAMPLING, agent, step).integers(0, Z, size=batch)


def step_size(s: ScheduleSpec, k: int) -> float:
    if k < 0:
        raise ValueError("k must be nonnegative")
    if s.kind == "sc":
        if s.mu is None:
            raise ValueError("sc schedule needs mu")
        return 1.0 / (s.mu * (k + s.k0))
    if s.kind == "cvx":
        return 1.0 / (k + s.k0)
    if s.kind == "ncvx":
        if s.L is None:
            raise ValueError("ncvx schedule needs L")
        return s.a / (s.L * (k + s.k0))
    return s.s / (0.01 * k + 1.0)


def estimate_M_L(
    spec: LossSpec,
    data: Dataset,
    probes: int,
    radius: float = 1.0,
    seed: int = 0,
    eps: float = 1e-4,
    chunk: int = 256,
) -> Tuple[float, float]:
    """Empirical lower bounds on the gradient bound M and smoothness L.

    Probe ``p`` is a point drawn uniformly from the ball of ``radius`` with
    its own stream, so adding probes never lowers either estimate. For each
    probe, every sample's gradient norm counts toward ``M`` and a partner
    point at distance ``eps`` gives a difference quotient toward ``L``.
    """
    if probes < 1:
        raise ValueError("probes must be at least 1")
    size = spec.param_count
    m_hat = 0.0
    l_hat = 0.0
    for p in range(probes):
        rng = keyed_rng(seed, STREAM_PROBE, p)
        direction = rng.standard_normal(size)
        direction /= np.linalg.norm(direction)
        x = radius * rng.random() ** (1.0 / size) * direction
        offset = rng.standard_normal(size)
        offset *= eps / np.linalg.norm(offset)
        y = x + offset
        for start in range(0, len(data), chunk):
            feats = data.features[start:start + chunk]
            labels = data.labels[start:start + chunk]
            _, gx = per_sample_grads(spec, x, feats, labels)
            _, gy = per_sample_grads(spec, y, feats, labels)
            m_hat = max(m_hat, float(np.max(np.linalg.norm(gx, axis=1))))
            l_hat = max(l_hat, float(np.max(np.linalg.norm(gx - gy, axis=1))) / eps)
    logger.debug("estimated M=%.6g L=%.6g from %d probes", m_hat, l_hat, probes)
    return m_hat, l_hat


# Datasets

def synth_dataset(
    classes: int,
    dim: int,
    Z: int,
    honest_count: int,
    test_count: int,
    seed: int,
    separation: float = 3.0,
    agents: Optional[Sequence[int]] = None,
) -> Tuple[List[LocalDataset], Dataset, GeneratorSpec]:
    """Gaussian-mixture population split evenly across honest agents.

    Class ``c`` has mean ``separation * u_c`` with ``u_c`` a random unit
    vector and identity covariance; labels are uniform. ``Z * honest_count``
    training samples are shuffled and dealt ``Z`` per agent; the test set is
    drawn independently from the same population.
    """
    if min(classes, dim, Z, honest_count, test_count) < 1:
        raise ValueError("all counts must be positive")
    agents = list(agents) if agents is not None else list(range(honest_count))
    if len(agents) != honest_count:
        raise ValueError("need one agent id per honest agent")
    rng = keyed_rng(seed, STREAM_DATA)
    means = rng.standard_normal((classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, classes, size=n)
        return means[labels] + rng.standard_normal((n, dim)), labels

    train_x, train_y = draw(Z * honest_count)
    order = rng.permutation(Z * honest_count)
    locals_ = [
        LocalDataset(
            agent=a,
            features=train_x[order[i * Z:(i + 1) * Z]],
            labels=train_y[order[i * Z:(i + 1) * Z]],
        )
        for i, a in enumerate(agents)
    ]
    test_x, test_y = draw(test_count)
    spec = GeneratorSpec(
        classes=classes, dim=dim, separation=separation, seed=seed, means=means.tolist()
    )
    return locals_, Dataset(features=test_x, labels=test_y), spec


def _read(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def load_idx(images: Union[str, Path], labels: Union[str, Path]) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1].

    Files ending in ``.gz`` are decompressed.
    """
    raw = _read(images)
    if len(raw) < 16:
        raise LengthMismatch(f"{images}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise BadMagic(f"{images}: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    pixels = rows * cols
    if len(raw) - 16 != count * pixels:
        raise LengthMismatch(f"{images}: {len(raw) - 16} pixel bytes for {count} images")

    raw_labels = _read(labels)
    if len(raw_labels) < 8:
        raise LengthMismatch(f"{labels}: truncated header")
    magic, label_count = struct.unpack(">II", raw_labels[:8])
    if magic != LABELS_MAGIC:
        raise BadMagic(f"{labels}: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
    if label_count != count or len(raw_labels) - 8 != count:
        raise LengthMismatch(f"{count} images but {label_count} labels")

    features = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, pixels) / 255.0
    label_arr = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(int)
    logger.info("loaded %d samples of dimension %d from %s", count, pixels, images)
    return Dataset(features=features, labels=label_arr)


def partition(
    data: Dataset, agents: Sequence[int], Z: int, seed: int
) -> List[LocalDataset]:
    """Deal ``Z`` shuffled samples to each agent."""
    need = Z * len(agents)
    if need > len(data):
        raise ValueError(f"need {need} samples for {len(agents)} agents, have {len(data)}")
    order = keyed_rng(seed, STREAM_DATA).permutation(len(data))[:need]
    return [
        LocalDataset(
            agent=a,
            features=data.features[order[i * Z:(i + 1) * Z]],
            labels=data.labels[order[i * Z:(i + 1) * Z]],
        )
        for i, a in enumerate(agents)
    ]


def stack_datasets(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(
        features=np.concatenate([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
    )


def classes_of(data: Dataset) -> int:
    return int(data.labels.max()) + 1 if len(data) else 0
