"""Synthetic image-like classification data, target-domain shifts and splits."""
import hashlib
from dataclasses import dataclass

import numpy as np

from . import fileformat
from .corruptions import corrupt_batch

SOURCE = -1
FREQS = (1.0, 1.5)  # grating cycles per image, one per class parity
CODE_BLOCK = 2  # pixel block size of the per-class fragile code


class LabelAccessError(PermissionError):
    """Labels were requested through a label-withheld view."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    severity: int = SOURCE  # SOURCE for the source domain, else target severity

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def domain_tag(self):
        return "source" if self.severity == SOURCE else f"target({self.severity})"

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.severity)

    def unlabeled(self):
        return UnlabeledView(self)

    def checksum(self):
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def batches(self, batch_size, rng=None):
        """(index array, inputs, labels) per minibatch; shuffled when ``rng`` given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield idx, self.inputs[idx], self.labels[idx]


class UnlabeledView:
    """Read-only view of a dataset whose labels are inaccessible."""

    __slots__ = ("_inputs", "num_classes", "severity", "_n")

    def __init__(self, dataset):
        self._inputs = dataset.inputs
        self.num_classes = dataset.num_classes
        self.severity = dataset.severity
        self._n = len(dataset)

    @property
    def inputs(self):
        return self._inputs

    @property
    def labels(self):
        raise LabelAccessError("labels are withheld on the unsupervised adaptation path")

    def __len__(self):
        return self._n

    def batches(self, batch_size, rng=None):
        order = rng.permutation(self._n) if rng is not None else np.arange(self._n)
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield idx, self._inputs[idx], None


def generate_synthetic(num_classes=10, samples_per_class=100, image_extent=8, seed=0,
                       amplitude=0.12, texture=0.1, fragile=0.03, channels=3, template_seed=0):
    """Class-conditional oriented gratings plus a faint per-class pixel code.

    Class ``k`` owns a spatial frequency, an orientation and a colour mix;
    each sample draws a random phase, a small global brightness offset and
    i.i.d. texture noise. A fixed +-``fragile`` block pattern per class is
    added on top: it is highly predictive but smaller than typical attack
    budgets, so standard training yields a non-robust model while a robust
    one must rely on the grating. Blur and noise erode both cues.

    Class templates depend only on ``template_seed``; ``seed`` drives the
    per-sample draws, so sets generated with different seeds share classes.
    """
    if image_extent > 32:
        raise ValueError("image_extent must be <= 32")
    rng = np.random.default_rng(seed)
    template_rng = np.random.default_rng([int(template_seed), 7919])
    n_orient = max(1, (num_classes + 1) // 2)
    freqs = np.array(FREQS) / image_extent
    angles = np.pi * np.arange(n_orient) / n_orient
    colors = template_rng.uniform(0.4, 1.0, size=(num_classes, channels))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True) / np.sqrt(channels)
    cells = -(-image_extent // CODE_BLOCK)
    codes = template_rng.choice([-fragile, fragile], size=(num_classes, channels, cells, cells))
    codes = codes.repeat(CODE_BLOCK, axis=2).repeat(CODE_BLOCK, axis=3)[:, :, :image_extent, :image_extent]
    v, u = np.mgrid[0:image_extent, 0:image_extent].astype(np.float64)

    inputs, labels = [], []
    for k in range(num_classes):
        f = freqs[k % 2]
        ang = angles[k // 2 % n_orient]
        proj = np.cos(ang) * u + np.sin(ang) * v
        for _ in range(samples_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * f * proj + phase)
            img = 0.5 + rng.uniform(-0.05, 0.05) + amplitude * colors[k][:, None, None] * wave + codes[k]
            img = img + rng.normal(0.0, texture, size=(channels, image_extent, image_extent))
            inputs.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    order = rng.permutation(len(labels))
    return Dataset(np.stack(inputs)[order], np.asarray(labels)[order], num_classes)


def make_target_domain(src, severity, seed):
    if severity not in (0, 1, 2):
        raise ValueError(f"severity must be 0, 1 or 2, got {severity}")
    inputs = src.inputs.copy() if severity == 0 else corrupt_batch(src.inputs, severity, seed)
    return Dataset(inputs, src.labels.copy(), src.num_classes, severity)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.5, 0.5)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if not self.fractions or any(f <= 0 for f in self.fractions):
            raise ValueError("split fractions must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {sum(self.fractions)}, not 1")


def _allocate(n, fractions):
    """Largest-remainder apportionment of ``n`` items to ``fractions``."""
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def split_dataset(d, spec):
    rng = np.random.default_rng(spec.seed)
    parts = [[] for _ in spec.fractions]
    if spec.stratified:
        for k in range(d.num_classes):
            idx = rng.permutation(np.flatnonzero(d.labels == k))
            if len(idx) == 0:
                continue
            counts = _allocate(len(idx), spec.fractions)
            if counts.min() < 1:
                raise ValueError(f"class {k} has {len(idx)} samples; too few for fractions {spec.fractions}")
            for part, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
                part.append(chunk)
    else:
        idx = rng.permutation(len(d))
        for part, chunk in zip(parts, np.split(idx, np.cumsum(_allocate(len(d), spec.fractions))[:-1])):
            part.append(chunk)
    return [d.subset(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64)) for p in parts]


# ---------------------------------------------------------------------------
# serialization


def to_bytes(d):
    w = fileformat.Writer(fileformat.BLOCK_DATASET)
    w.i64(d.severity)
    w.u32(d.num_classes)
    w.dims(d.inputs.shape)
    w.f64_array(d.inputs)
    w.i64_array(d.labels)
    return w.getvalue()


def from_bytes(data):
    r = fileformat.Reader(data, fileformat.BLOCK_DATASET)
    severity = r.i64()
    num_classes = r.u32()
    shape = r.dims()
    inputs = r.f64_array(shape)
    labels = r.i64_array((shape[0],))
    r.done()
    return Dataset(inputs, labels, num_classes, severity)


def save_dataset(d, path):
    fileformat.atomic_write(path, to_bytes(d))


def load_dataset(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
