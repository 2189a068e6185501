"""Desk-scale classifiers with mode-switchable batch normalization.

Two architectures are supported:

* ``mlp``: ``widths = [in, h1, ..., num_classes]``; every hidden layer is
  affine -> BN -> ReLU.
* ``cnn``: ``channels = [c1, c2]``; each block is conv3x3 -> BN -> ReLU ->
  2x2 average pool, followed by a linear head.

Parameters live in a :class:`Checkpoint` as plain arrays. :func:`forward`
wraps them as constant tensors unless the caller passes watched tensors.
"""
import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from . import tensor as T

BN_MODES = ("frozen_eval", "train", "tta_adaptive")
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    widths: tuple
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if any(w < 1 for w in self.widths) or any(d < 1 for d in self.input_shape):
            raise ValueError(f"all widths/extents must be >= 1: {self}")
        if self.architecture == "mlp":
            if len(self.widths) < 2:
                raise ValueError("mlp needs at least input and output widths")
            if self.widths[-1] != self.num_classes:
                raise ValueError(f"final width {self.widths[-1]} != num_classes {self.num_classes}")
            if int(np.prod(self.input_shape)) != self.widths[0]:
                raise ValueError(f"input_shape {self.input_shape} does not flatten to {self.widths[0]}")
        elif self.architecture == "cnn":
            if len(self.input_shape) != 3:
                raise ValueError("cnn input_shape must be (C, H, W)")
            _, h, w = self.input_shape
            scale = 2 ** len(self.widths)
            if h % scale or w % scale:
                raise ValueError(f"spatial extent {h}x{w} not divisible by {scale}")
            if not self.widths:
                raise ValueError("cnn needs at least one conv block")
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @classmethod
    def mlp(cls, widths, input_shape=None):
        widths = tuple(widths)
        return cls("mlp", widths, widths[-1], tuple(input_shape or (widths[0],)))

    @classmethod
    def cnn(cls, channels, num_classes, input_shape):
        return cls("cnn", tuple(channels), num_classes, tuple(input_shape))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: str = "frozen_eval"

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ValueError("BN momentum must lie in (0, 1]")
        if self.mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {self.mode!r}")

    def update(self, batch_mean, batch_var_unbiased):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * batch_mean
        self.running_var = (1 - m) * self.running_var + m * batch_var_unbiased


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    bn: dict
    provenance: str = ""

    def copy(self):
        return copy.deepcopy(self)

    def digest(self):
        return hashlib.sha256(to_bytes(self)).hexdigest()


def _layout(spec):
    """Ordered (name, shape) parameter list plus BN layer names and widths."""
    params, bns = [], []
    if spec.architecture == "mlp":
        w = spec.widths
        for i in range(len(w) - 1):
            params.append((f"fc{i}.weight", (w[i], w[i + 1])))
            params.append((f"fc{i}.bias", (w[i + 1],)))
            if i < len(w) - 2:
                params.append((f"bn{i}.gamma", (w[i + 1],)))
                params.append((f"bn{i}.beta", (w[i + 1],)))
                bns.append((f"bn{i}", w[i + 1]))
    else:
        c, h, wd = spec.input_shape
        prev = c
        for i, ch in enumerate(spec.widths):
            params.append((f"conv{i}.weight", (ch, prev, 3, 3)))
            params.append((f"conv{i}.bias", (ch,)))
            params.append((f"bn{i}.gamma", (ch,)))
            params.append((f"bn{i}.beta", (ch,)))
            bns.append((f"bn{i}", ch))
            prev = ch
            h, wd = h // 2, wd // 2
        params.append(("head.weight", (prev * h * wd, spec.num_classes)))
        params.append(("head.bias", (spec.num_classes,)))
    return params, bns


def build_model(spec, seed, momentum=0.1):
    """Deterministic He-uniform initialization; BN gamma=1, beta=0, stats (0, 1)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layout, bns = _layout(spec)
    params = {}
    for name, shape in layout:
        if name.endswith(".weight"):
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    bn = {name: BatchNormState(np.zeros(c), np.ones(c), momentum) for name, c in bns}
    return Checkpoint(spec, params, bn, provenance=f"init seed={seed}")


def as_tensors(ckpt):
    return {k: T.Tensor(v, name=k) for k, v in ckpt.params.items()}


def watch_params(tape, ckpt):
    """Parameter tensors registered as differentiable leaves on ``tape``."""
    return {k: tape.watch(T.Tensor(v, name=k)) for k, v in ckpt.params.items()}


def _bn(ckpt, name, h, p, mode):
    state = ckpt.bn[name]
    if mode == "frozen_eval":
        out, _ = T.batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"],
                              state.running_mean, state.running_var, BN_EPS)
        return out
    out, (bm, bv) = T.batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], eps=BN_EPS)
    n = h.size // h.shape[1]
    state.update(bm, bv * n / (n - 1))
    return out


def forward(ckpt, batch, bn_mode="frozen_eval", params=None):
    """Logits of shape (N, num_classes) for ``batch`` of shape (N, *input_shape).

    ``train`` and ``tta_adaptive`` normalize with batch statistics and update
    the running statistics by EMA; ``frozen_eval`` never mutates state.
    """
    if bn_mode not in BN_MODES:
        raise ValueError(f"unknown BN mode {bn_mode!r}")
    spec = ckpt.spec
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if x.shape[1:] != spec.input_shape:
        raise T.ShapeError("forward", f"batch {x.shape} does not match input_shape {spec.input_shape}")
    p = params if params is not None else as_tensors(ckpt)
    if spec.architecture == "mlp":
        h = T.reshape(x, (x.shape[0], -1)) if len(spec.input_shape) > 1 else x
        last = len(spec.widths) - 2
        for i in range(last + 1):
            h = T.affine(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < last:
                h = T.relu(_bn(ckpt, f"bn{i}", h, p, bn_mode))
        return h
    h = x
    for i in range(len(spec.widths)):
        h = T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
        h = T.avg_pool2(T.relu(_bn(ckpt, f"bn{i}", h, p, bn_mode)))
    return T.affine(T.flatten(h), p["head.weight"], p["head.bias"])


def predict(ckpt, inputs, batch_size=256):
    """Argmax class predictions in frozen_eval mode; ties go to the lowest index."""
    out = []
    for i in range(0, len(inputs), batch_size):
        out.append(np.argmax(forward(ckpt, inputs[i:i + batch_size]).values, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def fork_teacher_student(ckpt):
    return ckpt.copy(), ckpt.copy()


# ---------------------------------------------------------------------------
# serialization

_ARCH_CODES = {"mlp": 0, "cnn": 1}
_MODE_CODES = {m: i for i, m in enumerate(BN_MODES)}


def to_bytes(ckpt):
    w = fileformat.Writer(fileformat.BLOCK_CHECKPOINT)
    spec = ckpt.spec
    w.u8(_ARCH_CODES[spec.architecture])
    w.u32(spec.num_classes)
    w.dims(spec.input_shape)
    w.dims(spec.widths)
    w.string(ckpt.provenance)
    w.u32(len(ckpt.params))
    for name, arr in ckpt.params.items():
        w.string(name)
        w.dims(arr.shape)
        w.f64_array(arr)
    w.u32(len(ckpt.bn))
    for name, st in ckpt.bn.items():
        w.string(name)
        w.u32(st.running_mean.shape[0])
        w.f64(st.momentum)
        w.u8(_MODE_CODES[st.mode])
        w.f64_array(st.running_mean)
        w.f64_array(st.running_var)
    return w.getvalue()


def from_bytes(data):
    r = fileformat.Reader(data, fileformat.BLOCK_CHECKPOINT)
    arch = {v: k for k, v in _ARCH_CODES.items()}[r.u8()]
    num_classes = r.u32()
    input_shape = r.dims()
    widths = r.dims()
    spec = ModelSpec(arch, widths, num_classes, input_shape)
    provenance = r.string()
    params = {}
    for _ in range(r.u32()):
        name = r.string()
        params[name] = r.f64_array(r.dims())
    bn = {}
    modes = {v: k for k, v in _MODE_CODES.items()}
    for _ in range(r.u32()):
        name = r.string()
        c = r.u32()
        momentum = r.f64()
        mode = modes[r.u8()]
        mean = r.f64_array((c,))
        var = r.f64_array((c,))
        bn[name] = BatchNormState(mean, var, momentum, mode)
    r.done()
    layout, bns = _layout(spec)
    if [(k, v.shape) for k, v in params.items()] != [(k, tuple(s)) for k, s in layout]:
        raise fileformat.FormatError("parameter names/shapes do not match the model spec")
    if sorted(bn) != sorted(n for n, _ in bns):
        raise fileformat.FormatError("BN layer names do not match the model spec")
    return Checkpoint(spec, params, bn, provenance)


def save_checkpoint(ckpt, path):
    fileformat.atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
