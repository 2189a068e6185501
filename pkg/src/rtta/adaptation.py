"""Source pretraining, teacher BN adaptation and adversarial student fine-tuning."""
import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import EVAL_THREAT, TRAIN_THREAT, AttackError, ThreatModel, craft_inner_max
from .evaluation import clean_accuracy, robust_accuracy
from .fileformat import atomic_write
from .models import Checkpoint, forward, fork_teacher_student, watch_params
from .objectives import MethodConfig, ce_loss, loss_terms, softmax

log = logging.getLogger(__name__)

TEACHER_POLICIES = ("frozen", "bn_parallel", "bn_before")
DYNAMICS_COLUMNS = ("epoch", "lr", "loss_acc_term", "loss_rob_term",
                    "clean_acc", "robust_acc", "teacher_clean_acc")


class AdaptationDiverged(RuntimeError):
    """Training produced non-finite values; ``last_good`` holds the prior state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    decay_epochs: tuple = (10, 25, 30)
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be sorted")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")


def lr_at_epoch(s, epoch):
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return s.initial_lr * s.decay_factor ** sum(1 for d in s.decay_epochs if d <= epoch)


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_momentum_step(params, grads, opt, lr):
    """``v <- mu v + g + wd theta``; ``theta <- theta - lr v``. Returns new arrays."""
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise T.ShapeError("sgd_momentum_step", f"{name}: grad {g.shape} vs param {theta.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise T.ShapeError("sgd_momentum_step", f"{name}: velocity {v.shape} vs param {theta.shape}")
        v = opt.momentum * v + g + opt.weight_decay * theta
        opt.velocity[name] = v
        out[name] = theta - lr * v
    return out


def _check_finite(params, what):
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise T.NonFiniteError(f"{what} ({name})")


def pretrain_source(spec, source, epochs=15, seed=0, lr=0.05, batch_size=64,
                    momentum=0.9, weight_decay=5e-4, init=None):
    """Plain cross-entropy training with BN in train mode."""
    from .models import build_model

    ckpt = init.copy() if init is not None else build_model(spec, seed)
    opt = OptimizerState(momentum, weight_decay)
    schedule = LrSchedule(lr, (int(epochs * 0.6), int(epochs * 0.85)), 0.2)
    for epoch in range(epochs):
        rng = np.random.default_rng([int(seed), epoch, 1])
        for _, xb, yb in source.batches(batch_size, rng):
            if len(xb) < 2:
                continue
            try:
                with T.Tape() as tape:
                    params = watch_params(tape, ckpt)
                    loss = ce_loss(forward(ckpt, xb, "train", params), yb)
                grads = tape.backprop(loss, params)
                new = sgd_momentum_step(ckpt.params, grads, opt, lr_at_epoch(schedule, epoch))
                _check_finite(new, "pretrain update")
            except T.NonFiniteError as exc:
                raise AdaptationDiverged(f"pretraining diverged at epoch {epoch}: {exc}", ckpt) from exc
            ckpt.params = new
    ckpt.provenance = (f"pretrain spec={spec.architecture}{list(spec.widths)} epochs={epochs} "
                       f"seed={seed} lr={lr} bs={batch_size} mom={momentum} wd={weight_decay}")
    return ckpt


def adapt_teacher(teacher, batches, policy="bn_before"):
    """Update BN running statistics on clean target batches; weights untouched."""
    if policy not in TEACHER_POLICIES:
        raise ValueError(f"unknown teacher policy {policy!r}")
    if policy == "frozen":
        return teacher
    out = teacher.copy()
    for xb in batches:
        if len(xb) < 2:
            raise ValueError("BN adaptation needs batches of at least 2 samples")
        forward(out, xb, "tta_adaptive")
    return out


@dataclass(frozen=True)
class AdaptationConfig:
    method_cfg: MethodConfig = MethodConfig()
    threat: ThreatModel = TRAIN_THREAT
    epochs: int = 30
    batch_size: int = 64
    schedule: LrSchedule = LrSchedule()
    teacher_policy: str = "bn_parallel"
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    teacher_bn_momentum: float = 0.1
    student_bn_mode: str = "train"
    eval_threat: ThreatModel = EVAL_THREAT
    eval_subset: int = 512

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.teacher_policy not in TEACHER_POLICIES:
            raise ValueError(f"unknown teacher policy {self.teacher_policy!r}")
        if self.batch_size < 2 and (self.teacher_policy != "frozen" or self.student_bn_mode != "frozen_eval"):
            raise ValueError("adaptive BN needs batch_size >= 2")


@dataclass
class DynamicsLog:
    records: list = field(default_factory=list)
    diverged_at: int = None

    def append(self, **rec):
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.records.append({k: rec[k] for k in DYNAMICS_COLUMNS})

    def column(self, name):
        return [r[name] for r in self.records]

    def __len__(self):
        return len(self.records)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=DYNAMICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records)

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and tuple(rows[0].keys()) != DYNAMICS_COLUMNS:
            raise ValueError("unexpected dynamics CSV header")
        return cls([{k: int(r[k]) if k == "epoch" else float(r[k]) for k in DYNAMICS_COLUMNS} for r in rows])

    @classmethod
    def from_jsonl(cls, text):
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def save(self, stem):
        atomic_write(f"{stem}.csv", self.to_csv())
        atomic_write(f"{stem}.jsonl", self.to_jsonl())


def _batch_seed(seed, epoch, b):
    return int(np.random.SeedSequence([int(seed), int(epoch), int(b), 3]).generate_state(1)[0])


def adapt_student_epoch(teacher, student, data, cfg, opt, epoch):
    """One pass of adversarial fine-tuning over ``data``.

    ``data`` is a labeled :class:`Dataset` for supervised methods and an
    :class:`UnlabeledView` otherwise. The teacher's BN statistics are
    updated in place under ``bn_parallel``. Returns the new student and the
    mean (accuracy term, robustness term) over batches.
    """
    mcfg = cfg.method_cfg
    lr = lr_at_epoch(cfg.schedule, epoch)
    rng = np.random.default_rng([int(cfg.seed), int(epoch), 2])
    acc_terms, rob_terms = [], []
    for b, (idx, xb, yb) in enumerate(data.batches(cfg.batch_size, rng)):
        y = yb if mcfg.supervised else None
        if cfg.teacher_policy == "bn_parallel":
            if len(xb) < 2:
                continue
            forward(teacher, xb, "tta_adaptive")
        try:
            q = None if mcfg.supervised else softmax(forward(teacher, xb).values)
            x_hat = craft_inner_max(mcfg, teacher, student, xb, y, cfg.threat,
                                    _batch_seed(cfg.seed, epoch, b), idx, q=q)
            with T.Tape() as tape:
                params = watch_params(tape, student)
                acc, rob = loss_terms(mcfg, teacher, student, xb, x_hat, y, params, cfg.student_bn_mode, q)
                loss = T.add(acc, T.mul(rob, mcfg.beta))
            grads = tape.backprop(loss, params)
            new = sgd_momentum_step(student.params, grads, opt, lr)
            _check_finite(new, "student update")
        except (T.NonFiniteError, AttackError) as exc:
            raise AdaptationDiverged(f"adaptation diverged at epoch {epoch}, batch {b}: {exc}", student) from exc
        student = Checkpoint(student.spec, new, student.bn, student.provenance)
        acc_terms.append(acc.item())
        rob_terms.append(rob.item())
    return student, (float(np.mean(acc_terms)) if acc_terms else 0.0,
                     float(np.mean(rob_terms)) if rob_terms else 0.0)


def eval_subset(eval_set, size, seed):
    if len(eval_set) <= size:
        return eval_set
    idx = np.sort(np.random.default_rng([int(seed), 5]).choice(len(eval_set), size, replace=False))
    return eval_set.subset(idx)


def run_adaptation(pretrained, target, eval_set, cfg, evaluate=True):
    """Fork teacher/student and fine-tune the student for ``cfg.epochs`` epochs.

    Returns ``(student, teacher, DynamicsLog)``. Divergence stops the run,
    keeps the last good student and records ``diverged_at``.
    """
    teacher, student = fork_teacher_student(pretrained)
    for st in teacher.bn.values():
        st.momentum = cfg.teacher_bn_momentum
    dyn = DynamicsLog()
    if cfg.epochs == 0:
        return student, teacher, dyn
    data = target if cfg.method_cfg.supervised else target.unlabeled()
    if cfg.teacher_policy == "bn_before":
        teacher = adapt_teacher(teacher, [xb for _, xb, _ in data.batches(cfg.batch_size) if len(xb) >= 2],
                                "bn_before")
    evalset = eval_subset(eval_set, cfg.eval_subset, cfg.seed)
    opt = OptimizerState(cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.epochs):
        try:
            student, (acc, rob) = adapt_student_epoch(teacher, student, data, cfg, opt, epoch)
        except AdaptationDiverged as exc:
            log.warning("%s", exc)
            dyn.diverged_at = epoch + 1
            student = exc.last_good
            break
        rec = dict(epoch=epoch + 1, lr=lr_at_epoch(cfg.schedule, epoch),
                   loss_acc_term=acc, loss_rob_term=rob,
                   clean_acc=float("nan"), robust_acc=float("nan"), teacher_clean_acc=float("nan"))
        if evaluate:
            rec["clean_acc"] = clean_accuracy(student, evalset)
            rec["robust_acc"] = robust_accuracy(student, evalset, "pgd", cfg.eval_threat, seed=cfg.seed)
            rec["teacher_clean_acc"] = clean_accuracy(teacher, evalset)
        dyn.append(**rec)
        log.info("epoch %d lr=%.2e acc=%.4f rob=%.4f clean=%.3f robust=%.3f teacher=%.3f",
                 rec["epoch"], rec["lr"], acc, rob, rec["clean_acc"], rec["robust_acc"],
                 rec["teacher_clean_acc"])
    return student, teacher, dyn
