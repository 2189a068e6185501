"""L-infinity attacks: PGD with pluggable objectives and a score-based square search."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import forward
from .objectives import ce_loss, kl_divergence, kl_loss, softmax

EPS_DEFAULT = 8 / 255
ALPHA_DEFAULT = 2 / 255


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    epsilon: float = EPS_DEFAULT
    alpha: float = ALPHA_DEFAULT
    steps: int = 5
    init: str = "none"
    value_box: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epsilon > 0 and self.alpha > 2 * self.epsilon:
            raise ValueError("alpha must not exceed 2*epsilon")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.init not in ("none", "uniform_ball"):
            raise ValueError(f"unknown init {self.init!r}")
        lo, hi = self.value_box
        if not lo < hi:
            raise ValueError("value_box low must be < high")

    def replace(self, **kw):
        vals = dict(epsilon=self.epsilon, alpha=self.alpha, steps=self.steps,
                    init=self.init, value_box=self.value_box)
        vals.update(kw)
        return ThreatModel(**vals)


TRAIN_THREAT = ThreatModel()
EVAL_THREAT = ThreatModel(steps=20, init="uniform_ball")


def sample_rngs(seed, indices):
    """One generator per sample, keyed on (seed, sample index)."""
    return [np.random.default_rng([int(seed), int(i)]) for i in indices]


def project_linf_box(x_hat, x, tm):
    """Clamp ``x_hat`` into the epsilon-ball around ``x`` intersected with the value box."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise T.ShapeError("project_linf_box", f"{x_hat.shape} vs {x.shape}")
    lo, hi = tm.value_box
    out = np.clip(x_hat, x - tm.epsilon, x + tm.epsilon)
    return np.clip(out, lo, hi)


@dataclass
class AttackObjective:
    """Per-batch attack objective with references frozen before the loop.

    ``kind`` is one of ``ce_true_label`` (needs ``labels``),
    ``kl_from_student_clean`` or ``kl_from_teacher_clean`` (need
    ``reference`` probabilities).
    """

    kind: str
    labels: np.ndarray = None
    reference: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "ce_true_label":
            if self.labels is None:
                raise ValueError("ce_true_label needs labels")
        elif self.kind in ("kl_from_student_clean", "kl_from_teacher_clean"):
            if self.reference is None:
                raise ValueError(f"{self.kind} needs reference probabilities")
            self.reference = np.array(self.reference, dtype=np.float64)
            self.reference.flags.writeable = False
        else:
            raise ValueError(f"unknown attack objective {self.kind!r}")

    def per_sample_sum(self, logits):
        """Sum over the batch, so input gradients stay per-sample."""
        n = logits.shape[0]
        if self.kind == "ce_true_label":
            return T.mul(ce_loss(logits, self.labels), n)
        return T.mul(kl_loss(self.reference, logits), n)

    def values(self, logits):
        """Per-sample objective values from a logits array."""
        z = np.asarray(logits)
        if self.kind == "ce_true_label":
            shifted = z - z.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            return lse - shifted[np.arange(len(z)), self.labels]
        return kl_divergence(self.reference, softmax(z))


def random_start(x, tm, rngs):
    if tm.init == "none" or tm.epsilon == 0:
        return np.array(x, dtype=np.float64)
    noise = np.stack([r.uniform(-tm.epsilon, tm.epsilon, size=x.shape[1:]) for r in rngs])
    return project_linf_box(x + noise, x, tm)


def pgd_attack(model, x, obj, tm, seed=0, indices=None):
    """Sign-gradient PGD on ``obj`` against ``model`` in frozen_eval mode.

    ``indices`` identify samples for per-sample random starts, so attacking a
    batch equals attacking its samples one by one.
    """
    x = np.asarray(x, dtype=np.float64)
    if indices is None:
        indices = np.arange(len(x))
    x_adv = random_start(x, tm, sample_rngs(seed, indices))
    if tm.epsilon == 0:
        return x_adv
    for _ in range(tm.steps):
        with T.Tape() as tape:
            xt = tape.watch(T.Tensor(x_adv))
            loss = obj.per_sample_sum(forward(model, xt, "frozen_eval"))
        (g,) = tape.backprop(loss, [xt])
        if not np.all(np.isfinite(g)):
            raise AttackError("non-finite input gradient during PGD")
        x_adv = project_linf_box(x_adv + tm.alpha * np.sign(g), x, tm)
    return x_adv


def margin_loss(logits, y):
    """max_{j != y} z_j - z_y; positive means misclassified."""
    z = np.array(logits, dtype=np.float64)
    rows = np.arange(len(z))
    true = z[rows, y].copy()
    z[rows, y] = -np.inf
    return z.max(axis=1) - true


def _square_fraction(i, budget):
    if budget <= 1:
        return 0.1
    return 0.1 + (0.01 - 0.1) * i / (budget - 1)


def square_attack(model, x, y, tm, query_budget, seed=0, indices=None):
    """Black-box random square search using forward passes only.

    Starts from random vertical stripes at +-epsilon; each query proposes a
    square patch (side from a fraction decaying 0.1 -> 0.01 of the image
    area) set to a random per-channel +-epsilon and keeps it when the margin
    loss increases. One query per sample per iteration; the initial
    evaluation is not counted.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if indices is None:
        indices = np.arange(len(x))
    rngs = sample_rngs(seed, indices)
    eps = tm.epsilon
    spatial = x.shape[2:] if x.ndim == 4 else None
    stripes = []
    for r, xi in zip(rngs, x):
        if spatial is None:
            stripes.append(r.choice([-eps, eps], size=xi.shape))
        else:
            c, h, w = xi.shape
            stripes.append(np.broadcast_to(r.choice([-eps, eps], size=(c, 1, w)), (c, h, w)).copy())
    x_adv = project_linf_box(x + np.stack(stripes), x, tm)
    if query_budget <= 0 or eps == 0:
        return x_adv
    best = margin_loss(forward(model, x_adv).values, y)
    for it in range(query_budget):
        active = np.flatnonzero(best <= 0)
        if active.size == 0:
            break
        frac = _square_fraction(it, query_budget)
        cand = x_adv[active].copy()
        for row, i in enumerate(active):
            r = rngs[i]
            if spatial is None:
                d = cand[row].size
                m = max(1, int(round(frac * d)))
                pos = r.choice(d, size=m, replace=False)
                flat = cand[row].reshape(-1)
                flat[pos] = x[i].reshape(-1)[pos] + r.choice([-eps, eps], size=m)
            else:
                c, h, w = x[i].shape
                s = min(h, w, max(1, int(round(np.sqrt(frac * h * w)))))
                top = r.integers(0, h - s + 1)
                left = r.integers(0, w - s + 1)
                signs = r.choice([-eps, eps], size=(c, 1, 1))
                cand[row, :, top:top + s, left:left + s] = x[i, :, top:top + s, left:left + s] + signs
        cand = project_linf_box(cand, x[active], tm)
        score = margin_loss(forward(model, cand).values, y[active])
        better = score > best[active]
        x_adv[active[better]] = cand[better]
        best[active[better]] = score[better]
    return x_adv


def make_objective(cfg, teacher, student, x, y=None):
    """The attack objective matching ``cfg.method``'s inner maximization."""
    cfg.check_labels(y)
    if cfg.method == "pgd_at":
        return AttackObjective("ce_true_label", labels=np.asarray(y))
    if cfg.method == "tgra":
        return AttackObjective("kl_from_teacher_clean", reference=softmax(forward(teacher, x).values))
    return AttackObjective("kl_from_student_clean", reference=softmax(forward(student, x).values))


def craft_inner_max(cfg, teacher, student, x, y, tm, seed=0, indices=None, q=None):
    """Inner maximizer for the method; ``q`` optionally supplies teacher probs."""
    if cfg.method == "tgra" and q is not None:
        cfg.check_labels(y)
        obj = AttackObjective("kl_from_teacher_clean", reference=q)
    else:
        obj = make_objective(cfg, teacher, student, x, y)
    return pgd_attack(student, x, obj, tm, seed, indices)
