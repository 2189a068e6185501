"""Numerical verification: finite-difference gradient checks and the
reference/adversarial-side decomposition of the self-consistency regularizer.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import ModelSpec, build_model
from .objectives import (
    METHODS, MethodConfig, VerificationError, composite_loss,
    grad_decompose_self, grad_decompose_teach, r_self, r_teach,
)


def rel_err(a, b, floor=1e-8):
    """Relative error ``|a - b| / max(|a|, |b|, floor)`` over flattened arrays."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def grad_map_rel_err(g1, g2):
    a = np.concatenate([np.ravel(g1[k]) for k in sorted(g1)])
    b = np.concatenate([np.ravel(g2[k]) for k in sorted(g1)])
    return rel_err(a, b)


def autodiff_vs_fd(build, arrays, h=1e-5):
    """Compare tape gradients of ``build(tensors)`` with central differences.

    ``build`` maps a dict of tensors to a scalar tensor; ``arrays`` are the
    evaluation point. Returns the relative error over all coordinates.
    """
    with T.Tape() as tape:
        ts = {k: tape.watch(T.Tensor(v)) for k, v in arrays.items()}
        loss = build(ts)
    ad = tape.backprop(loss, ts)
    fd = T.finite_difference_grad(lambda p: build({k: T.Tensor(v) for k, v in p.items()}).item(), arrays, h)
    return grad_map_rel_err(ad, fd)


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, v + np.sign(v + 1e-300) * 2 * margin, v)


def _primitive_affine(rng):
    return (lambda t: T.sum(T.mul(T.affine(t["x"], t["w"], t["b"]), t["c"])),
            {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)),
             "b": rng.normal(size=2), "c": rng.normal(size=(3, 2))})


def _primitive_conv2d(rng):
    return (lambda t: T.sum(T.mul(T.conv2d(t["x"], t["w"], t["b"], padding=1), t["c"])),
            {"x": rng.normal(size=(2, 2, 4, 4)), "w": rng.normal(size=(3, 2, 3, 3)),
             "b": rng.normal(size=3), "c": rng.normal(size=(2, 3, 4, 4))})


def _primitive_relu(rng):
    return (lambda t: T.sum(T.mul(T.relu(t["x"]), t["c"])),
            {"x": _away_from_zero(rng, (3, 4)), "c": rng.normal(size=(3, 4))})


def _primitive_batch_norm_train(rng):
    def build(t):
        out, _ = T.batch_norm(t["x"], t["g"], t["b"])
        return T.sum(T.mul(out, t["c"]))
    return build, {"x": rng.normal(size=(4, 3)), "g": rng.normal(size=3),
                   "b": rng.normal(size=3), "c": rng.normal(size=(4, 3))}


def _primitive_batch_norm_spatial(rng):
    def build(t):
        out, _ = T.batch_norm(t["x"], t["g"], t["b"])
        return T.sum(T.mul(out, t["c"]))
    return build, {"x": rng.normal(size=(2, 2, 2, 2)), "g": rng.normal(size=2),
                   "b": rng.normal(size=2), "c": rng.normal(size=(2, 2, 2, 2))}


def _primitive_batch_norm_eval(rng):
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

    def build(t):
        out, _ = T.batch_norm(t["x"], t["g"], t["b"], mean, var)
        return T.sum(T.mul(out, t["c"]))
    return build, {"x": rng.normal(size=(4, 3)), "g": rng.normal(size=3),
                   "b": rng.normal(size=3), "c": rng.normal(size=(4, 3))}


def _primitive_log_softmax(rng):
    return (lambda t: T.sum(T.mul(T.log_softmax(t["z"]), t["c"])),
            {"z": rng.normal(size=(3, 5)), "c": rng.normal(size=(3, 5))})


def _primitive_softmax(rng):
    return (lambda t: T.sum(T.mul(T.softmax(t["z"]), t["c"])),
            {"z": rng.normal(size=(3, 5)), "c": rng.normal(size=(3, 5))})


def _primitive_add_mul(rng):
    return (lambda t: T.sum(T.mul(T.add(t["a"], t["b"]), T.sub(t["a"], t["c"]))),
            {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "c": rng.normal(size=(3, 1))})


def _primitive_exp_log(rng):
    return (lambda t: T.sum(T.log(T.add(T.exp(t["a"]), 1.0))),
            {"a": rng.normal(size=(2, 3))})


def _primitive_reductions(rng):
    return (lambda t: T.sum(T.mul(T.mean(t["a"], axis=0), T.mean(t["a"], axis=0))),
            {"a": rng.normal(size=(3, 4))})


def _primitive_pool_reshape(rng):
    return (lambda t: T.sum(T.mul(T.flatten(T.avg_pool2(t["x"])), t["c"])),
            {"x": rng.normal(size=(2, 1, 4, 4)), "c": rng.normal(size=(2, 4))})


def _primitive_pick_clamp(rng):
    idx = rng.integers(0, 4, size=3)
    return (lambda t: T.sum(T.mul(T.pick(T.clamp_min(t["z"], -0.5), idx), t["c"])),
            {"z": _away_from_zero(rng, (3, 4)) - 0.5, "c": rng.normal(size=3)})


def _primitive_matmul(rng):
    return (lambda t: T.sum(T.mul(T.matmul(t["a"], t["b"]), t["c"])),
            {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3, 4)), "c": rng.normal(size=(2, 4))})


PRIMITIVE_CASES = {
    "affine": _primitive_affine,
    "conv2d": _primitive_conv2d,
    "relu": _primitive_relu,
    "batch_norm_train": _primitive_batch_norm_train,
    "batch_norm_spatial": _primitive_batch_norm_spatial,
    "batch_norm_eval": _primitive_batch_norm_eval,
    "log_softmax": _primitive_log_softmax,
    "softmax": _primitive_softmax,
    "add_sub_mul": _primitive_add_mul,
    "exp_log": _primitive_exp_log,
    "reductions": _primitive_reductions,
    "avg_pool2_flatten": _primitive_pool_reshape,
    "pick_clamp_min": _primitive_pick_clamp,
    "matmul": _primitive_matmul,
}


def primitive_max_rel_err(name, n_cases=100, seed=0):
    """Worst autodiff-vs-finite-difference relative error over seeded cases."""
    worst = 0.0
    for i in range(n_cases):
        build, arrays = PRIMITIVE_CASES[name](np.random.default_rng([seed, i]))
        worst = max(worst, autodiff_vs_fd(build, arrays))
    return worst


def composite_max_rel_err(method, n_cases=100, seed=0, beta=6.0):
    """Worst parameter-gradient error of a composite loss against finite differences."""
    cfg = MethodConfig(method, beta)
    worst = 0.0
    for i in range(n_cases):
        teacher, student, x, x_hat = tiny_setup(seed * 7919 + i)
        y = np.random.default_rng(i).integers(0, 3, size=len(x)) if cfg.supervised else None
        with T.Tape() as tape:
            params = {k: tape.watch(T.Tensor(v)) for k, v in student.params.items()}
            loss = composite_loss(cfg, teacher, student, x, x_hat, y, params)
        ad = tape.backprop(loss, params)
        fd = param_fd(student, lambda c: composite_loss(cfg, teacher, c, x, x_hat, y).item())
        worst = max(worst, grad_map_rel_err(ad, fd))
    return worst


def param_fd(ckpt, loss_fn, h=1e-5):
    """Finite-difference gradient of ``loss_fn(ckpt_with_params)`` over all parameters."""
    work = ckpt.copy()

    def fn(params):
        work.params = params
        return loss_fn(work)

    return T.finite_difference_grad(fn, ckpt.params, h)


def tiny_setup(seed, num_classes=3, dim=4, batch=2, eps=0.1):
    """A small MLP student plus a perturbed teacher and an (x, x_hat) pair.

    BN running statistics are randomized so frozen-eval BN is non-trivial.
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp((dim, 5, num_classes))
    student = build_model(spec, seed)
    for st in student.bn.values():
        st.running_mean = rng.normal(0, 0.2, st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape)
    teacher = student.copy()
    for k in teacher.params:
        teacher.params[k] = teacher.params[k] + rng.normal(0, 0.1, teacher.params[k].shape)
    x = rng.uniform(0, 1, size=(batch, dim))
    x_hat = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0, 1)
    return teacher, student, x, x_hat


@dataclass
class PropositionReport:
    n_cases: int
    max_self_residual: float
    max_teach_reference: float
    max_self_fd_rel_err: float
    max_teach_fd_rel_err: float
    reference_nonzero_fraction: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        out = [
            f"cases: {self.n_cases}",
            f"self decomposition max residual: {self.max_self_residual:.3e} (tol 1e-6)",
            f"teach reference-side max |grad|: {self.max_teach_reference:.3e} (must be 0)",
            f"self total vs finite differences max rel err: {self.max_self_fd_rel_err:.3e} (tol 1e-4)",
            f"teach total vs finite differences max rel err: {self.max_teach_fd_rel_err:.3e} (tol 1e-4)",
            f"reference side nonzero on {100 * self.reference_nonzero_fraction:.1f}% of cases",
        ]
        out += [f"failure: {f}" for f in self.failures]
        out.append(f"verify-prop: {status}")
        return out


def verify_proposition(n_cases=100, seed=0, fd_cases=10):
    """Check both gradient decompositions on ``n_cases`` seeded triples.

    The first ``fd_cases`` also compare total gradients to finite differences.
    """
    self_res, teach_ref, self_fd, teach_fd = [], [], [0.0], [0.0]
    nonzero = 0
    failures = []
    for i in range(n_cases):
        teacher, student, x, x_hat = tiny_setup(seed * 100003 + i)
        try:
            ds = grad_decompose_self(student, x, x_hat)
            dt = grad_decompose_teach(teacher, student, x, x_hat)
        except VerificationError as exc:
            failures.append(f"case {i}: {exc}")
            continue
        self_res.append(ds.residual())
        teach_ref.append(dt.reference_max_abs())
        if ds.reference_max_abs() > 1e-12:
            nonzero += 1
        if i < fd_cases:
            self_fd.append(grad_map_rel_err(ds.total, param_fd(student, lambda c: r_self(c, x, x_hat).item())))
            teach_fd.append(grad_map_rel_err(
                dt.total, param_fd(student, lambda c: r_teach(teacher, c, x, x_hat).item())))
    rep = PropositionReport(
        n_cases=n_cases,
        max_self_residual=max(self_res, default=float("inf")),
        max_teach_reference=max(teach_ref, default=float("inf")),
        max_self_fd_rel_err=max(self_fd),
        max_teach_fd_rel_err=max(teach_fd),
        reference_nonzero_fraction=nonzero / n_cases,
        failures=failures,
    )
    if rep.max_self_fd_rel_err >= 1e-4 or rep.max_teach_fd_rel_err >= 1e-4:
        rep.failures.append("finite-difference agreement above 1e-4")
    if rep.reference_nonzero_fraction < 0.9:
        rep.failures.append("reference-side term vanished on more than 10% of cases")
    return rep
