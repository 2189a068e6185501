"""Clean/robust accuracy, experiment sweeps and report files."""
import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import EVAL_THREAT, AttackObjective, pgd_attack, square_attack
from .fileformat import atomic_write
from .models import predict

REPORT_COLUMNS = ("method", "beta", "severity", "clean_acc", "attack", "robust_acc", "n", "seed")
ATTACKS = ("pgd", "square")


def _require_nonempty(eval_set):
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")


def clean_accuracy(model, eval_set):
    """Fraction of correctly classified samples (frozen BN, lowest-index argmax)."""
    _require_nonempty(eval_set)
    return float(np.mean(predict(model, eval_set.inputs) == eval_set.labels))


def attack_inputs(model, x, y, attack, tm, seed, indices, query_budget=200):
    if attack == "pgd":
        return pgd_attack(model, x, AttackObjective("ce_true_label", labels=y), tm, seed, indices)
    if attack == "square":
        return square_attack(model, x, y, tm, query_budget, seed, indices)
    raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")


def robust_accuracy(model, eval_set, attack="pgd", tm=EVAL_THREAT, seed=0, batch_size=256, query_budget=200):
    """Fraction of all samples still correct after the attack.

    Samples misclassified before the attack count as failures. Each sample's
    randomness is keyed on ``(seed, sample index)``.
    """
    _require_nonempty(eval_set)
    correct = 0
    for start in range(0, len(eval_set), batch_size):
        idx = np.arange(start, min(start + batch_size, len(eval_set)))
        x, y = eval_set.inputs[idx], eval_set.labels[idx]
        clean_ok = predict(model, x) == y
        x_adv = attack_inputs(model, x, y, attack, tm, seed, idx, query_budget)
        correct += int(np.sum(clean_ok & (predict(model, x_adv) == y)))
    return correct / len(eval_set)


@dataclass
class EvalReport:
    severity: int
    clean_acc: float
    robust_acc: dict
    n_samples: int
    seed: int
    method: str = ""
    beta: float = float("nan")

    def __post_init__(self):
        for name, v in self.robust_acc.items():
            if not 0 <= v <= 1:
                raise ValueError(f"robust accuracy for {name} outside [0, 1]")

    def rows(self):
        return [dict(method=self.method, beta=self.beta, severity=self.severity, clean_acc=self.clean_acc,
                     attack=a, robust_acc=v, n=self.n_samples, seed=self.seed)
                for a, v in self.robust_acc.items()]


def evaluate(model, eval_set, attacks=("pgd",), tm=EVAL_THREAT, seed=0, method="", beta=float("nan"),
             query_budget=200):
    return EvalReport(
        severity=int(eval_set.severity),
        clean_acc=clean_accuracy(model, eval_set),
        robust_acc={a: robust_accuracy(model, eval_set, a, tm, seed, query_budget=query_budget) for a in attacks},
        n_samples=len(eval_set),
        seed=seed,
        method=method,
        beta=beta,
    )


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def reports_to_jsonl(reports):
    return "".join(json.dumps(row) + "\n" for rep in reports for row in rep.rows())


def save_reports(reports, stem):
    atomic_write(f"{stem}.csv", reports_to_csv(reports))
    atomic_write(f"{stem}.jsonl", reports_to_jsonl(reports))


def read_report_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    casts = dict(beta=float, severity=int, clean_acc=float, robust_acc=float, n=int, seed=int)
    return [{k: casts.get(k, str)(v) for k, v in r.items()} for r in rows]


@dataclass
class SweepTable:
    axis: str
    cells: dict = field(default_factory=dict)  # axis value -> {method: EvalReport}
    eval_checksum: str = ""

    def reports(self):
        return [rep for per in self.cells.values() for rep in per.values()]

    def clean_spread(self, method):
        """max - min clean accuracy across the axis for one method."""
        vals = [per[method].clean_acc for per in self.cells.values() if method in per]
        return max(vals) - min(vals)


def dynamics_emit(dyn, stem):
    """Write ``stem.csv`` and ``stem.jsonl`` for a non-empty dynamics log."""
    if len(dyn) == 0:
        raise ValueError("dynamics log is empty")
    dyn.save(stem)
    return f"{stem}.csv", f"{stem}.jsonl"


def _final_report(pretrained, target, eval_set, cfg, attacks, method):
    from .adaptation import run_adaptation

    student, _, _ = run_adaptation(pretrained, target, eval_set, cfg, evaluate=False)
    return evaluate(student, eval_set, attacks, cfg.eval_threat, cfg.seed, method, cfg.method_cfg.beta)


def beta_sweep(pretrained, target, eval_set, methods, betas, base_cfg, attacks=("pgd",)):
    """One full adaptation per (method, beta) cell, evaluated on a shared eval set."""
    table = SweepTable("beta", eval_checksum=eval_set.checksum())
    for beta in betas:
        per = {}
        for method in methods:
            cfg = replace(base_cfg, method_cfg=replace(base_cfg.method_cfg, method=method, beta=beta))
            per[method] = _final_report(pretrained, target, eval_set, cfg, attacks, method)
        table.cells[beta] = per
    return table


def severity_sweep(pretrained, source, methods, severities, base_cfg, split_seed=0, attacks=("pgd",)):
    """Adapt on half of each corrupted target set and evaluate on the other half."""
    from .data import SplitSpec, make_target_domain, split_dataset

    table = SweepTable("severity")
    for sev in severities:
        tgt = make_target_domain(source, sev, seed=base_cfg.seed)
        adapt_part, eval_part = split_dataset(tgt, SplitSpec((0.5, 0.5), split_seed))
        per = {}
        for method in methods:
            cfg = replace(base_cfg, method_cfg=replace(base_cfg.method_cfg, method=method))
            per[method] = _final_report(pretrained, adapt_part, eval_part, cfg, attacks, method)
        table.cells[sev] = per
    return table


def split_sweep(pretrained, target, methods, adapt_fractions, base_cfg, eval_fraction=0.1, attacks=("pgd",)):
    """Data-availability study: adapt on a fraction, evaluate on a fixed held-out fraction."""
    from .data import SplitSpec, split_dataset

    rest, eval_set = split_dataset(target, SplitSpec((1 - eval_fraction, eval_fraction), base_cfg.seed))
    table = SweepTable("split_fraction", eval_checksum=eval_set.checksum())
    for frac in adapt_fractions:
        share = frac / (1 - eval_fraction)
        adapt_part = rest if share >= 1 - 1e-12 else split_dataset(
            rest, SplitSpec((share, 1 - share), base_cfg.seed))[0]
        per = {}
        for method in methods:
            cfg = replace(base_cfg, method_cfg=replace(base_cfg.method_cfg, method=method))
            per[method] = _final_report(pretrained, adapt_part, eval_set, cfg, attacks, method)
        table.cells[frac] = per
    return table
