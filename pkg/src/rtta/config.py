"""Experiment configuration: a flat ``key = value`` format with ``[section]`` headers.

Every key has a documented default, so an empty file is a complete config.
Lines starting with ``#`` or ``;`` are comments. Lists are comma separated;
floats may be written as fractions such as ``8/255``. Parsing validates the
whole document, including cross-field invariants, before returning.
"""
from dataclasses import dataclass, field
from fractions import Fraction

from .adaptation import TEACHER_POLICIES, AdaptationConfig, LrSchedule
from .attacks import ThreatModel
from .corruptions import SEVERITY_TABLE, CorruptionSpec
from .data import SplitSpec
from .evaluation import ATTACKS
from .models import BN_MODES, ModelSpec
from .objectives import METHODS, MethodConfig

SWEEP_AXES = ("beta", "severity", "split")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based, 0 when not tied to a line."""

    def __init__(self, message, line=0, key=""):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.key = key
        self.detail = message


def _float(s):
    try:
        return float(Fraction(s.strip())) if "/" in s else float(s)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"expected a number, got {s!r}") from None


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _bool(s):
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _list(item):
    def parse(s):
        return tuple(item(p.strip()) for p in s.split(",") if p.strip())
    parse.item = item
    return parse


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _str(s):
    return s


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (_int, 0),
        "out": (_str, "runs"),
    },
    "data": {
        "num_classes": (_int, 10),
        "samples_per_class": (_int, 100),
        "target_samples_per_class": (_int, 200),
        "image_extent": (_int, 8),
        "channels": (_int, 3),
        "amplitude": (_float, 0.12),
        "texture": (_float, 0.1),
        "fragile": (_float, 0.03),
        "template_seed": (_int, 0),
        "target_path": (_str, ""),
    },
    "model": {
        "architecture": (_choice("cnn", "mlp"), "cnn"),
        "widths": (_list(_int), (8, 16)),
        "checkpoint": (_str, ""),
    },
    "pretrain": {
        "epochs": (_int, 15),
        "lr": (_float, 0.05),
        "batch_size": (_int, 64),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 5e-4),
    },
    "corruption": {
        "severity": (_int, 2),
    },
    "split": {
        "fractions": (_list(_float), (0.5, 0.5)),
        "stratified": (_bool, True),
    },
    "attack": {
        "epsilon": (_float, 8 / 255),
        "alpha": (_float, 2 / 255),
        "steps": (_int, 5),
        "init": (_choice("none", "uniform_ball"), "none"),
    },
    "evaluation": {
        "epsilon": (_float, 8 / 255),
        "alpha": (_float, 2 / 255),
        "steps": (_int, 20),
        "init": (_choice("none", "uniform_ball"), "uniform_ball"),
        "attacks": (_list(_choice(*ATTACKS)), ("pgd",)),
        "query_budget": (_int, 200),
        "eval_subset": (_int, 512),
    },
    "adaptation": {
        "method": (_choice(*METHODS), "tgra"),
        "beta": (_float, 6.0),
        "epochs": (_int, 30),
        "batch_size": (_int, 64),
        "lr": (_float, 1e-3),
        "decay_epochs": (_list(_int), (10, 25, 30)),
        "decay_factor": (_float, 0.1),
        "momentum": (_float, 0.9),
        "weight_decay": (_float, 0.0),
        "teacher_policy": (_choice(*TEACHER_POLICIES), "bn_parallel"),
        "teacher_bn_momentum": (_float, 0.1),
        "student_bn_mode": (_choice(*BN_MODES), "train"),
    },
    "sweep": {
        "axis": (_choice(*SWEEP_AXES), "beta"),
        "methods": (_list(_choice(*METHODS)), ("trades_u", "tgra")),
        "betas": (_list(_float), (6.0, 12.0)),
        "severities": (_list(_int), (0, 1, 2)),
        "fractions": (_list(_float), (0.1, 0.5, 0.9)),
        "eval_fraction": (_float, 0.1),
    },
}


def defaults():
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


@dataclass
class ExperimentConfig:
    """All settings of one run, keyed ``values[section][key]``."""

    values: dict = field(default_factory=defaults)
    lines: dict = field(default_factory=dict, compare=False)  # "section.key" -> source line

    def __getitem__(self, dotted):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    # builders for the module-level configuration objects

    def model_spec(self):
        d, m = self.values["data"], self.values["model"]
        shape = (d["channels"], d["image_extent"], d["image_extent"])
        if m["architecture"] == "cnn":
            return ModelSpec.cnn(m["widths"], d["num_classes"], shape)
        flat = shape[0] * shape[1] * shape[2]
        return ModelSpec("mlp", (flat, *m["widths"], d["num_classes"]), d["num_classes"], shape)

    def corruption_spec(self):
        return CorruptionSpec.for_severity(self.values["corruption"]["severity"], self.seed)

    def split_spec(self):
        s = self.values["split"]
        return SplitSpec(s["fractions"], self.seed, s["stratified"])

    def _threat(self, sec):
        t = self.values[sec]
        return ThreatModel(t["epsilon"], t["alpha"], t["steps"], t["init"])

    def threat(self):
        return self._threat("attack")

    def eval_threat(self):
        return self._threat("evaluation")

    def adaptation_config(self):
        a = self.values["adaptation"]
        return AdaptationConfig(
            method_cfg=MethodConfig(a["method"], a["beta"]),
            threat=self.threat(),
            epochs=a["epochs"],
            batch_size=a["batch_size"],
            schedule=LrSchedule(a["lr"], a["decay_epochs"], a["decay_factor"]),
            teacher_policy=a["teacher_policy"],
            seed=self.seed,
            momentum=a["momentum"],
            weight_decay=a["weight_decay"],
            teacher_bn_momentum=a["teacher_bn_momentum"],
            student_bn_mode=a["student_bn_mode"],
            eval_threat=self.eval_threat(),
            eval_subset=self.values["evaluation"]["eval_subset"],
        )


def _nonneg(v):
    return v >= 0


def _pos(v):
    return v > 0


# simple per-key range checks: "section.key" -> (predicate, description)
RANGES = {
    "run.seed": (_nonneg, ">= 0"),
    "data.num_classes": (lambda v: v >= 2, ">= 2"),
    "data.samples_per_class": (_pos, "> 0"),
    "data.target_samples_per_class": (lambda v: v >= 2, ">= 2"),
    "data.image_extent": (lambda v: 1 <= v <= 32, "in 1..32"),
    "data.channels": (_pos, "> 0"),
    "data.amplitude": (_nonneg, ">= 0"),
    "data.texture": (_nonneg, ">= 0"),
    "data.fragile": (_nonneg, ">= 0"),
    "model.widths": (lambda v: len(v) > 0 and min(v) > 0, "a non-empty list of positive integers"),
    "pretrain.epochs": (_nonneg, ">= 0"),
    "pretrain.lr": (_pos, "> 0"),
    "pretrain.batch_size": (lambda v: v >= 2, ">= 2"),
    "pretrain.momentum": (lambda v: 0 <= v < 1, "in [0, 1)"),
    "pretrain.weight_decay": (_nonneg, ">= 0"),
    "corruption.severity": (lambda v: v in SEVERITY_TABLE, "in 0..2"),
    "evaluation.query_budget": (_pos, "> 0"),
    "evaluation.eval_subset": (_pos, "> 0"),
    "adaptation.beta": (_nonneg, ">= 0"),
    "adaptation.epochs": (_nonneg, ">= 0"),
    "adaptation.teacher_bn_momentum": (lambda v: 0 < v <= 1, "in (0, 1]"),
    "sweep.betas": (lambda v: len(v) > 0 and min(v) >= 0, "a non-empty list of values >= 0"),
    "sweep.severities": (lambda v: len(v) > 0 and all(s in SEVERITY_TABLE for s in v), "values in 0..2"),
    "sweep.fractions": (lambda v: len(v) > 0 and all(0 < f <= 1 for f in v), "values in (0, 1]"),
    "sweep.methods": (lambda v: len(v) > 0, "non-empty"),
    "sweep.eval_fraction": (lambda v: 0 < v < 1, "in (0, 1)"),
    "evaluation.attacks": (lambda v: len(v) > 0, "non-empty"),
}

# cross-field invariants, checked by constructing the module objects
_BUILDERS = (
    ("model.widths", ExperimentConfig.model_spec),
    ("split.fractions", ExperimentConfig.split_spec),
    ("attack.alpha", ExperimentConfig.threat),
    ("evaluation.alpha", ExperimentConfig.eval_threat),
    ("adaptation.batch_size", ExperimentConfig.adaptation_config),
)


def _set(cfg, dotted, raw, line):
    if "." not in dotted:
        raise ConfigError(f"expected section.key, got {dotted!r}", line, dotted)
    sec, key = dotted.split(".", 1)
    if sec not in SCHEMA:
        raise ConfigError(f"unknown section [{sec}]", line, dotted)
    if key not in SCHEMA[sec]:
        raise ConfigError(f"unknown key {key!r} in [{sec}]", line, dotted)
    parser = SCHEMA[sec][key][0]
    try:
        value = parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{dotted}: {exc}", line, dotted) from None
    check = RANGES.get(dotted)
    if check and not check[0](value):
        raise ConfigError(f"{dotted} must be {check[1]}, got {raw.strip()!r}", line, dotted)
    cfg.values[sec][key] = value
    cfg.lines[dotted] = line


def validate(cfg):
    for dotted, build in _BUILDERS:
        try:
            build(cfg)
        except ValueError as exc:
            raise ConfigError(str(exc), cfg.lines.get(dotted, 0), dotted) from None
    return cfg


def parse_config(text, overrides=()):
    """Parse config ``text`` then apply ``section.key=value`` overrides.

    Errors carry the offending line number; overrides are reported as
    ``--set`` items instead.
    """
    cfg = ExperimentConfig()
    section = None
    seen = set()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", n)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", n)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", n)
        if section is None:
            raise ConfigError("key outside of any [section]", n)
        key, value = line.split("=", 1)
        dotted = f"{section}.{key.strip()}"
        if dotted in seen:
            raise ConfigError(f"duplicate key {dotted}", n, dotted)
        seen.add(dotted)
        _set(cfg, dotted, value, n)
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        try:
            _set(cfg, dotted.strip(), value, 0)
        except ConfigError as exc:
            raise ConfigError(f"--set #{i}: {exc.detail}", 0, exc.key) from None
    return validate(cfg)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(cfg, header=""):
    """Render every key, defaults included; ``parse_config`` reads it back equal."""
    out = [f"# {line}" for line in header.splitlines()]
    for sec, keys in SCHEMA.items():
        if out:
            out.append("")
        out.append(f"[{sec}]")
        out += [f"{key} = {_format(cfg.values[sec][key])}" for key in keys]
    return "\n".join(out) + "\n"
