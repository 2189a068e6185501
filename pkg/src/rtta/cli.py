"""Command-line experiment runner.

``rtta <cmd> --config <path> [--set section.key=value]... [--seed n] [--out dir]``

Exit status: 0 success, 1 configuration or input error, 2 runtime or
numerical failure, 3 verification failure. Every run directory receives the
effective configuration and the toolkit version.
"""
import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import replace

from . import __version__
from . import tensor as T
from .adaptation import AdaptationDiverged, pretrain_source, run_adaptation
from .attacks import AttackError
from .config import SWEEP_AXES, ConfigError, emit_config, parse_config
from .data import generate_synthetic, load_dataset, make_target_domain, split_dataset
from .evaluation import beta_sweep, evaluate, save_reports, severity_sweep, split_sweep
from .fileformat import FormatError, atomic_write
from .models import load_checkpoint, save_checkpoint
from .objectives import VerificationError
from .verify import verify_proposition

COMMANDS = ("pretrain", "adapt", "eval", "sweep", "dynamics", "verify-prop")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("rtta")


class InputError(RuntimeError):
    """A referenced input file is missing or unusable."""


class RunFailed(RuntimeError):
    """The run completed but reports a numerical failure."""


def version_string():
    """``rtta <version>`` plus ``git describe`` output when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                              capture_output=True, text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"rtta {__version__}" + (f" ({desc})" if desc else "")


# ---------------------------------------------------------------------------
# experiment building blocks shared by the commands


def _synthetic(cfg, per_class, seed):
    d = cfg.values["data"]
    return generate_synthetic(d["num_classes"], per_class, d["image_extent"], seed=seed,
                              amplitude=d["amplitude"], texture=d["texture"], fragile=d["fragile"],
                              channels=d["channels"], template_seed=d["template_seed"])


def source_dataset(cfg):
    return _synthetic(cfg, cfg.values["data"]["samples_per_class"], [cfg.seed, 0])


def clean_target(cfg):
    """Uncorrupted target-domain draw: same classes as the source, fresh samples."""
    return _synthetic(cfg, cfg.values["data"]["target_samples_per_class"], [cfg.seed, 1])


def target_dataset(cfg, severity=None):
    path = cfg.values["data"]["target_path"]
    if path:
        return _load(load_dataset, path, "target dataset")
    sev = cfg.values["corruption"]["severity"] if severity is None else severity
    return make_target_domain(clean_target(cfg), sev, cfg.seed)


def target_splits(cfg, severity=None):
    """(adaptation set, evaluation set) from the configured split."""
    parts = split_dataset(target_dataset(cfg, severity), cfg.split_spec())
    if len(parts) != 2:
        raise ConfigError("split.fractions must have exactly two entries (adapt, eval)", 0, "split.fractions")
    return parts


def pretrain(cfg):
    p = cfg.values["pretrain"]
    return pretrain_source(cfg.model_spec(), source_dataset(cfg), epochs=p["epochs"], seed=cfg.seed,
                           lr=p["lr"], batch_size=p["batch_size"], momentum=p["momentum"],
                           weight_decay=p["weight_decay"])


def _load(loader, path, what):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    try:
        return loader(path)
    except FormatError as exc:
        raise InputError(f"{what} {path}: {exc}") from exc


def pretrained_model(cfg):
    path = cfg.values["model"]["checkpoint"]
    if path:
        ckpt = _load(load_checkpoint, path, "checkpoint")
        if ckpt.spec != cfg.model_spec():
            raise InputError(f"checkpoint {path} does not match the configured model")
        return ckpt
    log.info("no model.checkpoint given; pretraining from the [pretrain] section")
    return pretrain(cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg, out, args):
    ckpt = pretrain(cfg)
    path = os.path.join(out, "pretrained.ckpt")
    save_checkpoint(ckpt, path)
    print(f"wrote {path}")


def _save_dynamics(dyn, stem):
    dyn.save(stem)
    print(f"wrote {stem}.csv and {stem}.jsonl")


def cmd_adapt(cfg, out, args):
    pretrained = pretrained_model(cfg)
    adapt_set, eval_set = target_splits(cfg)
    student, teacher, dyn = run_adaptation(pretrained, adapt_set, eval_set, cfg.adaptation_config())
    save_checkpoint(student, os.path.join(out, "student.ckpt"))
    save_checkpoint(teacher, os.path.join(out, "teacher.ckpt"))
    print(f"wrote {os.path.join(out, 'student.ckpt')} and teacher.ckpt")
    _save_dynamics(dyn, os.path.join(out, "dynamics"))
    if dyn.diverged_at is not None:
        raise RunFailed(f"adaptation diverged at epoch {dyn.diverged_at}; last good student saved")


def cmd_eval(cfg, out, args):
    path = cfg.values["model"]["checkpoint"]
    if not path:
        raise ConfigError("eval needs model.checkpoint", 0, "model.checkpoint")
    model = pretrained_model(cfg)
    _, eval_set = target_splits(cfg)
    a = cfg.values["adaptation"]
    rep = evaluate(model, eval_set, cfg.values["evaluation"]["attacks"], cfg.eval_threat(), cfg.seed,
                   method=a["method"], beta=a["beta"], query_budget=cfg.values["evaluation"]["query_budget"])
    save_reports([rep], os.path.join(out, "report"))
    for row in rep.rows():
        print(f"clean {row['clean_acc']:.4f}  {row['attack']} {row['robust_acc']:.4f}  n={row['n']}")


def cmd_sweep(cfg, out, args):
    axis = args.axis or cfg.values["sweep"]["axis"]
    s = cfg.values["sweep"]
    base = cfg.adaptation_config()
    attacks = cfg.values["evaluation"]["attacks"]
    pretrained = pretrained_model(cfg)
    if axis == "beta":
        adapt_set, eval_set = target_splits(cfg)
        table = beta_sweep(pretrained, adapt_set, eval_set, s["methods"], s["betas"], base, attacks)
    elif axis == "severity":
        clean = clean_target(cfg)
        table = severity_sweep(pretrained, clean, s["methods"], s["severities"], base, cfg.seed, attacks)
    else:
        table = split_sweep(pretrained, target_dataset(cfg), s["methods"], s["fractions"], base,
                            s["eval_fraction"], attacks)
    save_reports(table.reports(), os.path.join(out, f"sweep_{axis}"))
    for m in s["methods"]:
        print(f"{m}: clean-accuracy spread over {axis} = {table.clean_spread(m):.4f}")


def cmd_dynamics(cfg, out, args):
    pretrained = pretrained_model(cfg)
    adapt_set, eval_set = target_splits(cfg)
    base = cfg.adaptation_config()
    diverged = []
    for m in cfg.values["sweep"]["methods"]:
        c = replace(base, method_cfg=replace(base.method_cfg, method=m))
        _, _, dyn = run_adaptation(pretrained, adapt_set, eval_set, c)
        _save_dynamics(dyn, os.path.join(out, f"dynamics_{m}"))
        if dyn.diverged_at is not None:
            diverged.append(f"{m} at epoch {dyn.diverged_at}")
    if diverged:
        raise RunFailed("diverged: " + ", ".join(diverged))


def cmd_verify_prop(cfg, out, args):
    rep = verify_proposition(n_cases=args.cases, seed=cfg.seed)
    text = "\n".join(rep.lines()) + "\n"
    atomic_write(os.path.join(out, "verify_prop.txt"), text)
    sys.stdout.write(text)
    if not rep.passed:
        raise VerificationError("; ".join(rep.failures))


HANDLERS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "dynamics": cmd_dynamics,
    "verify-prop": cmd_verify_prop,
}


def build_parser():
    p = argparse.ArgumentParser(prog="rtta", description="Robust test-time adaptation experiments.")
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("cmd", choices=COMMANDS)
    p.add_argument("--config", help="config file; omitted means all defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", help="run directory; overrides run.out")
    p.add_argument("--axis", choices=SWEEP_AXES, help="sweep axis; overrides sweep.axis")
    p.add_argument("--cases", type=int, default=100, help="verify-prop: number of seeded cases")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _diagnose(kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")


def load_config(args):
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    return parse_config(text, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = cfg.values["run"]["out"]
        os.makedirs(out, exist_ok=True)
        version = version_string()
        atomic_write(os.path.join(out, "config.ini"), emit_config(cfg, f"{version}\ncommand: {args.cmd}"))
        atomic_write(os.path.join(out, "VERSION"), version + "\n")
        HANDLERS[args.cmd](cfg, out, args)
    except ConfigError as exc:
        _diagnose("config", exc.detail, line=exc.line, key=exc.key)
        return EXIT_CONFIG
    except InputError as exc:
        _diagnose("input", str(exc))
        return EXIT_CONFIG
    except VerificationError as exc:
        _diagnose("verification", str(exc))
        return EXIT_VERIFY
    except (RunFailed, AdaptationDiverged, AttackError, T.NonFiniteError, T.ShapeError, OSError, ValueError) as exc:
        _diagnose("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
