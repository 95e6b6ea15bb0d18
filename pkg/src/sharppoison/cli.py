"""Command-line entry point: ``sharppoison {craft,retrain,eval,landscape,run}``.

Results go to stdout as one JSON object. Failures exit nonzero after printing a
single JSON line ``{"error": <type>, "message": <text>}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, experiment, training
from .evaluation import eval_accuracy, eval_backdoor, eval_targeted
from .gradmatch import TriggerPatch, VictimSpec, craft_backdoor, craft_targeted
from .landscape import landscape_probe
from .poisons import PoisonSet
from .unlearnable import craft_untargeted

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, EXIT_USAGE)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _base_config(path, overrides: dict) -> experiment.ExperimentConfig:
    values = experiment.read_flat_config(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return experiment.ExperimentConfig.from_mapping(values)


# ---------------------------------------------------------------------------
# subcommands


def cmd_craft(args) -> dict:
    mode = args.mode
    cfg = _base_config(
        args.config,
        {
            "mode": mode,
            "sharp_rho": args.sharp_rho,
            "epsilon": args.epsilon,
            "ratio": args.ratio,
            "restarts": args.restarts,
            "steps": args.steps if mode in ("targeted", "backdoor") else None,
            "pgd_steps": args.steps if mode in ("error-min", "error-max") else None,
            "seed": args.seed,
        },
    )
    spec, train, test = experiment.prepare(cfg)
    tseed = experiment.trial_seed(cfg.seed, 0)
    if mode in ("targeted", "backdoor"):
        seed = experiment.case_seed(tseed, 0)
        surrogate = experiment._pretrain(cfg, spec, train, tseed)
        if mode == "targeted":
            victim, chosen = experiment.pick_victims(cfg, spec, surrogate, test, seed)
            poison = craft_targeted(spec, surrogate, train, victim, cfg.craft_config(seed))
            poison.info["victim"] = {"split": "test", "indices": chosen, "y_vic": victim.y_vic, "y_obj": victim.y_obj}
        else:
            victim, chosen = experiment.pick_backdoor_victims(cfg, train, seed)
            poison = craft_backdoor(spec, surrogate, train, victim, cfg.craft_config(seed), cfg.train_config(0))
            poison.info["victim"] = {
                "split": "train",
                "indices": chosen,
                "y_vic": victim.y_vic,
                "y_obj": victim.y_obj,
                "trigger": {"pattern": victim.trigger.pattern.tolist(), "anchor": list(victim.trigger.anchor)},
            }
    else:
        poison = craft_untargeted(spec, train, cfg.untargeted_config(tseed))
    poison.info["config"] = cfg.to_dict()
    manifest_path, data_path = poison.save(args.out)
    return {
        "manifest": str(manifest_path),
        "data": str(data_path),
        "mode": poison.mode,
        "poisons": len(poison),
        "epsilon": poison.epsilon,
        "max_abs_delta": float(np.max(np.abs(poison.deltas))) if len(poison) else 0.0,
    }


def _poison_and_config(path, config_path, overrides):
    if path:
        poison = PoisonSet.load(path)
        if "config" not in poison.info:
            raise CliError(f"{path}: perturbation manifest carries no experiment config")
        values = dict(poison.info["config"])
        if config_path:
            values.update(experiment.read_flat_config(config_path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return poison, experiment.ExperimentConfig.from_mapping(values)
    if not config_path:
        raise CliError("need --poison or --config")
    return None, _base_config(config_path, overrides)


def cmd_retrain(args) -> dict:
    poison, cfg = _poison_and_config(
        args.poison,
        args.config,
        {"schedule": args.schedule, "aug": args.aug, "optimizer": args.optimizer, "epochs": args.epochs, "lr": args.lr},
    )
    if args.schedule == "step" and args.epochs is not None and args.milestones is None:
        # keep the default milestones proportional when only the epoch count changes
        cfg = cfg.replace(milestones=(args.epochs // 2, 3 * args.epochs // 4))
    if args.milestones is not None:
        cfg = cfg.replace(milestones=tuple(int(m) for m in args.milestones.split(",") if m))
    spec, train, test = experiment.prepare(cfg)
    dataset = poison.apply(train) if poison is not None else train
    seed = args.seed if args.seed is not None else (poison.seed if poison is not None else experiment.trial_seed(cfg.seed, 0))
    tcfg = cfg.train_config(experiment.hash_seed(seed, 1))
    theta = training.train(spec, experiment.nn.init_params(spec, [seed, 1]), dataset, tcfg)
    extra = {"config": cfg.to_dict(), "poison": None if args.poison is None else str(Path(args.poison).resolve())}
    manifest_path, data_path = training.save_checkpoint(args.out, spec, theta, tcfg, epoch=tcfg.epochs, extra=extra)
    return {
        "checkpoint": str(manifest_path),
        "data": str(data_path),
        "train_accuracy": eval_accuracy(spec, theta, dataset),
        "clean_test_accuracy": eval_accuracy(spec, theta, test),
    }


def _load_model(checkpoint):
    meta = json.loads(Path(checkpoint).with_suffix(".json").read_text())
    extra = meta.get("extra") or {}
    if "config" not in extra:
        raise CliError(f"{checkpoint}: checkpoint carries no experiment config")
    cfg = experiment.ExperimentConfig.from_mapping(extra["config"])
    spec, train, test = experiment.prepare(cfg)
    params, meta = training.load_checkpoint(checkpoint, spec)
    return cfg, spec, train, test, params, extra


def cmd_eval(args) -> dict:
    cfg, spec, train, test, params, extra = _load_model(args.checkpoint)
    out = {"clean_test_accuracy": eval_accuracy(spec, params, test)}
    poison_path = args.poison or extra.get("poison")
    if poison_path:
        poison = PoisonSet.load(poison_path)
        victim = poison.info.get("victim")
        if victim is not None and poison.mode == "targeted":
            v = VictimSpec(test.inputs[np.array(victim["indices"])], victim["y_vic"], victim["y_obj"])
            hits = eval_targeted(spec, params, v)
            out["success_rate"] = float(np.all(hits))
            out["avg_success_rate"] = float(np.mean(hits))
        elif victim is not None and poison.mode == "backdoor":
            trig = TriggerPatch(np.array(victim["trigger"]["pattern"]), tuple(victim["trigger"]["anchor"]))
            out["success_rate"] = eval_backdoor(spec, params, test, victim["y_vic"], trig, victim["y_obj"])
            out["avg_success_rate"] = out["success_rate"]
        out["train_accuracy"] = eval_accuracy(spec, params, poison.apply(train))
    return out


def cmd_landscape(args) -> dict:
    cfg, spec, train, test, params, extra = _load_model(args.checkpoint)
    poison_path = args.poison or extra.get("poison")
    dataset = PoisonSet.load(poison_path).apply(train) if poison_path else train
    grid = landscape_probe(spec, params, dataset, args.extent, args.resolution, args.seed)
    grid.save_csv(args.out)
    return {"grid": str(args.out), "center_loss": grid.center, "max_loss": float(np.max(grid.losses)), "min_loss": float(np.min(grid.losses))}


def cmd_run(args) -> dict:
    cfg = experiment.ExperimentConfig.from_file(args.config)
    manifest = experiment.run_experiment(cfg, trials=args.trials)
    csv_path, manifest_path = experiment.export_metrics(manifest, args.out)
    return {"metrics": str(csv_path), "manifest": str(manifest_path), "summary": manifest.summary}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sharppoison", description="Sharpness-aware data poisoning toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("craft", help="craft a perturbation set")
    c.add_argument("--mode", required=True, choices=["targeted", "backdoor", "error-min", "error-max"])
    c.add_argument("--config", help="flat key = value file with the base settings")
    c.add_argument("--sharp-rho", type=float, help="sharpness radius; 0 runs the plain attack")
    c.add_argument("--epsilon", type=float)
    c.add_argument("--ratio", "--portion", dest="ratio", type=float)
    c.add_argument("--restarts", type=int)
    c.add_argument("--steps", type=int, help="crafting steps (M) or PGD steps (T)")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True, help="output prefix; writes <out>.json and <out>.f64")
    c.set_defaults(func=cmd_craft)

    r = sub.add_parser("retrain", help="train a fresh model on the poisoned (or clean) set")
    r.add_argument("--poison")
    r.add_argument("--config")
    r.add_argument("--schedule", choices=["step", "cyclic"])
    r.add_argument("--aug", choices=["none", "mixup", "cutout"])
    r.add_argument("--optimizer", choices=["erm", "sam"])
    r.add_argument("--epochs", type=int)
    r.add_argument("--milestones", help="comma-separated epochs for step decay")
    r.add_argument("--lr", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="checkpoint prefix")
    r.set_defaults(func=cmd_retrain)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--poison")
    e.set_defaults(func=cmd_eval)

    lp = sub.add_parser("landscape", help="2-D loss grid around a checkpoint")
    lp.add_argument("--checkpoint", required=True)
    lp.add_argument("--poison")
    lp.add_argument("--extent", type=float, default=1.0)
    lp.add_argument("--resolution", type=int, default=21)
    lp.add_argument("--seed", type=int, default=0)
    lp.add_argument("--out", required=True, help="CSV path")
    lp.set_defaults(func=cmd_landscape)

    u = sub.add_parser("run", help="run a seeded multi-trial experiment")
    u.add_argument("--config", required=True)
    u.add_argument("--trials", type=int)
    u.add_argument("--out", default="results")
    u.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        result = args.func(args)
    except (CliError, experiment.ConfigError) as exc:
        _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    except (OSError, ValueError, ArithmeticError, RuntimeError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    _emit(result)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
