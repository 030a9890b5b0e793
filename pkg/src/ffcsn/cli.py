"""Command-line entry point: ``ffcsn <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from . import evaluation as ev
from .advaug import ALConfig
from .model import AblationFlags, ModelConfig
from .synthgen import Dataset, GenConfig, generate_dataset, read_dataset
from .trainer import Checkpoint, TrainConfig, train
from .verify import TOLERANCE, gradcheck_suite

log = logging.getLogger("ffcsn")

TRAIN_KEYS = ("beta1", "beta2", "base_lr", "lr_step", "momentum", "weight_decay", "max_epochs", "batch_size",
              "K", "P", "pairwise_loss", "margin", "g_channels", "g_grad_clip")
EVAL_DEFAULTS = {"k": 10, "plots": False, "sizes": [2, 3, 4, 5, 6, 7, 8]}
PRESETS = ("default", "tiny")


class ConfigError(ValueError):
    pass


def _section(obj, keys=None) -> Dict[str, Any]:
    names = keys or [f.name for f in fields(obj)]
    out = {}
    for n in names:
        v = getattr(obj, n)
        out[n] = list(v) if isinstance(v, tuple) else v
    return out


def default_config(preset: str = "default") -> Dict[str, Any]:
    """Flat dotted-key view of every overridable setting for a preset."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
    tc = TrainConfig.tiny() if preset == "tiny" else TrainConfig()
    gen = GenConfig(frame_hw=tc.model.frame_hw)
    flat: Dict[str, Any] = {"preset": preset, "seed": 0}
    for prefix, section in (("gen", _section(gen)), ("train", _section(tc, TRAIN_KEYS)),
                            ("model", _section(tc.model)), ("al", _section(tc.al)),
                            ("flags", tc.flags.to_dict()), ("eval", dict(EVAL_DEFAULTS))):
        flat.update({f"{prefix}.{k}": v for k, v in section.items()})
    return flat


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{key}' expects a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
    return value


def resolve_config(overrides: Dict[str, Any], seed: Optional[int] = None) -> Dict[str, Any]:
    """Defaults of the chosen preset, updated with ``overrides``; unknown keys are rejected."""
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    flat = default_config(overrides.get("preset", "default"))
    for key, value in overrides.items():
        if key not in flat:
            raise ConfigError(f"unknown config key '{key}'")
        flat[key] = _coerce(key, value, flat[key])
    if seed is not None:
        flat["seed"] = seed
    return flat


def _pick(flat: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in flat.items() if k.startswith(prefix + ".")}


def gen_config(flat) -> GenConfig:
    return GenConfig.from_dict(_pick(flat, "gen"))


def train_config(flat, flags: Optional[AblationFlags] = None) -> TrainConfig:
    model = ModelConfig(**_pick(flat, "model"))
    al = ALConfig(**_pick(flat, "al"))
    return TrainConfig(**_pick(flat, "train"), seed=flat["seed"], model=model, al=al,
                       flags=flags or AblationFlags(**_pick(flat, "flags")))


def _load_config(path: Optional[str], seed: Optional[int]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if path:
        try:
            overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(overrides, seed)


def _prepare_out(out: str, flat) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved.json").write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dataset(args, flat) -> Dataset:
    ds = read_dataset(args.data)
    if ds.gen_config.frame_hw != flat["model.frame_hw"]:
        raise ConfigError(f"dataset frames are {ds.gen_config.frame_hw}px but model.frame_hw is "
                          f"{flat['model.frame_hw']}")
    return ds


def _fold_plan(spec: Optional[str], ds: Dataset, flat) -> ev.FoldPlan:
    """``spec`` is a fold count or a JSON file with ``identity_folds``; default is eval.k."""
    if spec is None:
        return ev.make_folds(ds.identity_ids, flat["eval.k"], flat["seed"])
    if spec.isdigit():
        return ev.make_folds(ds.identity_ids, int(spec), flat["seed"])
    try:
        data = json.loads(Path(spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read fold file {spec}: {exc}") from exc
    return ev.FoldPlan.from_json(data, ds.identity_ids)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(path)


# -- commands ------------------------------------------------------------------

def cmd_gen(args, flat) -> int:
    out = _prepare_out(args.out, flat)
    generate_dataset(gen_config(flat), flat["seed"], out)
    print(out / "manifest.json")
    return 0


def cmd_train(args, flat) -> int:
    ds = _dataset(args, flat)
    cfg = train_config(flat)
    out = _prepare_out(args.out, flat)
    resume = None
    if args.checkpoint:
        resume = Checkpoint.load(args.checkpoint, expected=cfg)
        indices = [i for i, ident in enumerate(ds.identity_ids) if int(ident) in set(resume.train_identities)]
    elif args.fold is not None:
        indices = _fold_plan(args.folds, ds, flat).train_indices(args.fold)
    else:
        indices = list(range(len(ds)))
    ckpt, history = train(cfg, ds, indices, resume=resume)
    ckpt.save(out / "checkpoint.ffcs")
    print(out / "checkpoint.ffcs")
    _write(out / "history.csv", history.to_csv())
    return 0


def cmd_eval(args, flat) -> int:
    ds = _dataset(args, flat)
    out = _prepare_out(args.out, flat)
    plan = _fold_plan(args.folds, ds, flat)
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        if args.fold is not None:
            test = plan.test_indices(args.fold)
        else:
            seen = set(ckpt.train_identities)
            test = [i for i, ident in enumerate(ds.identity_ids) if int(ident) not in seen]
        report = ev.EvalReport(ckpt.config.flags, ckpt.config.seed, [ev.evaluate_fold(ckpt, ds, test, args.fold or 0)])
    else:
        report = ev.cross_validate(train_config(flat), ds, plan, jobs=args.jobs).report
    _write(out / "eval.csv", report.to_csv())
    print(f"ACC {100 * report.mean_acc:.2f}  AUC {100 * report.mean_auc:.2f}")
    return 0


def cmd_ablate(args, flat) -> int:
    ds = _dataset(args, flat)
    out = _prepare_out(args.out, flat)
    table = ev.ablation_suite(train_config(flat), ds, _fold_plan(args.folds, ds, flat), jobs=args.jobs)
    _write(out / "ablation.csv", table.to_csv())
    if flat["eval.plots"] and ev.plot_ablation(table, out / "ablation.svg"):
        print(out / "ablation.svg")
    return 0


def cmd_sweep_pairs(args, flat) -> int:
    ds = _dataset(args, flat)
    out = _prepare_out(args.out, flat)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else flat["eval.sizes"]
    results = ev.pair_sweep(train_config(flat), ds, _fold_plan(args.folds, ds, flat), sizes, jobs=args.jobs)
    _write(out / "sweep.csv", ev.sweep_csv(results))
    if flat["eval.plots"] and ev.plot_sweep(results, out / "sweep.svg"):
        print(out / "sweep.svg")
    return 0


def cmd_alpha_report(args, flat) -> int:
    ds = _dataset(args, flat)
    out = _prepare_out(args.out, flat)
    if args.checkpoint:
        report = ev.alpha_report(Checkpoint.load(args.checkpoint), ds)
    else:
        cfg = train_config(flat)
        if not cfg.flags.cl:
            raise ConfigError("alpha-report needs flags.cl=true")
        report = ev.report_alpha(ev.cross_validate(cfg, ds, _fold_plan(args.folds, ds, flat), jobs=args.jobs).report)
    _write(out / "alpha.csv", report.to_csv())
    if flat["eval.plots"] and ev.plot_alpha(report, out / "alpha.svg"):
        print(out / "alpha.svg")
    return 0


def cmd_gradcheck(args, flat) -> int:
    report = gradcheck_suite(args.scale, flat["seed"])
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    if args.out:
        out = _prepare_out(args.out, flat)
        (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    return 0 if report.passed(TOLERANCE) else 1


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file of flat dotted-key overrides")
    common.add_argument("--seed", type=int, help="master seed (overrides the config's 'seed')")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for folds/variants (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ffcsn", description="Face-focused cross-stream network testbed.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    add("gen", cmd_gen, "generate a synthetic dataset into --out")
    p = add("train", cmd_train, "train one model; writes checkpoint.ffcs and history.csv")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest path")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p.add_argument("--folds", metavar="K|FILE", help="fold count or JSON fold file (used with --fold)")
    p.add_argument("--fold", type=int, help="train on every fold except this one")
    p = add("eval", cmd_eval, "evaluate a checkpoint, or cross-validate the configured model")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest path")
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate (default: cross-validate)")
    p.add_argument("--folds", metavar="K|FILE", help="fold count or JSON file with 'identity_folds'")
    p.add_argument("--fold", type=int, help="with --checkpoint, evaluate only this fold")
    p = add("ablate", cmd_ablate, "cross-validate the six ablation variants; writes ablation.csv")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest path")
    p.add_argument("--folds", metavar="K|FILE", help="fold count or JSON fold file")
    p = add("sweep-pairs", cmd_sweep_pairs, "cross-validate over meta task sizes P; writes sweep.csv")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest path")
    p.add_argument("--folds", metavar="K|FILE", help="fold count or JSON fold file")
    p.add_argument("--sizes", metavar="P,P,...", help="comma-separated task sizes (default: eval.sizes)")
    p = add("alpha-report", cmd_alpha_report, "per-class mean correlation weights; writes alpha.csv")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest path")
    p.add_argument("--checkpoint", metavar="PATH", help="CL checkpoint (default: cross-validate a CL model)")
    p.add_argument("--folds", metavar="K|FILE", help="fold count or JSON fold file")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every layer kind and composite loss")
    p.add_argument("--scale", choices=("tiny", "default"), default="tiny", help="model scale (default: tiny)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        flat = _load_config(args.config, args.seed)
        return args.func(args, flat)
    except Exception as exc:  # every module error becomes exit code 1
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
