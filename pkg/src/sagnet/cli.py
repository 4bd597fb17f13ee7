"""``sagnet`` command line: synth, train, eval, gradcheck, experiment.

Exit codes: 0 ok, 1 gradcheck tolerance failure, 2 configuration error,
3 I/O error, 4 data validation error, 5 numeric failure.  Only ``eval``,
``experiment`` (summary CSV) and ``gradcheck`` (max relative error) write to
stdout; logging goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .checks import TOLERANCE, corrupted_backward, episode_gradcheck
from .data import ConfigInvalid, SynthConfig, load_dataset, synth_basin, write_dataset
from .evaluation import evaluate, run_experiment, summarize, write_reports
from .training import (TrainConfig, load_trained, parse_variant, prepare_for, save_trained,
                       train_variant, write_history)

_log = logging.getLogger("sagnet")

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Every settable key.  ``seed`` is shared by data generation and training."""
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "SAG-sim"
    variants: tuple[str, ...] = ("SAG-sim", "SAG-flow", "SAG-pp", "RNN")
    seeds: tuple[int, ...] = (0, 1, 2)

    def flat(self) -> dict:
        out = {}
        out.update(asdict(self.synth))
        out.update(asdict(self.train))
        out.update(variant=self.variant, variants=",".join(self.variants),
                   seeds=",".join(str(s) for s in self.seeds))
        return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if not as_float.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def _split_list(key: str, value) -> list[str]:
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = [s.strip() for s in str(value).split(",")]
    items = [s for s in items if s]
    if not items:
        raise ConfigError(f"{key}: empty list")
    return items


def known_keys() -> set[str]:
    return set(RunConfig().flat())


def resolve_config(path: Path | None, overrides: dict) -> RunConfig:
    """Config file first, then ``overrides`` (flags win); unknown keys are errors."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not a valid key-value file: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat mapping of keys to values")
        raw.update(loaded)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(raw) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(map(str, unknown))}")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ConfigError(f"{k}: nested values are not allowed")

    def build(cls):
        kw = {}
        for f in fields(cls):
            if f.name in raw:
                kw[f.name] = _coerce(f.name, raw[f.name], getattr(cls(), f.name))
        return cls(**kw)

    cfg = RunConfig(synth=build(SynthConfig), train=build(TrainConfig))
    if "variant" in raw:
        cfg.variant = str(raw["variant"])
    if "variants" in raw:
        cfg.variants = tuple(_split_list("variants", raw["variants"]))
    if "seeds" in raw:
        try:
            cfg.seeds = tuple(int(s) for s in _split_list("seeds", raw["seeds"]))
        except ValueError:
            raise ConfigError(f"seeds: expected integers, got {raw['seeds']!r}") from None
    try:
        for name in (cfg.variant, *cfg.variants):
            parse_variant(name)
        cfg.train.validate()
        cfg.synth.validate()
    except (ValueError, ConfigInvalid) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def echo_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(yaml.safe_dump(cfg.flat(), sort_keys=True),
                                           encoding="utf-8")


# ----------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    topology, ds, truth = synth_basin(cfg.synth)
    out = Path(args.out)
    write_dataset(ds, topology, out, truth={"temp": truth.temp,
                                            "no_release_temp": truth.no_release_temp})
    echo_config(cfg, out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset, topology = load_dataset(Path(args.data))
    dataset.validate()
    trained, _ = train_variant(dataset, topology, cfg.variant, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trained(trained, dataset, out / "checkpoint.json")
    write_history(trained.history, out / "history.csv")
    echo_config(cfg, out)
    return EXIT_OK


def _print_summary(reports) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "scope", "mean_rmse", "std_rmse"])
    for variant, scope, mean, std in summarize(reports):
        w.writerow([variant, scope, f"{mean:.6f}", f"{std:.6f}"])
    sys.stdout.write(buf.getvalue())


def cmd_eval(args, cfg: RunConfig) -> int:
    dataset, topology = load_dataset(Path(args.data))
    dataset.validate()
    trained = load_trained(Path(args.checkpoint))
    prep = prepare_for(trained, dataset, topology)
    report = evaluate(trained, prep, dataset, topology)
    write_reports([report], Path(args.out))
    _print_summary([report])
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.corrupt_backward:
        with corrupted_backward(args.corrupt_backward):
            worst = episode_gradcheck(args.size)
    else:
        worst = episode_gradcheck(args.size)
    sys.stdout.write(f"max_relative_error {worst:.6e}\n")
    return EXIT_OK if worst < TOLERANCE else EXIT_TOLERANCE


def cmd_experiment(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if args.data:
        dataset, topology = load_dataset(Path(args.data))
    else:
        topology, dataset, _ = synth_basin(cfg.synth)
    dataset.validate()
    reports = []
    for variant in cfg.variants:
        reports.extend(run_experiment(variant, dataset, topology, cfg.seeds, cfg.train))
    for seed in cfg.seeds:
        write_reports([r for r in reports if r.seed == seed], out / f"seed_{seed}")
    write_reports(reports, out)
    echo_config(cfg, out)
    _print_summary(reports)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        p.add_argument("--config", type=Path, help="flat key: value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("synth", help="write a synthetic basin dataset"))
    p = sub.add_parser("train", help="train one variant")
    common(p, data=True)
    p.add_argument("--variant")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("gradcheck", help="finite-difference check of the canonical episode")
    p.add_argument("--size", choices=["tiny", "small"], default="tiny")
    p.add_argument("--corrupt-backward", help=argparse.SUPPRESS)
    p = sub.add_parser("experiment", help="variant x seed matrix with report CSVs")
    common(p)
    p.add_argument("--data", help="dataset directory (default: synthesize from config)")
    p.add_argument("--variants")
    p.add_argument("--seeds")
    p.add_argument("--epochs", type=int)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(value) if value.strip() else value
    for key in ("seed", "variant", "variants", "seeds", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "experiment": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(getattr(args, "config", None), _overrides(args))
    except ConfigError as exc:
        _log.error("config: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        _log.error("cannot read config: %s", exc)
        return EXIT_IO
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigInvalid as exc:
        _log.error("config: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        _log.error("I/O: %s", exc)
        return EXIT_IO
    except FloatingPointError as exc:
        _log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        _log.error("data: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
