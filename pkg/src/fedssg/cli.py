"""Config-file driven runner.

Configs are INI files with one section per concern::

    [experiment]   seed, total_rounds, eval_every, threads, target_accuracy
    [task]         kind, partition, concentration, ...
    [sampler]      n_clients, cohort_size, epsilon, expectation_horizon
    [gate]         mode, alpha, beta, ...
    [algorithm]    name, mu, alignment_form, ...
    [run]          epochs, batch_size, lr, lr_decay_per_round, weight_decay

A ``[comparison]`` section (``algorithms``, ``seeds``, ``target_accuracy``)
turns the file into a sweep. Per-algorithm settings go in
``[algorithm.NAME]`` sections, whose keys are algorithm fields or dotted
``section.key`` overrides such as ``gate.alpha``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, analysis
from .algorithms import AlgorithmConfig, DivergenceError, LocalRunConfig
from .config import ComparisonSpec, ConfigError, ExperimentConfig, TaskConfig
from .datasets import ConfigurationError, FormatError
from .orchestrator import Simulation, build_task
from .sampling import GateConfig

log = logging.getLogger("fedssg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
METRICS_HEADER = ("round", "train_loss", "test_accuracy", "grad_norm_sq", "elapsed_ms")

_EXPERIMENT_KEYS = ("seed", "total_rounds", "eval_every", "threads", "target_accuracy")
_SAMPLER_KEYS = {"n_clients": "n_clients", "cohort_size": "cohort_size",
                 "epsilon": "epsilon", "expectation_horizon": "expectation_horizon"}
_SECTIONS = {"task": TaskConfig, "gate": GateConfig, "algorithm": AlgorithmConfig, "run": LocalRunConfig}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def _typed_section(parser, section: str, cls) -> dict:
    if not parser.has_section(section):
        return {}
    defaults = _field_defaults(cls)
    out = {}
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"{section}.{key}", "unknown key")
        out[key] = _convert(f"{section}.{key}", raw, defaults[key])
    return out


def _experiment_from(parser) -> ExperimentConfig:
    top = _field_defaults(ExperimentConfig)
    kwargs = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"experiment.{key}", "unknown key")
            kwargs[key] = _convert(f"experiment.{key}", raw, top[key])
    if parser.has_section("sampler"):
        for key, raw in parser.items("sampler"):
            if key not in _SAMPLER_KEYS:
                raise ConfigError(f"sampler.{key}", "unknown key")
            kwargs[_SAMPLER_KEYS[key]] = _convert(f"sampler.{key}", raw, top[_SAMPLER_KEYS[key]])
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build(cls, section, _typed_section(parser, section, cls))
    return ExperimentConfig(**kwargs)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Replace ``section.key`` settings in ``cfg`` (values already typed)."""
    grouped: dict = {}
    top = {}
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section in _SECTIONS:
            grouped.setdefault(section, {})[key] = value
        elif section == "sampler" and key in _SAMPLER_KEYS:
            top[_SAMPLER_KEYS[key]] = value
        elif section == "experiment" and key in _EXPERIMENT_KEYS:
            top[key] = value
        else:
            raise ConfigError(dotted, "unknown key")
    for section, values in grouped.items():
        top[section] = _build(type(getattr(cfg, section)), section,
                              {**dataclasses.asdict(getattr(cfg, section)), **values})
    return dataclasses.replace(cfg, **top)


def _typed_override(dotted: str, raw: str, base: ExperimentConfig):
    section, _, key = dotted.partition(".")
    if section in _SECTIONS:
        defaults = dataclasses.asdict(getattr(base, section))
    elif section == "sampler" and key in _SAMPLER_KEYS:
        return _convert(dotted, raw, getattr(base, _SAMPLER_KEYS[key]))
    elif section == "experiment" and key in _EXPERIMENT_KEYS:
        return _convert(dotted, raw, getattr(base, key))
    else:
        raise ConfigError(dotted, "unknown key")
    if key not in defaults:
        raise ConfigError(dotted, "unknown key")
    return _convert(dotted, raw, defaults[key])


def _comparison_from(parser, base: ExperimentConfig) -> ComparisonSpec:
    allowed = {"algorithms", "seeds", "target_accuracy"}
    for key in parser.options("comparison"):
        if key not in allowed:
            raise ConfigError(f"comparison.{key}", "unknown key")
    names = tuple(n.strip() for n in parser.get("comparison", "algorithms", fallback="").split(",") if n.strip())
    try:
        seeds = tuple(int(s) for s in parser.get("comparison", "seeds", fallback=str(base.seed)).split(",") if s.strip())
    except ValueError:
        raise ConfigError("comparison.seeds", "must be a comma-separated list of integers") from None
    target = _convert("comparison.target_accuracy",
                      parser.get("comparison", "target_accuracy", fallback=repr(base.target_accuracy)), 0.0)

    overrides = {}
    for name in names:
        section = f"algorithm.{name}"
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                dotted = key if "." in key else f"algorithm.{key}"
                values[dotted] = _typed_override(dotted, raw, base)
        values["algorithm.name"] = name
        apply_overrides(base, values)
        overrides[name] = values
    for section in parser.sections():
        if section.startswith("algorithm.") and section[len("algorithm."):] not in names:
            raise ConfigError(section, "section for an algorithm not listed in comparison.algorithms")
    return ComparisonSpec(base, names, overrides, target, seeds)


def parse_config_text(text: str, source: str = "<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    known = {"experiment", "sampler", "comparison", *_SECTIONS}
    for section in parser.sections():
        if section not in known and not section.startswith("algorithm."):
            raise ConfigError(section, "unknown section")
    if any(s.startswith("algorithm.") for s in parser.sections()) and not parser.has_section("comparison"):
        raise ConfigError("comparison", "per-algorithm sections need a [comparison] section")
    base = _experiment_from(parser)
    if parser.has_section("comparison"):
        return _comparison_from(parser, base)
    return base


def parse_config(path):
    """Read and validate an experiment or comparison config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc}") from None
    return parse_config_text(text, str(path))


def _section_lines(name: str, obj, skip=()) -> list:
    lines = [f"[{name}]"]
    for key, value in dataclasses.asdict(obj).items():
        if key in skip:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return lines


def serialize_config(cfg) -> str:
    """Canonical text form; :func:`parse_config_text` inverts it."""
    base = cfg.base if isinstance(cfg, ComparisonSpec) else cfg
    lines = ["[experiment]"]
    lines += [f"{k} = {getattr(base, k)!r}" for k in _EXPERIMENT_KEYS]
    lines += ["", "[sampler]"]
    lines += [f"{k} = {getattr(base, attr)}" if isinstance(getattr(base, attr), str)
              else f"{k} = {getattr(base, attr)!r}" for k, attr in _SAMPLER_KEYS.items()]
    for section in _SECTIONS:
        lines += [""] + _section_lines(section, getattr(base, section))
    if isinstance(cfg, ComparisonSpec):
        lines += ["", "[comparison]",
                  f"algorithms = {','.join(cfg.algorithms)}",
                  f"seeds = {','.join(str(s) for s in cfg.seeds)}",
                  f"target_accuracy = {cfg.target_accuracy!r}"]
        for name in cfg.algorithms:
            extra = {k: v for k, v in cfg.overrides.get(name, {}).items() if k != "algorithm.name"}
            if not extra:
                continue
            lines += ["", f"[algorithm.{name}]"]
            for key, value in sorted(extra.items()):
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def metrics_csv(records) -> str:
    """Metrics table. ``elapsed_ms`` is written as 0 so replays compare
    byte-for-byte; wall-clock times go to ``timings.csv``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.round, _fmt(r.train_loss), _fmt(r.test_accuracy), _fmt(r.grad_norm_sq), _fmt(0.0)])
    return buf.getvalue()


def _timings_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "elapsed_ms"))
    for r in records:
        w.writerow([r.round, _fmt(r.elapsed_ms)])
    return buf.getvalue()


def _execute(cfg: ExperimentConfig):
    """Run to completion; returns ``(records, simulation, error)``."""
    sim = Simulation(cfg, build_task(cfg))
    records = []
    try:
        while sim.round < cfg.total_rounds:
            rec = sim.step()
            if rec is not None:
                records.append(rec)
                log.debug("round %d loss %.6g acc %.4f", rec.round, rec.train_loss, rec.test_accuracy)
    except DivergenceError as exc:
        return records, sim, exc
    return records, sim, None


def _summary(cfg: ExperimentConfig, records, sim, diverged: bool, baseline_rounds=None, target=None) -> dict:
    target = cfg.target_accuracy if target is None else target
    T = cfg.total_rounds
    rounds = analysis.rounds_to_target(records, target) if records else None
    mean50, std50 = analysis.last_k_accuracy(records) if records else (float("nan"), float("nan"))
    b_final = None
    if not diverged:
        try:
            b_final = analysis.estimate_dissimilarity(sim.task, sim.server.omega, at_round=sim.round).b_value
        except analysis.DegeneratePointError:
            b_final = None
    return {
        "algorithm": cfg.algorithm.name,
        "seed": cfg.seed,
        "rounds_to_target": analysis.format_rounds(rounds, T),
        "speedup": analysis.speedup(baseline_rounds, rounds, T) if baseline_rounds is not False else None,
        "final_acc_mean50": mean50,
        "final_acc_std50": std50,
        "b_estimate_final": b_final,
        "diverged": diverged,
    }


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _write_manifest(out: Path, cfg, seed: int, started: str, artifacts) -> Path:
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "started_at": started,
        "artifact_paths": [p.name for p in artifacts],
        "code_version": __version__,
    }
    return _write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load(config_path, seed, threads, expect):
    cfg = parse_config(config_path)
    if not isinstance(cfg, expect):
        kind = "comparison" if isinstance(cfg, ComparisonSpec) else "single-run"
        raise ConfigError("file", f"expected a {expect.__name__} config, got a {kind} config")
    top = {}
    if seed is not None:
        top["seed"] = seed
    if threads is not None:
        top["threads"] = threads
    if not top:
        return cfg
    if isinstance(cfg, ComparisonSpec):
        base = dataclasses.replace(cfg.base, **top)
        seeds = (seed,) if seed is not None else cfg.seeds
        return dataclasses.replace(cfg, base=base, seeds=seeds)
    return dataclasses.replace(cfg, **top)


def run_command(config_path, out_dir, seed=None, threads=None) -> int:
    """Single run. Writes metrics.csv, timings.csv, summary.json, manifest.json."""
    started = _now()
    try:
        cfg = _load(config_path, seed, threads, ExperimentConfig)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        records, sim, err = _execute(cfg)
    except (FormatError, ConfigurationError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA

    artifacts = [
        _write(out / "metrics.csv", metrics_csv(records)),
        _write(out / "timings.csv", _timings_csv(records)),
    ]
    summary = _summary(cfg, records, sim, err is not None, baseline_rounds=False)
    artifacts.append(_write(out / "summary.json", json.dumps(summary, indent=2) + "\n"))
    _write_manifest(out, cfg, cfg.seed, started, artifacts)
    if err is not None:
        log.error("%s", err)
        return EXIT_DIVERGED
    log.info("finished %d rounds; outputs in %s", cfg.total_rounds, out)
    return EXIT_OK


COMPARISON_HEADER = ("algorithm", "seed", "final_acc_mean50", "final_acc_std50",
                     "rounds_to_target", "speedup_vs_fedavg", "status")


def compare_command(comparison_path, out_dir, seed=None, threads=None) -> int:
    """Sweep algorithms x seeds; writes comparison.csv and per-run curves."""
    started = _now()
    try:
        spec = _load(comparison_path, seed, threads, ComparisonSpec)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = Path(out_dir)
    curves = out / "curves"
    curves.mkdir(parents=True, exist_ok=True)
    T = spec.base.total_rounds

    results = {}
    worst = EXIT_OK
    for name in spec.algorithms:
        for s in spec.seeds:
            cfg = dataclasses.replace(apply_overrides(spec.base, spec.overrides[name]), seed=s)
            log.info("running %s seed %d", name, s)
            try:
                records, sim, err = _execute(cfg)
            except (FormatError, ConfigurationError, OSError) as exc:
                log.error("data error: %s", exc)
                return EXIT_DATA
            status = "diverged" if err is not None else "ok"
            if err is not None:
                log.warning("%s seed %d: %s", name, s, err)
                worst = EXIT_DIVERGED
            (curves / f"{name}_seed{s}.csv").write_text(metrics_csv(records))
            rounds = analysis.rounds_to_target(records, spec.target_accuracy) if records else None
            mean50, std50 = analysis.last_k_accuracy(records) if records else (float("nan"), float("nan"))
            results[(name, s)] = (mean50, std50, rounds, status)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_HEADER)
    for (name, s), (mean50, std50, rounds, status) in results.items():
        if ("fedavg", s) in results:
            base_rounds = results[("fedavg", s)][2]
            sp = analysis.format_speedup(analysis.speedup(base_rounds, rounds, T))
        else:
            sp = ""
        w.writerow([name, s, _fmt(mean50), _fmt(std50), analysis.format_rounds(rounds, T), sp, status])
    artifacts = [_write(out / "comparison.csv", buf.getvalue())]
    artifacts += sorted(curves.iterdir())
    _write_manifest(out, spec, spec.seeds[0], started, artifacts)
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedssg", description="Federated learning experiment runner.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "single experiment"), ("compare", "algorithm comparison sweep")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--threads", type=int, default=None, help="parallel client updates per round")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("configuration error: --seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        log.error("configuration error: --threads must be at least 1")
        return EXIT_CONFIG
    command = run_command if args.command == "run" else compare_command
    return command(args.config, args.out, seed=args.seed, threads=args.threads)
