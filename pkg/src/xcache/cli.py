"""Command line driver: ``run``, ``ablate`` and ``report``.

Configuration is a sectioned ``key = value`` file (see ``RunConfig``); any key
can be overridden from the command line as ``--section.key=value``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from xcache.cache_engine import EngineConfig
from xcache.gate import GateConfig, Step0Mode
from xcache.latent_model import ModelConfig, NonFiniteError, format_layout, parse_layout
from xcache.metrics import (
    TraceError,
    chunk_rows,
    fidelity,
    gate_overhead_blocks,
    read_chunks,
    read_trace,
    skip_report,
    speedup,
    write_chunks,
    write_figure_data,
    write_summary_csv,
    write_trace,
)
from xcache.rollout import RolloutResult, Scenario, ScenarioKind, run_rollout

logger = logging.getLogger("xcache")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
FORMATS = ("csv", "jsonl", "wallclock")
REPORT_INPUTS = ("config.ini", "trace.jsonl", "chunks.csv")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "xcache_out"
    # "wallclock" adds measured timings to the files; they are always printed
    formats: tuple[str, ...] = ("csv", "jsonl")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    scenario: Scenario = field(default_factory=Scenario)
    output: OutputConfig = field(default_factory=OutputConfig)


# -- value codecs ---------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_optional_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    return None if t in ("none", "off", "") else int(t)


def _parse_formats(text: str) -> tuple[str, ...]:
    parts = {s.strip() for s in text.split(",") if s.strip()}
    bad = sorted(parts.difference(FORMATS))
    if bad:
        raise ValueError(f"unknown format(s) {bad}; choose from {list(FORMATS)}")
    return tuple(f for f in FORMATS if f in parts)


def _fmt_float(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class _Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    show: Callable[[Any], str]
    get: Callable[[RunConfig], Any]


def _k(section, name, parse, show, get):
    return _Key(section, name, parse, show, get)


_KEYS: tuple[_Key, ...] = (
    _k("model", "b", int, str, lambda c: c.model.num_blocks),
    _k("model", "s", int, str, lambda c: c.model.num_steps),
    _k("model", "channels", int, str, lambda c: c.model.channels),
    _k("model", "view_layout", parse_layout, format_layout, lambda c: c.model.layout),
    _k("model", "kv_capacity", int, str, lambda c: c.model.kv_capacity),
    _k("model", "kv_update_period", int, str, lambda c: c.model.kv_update_period),
    _k("model", "scene_drift", float, _fmt_float, lambda c: c.model.scene_drift),
    _k("model", "block_cost_tokens", int, str, lambda c: c.model.block_cost_tokens),
    _k("model", "seed", int, str, lambda c: c.model.seed),
    _k("engine", "warmup", int, str, lambda c: c.engine.warmup),
    _k("engine", "f_n", int, str, lambda c: c.engine.front_anchors),
    _k("engine", "b_n", int, str, lambda c: c.engine.back_anchors),
    _k("engine", "tau_floor", float, _fmt_float, lambda c: c.engine.gate.tau_floor),
    _k("engine", "margin", float, _fmt_float, lambda c: c.engine.gate.margin),
    _k("engine", "alpha", float, _fmt_float, lambda c: c.engine.gate.ema_alpha),
    _k("engine", "tau_dev", float, _fmt_float, lambda c: c.engine.gate.tau_dev),
    _k("engine", "max_staleness", _parse_optional_int,
       lambda v: "none" if v is None else str(v), lambda c: c.engine.max_staleness),
    _k("engine", "kv_protect", _parse_bool, lambda v: "true" if v else "false",
       lambda c: c.engine.kv_protect),
    _k("engine", "step0_mode", Step0Mode, lambda v: v.value, lambda c: c.engine.gate.step0_mode),
    _k("engine", "step0_strict_threshold", float, _fmt_float,
       lambda c: c.engine.gate.step0_strict_threshold),
    _k("engine", "fingerprint_k", int, str, lambda c: c.engine.fingerprint_k),
    _k("scenario", "kind", ScenarioKind, lambda v: v.value, lambda c: c.scenario.kind),
    _k("scenario", "n_chunks", int, str, lambda c: c.scenario.n_chunks),
    _k("scenario", "action_seed", int, str, lambda c: c.scenario.action_seed),
    _k("scenario", "step_change_chunk", int, str, lambda c: c.scenario.step_change_chunk),
    _k("output", "directory", str, str, lambda c: c.output.directory),
    _k("output", "formats", _parse_formats, lambda v: ",".join(v), lambda c: c.output.formats),
)
KEY_INDEX = {(k.section, k.name): k for k in _KEYS}
SECTIONS = ("model", "engine", "scenario", "output")


def _build(values: dict[tuple[str, str], Any]) -> RunConfig:
    v = values
    model = ModelConfig(
        num_blocks=v["model", "b"],
        num_steps=v["model", "s"],
        layout=v["model", "view_layout"],
        channels=v["model", "channels"],
        kv_capacity=v["model", "kv_capacity"],
        kv_update_period=v["model", "kv_update_period"],
        scene_drift=v["model", "scene_drift"],
        block_cost_tokens=v["model", "block_cost_tokens"],
        seed=v["model", "seed"],
    )
    gate = GateConfig(
        tau_floor=v["engine", "tau_floor"],
        margin=v["engine", "margin"],
        ema_alpha=v["engine", "alpha"],
        tau_dev=v["engine", "tau_dev"],
        step0_mode=v["engine", "step0_mode"],
        step0_strict_threshold=v["engine", "step0_strict_threshold"],
    )
    engine = EngineConfig(
        warmup=v["engine", "warmup"],
        front_anchors=v["engine", "f_n"],
        back_anchors=v["engine", "b_n"],
        max_staleness=v["engine", "max_staleness"],
        kv_protect=v["engine", "kv_protect"],
        gate=gate,
        fingerprint_k=v["engine", "fingerprint_k"],
    )
    scenario = Scenario(
        kind=v["scenario", "kind"],
        n_chunks=v["scenario", "n_chunks"],
        action_seed=v["scenario", "action_seed"],
        step_change_chunk=v["scenario", "step_change_chunk"],
    )
    if engine.front_anchors + engine.back_anchors > model.num_blocks:
        raise ConfigError("engine.f_n + engine.b_n exceeds model.b")
    if scenario.n_chunks < engine.warmup + 1:
        raise ConfigError(
            f"scenario.n_chunks={scenario.n_chunks} must be at least engine.warmup + 1"
        )
    output = OutputConfig(v["output", "directory"], v["output", "formats"])
    return RunConfig(model, engine, scenario, output)


def config_values(cfg: RunConfig) -> dict[tuple[str, str], Any]:
    return {(k.section, k.name): k.get(cfg) for k in _KEYS}


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for k in _KEYS:
            if k.section == section:
                lines.append(f"{k.name} = {k.show(k.get(cfg))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str = "", overrides: Sequence[tuple[str, str]] = ()) -> RunConfig:
    """Defaults, then ``text`` (INI), then ``overrides`` of ("section.key", value)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    raw: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {list(SECTIONS)}")
        for name, value in parser.items(section):
            raw[section, name] = value
    for dotted, value in overrides:
        section, _, name = dotted.partition(".")
        raw[section, name] = value
    values = config_values(RunConfig())
    for (section, name), text_value in raw.items():
        key = KEY_INDEX.get((section, name))
        if key is None:
            raise ConfigError(f"unknown key {section}.{name}")
        try:
            values[section, name] = key.parse(text_value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{name}: {exc}") from exc
    try:
        return _build(values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str], overrides: Sequence[tuple[str, str]] = ()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


# -- experiment drivers ---------------------------------------------------------


def summarize(
    name: str, baseline: RolloutResult, cached: RolloutResult, overhead: float
) -> tuple[dict, Any, Any, Any]:
    fid = fidelity(baseline.latents, cached.latents)
    rep = skip_report(cached.trace, cached.engine_config, cached.model_config)
    evaluations = sum(1 for r in cached.trace if r.chunk > 0)
    spd = speedup(
        baseline.chunk_seconds,
        cached.chunk_seconds,
        [a + b for a, b in zip(baseline.computed_blocks, baseline.kv_pass_blocks)],
        [a + b for a, b in zip(cached.computed_blocks, cached.kv_pass_blocks)],
        evaluations,
        overhead,
    )
    row = {
        "scenario": name,
        "configuration": name,
        "psnr_db": fid.mean_psnr,
        "max_rel_err": fid.max_rel_err,
        "skip_pct": 100.0 * rep.overall,
        "dit_s": spd.cached_chunk_s,
        "speedup_analytic": spd.analytic,
        "speedup_wall": spd.wall_clock,
    }
    return row, fid, rep, spd


def _file_row(row: dict, formats: Sequence[str]) -> dict:
    """Drop measured timings from file output unless asked for."""
    if "wallclock" in formats:
        return row
    return {**row, "dit_s": None, "speedup_wall": None}


def _line(row: dict) -> str:
    return (
        f"{row['scenario']}: skip={row['skip_pct']:.2f}% "
        f"speedup_analytic={row['speedup_analytic']:.3f}x "
        f"speedup_wall={row['speedup_wall']:.3f}x "
        f"psnr={row['psnr_db']:.2f}dB"
    )


def cmd_run(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    base = run_rollout(cfg.model, None, cfg.scenario)
    cached = run_rollout(cfg.model, cfg.engine, cfg.scenario)
    overhead = gate_overhead_blocks(cfg.model, cfg.engine.fingerprint_k)
    row, fid, rep, _ = summarize(cfg.scenario.kind.value, base, cached, overhead)
    (out_dir / "config.ini").write_text(serialize_config(cfg))
    rows = chunk_rows(base, cached, fid)
    if "csv" in cfg.output.formats:
        write_summary_csv(out_dir / "summary.csv", [_file_row(row, cfg.output.formats)])
        write_chunks(out_dir / "chunks.csv", rows)
        write_figure_data(out_dir, rows, rep, cfg.engine)
    if "jsonl" in cfg.output.formats:
        write_trace(out_dir / "trace.jsonl", cached.trace)
    print(_line(row))
    return row


def ablation_grid(cfg: RunConfig) -> list[tuple[str, EngineConfig]]:
    e = cfg.engine
    step0_on = dataclasses.replace(e, gate=dataclasses.replace(e.gate, step0_mode=Step0Mode.FORCE))
    grid = [
        ("default", e),
        ("+step0_protection", step0_on),
        ("-kv_protection", dataclasses.replace(e, kv_protect=False)),
        ("f_n=0", dataclasses.replace(step0_on, front_anchors=0)),
    ]
    for floor in (0.90, 0.91, 0.92, 0.93, 0.94, 0.95, 0.96):
        grid.append(
            (f"tau_floor={floor:.2f}",
             dataclasses.replace(step0_on, gate=dataclasses.replace(step0_on.gate, tau_floor=floor)))
        )
    return grid


def cmd_ablate(cfg: RunConfig, out_dir: Path) -> list[dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    base = run_rollout(cfg.model, None, cfg.scenario)
    overhead = gate_overhead_blocks(cfg.model, cfg.engine.fingerprint_k)
    rows = [{
        "scenario": "baseline",
        "configuration": "baseline",
        "psnr_db": float("inf"),
        "max_rel_err": 0.0,
        "skip_pct": 0.0,
        "dit_s": sum(base.chunk_seconds[1:]) / max(1, base.n_chunks - 1),
        "speedup_analytic": 1.0,
        "speedup_wall": 1.0,
    }]
    print(_line(rows[0]))
    for name, engine in ablation_grid(cfg):
        cached = run_rollout(cfg.model, engine, cfg.scenario)
        row, *_ = summarize(name, base, cached, overhead)
        rows.append(row)
        print(_line(row))
    (out_dir / "config.ini").write_text(serialize_config(cfg))
    write_summary_csv(
        out_dir / "ablation.csv",
        [_file_row(r, cfg.output.formats) for r in rows],
        first_column="configuration",
    )
    return rows


def cmd_report(trace_dir: Path, out_dir: Optional[Path] = None) -> None:
    missing = [f for f in REPORT_INPUTS if not (trace_dir / f).is_file()]
    if missing:
        raise TraceError(
            f"{trace_dir} is missing {missing}; a run directory holds {list(REPORT_INPUTS)}"
        )
    cfg = load_config(str(trace_dir / "config.ini"))
    trace = read_trace(trace_dir / "trace.jsonl")
    rows = read_chunks(trace_dir / "chunks.csv")
    rep = skip_report(trace, cfg.engine, cfg.model)
    out = out_dir or trace_dir
    out.mkdir(parents=True, exist_ok=True)
    for path in write_figure_data(out, rows, rep, cfg.engine):
        print(path)


# -- argument handling ----------------------------------------------------------


def _split_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}; overrides look like --section.key=value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            i += 1
            value = extra[i]
        out.append((key, value))
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="xcache",
        description="Cross-chunk block-residual caching benchmark on a toy AR DiT.",
        epilog="Any config key can be overridden as --section.key=value.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "paired baseline/cached rollout"), ("ablate", "protection and threshold ablation grid")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI file with [model], [engine], [scenario], [output]")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--seed", type=int, help="master model seed (overrides model.seed)")
    rp = sub.add_parser("report", help="regenerate figure data from a run directory")
    rp.add_argument("trace_dir", help="directory written by 'run'")
    rp.add_argument("--out", help="write figure data here instead of trace_dir")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "report":
            if extra:
                raise ConfigError(f"report takes no overrides, got {extra}")
            cmd_report(Path(args.trace_dir), Path(args.out) if args.out else None)
            return EXIT_OK
        overrides = _split_overrides(extra)
        if args.seed is not None:
            overrides.append(("model.seed", str(args.seed)))
        if args.out is not None:
            overrides.append(("output.directory", args.out))
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = Path(cfg.output.directory)
    try:
        if args.command == "run":
            cmd_run(cfg, out_dir)
        else:
            cmd_ablate(cfg, out_dir)
    except (NonFiniteError, TraceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
