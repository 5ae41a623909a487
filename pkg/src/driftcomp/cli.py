"""Command-line entry point.

Subcommands: `simulate` (write a synthetic stream as FTD dumps),
`run` (one method over a stream), `compare` (several methods on one
stream), `inspect` (print binary file headers).

Configs are flat `key = value` files with `[section]` headers; every flag
mirrors a key and the command line wins. Exit codes: 0 success, 2 config
error, 3 data/format error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import struct
import sys
from pathlib import Path

from .classifier import RefineConfig
from .errors import ConfigError, DriftCompError, FormatError
from .features import load_dump
from .harness import METHODS, RunConfig, compare, comparison_text, run
from .simulate import PRESETS, SimConfig, export_stream, gen_stream, preset
from .weaknl import OperatorTrainConfig


def _coerce(cls, raw: dict) -> dict:
    """Convert a string-valued section into kwargs for a dataclass."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        hint = fields[key].type
        text = value.strip()
        if text.lower() in ("none", ""):
            kwargs[key] = None
        elif "int" in hint and "|" not in hint:
            kwargs[key] = int(text)
        elif hint.startswith("int"):
            kwargs[key] = int(text)
        elif "float" in hint:
            kwargs[key] = float(text)
        else:
            kwargs[key] = text
    return kwargs


def _read_config(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


def _sim_from(sections: dict, args) -> SimConfig | None:
    base = None
    preset_name = getattr(args, "preset", None) or sections.get("run", {}).pop(
        "preset", None
    )
    overrides = _coerce(SimConfig, sections.get("sim", {}))
    if preset_name:
        base = preset(preset_name, **overrides)
    elif overrides:
        base = SimConfig(**overrides)
    if base is not None and getattr(args, "seed", None) is not None:
        base = dataclasses.replace(base, seed=args.seed)
    return base


def _run_config(args) -> RunConfig:
    sections = _read_config(args.config) if args.config else {}
    run_kwargs = _coerce(RunConfig, {
        k: v for k, v in sections.get("run", {}).items() if k != "preset"
    })
    sim = _sim_from(sections, args)
    if sim is not None:
        run_kwargs["sim"] = sim
        run_kwargs.pop("manifest", None)
    if sections.get("operator_train"):
        run_kwargs["operator_train"] = OperatorTrainConfig(
            **_coerce(OperatorTrainConfig, sections["operator_train"]))
    if sections.get("refine"):
        run_kwargs["refine"] = RefineConfig(
            **_coerce(RefineConfig, sections["refine"]))
    if sections.get("ce"):
        run_kwargs["ce"] = RefineConfig(**_coerce(RefineConfig, sections["ce"]))

    if args.method:
        run_kwargs["method"] = args.method
    if args.ade is not None:
        run_kwargs["ade"] = args.ade
    if args.seed is not None:
        run_kwargs["seed"] = args.seed
    if args.out:
        run_kwargs["out"] = args.out
    if getattr(args, "manifest", None):
        run_kwargs["manifest"] = args.manifest
        run_kwargs.pop("sim", None)
    return RunConfig(**run_kwargs)


def _cmd_simulate(args) -> int:
    sections = _read_config(args.config) if args.config else {}
    sim = _sim_from(sections, args)
    if sim is None:
        raise ConfigError("simulate needs --preset or a [sim] config section")
    manifest = export_stream(gen_stream(sim), args.out or "stream")
    print(manifest)
    return 0


def _cmd_run(args) -> int:
    report = run(_run_config(args))
    sys.stdout.write(report.to_json() if args.json else report.to_text())
    return 0


def _cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("compare needs --methods m1,m2,...")
    base = _run_config(args)
    cfgs = [dataclasses.replace(base, method=m, out=None) for m in methods]
    table = compare(cfgs)
    if args.json:
        slim = {"schema": table["schema"], "rows": table["rows"]}
        sys.stdout.write(json.dumps(slim, sort_keys=True, indent=2) + "\n")
    else:
        sys.stdout.write(comparison_text(table))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(
            json.dumps({"schema": table["schema"], "rows": table["rows"]},
                       sort_keys=True, indent=2) + "\n")
    return 0


_HEADERS = {
    b"FTDK": "<4sHHIQIB",
    b"GBNK": "<4sHI",
    b"LOP1": "<4sIdddQd",
    b"WNL1": "<4sIIddd",
    b"LCLF": "<4sII",
}


def _cmd_inspect(args) -> int:
    path = Path(args.path)
    blob = path.read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short to carry a magic")
    magic = blob[:4]
    if magic not in _HEADERS:
        raise FormatError(f"{path}: unrecognized magic {magic!r}")
    if magic == b"FTDK":
        m = load_dump(path)
        print(f"FTD dump: d={m.d} n={m.n} task_id={m.task_id} "
              f"model_tag={m.model_tag!r} classes={m.class_ids()}")
        return 0
    layout = _HEADERS[magic]
    values = struct.unpack_from(layout, blob)
    names = {
        b"GBNK": ("magic", "version", "classes"),
        b"LOP1": ("magic", "d", "gamma", "alpha_temp", "residual_mse",
                  "n_fit", "w_applied"),
        b"WNL1": ("magic", "d", "h", "gamma2", "c1", "c2"),
        b"LCLF": ("magic", "d", "classes"),
    }[magic]
    rendered = " ".join(f"{k}={v!r}" if isinstance(v, bytes) else f"{k}={v}"
                        for k, v in zip(names, values))
    print(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftcomp")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic stream as FTD dumps")
    sim.add_argument("--config", help="config file with a [sim] section")
    sim.add_argument("--preset", choices=sorted(PRESETS))
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(fn=_cmd_simulate)

    def run_flags(p):
        p.add_argument("--config", help="config file")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--ade", type=int, help="auxiliary pairs for the fit")
        p.add_argument("--manifest", help="run on dumped FTD data")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="report output directory")
        p.add_argument("--json", action="store_true")

    runp = sub.add_parser("run", help="one method over a stream")
    run_flags(runp)
    runp.set_defaults(fn=_cmd_run)

    cmp_ = sub.add_parser("compare", help="several methods, one stream")
    run_flags(cmp_)
    cmp_.add_argument("--methods", default="",
                      help="comma-separated method list")
    cmp_.set_defaults(fn=_cmd_compare)

    ins = sub.add_parser("inspect", help="print a binary file header")
    ins.add_argument("path")
    ins.set_defaults(fn=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DriftCompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
