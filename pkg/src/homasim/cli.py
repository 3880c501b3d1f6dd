"""Command-line driver: single runs, sweeps, max-load searches and ablations.

Configuration is YAML with one section per concern::

    topology:  {num_racks: 4, hosts_per_rack: 4, num_aggr_switches: 1}
    transport: {overcommit: 7}
    workload:  {cdf: w4, load: 0.8, duration_ms: 20}
    sweep:     {param: transport.overcommit, values: [1, 2, 4, 7]}
    seeds:     [1, 2]
    output_dir: out

Every key is optional; unknown keys are rejected with the line they sit on.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import yaml

from .experiment import ExperimentConfig, ExperimentResult, run_experiment
from .fabric import Topology, WireModel
from .metrics import write_waste
from .protocol import UNLIMITED, TransportConfig
from .sim_core import NS_PER_MS
from .workload import MODES, resolve_cdf

log = logging.getLogger("homasim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
RESOLVED_NAME = "resolved_config.yaml"


class ConfigError(Exception):
    """Invalid configuration; the message names the field and, when known, the line."""


# ------------------------------------------------------------------ schema

def _fields(cls) -> dict[str, Any]:
    return {f.name: f for f in dataclasses.fields(cls)}


WORKLOAD_KEYS = {
    "cdf": "w3",
    "load": 0.8,
    "mode": "oneway",
    "duration_ms": 10.0,
    "drain_ms": 0.0,
    "warmup_fraction": 0.1,
}
RUN_KEYS = {"network_priorities": 8, "max_pending": None, "samples": 40}
MAX_LOAD_KEYS = {"step": 0.02, "low": 0.3, "high": 0.99, "tolerance": 0.02}
SECTIONS = {
    "topology": {k: f.default for k, f in _fields(Topology).items()},
    "wire": {k: f.default for k, f in _fields(WireModel).items()},
    "transport": {k: f.default for k, f in _fields(TransportConfig).items()},
    "workload": WORKLOAD_KEYS,
    "run": RUN_KEYS,
    "max_load": MAX_LOAD_KEYS,
}
TOP_LEVEL = set(SECTIONS) | {"sweep", "seeds", "output_dir"}


def default_tree() -> dict:
    tree = {name: dict(keys) for name, keys in SECTIONS.items()}
    tree["sweep"] = None
    tree["seeds"] = [1]
    tree["output_dir"] = "homasim-out"
    return tree


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, by its dotted path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, str(k.value))
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, ())
    return lines


def parse_config(text: str, source: str = "<config>") -> dict:
    """YAML text to a validated config tree merged over the defaults."""
    try:
        raw = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: not valid YAML: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")

    def where(*path):
        line = lines.get(tuple(path))
        return f"{source}:{line}" if line else source

    tree = default_tree()
    for key, value in raw.items():
        if key not in TOP_LEVEL:
            raise ConfigError(f"{where(key)}: unknown section {key!r}; "
                              f"expected one of {', '.join(sorted(TOP_LEVEL))}")
        if key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{where(key)}: section {key!r} must be a mapping")
            for sub, v in value.items():
                if sub not in SECTIONS[key]:
                    raise ConfigError(f"{where(key, sub)}: unknown key {key}.{sub}; "
                                      f"expected one of {', '.join(sorted(SECTIONS[key]))}")
                tree[key][sub] = v
        else:
            tree[key] = value
    _check_tree(tree, where)
    return tree


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read: {e.strerror}") from None
    return parse_config(text, str(path))


def _check_tree(tree: dict, where: Callable[..., str]) -> None:
    seeds = tree["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        tree["seeds"] = seeds = [seeds]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        raise ConfigError(f"{where('seeds')}: seeds must be a non-empty list of integers")
    if not isinstance(tree["output_dir"], str):
        raise ConfigError(f"{where('output_dir')}: output_dir must be a string")
    sweep = tree["sweep"]
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) != {"param", "values"}:
            raise ConfigError(f"{where('sweep')}: sweep needs exactly 'param' and 'values'")
        param = sweep["param"]
        sec, _, key = str(param).partition(".")
        if sec not in SECTIONS or key not in SECTIONS[sec]:
            raise ConfigError(f"{where('sweep', 'param')}: unknown sweep parameter {param!r}")
        if not isinstance(sweep["values"], list) or not sweep["values"]:
            raise ConfigError(f"{where('sweep', 'values')}: values must be a non-empty list")
    # Build every point once so type and range errors surface before any run.
    for point in expand(tree):
        try:
            build_experiment(point.tree)
        except ConfigError as e:
            raise ConfigError(f"{where(*e.args[1]) if len(e.args) > 1 else where()}: "
                              f"{e.args[0]}") from None


# ------------------------------------------------------------------ builders

def _overcommit(v):
    if v is None:
        return None
    if isinstance(v, str) and v.lower() in ("unlimited", "inf", "infinite"):
        return UNLIMITED
    return v


def _build(cls, section: str, values: dict, convert: dict | None = None):
    kwargs = dict(values)
    try:
        for k, fn in (convert or {}).items():
            kwargs[k] = fn(kwargs[k])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}", (section,)) from None
    # Types first, so range checks in the constructor never see a string.
    for f in dataclasses.fields(cls):
        v = kwargs.get(f.name)
        if v is None:
            continue
        expect = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if "bool" in expect and not isinstance(v, bool):
            raise ConfigError(f"{section}.{f.name} must be true or false", (section, f.name))
        if ("int" in expect or "float" in expect) and (
                isinstance(v, bool) or not isinstance(v, (int, float, tuple))):
            raise ConfigError(f"{section}.{f.name} must be a number", (section, f.name))
        if expect.startswith("int") and isinstance(v, float):
            raise ConfigError(f"{section}.{f.name} must be an integer", (section, f.name))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        named = [f.name for f in dataclasses.fields(cls) if str(e).startswith(f.name)]
        path = (section, named[0]) if named else (section,)
        raise ConfigError(f"{section}: {e}", path) from None


def _cutoffs(v):
    return None if v is None else tuple(v)


def build_experiment(tree: dict) -> ExperimentConfig:
    """Config tree to an :class:`ExperimentConfig`; raises :class:`ConfigError`."""
    topo = _build(Topology, "topology", tree["topology"])
    wire = _build(WireModel, "wire", tree["wire"])
    transport = _build(TransportConfig, "transport", tree["transport"],
                       {"overcommit": _overcommit, "cutoffs": _cutoffs})
    wl, run = tree["workload"], tree["run"]
    if wl["mode"] not in MODES:
        raise ConfigError(f"workload.mode must be one of {', '.join(MODES)}", ("workload", "mode"))
    try:
        resolve_cdf(str(wl["cdf"]))
    except (KeyError, OSError, ValueError) as e:
        raise ConfigError(f"workload.cdf: {e}", ("workload", "cdf")) from None
    load = wl["load"]
    if isinstance(load, bool) or not isinstance(load, (int, float)) or not 0 <= load < 1:
        raise ConfigError("workload.load must be a number within [0, 1)", ("workload", "load"))
    for key in ("duration_ms", "drain_ms", "warmup_fraction"):
        if isinstance(wl[key], bool) or not isinstance(wl[key], (int, float)):
            raise ConfigError(f"workload.{key} must be a number", ("workload", key))
    if wl["duration_ms"] <= 0:
        raise ConfigError("workload.duration_ms must be > 0", ("workload", "duration_ms"))
    np_ = run["network_priorities"]
    if isinstance(np_, bool) or not isinstance(np_, int) or not 1 <= np_ <= 8:
        raise ConfigError("run.network_priorities must be an integer within 1..8",
                          ("run", "network_priorities"))
    ml = tree["max_load"]
    for key in MAX_LOAD_KEYS:
        if isinstance(ml[key], bool) or not isinstance(ml[key], (int, float)):
            raise ConfigError(f"max_load.{key} must be a number", ("max_load", key))
    if ml["step"] <= 0:
        raise ConfigError("max_load.step must be > 0", ("max_load", "step"))
    if not 0 <= ml["low"] < ml["high"] < 1:
        raise ConfigError("max_load needs 0 <= low < high < 1", ("max_load", "low"))
    try:
        return ExperimentConfig(
            topology=topo, wire=wire, transport=transport, workload=str(wl["cdf"]),
            load=float(load), mode=wl["mode"], duration_ns=round(wl["duration_ms"] * NS_PER_MS),
            drain_ns=round(wl["drain_ms"] * NS_PER_MS), warmup_fraction=wl["warmup_fraction"],
            seed=tree["seeds"][0], network_priorities=np_, max_pending=run["max_pending"],
            samples=run["samples"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), ("workload",)) from None


# ------------------------------------------------------------------ sweeps

@dataclass
class Point:
    label: str
    tree: dict
    seed: int
    value: Any = None


def _set(tree: dict, param: str, value) -> None:
    sec, _, key = param.partition(".")
    tree[sec][key] = value


def _label(param: str | None, value, seed: int) -> str:
    if param is None:
        return f"seed={seed}"
    v = ",".join(map(str, value)) if isinstance(value, list) else str(value)
    return f"{param.split('.', 1)[1]}={v}_seed={seed}"


def expand(tree: dict) -> Iterator[Point]:
    """One point per (sweep value, seed); each tree is self-contained."""
    sweep = tree["sweep"]
    values = sweep["values"] if sweep else [None]
    for value in values:
        for seed in tree["seeds"]:
            t = copy.deepcopy(tree)
            t["sweep"] = None
            t["seeds"] = [seed]
            if sweep:
                _set(t, sweep["param"], value)
            yield Point(_label(sweep["param"] if sweep else None, value, seed), t, seed, value)


def dump_tree(tree: dict) -> str:
    t = copy.deepcopy(tree)
    cut = t["transport"].get("cutoffs")
    if isinstance(cut, tuple):
        t["transport"]["cutoffs"] = list(cut)
    return yaml.safe_dump(t, sort_keys=False)


def run_point(point: Point, out_dir: Path) -> ExperimentResult:
    cfg = build_experiment(point.tree)
    pdir = out_dir / point.label
    pdir.mkdir(parents=True, exist_ok=True)
    echo = copy.deepcopy(point.tree)
    echo["output_dir"] = str(pdir)
    (pdir / RESOLVED_NAME).write_text(dump_tree(echo))
    log.info("running %s", point.label)
    result = run_experiment(cfg)
    result.write_outputs(pdir)
    if result.truncated:
        (pdir / "warnings.txt").write_text(
            "truncated: pending events exceeded the safety cap; results cover the run up to "
            f"t={result.end_ns} ns\n")
    log.info("%s: offered %.3f delivered %.3f", point.label, result.offered_load,
             result.delivered_load)
    return result


def run_all(tree: dict, out_dir: Path) -> list[ExperimentResult]:
    return [run_point(p, out_dir) for p in expand(tree)]


# ------------------------------------------------------------------ max load

@dataclass
class MaxLoadResult:
    label: str
    max_load: float
    probes: list[tuple[float, bool, float, float]] = field(default_factory=list)
    """(target load, sustainable, measured offered load, waste fraction) per probe."""


def sweep_max_load(tree: dict, step: float | None = None,
                   progress: Callable[[str, float, ExperimentResult], None] | None = None,
                   ) -> list[MaxLoadResult]:
    """Highest sustainable target load for every sweep point, on a ``step`` grid.

    Bisection over ``[max_load.low, max_load.high]``: ``low`` is assumed
    sustainable until shown otherwise and ``high`` is probed first.
    """
    ml = tree["max_load"]
    step = ml["step"] if step is None else step
    if step <= 0:
        raise ConfigError("step must be > 0")
    out = []
    for point in expand(tree):
        res = MaxLoadResult(point.label, 0.0)

        def probe(load: float) -> bool:
            t = copy.deepcopy(point.tree)
            t["workload"]["load"] = load
            r = run_experiment(build_experiment(t))
            ok = r.sustainable(ml["tolerance"])
            res.probes.append((load, ok, r.offered_load, r.waste))
            if progress:
                progress(point.label, load, r)
            return ok

        lo_i = 0
        hi_i = int(round((ml["high"] - ml["low"]) / step))
        grid = lambda i: round(ml["low"] + i * step, 6)  # noqa: E731
        if probe(grid(hi_i)):
            res.max_load = grid(hi_i)
        elif not probe(grid(lo_i)):
            res.max_load = 0.0
        else:
            while hi_i - lo_i > 1:
                mid = (lo_i + hi_i) // 2
                if probe(grid(mid)):
                    lo_i = mid
                else:
                    hi_i = mid
            res.max_load = grid(lo_i)
        out.append(res)
    return out


def write_max_load(out_dir: Path, results: list[MaxLoadResult], k_of: Callable[[str], str]) -> None:
    import csv
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "max_load.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("point", "max_load"))
        for r in results:
            w.writerow((r.label, f"{r.max_load:.4f}"))
    rows = []
    for r in results:
        for load, _, _, waste in r.probes:
            rows.append((load, k_of(r.label), waste))
    write_waste(out_dir / "waste.csv", rows)
    with open(out_dir / "probes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("point", "load", "sustainable", "offered_load", "wasted_fraction"))
        for r in results:
            for load, ok, offered, waste in r.probes:
                w.writerow((r.label, f"{load:.4f}", int(ok), f"{offered:.4f}", f"{waste:.6f}"))


# ------------------------------------------------------------------ ablation

def apply_variant(tree: dict, variant: str) -> dict:
    """Copy of ``tree`` with one knob changed.

    ``priorities=X``      the fabric honours only X levels (adjacent levels merge)
    ``overcommit=K``      K may be an integer or ``unlimited``
    ``basic``             unlimited overcommitment and a single priority level
    ``unsched_limit=B``   bytes sent before the first grant
    ``cutoffs=a,b,...``   manual unscheduled cutoffs, ascending
    """
    t = copy.deepcopy(tree)
    name, _, arg = variant.partition("=")
    name = name.strip().lower()
    try:
        if name == "basic" and not arg:
            t["transport"]["overcommit"] = "unlimited"
            t["run"]["network_priorities"] = 1
        elif name == "priorities":
            t["run"]["network_priorities"] = int(arg)
        elif name == "overcommit":
            t["transport"]["overcommit"] = arg if arg.lower() == "unlimited" else int(arg)
        elif name == "unsched_limit":
            t["transport"]["unsched_limit"] = int(arg)
        elif name == "cutoffs":
            cut = [int(x) for x in arg.split(",") if x.strip()]
            if not cut:
                raise ValueError
            t["transport"]["cutoffs"] = cut
            t["transport"]["unsched_levels"] = len(cut) + 1
        else:
            raise ConfigError(f"unknown variant {variant!r}")
    except ValueError:
        raise ConfigError(f"bad value in variant {variant!r}") from None
    build_experiment(t)
    return t


# ------------------------------------------------------------------ entry

def _parse_sweep(text: str, tree: dict) -> None:
    param, sep, vals = text.partition("=")
    if not sep:
        raise ConfigError(f"--sweep expects param=v1,v2,...; got {text!r}")
    tree["sweep"] = {"param": param.strip(),
                     "values": [yaml.safe_load(v) for v in vals.split(",") if v.strip()]}


def _prepare(args) -> tuple[dict, Path]:
    tree = load_config(args.config) if args.config else default_tree()
    if args.seed:
        tree["seeds"] = list(args.seed)
    if args.sweep:
        _parse_sweep(args.sweep, tree)
    _check_tree(tree, lambda *p: "command line")
    out = Path(args.out or tree["output_dir"])
    return tree, out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="?", help="YAML configuration file")
    common.add_argument("-o", "--out", help="output directory (overrides output_dir)")
    common.add_argument("-s", "--seed", type=int, action="append",
                        help="seed; repeat for several (overrides seeds)")
    common.add_argument("--sweep", help="param=v1,v2,... (overrides the sweep section)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="homasim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment or a sweep")
    ml = sub.add_parser("max-load", parents=[common], help="search the highest sustainable load")
    ml.add_argument("--step", type=float, help="load grid step (overrides max_load.step)")
    ab = sub.add_parser("ablate", parents=[common], help="run with one knob changed")
    ab.add_argument("variant", help="priorities=X | overcommit=K | basic | unsched_limit=B | "
                                    "cutoffs=a,b,...")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        tree, out = _prepare(args)
        if args.command == "ablate":
            tree = apply_variant(tree, args.variant)
            out = out / args.variant.replace(",", "_")
        if args.command == "max-load" and args.step is not None and args.step <= 0:
            raise ConfigError("--step must be > 0")
    except ConfigError as e:
        print(f"config error: {e.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "max-load":
            def progress(label, load, r):
                log.info("%s load=%.3f offered=%.3f sustainable=%s", label, load,
                         r.offered_load, r.sustainable(tree["max_load"]["tolerance"]))
            results = sweep_max_load(tree, args.step, progress)
            write_max_load(out, results, lambda label: label.split("_seed=")[0])
            for r in results:
                print(f"{r.label}\t{r.max_load:.3f}")
        else:
            run_all(tree, out)
    except ConfigError as e:
        print(f"config error: {e.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
