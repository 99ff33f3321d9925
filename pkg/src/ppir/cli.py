"""Command-line driver: ``ppir {synth,register,bench,report}``.

Run configs are INI files with a ``[run]`` section and, for ``bench``, a
``[bench]`` section listing the backends and sampling strategies to cross.
Relative paths resolve against the config file's directory.

Exit codes: 0 success, 2 config error, 3 protocol error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import synth
from .errors import ProtocolError, TransportError
from .he import HeError
from .image import load_image
from .mpc import EncodingOverflowError
from .optimizer import NumericFailure, OptimizerConfig, StepFailure, intensity_error, register
from .protocols import BACKENDS, SessionConfig, establish_session
from .report import RunRecord, load_raw, save_raw, write_reports
from .transforms import AffineTransform, BSplineTransform, displacement_field, displacement_rmse

log = logging.getLogger("ppir")

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4

BACKEND_LABELS = {"clear": "Clear", "mpc": "PPIR(MPC)", "fhe-v1": "PPIR(FHE-v1)", "fhe-v2": "PPIR(FHE-v2)"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    fixture: str | None = None
    moving: str | None = None
    fixed: str | None = None
    truth: str | None = None
    model: str = "affine"
    control_spacing: float = 5.0
    cost: str = "ssd"
    bins: int = 32
    backend: str = "clear"
    sampling: str = "full"
    sample_fraction: float = 0.1
    levels: tuple = ((1, 0.0),)
    max_iters: int = 50
    epsilon: float = 1e-3
    ridge: float = 1e-6
    seed: int = 0
    crypto_seed: int | None = None
    repeats: int = 1
    transport: str = "loopback"
    block_size: int = 128
    out: str = "results"
    label: str | None = None

    def __post_init__(self):
        if self.model not in ("affine", "bspline"):
            raise ConfigError(f"model must be affine or bspline, got {self.model!r}")
        if self.cost not in ("ssd", "mi"):
            raise ConfigError(f"cost must be ssd or mi, got {self.cost!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.fixture is None and (self.moving is None or self.fixed is None):
            raise ConfigError("either fixture or both moving and fixed are required")
        if not (self.transport == "loopback" or self.transport.startswith("tcp:")):
            raise ConfigError(f"transport must be loopback or tcp:<host:port>, got {self.transport!r}")
        try:
            self.optimizer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def solution(self) -> str:
        if self.label:
            return self.label
        base = BACKEND_LABELS[self.backend]
        return base if self.sampling == "full" else f"{base} {self.sampling.upper()}"

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(epsilon=self.epsilon, max_iters=self.max_iters, levels=self.levels,
                               sampling=self.sampling, sample_fraction=self.sample_fraction,
                               backend=self.backend, seed=self.seed, ridge=self.ridge,
                               mi_bins=(self.bins, self.bins))

    def session_config(self, repeat: int) -> SessionConfig:
        seed = None if self.crypto_seed is None else self.crypto_seed + repeat
        return SessionConfig(backend=self.backend, block_size=self.block_size, seed=seed, dealer_seed=seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PATH_KEYS = ("fixture", "moving", "fixed", "truth", "out")


def parse_levels(text: str) -> tuple:
    """``"4:1.0, 2:1.0, 1:0"`` -> ``((4, 1.0), (2, 1.0), (1, 0.0))``."""
    levels = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m, _, sigma = part.partition(":")
        try:
            levels.append((int(m), float(sigma or 0.0)))
        except ValueError:
            raise ConfigError(f"bad level {part!r}; expected factor:sigma") from None
    if not levels:
        raise ConfigError("levels must not be empty")
    return tuple(levels)


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if key == "levels":
        return parse_levels(raw)
    try:
        if kind.startswith("int"):
            return None if raw.lower() in ("", "none") and "None" in kind else int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def _split_list(raw: str) -> list[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]


def load_config(path, overrides: dict | None = None) -> tuple[RunConfig, dict]:
    """Parse a run config. Returns ``(RunConfig, bench)`` where ``bench`` is
    the ``[bench]`` section (empty without one)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - {"run", "bench"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section")
    values = {}
    for key, raw in parser.items("run"):
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r} in [run]")
        values[key] = _convert(key, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    base = path.parent.resolve()
    for key in _PATH_KEYS:
        if values.get(key) is not None:
            values[key] = str((base / values[key]).resolve())
    bench = {}
    if parser.has_section("bench"):
        for key, raw in parser.items("bench"):
            if key not in ("backends", "samplings"):
                raise ConfigError(f"unknown key {key!r} in [bench]")
            bench[key] = _split_list(raw)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("fixture", "moving", "fixed", "truth"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{key} path does not exist: {p}")
    return cfg, bench


# ---------------------------------------------------------------------------
# Running

def load_inputs(cfg: RunConfig):
    if cfg.fixture is not None:
        fx = synth.load_fixture(cfg.fixture)
        return fx.moving, fx.fixed, fx.truth
    truth = synth.read_truth(cfg.truth) if cfg.truth else None
    return load_image(cfg.moving), load_image(cfg.fixed), truth


def initial_model(cfg: RunConfig, dims):
    if cfg.model == "affine":
        return AffineTransform.identity(len(dims))
    return BSplineTransform(tuple(dims), cfg.control_spacing)


def _registration(cfg: RunConfig, I, J, repeat: int = 0):
    """Run one registration; returns the result, HE counters and ledger lines."""
    session = establish_session(cfg.session_config(repeat), J, cfg.transport, session_id=repeat + 1)
    try:
        result = register(I, J.dims, initial_model(cfg, J.dims), cfg.cost, cfg.optimizer_config(), session)
        counters = session.he_counters()
        ledger = []
        if cfg.backend != "clear":
            ledger = list(session.ep.ledger.records())
            if session.server is not None:
                ledger += list(session.server.ep.ledger.records())
            for line in ledger:
                line["repeat"] = repeat
    finally:
        session.close()
    return result, counters, ledger


def run_cell(cfg: RunConfig, I, J, truth, reference=None):
    """All repeats of one configuration.

    ``reference`` is the clear full-sampling result, used for the
    RMSE-vs-clear column. Returns ``(records, ledger, results)``.
    """
    records, ledger, results = [], [], []
    for repeat in range(cfg.repeats):
        rec = RunRecord(cfg.solution, cfg.backend, cfg.sampling, cost=cfg.cost)
        try:
            result, counters, lines = _registration(cfg, I, J, repeat)
        except (ProtocolError, TransportError, HeError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            records.append(rec)
            continue
        ledger += lines
        results.append(result)
        if result.error:
            rec.error = result.error
        rec.iterations = result.total_iterations
        rec.intensity_error = intensity_error(I, J, result.params)
        if truth is not None:
            rec.rmse_truth = displacement_rmse(result.params, truth, J.dims)
        if reference is not None and cfg.backend != "clear":
            rec.rmse_clear = displacement_rmse(result.params, reference.params, J.dims)
        rec.time_party1 = result.per_iteration("cpu_party1")
        rec.time_party2 = result.per_iteration("cpu_party2")
        rec.comm_party1 = result.per_iteration("bytes_party1")
        rec.comm_party2 = result.per_iteration("bytes_party2")
        rec.he_rotations = sum(c.get("rotate", 0) for c in counters.values())
        rec.he_multiplications = sum(c.get("mul_plain", 0) for c in counters.values())
        trace = [c for level in result.cost_trace for c in level]
        rec.final_cost = trace[-1] if trace else None
        rec.theta = [float(v) for v in result.theta]
        records.append(rec)
    return records, ledger, results


def _clear_reference(cfg: RunConfig, I, J):
    """Standard registration in the clear with every voxel, the reference
    for the RMSE-vs-clear column."""
    result, _, _ = _registration(replace(cfg, backend="clear", sampling="full", repeats=1, label=None), I, J)
    return result


def _write_ledger(lines, path: Path):
    with path.open("w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def cmd_synth(kind: str, params: dict, seed: int, out) -> Path:
    fx = synth.make_fixture(kind, seed=seed, **params)
    return synth.write_fixture(fx, out)


def cmd_register(cfg: RunConfig) -> int:
    I, J, truth = load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reference = _clear_reference(cfg, I, J) if cfg.backend != "clear" else None
    records, ledger, results = run_cell(cfg, I, J, truth, reference)
    save_raw(records, out / "results.json")
    write_reports(records, out)
    _write_ledger(ledger, out / "ledger.jsonl")
    if results:
        final = results[-1]
        (out / "theta.json").write_text(json.dumps({"model": cfg.model, "theta": [float(v) for v in final.theta]},
                                                   indent=2) + "\n")
        np.save(out / "displacement.npy", displacement_field(final.params, J.dims))
    failed = [r for r in records if not r.ok]
    if failed:
        raise ProtocolError(failed[0].error)
    return EXIT_OK


def bench_cells(cfg: RunConfig, bench: dict) -> list[RunConfig]:
    backends = bench.get("backends") or [cfg.backend]
    samplings = bench.get("samplings") or [cfg.sampling]
    cells = []
    for backend in backends:
        for sampling in samplings:
            cells.append(replace(cfg, backend=backend, sampling=sampling, label=None))
    return cells


def cmd_bench(cfg: RunConfig, bench: dict) -> int:
    """Every cell of the matrix; failing cells are recorded and skipped."""
    I, J, truth = load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reference, all_records, all_ledger = None, [], []
    for cell in bench_cells(cfg, bench):
        log.info("cell %s", cell.solution)
        if cell.backend != "clear" and reference is None:
            reference = _clear_reference(cell, I, J)
        try:
            records, ledger, _ = run_cell(cell, I, J, truth, reference)
        except (StepFailure, NumericFailure, EncodingOverflowError, FloatingPointError) as exc:
            records = [RunRecord(cell.solution, cell.backend, cell.sampling, cost=cell.cost,
                                 error=f"{type(exc).__name__}: {exc}")]
            ledger = []
        for rec in records:
            if rec.error:
                log.error("cell %s failed: %s", cell.solution, rec.error)
        all_records += records
        all_ledger += [{"cell": cell.solution, **line} for line in ledger]
    save_raw(all_records, out / "results.json")
    write_reports(all_records, out, title="Benchmark")
    _write_ledger(all_ledger, out / "ledger.jsonl")
    return EXIT_OK


def cmd_report(out, title: str = "Registration metrics") -> int:
    out = Path(out)
    raw = out / "results.json"
    if not raw.is_file():
        raise ConfigError(f"no raw results at {raw}")
    write_reports(load_raw(raw), out, title)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point

def _params(items) -> dict:
    params = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        try:
            params[key.strip()] = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError):
            params[key.strip()] = value.strip()
    return params


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppir", description="Two-party privacy-preserving image registration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="write a synthetic fixture")
    s.add_argument("kind", choices=synth.KINDS)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="fixture parameter override")

    for name, text in (("register", "run one registration configuration"),
                       ("bench", "run a backend x sampling matrix")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", required=True)
        r.add_argument("--out")
        r.add_argument("--seed", type=int)
        r.add_argument("--transport")
        r.add_argument("--repeats", type=int)

    rep = sub.add_parser("report", help="regenerate reports from stored raw results")
    rep.add_argument("--out", required=True)
    rep.add_argument("--title", default="Registration metrics")
    return p


def _fail(exc: BaseException, code: int) -> int:
    """Module-tagged one-line diagnostic on stderr."""
    module = type(exc).__module__.rpartition(".")[2] or "ppir"
    print(f"error [{module}]: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "synth":
            path = cmd_synth(args.kind, _params(args.set), args.seed, args.out)
            print(path)
            return EXIT_OK
        if args.verb == "report":
            return cmd_report(args.out, args.title)
        overrides = {"out": args.out and str(Path(args.out).resolve()), "seed": args.seed,
                     "transport": args.transport, "repeats": args.repeats}
        cfg, bench = load_config(args.config, overrides)
        if args.verb == "register":
            code = cmd_register(cfg)
        else:
            code = cmd_bench(cfg, bench)
        print(Path(cfg.out) / "metrics.csv")
        return code
    except (EncodingOverflowError, StepFailure, NumericFailure, ArithmeticError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (ProtocolError, TransportError, HeError) as exc:
        return _fail(exc, EXIT_PROTOCOL)
    except (ConfigError, OSError, TypeError, ValueError) as exc:
        return _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
