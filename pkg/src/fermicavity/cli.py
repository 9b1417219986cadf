"""Scenario-driven command line front end.

Scenario files are INI text.  Keys are flat: the section headers only group
them for readability, and a key may appear in any section.  ``[variant.X]``
sections override base keys and produce one output per variant; a
``[sweep]`` section supplies default ``axis`` and ``values`` for ``sweep``.

    fermicavity run fig2a --out results/
    fermicavity sweep fig8 --axis photons --values 6,8,10
    FC_NA=3 fermicavity run my.ini
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bragg import (
    BraggConfig,
    bragg_spectrum,
    integrate_bloch,
    measure_collapse_revival,
    run_bragg_analytic,
    run_bragg_exact,
    t_revival,
)
from .config import FieldKind, FieldSpec, Quantization, Regime, SimulationConfig
from .errors import ConfigError, FermiCavityError, IncompatibleSolverError
from .moments import ClosureOrder, run_moments
from .observables import (
    expect_product,
    factorized_third_order,
    kf_position,
    third_order_ops,
)
from .propagator import band_analysis
from .simulation import run_exact

log = logging.getLogger(__name__)

SOLVERS = ("exact", "moments1", "moments2", "bragg-exact", "bragg-analytic", "bloch", "spectrum")
SWEEP_AXES = ("photons", "Na", "kF", "E2q", "g", "nd", "t_max", "epsilon")

DEFAULTS = {
    "solver": "exact",
    "regime": "raman-nath",
    "quantization": "running",
    "field": "fock",
    "photons": "3, 3",
    "phases": "",
    "epsilon": "1e-8",
    "Na": "2",
    "kF": "0.1",
    "E2q": "1.0",
    "g": "1.0",
    "nd": "2",
    "t_max": "10.0",
    "samples": "201",
    "tol": "1e-10",
    "coherent_mode": "projected",
    "third_order": "none",
    "direct_revival": "false",
    "output": "",
}
KEYS = {k.lower(): k for k in DEFAULTS}
CSV_FORMAT = "{:.15g}"


@dataclass
class Scenario:
    name: str
    params: dict[str, str]
    variant: str | None = None

    def get(self, key: str) -> str:
        return self.params[key]

    def number(self, key: str, kind=float):
        raw = self.params[key]
        try:
            return kind(float(raw)) if kind is int and float(raw).is_integer() else kind(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} = {raw!r} is not a valid number") from exc

    def numbers(self, key: str) -> tuple[float, ...]:
        raw = self.params[key].strip()
        if not raw:
            return ()
        try:
            return tuple(float(v) for v in raw.replace(";", ",").split(","))
        except ValueError as exc:
            raise ConfigError(f"{key} = {raw!r} is not a list of numbers") from exc

    @property
    def label(self) -> str:
        base = self.params["output"] or self.name
        return f"{base}.{self.variant}" if self.variant else base

    def with_value(self, key: str, value: str) -> "Scenario":
        params = dict(self.params)
        params[key] = value
        return Scenario(self.name, params, self.variant)


@dataclass
class RunOutput:
    columns: dict[str, np.ndarray]
    manifest: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    summary: dict[str, float] = field(default_factory=dict)


# --- scenario loading --------------------------------------------------------


def packaged_scenarios() -> list[str]:
    root = resources.files("fermicavity") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def _read_text(source: str) -> tuple[str, str]:
    path = Path(source)
    if path.is_file():
        return path.stem, path.read_text()
    packaged = resources.files("fermicavity") / "scenarios" / f"{source}.ini"
    if packaged.is_file():
        return source, packaged.read_text()
    raise ConfigError(f"no scenario file or packaged scenario named {source!r}")


def _canonical(key: str) -> str:
    try:
        return KEYS[key.lower()]
    except KeyError:
        raise ConfigError(f"unknown scenario key {key!r}") from None


def load_scenario(source: str, environ=None) -> tuple[list[Scenario], dict[str, str]]:
    """Parse a scenario into its variants and the sweep defaults.

    Precedence, lowest first: built-in defaults, base sections, the variant
    section, ``FC_<KEY>`` environment variables.
    """
    name, text = _read_text(source)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}".splitlines()[0]) from exc
    base = dict(DEFAULTS)
    variants: list[tuple[str, dict[str, str]]] = []
    sweep: dict[str, str] = {}
    for section in parser.sections():
        items = {k: v for k, v in parser.items(section)}
        if section == "sweep":
            sweep = {k.lower(): v for k, v in items.items()}
        elif section.startswith("variant."):
            variants.append((section[len("variant."):], {_canonical(k): v for k, v in items.items()}))
        else:
            base.update({_canonical(k): v for k, v in items.items()})
    env = os.environ if environ is None else environ
    overrides = {
        KEYS[k[3:].lower()]: v for k, v in env.items() if k.startswith("FC_") and k[3:].lower() in KEYS
    }
    if not variants:
        return [Scenario(name, {**base, **overrides})], sweep
    return [Scenario(name, {**base, **vals, **overrides}, vname) for vname, vals in variants], sweep


# --- config construction -----------------------------------------------------


def _enum(kind, raw: str, key: str):
    try:
        return kind(raw.strip().lower())
    except ValueError:
        allowed = ", ".join(m.value for m in kind)
        raise ConfigError(f"{key} must be one of {allowed}, got {raw!r}") from None


def field_spec(sc: Scenario) -> FieldSpec:
    kind = _enum(FieldKind, sc.get("field"), "field")
    photons = sc.numbers("photons")
    quantization = _enum(Quantization, sc.get("quantization"), "quantization")
    if quantization is Quantization.RUNNING and len(photons) == 1:
        photons = photons * 2
    if kind is FieldKind.FOCK:
        if any(p != int(p) for p in photons):
            raise ConfigError("Fock photon numbers must be integers")
        return FieldSpec.fock(*(int(p) for p in photons))
    return FieldSpec.coherent(*photons, phases=sc.numbers("phases"), truncation_epsilon=sc.number("epsilon"))


def time_grid(sc: Scenario) -> np.ndarray:
    samples = sc.number("samples", int)
    t_max = sc.number("t_max")
    if samples < 2 or t_max <= 0:
        raise ConfigError("need samples >= 2 and t_max > 0")
    return np.linspace(0.0, t_max, samples)


def simulation_config(sc: Scenario) -> SimulationConfig:
    return SimulationConfig(
        field=field_spec(sc),
        regime=_enum(Regime, sc.get("regime"), "regime"),
        quantization=_enum(Quantization, sc.get("quantization"), "quantization"),
        g=sc.number("g"),
        E2q=sc.number("E2q"),
        kF=sc.number("kF"),
        Na=sc.number("Na", int),
        nd=sc.number("nd", int),
        t_grid=time_grid(sc),
    )


def bragg_config(sc: Scenario) -> BraggConfig:
    if _enum(Regime, sc.get("regime"), "regime") is not Regime.BRAGG:
        raise IncompatibleSolverError(f"solver {sc.get('solver')} needs regime = bragg")
    return BraggConfig(
        Na=sc.number("Na", int),
        kF=sc.number("kF"),
        E2q=sc.number("E2q"),
        g=sc.number("g"),
        field=field_spec(sc),
        quantization=_enum(Quantization, sc.get("quantization"), "quantization"),
    )


# --- solvers -----------------------------------------------------------------


def _series_columns(series) -> dict[str, np.ndarray]:
    cols = {"t": series.times}
    cols.update(series.channels)
    return cols


def _drift_manifest(drifts: dict[str, float]) -> dict[str, str]:
    return {f"drift.{k}": CSV_FORMAT.format(v) for k, v in sorted(drifts.items())}


def _check_drifts(drifts: dict[str, float], tol: float) -> list[str]:
    limit = max(100 * tol, 1e-8)
    return [f"conserved quantity {k} drifted by {v:.3e}" for k, v in sorted(drifts.items()) if v > limit]


def _third_order_channels(which: str) -> dict:
    """Exact triple product plus every single and pair sub-product, so the
    factorized value can be formed from ensemble-averaged moments."""

    def product(picks):
        def fn(psi, basis):
            ops = third_order_ops(which, kf_position(basis))
            return expect_product(psi, basis, [ops[k] for k in picks])

        return fn

    chans = {"t3": product((0, 1, 2))}
    for i in range(3):
        chans[f"o{i + 1}"] = product((i,))
        for j in range(i + 1, 3):
            chans[f"o{i + 1}{j + 1}"] = product((i, j))
    return chans


def solve_exact(sc: Scenario, tol: float, threads: int) -> RunOutput:
    config = simulation_config(sc)
    which = sc.get("third_order").strip().lower()
    extra = None
    if which != "none":
        if which not in ("ffa", "faa"):
            raise ConfigError("third_order must be none, ffa or faa")
        if config.quantization is not Quantization.RUNNING:
            raise IncompatibleSolverError("third-order field correlators need a running wave")
        extra = _third_order_channels(which)
    result = run_exact(config, tol=tol, threads=threads, extra=extra)
    channels = result.series.channels
    if extra:
        first = {str(i): channels.pop(f"o{i}") for i in (1, 2, 3)}
        second = {k: channels.pop(f"o{k}") for k in ("12", "13", "23")}
        t3 = channels.pop("t3")
        channels[f"{which}_exact"] = t3.real
        channels[f"{which}_factorized"] = factorized_third_order(first, second, which).real
    out = RunOutput(_series_columns(result.series))
    out.manifest.update(_drift_manifest(result.drifts))
    out.manifest["max_sector_dim"] = str(max(result.dims))
    out.warnings.extend(result.series.flags)
    out.warnings.extend(_check_drifts(result.drifts, tol))
    return out


def solve_moments(sc: Scenario, order: ClosureOrder, tol: float) -> RunOutput:
    series, traj = run_moments(simulation_config(sc), order, tol=tol)
    out = RunOutput(_series_columns(series))
    if traj is not None:
        out.manifest["hermiticity_deviation"] = CSV_FORMAT.format(traj.max_hermiticity_deviation)
        if traj.negative_occupation_time is not None:
            out.manifest["negative_occupation_time"] = CSV_FORMAT.format(traj.negative_occupation_time)
            out.manifest["negative_occupation_value"] = CSV_FORMAT.format(traj.negative_occupation_value)
    out.warnings.extend(series.flags)
    return out


def _bragg_output(result, times, tol) -> RunOutput:
    out = RunOutput(_series_columns(result.series))
    out.manifest.update(_drift_manifest(result.drifts))
    out.warnings.extend(_check_drifts(result.drifts, tol))
    cr = measure_collapse_revival(times, result.series.channels["N_sc"])
    for key in ("collapse_time", "revival_time", "revival_peak_time"):
        value = getattr(cr, key)
        out.manifest[key] = "none" if value is None else CSV_FORMAT.format(value)
        out.summary[key] = np.nan if value is None else value
    return out


def solve_bragg_exact(sc: Scenario, tol: float, threads: int) -> RunOutput:
    cfg, times = bragg_config(sc), time_grid(sc)
    mode = sc.get("coherent_mode").strip().lower()
    return _bragg_output(run_bragg_exact(cfg, times, tol=tol, coherent_mode=mode, threads=threads), times, tol)


def solve_bragg_analytic(sc: Scenario, tol: float) -> RunOutput:
    cfg, times = bragg_config(sc), time_grid(sc)
    return _bragg_output(run_bragg_analytic(cfg, times), times, tol)


def solve_bloch(sc: Scenario, tol: float) -> RunOutput:
    cfg = bragg_config(sc)
    traj = integrate_bloch(cfg, time_grid(sc), tol=tol)
    out = RunOutput(_series_columns(traj.series))
    cols = out.columns
    cols["Jx"], cols["Jy"], cols["Jz"] = traj.J.T
    drifts = traj.invariant_drift()
    out.manifest.update(_drift_manifest(drifts))
    out.warnings.extend(_check_drifts(drifts, tol))
    return out


def solve_spectrum(sc: Scenario, tol: float) -> RunOutput:
    cfg = bragg_config(sc)
    proj = bragg_spectrum(cfg)
    bands = band_analysis(proj)
    out = RunOutput(
        {
            "band_center": np.array([b.center for b in bands.bands]),
            "band_width": np.array([b.width for b in bands.bands]),
            "band_weight": np.array([b.weight for b in bands.bands]),
            "band_members": np.array([float(len(b.members)) for b in bands.bands]),
        }
    )
    inverse = bands.inverse_revival_frequency
    j = cfg.field.total_mean / 2
    out.summary = {
        "inverse_revival_frequency": np.nan if inverse is None else inverse,
        "matrix_element_estimate": 2 * np.pi / t_revival(j, cfg.g) if j >= 1 else np.nan,
        "n_bands": float(len(bands.bands)),
        "band_weight": float(sum(b.weight for b in bands.bands)),
        "dephasing_width": bands.dephasing_width,
    }
    if sc.get("direct_revival").strip().lower() in ("1", "true", "yes"):
        times = time_grid(sc)
        res = run_bragg_exact(cfg, times, tol=tol)
        peak = measure_collapse_revival(times, res.series.channels["N_sc"]).revival_peak_time
        out.summary["direct_inverse_revival"] = np.nan if peak is None else 2 * np.pi / peak
    out.manifest.update({k: CSV_FORMAT.format(v) for k, v in out.summary.items()})
    out.manifest["cluster_gap"] = CSV_FORMAT.format(bands.cluster_gap)
    return out


def solve(sc: Scenario, tol: float | None = None, threads: int = 1) -> RunOutput:
    tol = sc.number("tol") if tol is None else tol
    solver = sc.get("solver").strip().lower()
    if solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}, got {solver!r}")
    regime = _enum(Regime, sc.get("regime"), "regime")
    quantization = _enum(Quantization, sc.get("quantization"), "quantization")
    if solver in ("bragg-exact", "bragg-analytic", "bloch", "spectrum") and regime is not Regime.BRAGG:
        raise IncompatibleSolverError(f"solver {solver} needs regime = bragg")
    if solver == "bragg-analytic" and quantization is not Quantization.STANDING:
        raise IncompatibleSolverError("bragg-analytic needs a standing-wave field")
    if solver in ("bloch", "spectrum") and quantization is not Quantization.RUNNING:
        raise IncompatibleSolverError(f"solver {solver} needs a running-wave field")
    if solver == "moments2" and quantization is not Quantization.RUNNING:
        raise IncompatibleSolverError("moments2 needs a running-wave field")
    if solver == "exact":
        out = solve_exact(sc, tol, threads)
    elif solver == "moments1":
        out = solve_moments(sc, ClosureOrder.FIRST, tol)
    elif solver == "moments2":
        out = solve_moments(sc, ClosureOrder.SECOND, tol)
    elif solver == "bragg-exact":
        out = solve_bragg_exact(sc, tol, threads)
    elif solver == "bragg-analytic":
        out = solve_bragg_analytic(sc, tol)
    elif solver == "bloch":
        out = solve_bloch(sc, tol)
    else:
        out = solve_spectrum(sc, tol)
    if solver != "spectrum":
        for key, values in out.columns.items():
            if key != "t":
                out.summary[f"max_{key}"] = float(np.max(np.abs(values)))
    return out


# --- output ------------------------------------------------------------------


def format_csv(columns: dict[str, np.ndarray]) -> str:
    names = list(columns)
    data = [np.asarray(columns[n], dtype=float) for n in names]
    rows = max((len(d) for d in data), default=0)
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    for i in range(rows):
        buf.write(",".join(CSV_FORMAT.format(d[i]) if i < len(d) else "" for d in data) + "\n")
    return buf.getvalue()


def format_manifest(sc: Scenario, out: RunOutput, tol: float, threads: int) -> str:
    lines = [f"fermicavity_version={__version__}", f"scenario={sc.name}"]
    if sc.variant:
        lines.append(f"variant={sc.variant}")
    for key in DEFAULTS:
        lines.append(f"param.{key}={' '.join(sc.params[key].split())}")
    lines.append(f"resolved.tol={CSV_FORMAT.format(tol)}")
    lines.extend(f"{k}={v}" for k, v in out.manifest.items())
    lines.append(f"warnings={len(out.warnings)}")
    lines.extend(f"warning.{i}={w}" for i, w in enumerate(out.warnings))
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def run_scenario(sc: Scenario, out_dir: Path, tol: float | None, threads: int) -> Path:
    resolved_tol = sc.number("tol") if tol is None else tol
    out = solve(sc, resolved_tol, threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{sc.label}.csv"
    _write(csv_path, format_csv(out.columns))
    _write(csv_path.with_suffix(".manifest"), format_manifest(sc, out, resolved_tol, threads))
    for w in out.warnings:
        log.warning("%s: %s", sc.label, w)
    return csv_path


def sweep_scenario(sc: Scenario, axis: str, values: list[str], out_dir: Path, tol, threads: int) -> Path:
    """One row per value in input order, built from each point's summary."""
    key = _canonical(axis)
    if key not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}")
    points = [sc.with_value(key, v) for v in values]
    for p in points:
        p.numbers(key)
    resolved_tol = sc.number("tol") if tol is None else tol

    def one(p):
        return solve(p, resolved_tol, 1)

    if threads > 1 and len(points) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outputs = list(pool.map(one, points))
    else:
        outputs = [one(p) for p in points]
    names = []
    for o in outputs:
        names.extend(k for k in o.summary if k not in names)
    columns = {axis: np.array([float(p.numbers(key)[0]) for p in points])}
    for n in names:
        columns[n] = np.array([o.summary.get(n, np.nan) for o in outputs])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{sc.label}.sweep_{key}.csv"
    _write(csv_path, format_csv(columns))
    merged = RunOutput(columns, warnings=[w for o in outputs for w in o.warnings])
    merged.manifest["sweep.axis"] = key
    merged.manifest["sweep.values"] = ",".join(values)
    _write(csv_path.with_suffix(".manifest"), format_manifest(sc, merged, resolved_tol, threads))
    return csv_path


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fermicavity", description="Fermion diffraction by quantized cavity light.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--tol", type=float, default=None, help="override the scenario tolerance")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run a scenario file or packaged scenario")
    run.add_argument("scenario")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one numeric key of a scenario")
    sw.add_argument("scenario")
    sw.add_argument("--axis")
    sw.add_argument("--values", help="comma-separated values")
    sub.add_parser("list", help="list packaged scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "list":
        print("\n".join(packaged_scenarios()))
        return 0
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        scenarios, sweep = load_scenario(args.scenario)
        if args.command == "run":
            for sc in scenarios:
                print(run_scenario(sc, args.out, args.tol, args.threads))
        else:
            axis = args.axis or sweep.get("axis")
            raw = args.values or sweep.get("values")
            if not axis or not raw:
                raise ConfigError("sweep needs --axis and --values (or a [sweep] section)")
            values = [v.strip() for v in raw.split(",") if v.strip()]
            for sc in scenarios:
                print(sweep_scenario(sc, axis, values, args.out, args.tol, args.threads))
    except FermiCavityError as exc:
        print(f"fermicavity: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fermicavity: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
