"""Batch front end: parse scenario configs and run experiment modes.

Modes
-----
feasibility-map   admissible-mass thresholds over a (kappa, D) grid
macro             one closed-loop continuum run, series + snapshots
micro             agent ensemble over a seed list, per-seed series + mean
sweep-ml          steady-state follower error as the leader mass varies
basin             closed-form basin bounds over comparison-ODE parameters

Invocation: ``densctl <mode> --config <file> [--jobs N] [--seed S]
[--out DIR]``.  ``--jobs`` falls back to the DENSCTL_JOBS environment
variable, then 1.  Exit codes: 0 success, 1 config error, 2 numerical
abort.  Artifacts land in a fresh timestamped subdirectory of the output
root, written to a hidden staging directory first and renamed into place
only when the run completes, so a crashed run leaves no partial output.
Every CSV starts with the fully resolved configuration as ``#`` comment
lines; stripping the ``# `` prefixes recovers a parseable config.

Config format
-------------
Line oriented ``key = value``; blank lines and ``#`` comments ignored;
keys use dotted section prefixes; a key may appear at most once.

====================== ============================================= =========
key                    meaning                                       default
====================== ============================================= =========
mode                   one of the five modes (CLI subcommand wins)   -
seed                   master seed for derived per-point seeds       0
output.dir             artifact root directory                       runs
domain.dim             1 or 2                                        1
domain.n               mesh nodes per axis, even                     500
target.family          von-mises | bimodal-2d | file                 von-mises
target.kappa           von Mises concentration                       1.0
target.mu              von Mises center                              0.0
target.kappa1/.kappa2  bimodal concentrations (2D)                   1.0
target.nu              second bimodal center (2D)                    0.0
target.file            tabulated profile CSV (family=file)           -
kernels.fl.ell         leader-follower kernel range                  pi
kernels.ff.kind        none | repulsive | morse                      none
kernels.ff.ell         repulsive range                               pi
kernels.ff.ell_r/.ell_a  Morse ranges                                pi/2, pi
kernels.ff.zeta        Morse attraction gain                         1.0
physics.D              diffusion                                     0.02
control.K              leader control gain                           1.0
masses.M_F/.M_L        species masses, must sum to 1                 -
counts.N_F/.N_L        agent counts (micro; masses derived)          -
time.dt/.T             step size and horizon                         1e-3, 10
time.output_stride     steps between diagnostic samples              100
micro.seeds            comma-separated run seeds                     0
micro.kde_concentration  density-estimate concentration              50.0
micro.method           exact | mesh                                  mesh
sweep.kappa_range      lo:hi:count (feasibility-map)                 -
sweep.D_range          lo:hi:count (feasibility-map)                 -
sweep.ML_range         lo:hi:count (sweep-ml)                        -
sweep.resolution       extra points per knee interval                8
basin.alpha/.beta/.gamma/.delta/.k  scalar or lo:hi:count            beta, gamma 0
====================== ============================================= =========

Masses and counts are mutually exclusive; giving one mass fills in the
other as its complement.  Ranges are inclusive linspace specs with
count >= 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import feasibility as _feas
from . import kernels as _kernels
from . import lemma_ode as _lemma
from . import macro_sim as _macro
from . import micro_sim as _micro
from . import targets as _targets
from .grid import GridFunction, PeriodicMesh, integral, l2_norm


class ConfigError(ValueError):
    """Raised for any malformed, inconsistent, or incomplete configuration."""


MODES = ("feasibility-map", "macro", "micro", "sweep-ml", "basin")

MASS_SUM_MESSAGE = (
    "the species masses must satisfy M_L + M_F = 1 (the two densities "
    "share a unit total)"
)


# ----------------------------------------------------------------------------
# scenario configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved run description; every field has its final value.

    ``M_F``/``M_L`` stay None until either masses or counts appear in the
    config.  Range fields hold (lo, hi, count) tuples; ``basin_*`` fields
    hold either a scalar or such a tuple.
    """

    mode: str | None = None
    seed: int = 0
    out_dir: str = "runs"
    dim: int = 1
    n: int = 500
    target_family: str = "von-mises"
    target_kappa: float = 1.0
    target_mu: float = 0.0
    target_kappa1: float = 1.0
    target_kappa2: float = 1.0
    target_nu: float = 0.0
    target_file: str | None = None
    fl_ell: float = math.pi
    ff_kind: str = "none"
    ff_ell: float = math.pi
    ff_ell_r: float = math.pi / 2
    ff_ell_a: float = math.pi
    ff_zeta: float = 1.0
    D: float = 0.02
    K: float = 1.0
    M_F: float | None = None
    M_L: float | None = None
    N_F: int | None = None
    N_L: int | None = None
    dt: float = 1e-3
    T: float = 10.0
    output_stride: int = 100
    micro_seeds: tuple[int, ...] = (0,)
    kde_concentration: float = 50.0
    micro_method: str = "mesh"
    kappa_range: tuple[float, float, int] | None = None
    D_range: tuple[float, float, int] | None = None
    ML_range: tuple[float, float, int] | None = None
    sweep_resolution: int = 8
    basin_alpha: float | tuple[float, float, int] | None = None
    basin_beta: float | tuple[float, float, int] = 0.0
    basin_gamma: float | tuple[float, float, int] = 0.0
    basin_delta: float | tuple[float, float, int] | None = None
    basin_k: float | tuple[float, float, int] | None = None


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite, got {raw!r}")
    return v


def _parse_range(key: str, raw: str) -> tuple[float, float, int]:
    parts = raw.split(":")
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected lo:hi:count, got {raw!r}")
    lo = _parse_float(key, parts[0])
    hi = _parse_float(key, parts[1])
    count = _parse_int(key, parts[2])
    if not lo < hi:
        raise ConfigError(f"{key}: need lo < hi, got {raw!r}")
    if count < 2:
        raise ConfigError(f"{key}: need count >= 2, got {count}")
    return (lo, hi, count)


def _parse_scalar_or_range(key: str, raw: str):
    if ":" in raw:
        return _parse_range(key, raw)
    return _parse_float(key, raw)


def _parse_seeds(key: str, raw: str) -> tuple[int, ...]:
    out = tuple(_parse_int(key, part.strip()) for part in raw.split(","))
    if len(set(out)) != len(out):
        raise ConfigError(f"{key}: duplicate seed in {raw!r}")
    return out


def _parse_choice(*allowed: str):
    def parse(key: str, raw: str) -> str:
        if raw not in allowed:
            raise ConfigError(
                f"{key}: expected one of {', '.join(allowed)}, got {raw!r}"
            )
        return raw

    return parse


def _parse_str(key: str, raw: str) -> str:
    return raw


# dotted key -> (dataclass field, value parser)
_KEY_TABLE = {
    "mode": ("mode", _parse_choice(*MODES)),
    "seed": ("seed", _parse_int),
    "output.dir": ("out_dir", _parse_str),
    "domain.dim": ("dim", _parse_int),
    "domain.n": ("n", _parse_int),
    "target.family": ("target_family", _parse_choice("von-mises", "bimodal-2d", "file")),
    "target.kappa": ("target_kappa", _parse_float),
    "target.mu": ("target_mu", _parse_float),
    "target.kappa1": ("target_kappa1", _parse_float),
    "target.kappa2": ("target_kappa2", _parse_float),
    "target.nu": ("target_nu", _parse_float),
    "target.file": ("target_file", _parse_str),
    "kernels.fl.ell": ("fl_ell", _parse_float),
    "kernels.ff.kind": ("ff_kind", _parse_choice("none", "repulsive", "morse")),
    "kernels.ff.ell": ("ff_ell", _parse_float),
    "kernels.ff.ell_r": ("ff_ell_r", _parse_float),
    "kernels.ff.ell_a": ("ff_ell_a", _parse_float),
    "kernels.ff.zeta": ("ff_zeta", _parse_float),
    "physics.D": ("D", _parse_float),
    "control.K": ("K", _parse_float),
    "masses.M_F": ("M_F", _parse_float),
    "masses.M_L": ("M_L", _parse_float),
    "counts.N_F": ("N_F", _parse_int),
    "counts.N_L": ("N_L", _parse_int),
    "time.dt": ("dt", _parse_float),
    "time.T": ("T", _parse_float),
    "time.output_stride": ("output_stride", _parse_int),
    "micro.seeds": ("micro_seeds", _parse_seeds),
    "micro.kde_concentration": ("kde_concentration", _parse_float),
    "micro.method": ("micro_method", _parse_choice("exact", "mesh")),
    "sweep.kappa_range": ("kappa_range", _parse_range),
    "sweep.D_range": ("D_range", _parse_range),
    "sweep.ML_range": ("ML_range", _parse_range),
    "sweep.resolution": ("sweep_resolution", _parse_int),
    "basin.alpha": ("basin_alpha", _parse_scalar_or_range),
    "basin.beta": ("basin_beta", _parse_scalar_or_range),
    "basin.gamma": ("basin_gamma", _parse_scalar_or_range),
    "basin.delta": ("basin_delta", _parse_scalar_or_range),
    "basin.k": ("basin_k", _parse_scalar_or_range),
}

_FIELD_TO_KEY = {field: key for key, (field, _) in _KEY_TABLE.items()}


def _check_positive(values: dict, *fields: str) -> None:
    for f in fields:
        if values[f] is not None and not values[f] > 0:
            raise ConfigError(f"{_FIELD_TO_KEY[f]}: must be positive, got {values[f]}")


def _validate(values: dict) -> dict:
    """Cross-key checks; returns the dict with masses resolved."""
    if values["dim"] not in (1, 2):
        raise ConfigError(f"domain.dim: must be 1 or 2, got {values['dim']}")
    if values["n"] < 4 or values["n"] % 2 != 0:
        raise ConfigError(f"domain.n: must be even and >= 4, got {values['n']}")
    _check_positive(
        values,
        "target_kappa", "target_kappa1", "target_kappa2",
        "fl_ell", "ff_ell", "ff_ell_r", "ff_ell_a",
        "D", "K", "dt", "T", "output_stride", "kde_concentration",
        "N_F", "N_L",
    )
    if values["ff_zeta"] < 0:
        raise ConfigError("kernels.ff.zeta: must be nonnegative")
    if values["seed"] < 0:
        raise ConfigError("seed: must be nonnegative")
    if values["sweep_resolution"] < 0:
        raise ConfigError("sweep.resolution: must be nonnegative")

    fam = values["target_family"]
    if fam == "von-mises" and values["dim"] != 1:
        raise ConfigError("target.family von-mises needs domain.dim=1")
    if fam == "bimodal-2d" and values["dim"] != 2:
        raise ConfigError("target.family bimodal-2d needs domain.dim=2")
    if fam == "file":
        if values["target_file"] is None:
            raise ConfigError("target.family=file needs target.file")
    if values["target_file"] is not None and not os.path.isfile(values["target_file"]):
        raise ConfigError(f"target.file: no such file: {values['target_file']}")

    masses_given = values["M_F"] is not None or values["M_L"] is not None
    counts_given = values["N_F"] is not None or values["N_L"] is not None
    if masses_given and counts_given:
        raise ConfigError(
            "masses.* and counts.* are mutually exclusive; counts imply "
            "the species masses"
        )
    if counts_given:
        if values["N_F"] is None or values["N_L"] is None:
            missing = "counts.N_F" if values["N_F"] is None else "counts.N_L"
            raise ConfigError(f"missing required key: {missing} (counts come in pairs)")
        total = values["N_F"] + values["N_L"]
        values["M_L"] = values["N_L"] / total
        values["M_F"] = values["N_F"] / total
    elif masses_given:
        if values["M_L"] is None:
            values["M_L"] = 1.0 - values["M_F"]
        elif values["M_F"] is None:
            values["M_F"] = 1.0 - values["M_L"]
        for f in ("M_F", "M_L"):
            if not 0.0 < values[f] < 1.0:
                raise ConfigError(
                    f"{_FIELD_TO_KEY[f]}: must lie strictly between 0 and 1, "
                    f"got {values[f]}"
                )
        if abs(values["M_F"] + values["M_L"] - 1.0) > 1e-12:
            raise ConfigError(
                f"masses.M_F + masses.M_L = {values['M_F'] + values['M_L']!r}: "
                + MASS_SUM_MESSAGE
            )

    for f in ("kappa_range", "D_range"):
        rng = values[f]
        if rng is not None and rng[0] <= 0:
            raise ConfigError(f"{_FIELD_TO_KEY[f]}: lower bound must be positive")
    if values["ML_range"] is not None:
        lo, hi, _ = values["ML_range"]
        if not (0.0 < lo and hi < 1.0):
            raise ConfigError("sweep.ML_range: bounds must lie strictly inside (0, 1)")

    for f in ("basin_alpha", "basin_beta", "basin_gamma", "basin_delta", "basin_k"):
        v = values[f]
        low = v[0] if isinstance(v, tuple) else v
        if low is None:
            continue
        # alpha, delta, k enter denominators / square roots; beta, gamma may be 0
        strict = f in ("basin_alpha", "basin_delta", "basin_k")
        if low < 0 or (strict and low == 0):
            kind = "positive" if strict else "nonnegative"
            raise ConfigError(f"{_FIELD_TO_KEY[f]}: values must be {kind}")
    return values


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    """Parse the line-oriented key=value format into a ScenarioConfig.

    Unknown keys are rejected together in one message; a key may appear
    only once.  A relative ``target.file`` resolves against ``base_dir``
    and must exist.
    """
    values = {f.name: f.default for f in dataclasses.fields(ScenarioConfig)}
    seen: set[str] = set()
    unknown: list[str] = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEY_TABLE:
            unknown.append(key)
            continue
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        field, parser = _KEY_TABLE[key]
        values[field] = parser(key, raw)
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(sorted(unknown)))
    if values["target_file"] is not None and not os.path.isabs(values["target_file"]):
        values["target_file"] = os.path.abspath(
            os.path.join(base_dir, values["target_file"])
        )
    values = _validate(values)
    return ScenarioConfig(**values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        raise TypeError("no boolean config fields")
    if isinstance(v, tuple):
        if all(isinstance(x, int) for x in v):  # seed list
            return ",".join(str(x) for x in v)
        lo, hi, count = v
        return f"{lo!r}:{hi!r}:{count}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ScenarioConfig) -> str:
    """Emit the resolved config; parse_config(serialize_config(c)) == c."""
    lines = []
    for key, (field, _) in _KEY_TABLE.items():
        v = getattr(cfg, field)
        if v is None:
            continue
        # counts imply the masses; emitting both would not reparse
        if field in ("M_F", "M_L") and cfg.N_F is not None:
            continue
        lines.append(f"{key} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def resolve_mode(cfg: ScenarioConfig, cli_mode: str | None) -> ScenarioConfig:
    """Merge the subcommand with the file's mode key; conflicts are errors."""
    if cli_mode is None:
        if cfg.mode is None:
            raise ConfigError("no mode given (neither subcommand nor mode key)")
        return cfg
    if cfg.mode is not None and cfg.mode != cli_mode:
        raise ConfigError(
            f"mode conflict: config says {cfg.mode}, command line says {cli_mode}"
        )
    return dataclasses.replace(cfg, mode=cli_mode)


_MODE_REQUIRES = {
    "feasibility-map": ("kappa_range", "D_range"),
    "macro": (),
    "micro": ("N_F", "N_L"),
    "sweep-ml": ("ML_range",),
    "basin": ("basin_alpha", "basin_delta", "basin_k"),
}


def validate_mode_requirements(cfg: ScenarioConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    missing = [
        _FIELD_TO_KEY[f] for f in _MODE_REQUIRES[cfg.mode] if getattr(cfg, f) is None
    ]
    if missing:
        raise ConfigError(
            f"mode {cfg.mode} misses required keys: " + ", ".join(missing)
        )
    if cfg.mode in ("feasibility-map", "sweep-ml") and cfg.dim != 1:
        raise ConfigError(f"mode {cfg.mode} is one-dimensional")
    if cfg.mode == "feasibility-map" and cfg.target_family != "von-mises":
        raise ConfigError(
            "feasibility-map sweeps target.kappa and needs target.family=von-mises"
        )
    if cfg.mode == "macro" and cfg.M_L is None:
        raise ConfigError("mode macro misses required keys: masses.M_L (or counts.*)")
    if cfg.mode == "sweep-ml" and cfg.M_L is not None:
        raise ConfigError("sweep-ml sweeps the leader mass; drop masses.*/counts.*")


# ----------------------------------------------------------------------------
# builders: config -> domain objects


def build_mesh(cfg: ScenarioConfig) -> PeriodicMesh:
    return PeriodicMesh(cfg.dim, cfg.n)


def build_fl_spec(cfg: ScenarioConfig) -> _kernels.KernelSpec:
    return _kernels.KernelSpec(kind="repulsive", ell=cfg.fl_ell)


def build_ff_spec(cfg: ScenarioConfig) -> _kernels.KernelSpec | None:
    if cfg.ff_kind == "none":
        return None
    if cfg.ff_kind == "repulsive":
        return _kernels.KernelSpec(kind="repulsive", ell=cfg.ff_ell)
    return _kernels.KernelSpec(
        kind="morse", ell_r=cfg.ff_ell_r, ell_a=cfg.ff_ell_a, zeta=cfg.ff_zeta
    )


def build_target(
    cfg: ScenarioConfig,
    mesh: PeriodicMesh,
    mass: float,
    kappa: float | None = None,
) -> _targets.TargetDensity:
    """Follower target at the requested mass; ``kappa`` overrides the
    config concentration (sweep use)."""
    if cfg.target_family == "von-mises":
        conc = cfg.target_kappa if kappa is None else kappa
        t = _targets.von_mises_1d(mesh, conc, cfg.target_mu)
    elif cfg.target_family == "bimodal-2d":
        t = _targets.bimodal_von_mises_2d(
            mesh, cfg.target_kappa1, cfg.target_kappa2, cfg.target_mu, cfg.target_nu
        )
    else:
        f = GridFunction.from_csv(cfg.target_file)
        if f.mesh != mesh:
            raise ConfigError(
                f"target.file grid ({f.mesh.dim}D, n={f.mesh.n}) does not match "
                f"domain ({mesh.dim}D, n={mesh.n})"
            )
        total = float(integral(f))
        if total <= 0:
            raise ConfigError("target.file: profile must carry positive mass")
        t = _targets.TargetDensity(GridFunction(mesh, f.values / total), 1.0)
    return _targets.scale_to_mass(t, mass)


def _leader_reference(cfg: ScenarioConfig, mesh, target, M_L):
    """Synthesized leader reference plus threshold facts for the report.

    1D goes through the admissible-interval report and the closed-form
    synthesis (clamped fallback when M_L is infeasible); 2D inverts the
    steady velocity by least squares.  Returns (rho_L_ref, facts dict).
    """
    ff_spec = build_ff_spec(cfg)
    ff_kernel = _kernels.materialize(ff_spec, mesh) if ff_spec else None
    if mesh.dim == 1:
        rep = _feas.theorem1_report(target, ff_kernel, cfg.fl_ell, cfg.D)
        syn = _feas.synthesize_leader_density_1d(
            rep, cfg.fl_ell, cfg.D, M_L, allow_infeasible=True
        )
        facts = {
            "M_hat_1": rep.M_hat_1,
            "M_hat_2": rep.M_hat_2,
            "zero_set_ok": rep.zero_set_ok,
            "feasible": rep.feasible_for(M_L),
            "fallback_used": syn.fallback_used,
        }
        return syn.rho_L, facts
    vfl = _feas.steady_interaction_field(target, ff_kernel, cfg.D)
    fl_kernel = _kernels.materialize(build_fl_spec(cfg), mesh)
    dec = _feas.deconvolve_2d(vfl, fl_kernel, M_L)
    facts = {
        "M_hat_1": dec.M_hat,
        "M_hat_2": math.inf,
        "zero_set_ok": True,
        "feasible": dec.feasible,
        "fallback_used": not dec.feasible,
    }
    return dec.rho_L, facts


# ----------------------------------------------------------------------------
# artifact plumbing


def _config_lines(cfg: ScenarioConfig) -> tuple[str, ...]:
    return ("densctl resolved config",) + tuple(serialize_config(cfg).splitlines())


def _fmt_cell(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return "nan"
    return "%.17g" % float(v)


def _write_table(path, cfg: ScenarioConfig, columns, rows) -> None:
    with open(path, "w") as fh:
        for line in _config_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(v) for v in row) + "\n")


def _series_rows(res) -> list:
    return [
        (res.t[i], res.err_L[i], res.err_F[i], res.kl_L[i], res.kl_F[i],
         res.mass_L[i], res.mass_F[i])
        for i in range(res.t.size)
    ]


_SERIES_COLUMNS = ("t", "err_L", "err_F", "kl_L", "kl_F", "mass_L", "mass_F")


def _claim_run_dir(out_root: str, mode: str) -> tuple[str, str]:
    """Staging directory plus the final name it will be renamed to."""
    os.makedirs(out_root, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    base = f"{mode}-{stamp}"
    final = os.path.join(out_root, base)
    k = 1
    while os.path.exists(final):
        k += 1
        final = os.path.join(out_root, f"{base}-{k}")
    tmp = os.path.join(out_root, f".staging-{os.path.basename(final)}-{os.getpid()}")
    os.makedirs(tmp)
    return tmp, final


def point_seed(master: int, index: int) -> int:
    """Seed for sweep point ``index``: tied to the point's position in the
    sweep, never to scheduling order, so parallel and serial runs agree."""
    return int(np.random.SeedSequence(master, spawn_key=(index,)).generate_state(1)[0])


def _pmap(fn, items: list, jobs: int) -> list:
    """Order-preserving map, fanned out to processes when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _stability_lines(cfg: ScenarioConfig, mesh, target, M_L: float) -> list[str]:
    """Sufficient-condition verdict at one operating point (1D only)."""
    if mesh.dim != 1:
        return ["stability condition: not evaluated (two-dimensional run)"]
    rho_L0 = GridFunction(mesh, np.full(mesh.n, M_L / (2.0 * math.pi)))
    rep = _feas.stability_report(
        target, build_ff_spec(cfg), build_fl_spec(cfg), cfg.D, rho_L0,
        control_gain=cfg.K,
    )
    verdict = "holds" if rep.condition_holds else "fails"
    lines = [
        f"stability condition at M_L={M_L:.6g}: {verdict} "
        f"(margin {rep.D_margin:.6g}, F={rep.F:.6g}, sup|g1|={rep.g1_sup:.6g})",
        f"comparison-ODE coefficients: alpha={rep.alpha:.6g} beta={rep.beta:.6g} "
        f"gamma={rep.gamma:.6g} delta={rep.delta:.6g}",
    ]
    if rep.basin_eta_star is not None:
        lines.append(f"basin bound (squared error): {rep.basin_eta_star:.6g}")
    return lines


def _write_report(tmp: str, cfg: ScenarioConfig, jobs: int, t0: float,
                  lines: list[str]) -> None:
    wall = time.monotonic() - t0
    with open(os.path.join(tmp, "report.txt"), "w") as fh:
        fh.write("densctl run report\n")
        fh.write(f"mode: {cfg.mode}\n")
        fh.write(f"finished: {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}\n")
        fh.write(f"wall_clock_seconds: {wall:.3f}\n")
        fh.write(f"jobs: {jobs}\n")
        for line in lines:
            fh.write(line + "\n")
        fh.write("resolved config:\n")
        for line in serialize_config(cfg).splitlines():
            fh.write(f"  {line}\n")


# ----------------------------------------------------------------------------
# mode drivers


def _feasibility_point(args) -> tuple:
    cfg, kappa, D = args
    mesh = build_mesh(cfg)
    ff_spec = build_ff_spec(cfg)
    ff_kernel = _kernels.materialize(ff_spec, mesh) if ff_spec else None
    target = _targets.von_mises_1d(mesh, kappa, cfg.target_mu)
    rep = _feas.theorem1_report(target, ff_kernel, cfg.fl_ell, D)
    return (kappa, D, rep.M_hat_1, rep.M_hat_2, rep.zero_set_ok)


def _run_feasibility_map(cfg: ScenarioConfig, tmp: str, jobs: int, t0: float) -> None:
    kappas = np.linspace(*cfg.kappa_range)
    Ds = np.linspace(*cfg.D_range)
    points = [(cfg, float(k), float(d)) for k in kappas for d in Ds]
    rows = _pmap(_feasibility_point, points, jobs)
    _write_table(
        os.path.join(tmp, "map.csv"), cfg,
        ("kappa", "D", "M_hat_1", "M_hat_2", "zero_set_ok"), rows,
    )
    lost = sum(1 for r in rows if not (r[4] and r[2] < 1.0))
    lines = [
        f"grid: {len(kappas)} kappa x {len(Ds)} D = {len(rows)} points",
        f"points with feasibility lost below unit mass: {lost}",
        "stability condition: not applicable (no operating point)",
        "seed manifest: none (closed-form map, no randomness)",
    ]
    _write_report(tmp, cfg, jobs, t0, lines)


def _run_macro(cfg: ScenarioConfig, tmp: str, jobs: int, t0: float) -> None:
    mesh = build_mesh(cfg)
    target = build_target(cfg, mesh, cfg.M_F)
    rho_L_ref, facts = _leader_reference(cfg, mesh, target, cfg.M_L)
    ff_spec = build_ff_spec(cfg)
    run_cfg = _macro.MacroRunConfig(
        mesh=mesh, dt=cfg.dt, T=cfg.T, K=cfg.K, D=cfg.D,
        fl_kernel=_kernels.materialize(build_fl_spec(cfg), mesh),
        ff_kernel=_kernels.materialize(ff_spec, mesh) if ff_spec else None,
        target=target, rho_L_ref=rho_L_ref, output_stride=cfg.output_stride,
    )
    state0 = _macro.initial_state(run_cfg)
    header = _config_lines(cfg)
    for name, f in (("rho_L", state0.rho_L), ("rho_F", state0.rho_F), ("u", state0.u)):
        f.to_csv(os.path.join(tmp, f"initial_{name}.csv"),
                 header_lines=header + (f"t={state0.t:.17g} step=0",))
    res = _macro.run(run_cfg)
    _write_table(os.path.join(tmp, "series.csv"), cfg, _SERIES_COLUMNS,
                 _series_rows(res))
    fin = res.final_state
    meta = (f"t={fin.t:.17g} step={fin.step_count}",)
    for name, f in (("rho_L", fin.rho_L), ("rho_F", fin.rho_F), ("u", fin.u)):
        f.to_csv(os.path.join(tmp, f"final_{name}.csv"), header_lines=header + meta)
    h = 2.0 * math.pi / cfg.n
    diff_bound = h * h / (2.0 * cfg.dim * cfg.D)
    lines = [
        f"mass thresholds: M_hat_1={facts['M_hat_1']:.6g} "
        f"M_hat_2={facts['M_hat_2']:.6g} zero_set_ok={facts['zero_set_ok']}",
        f"requested leader mass M_L={cfg.M_L:.6g}: "
        + ("feasible" if facts["feasible"] else "infeasible")
        + (" (clamped fallback reference)" if facts["fallback_used"] else ""),
        *_stability_lines(cfg, mesh, target, cfg.M_L),
        f"diffusive step bound h^2/(2*dim*D) = {diff_bound:.6g}, dt = {cfg.dt:.6g} "
        + ("(ok)" if cfg.dt <= diff_bound else "(violated)"),
        f"final errors: err_L={res.err_L[-1]:.6g} err_F={res.err_F[-1]:.6g}",
        "seed manifest: none (deterministic continuum run)",
    ]
    _write_report(tmp, cfg, jobs, t0, lines)


def _micro_seed_run(args):
    cfg, seed = args
    mesh = build_mesh(cfg)
    mass_F = cfg.N_F / (cfg.N_F + cfg.N_L)
    target = build_target(cfg, mesh, mass_F)
    rho_L_ref, facts = _leader_reference(cfg, mesh, target, 1.0 - mass_F)
    run_cfg = _micro.MicroRunConfig(
        bridge=_micro.BridgeConfig(mesh, cfg.kde_concentration),
        dt=cfg.dt, T=cfg.T, K=cfg.K, D=cfg.D,
        fl_spec=build_fl_spec(cfg), ff_spec=build_ff_spec(cfg),
        target=target, rho_L_ref=rho_L_ref,
        n_leaders=cfg.N_L, n_followers=cfg.N_F,
        seed=seed, output_stride=cfg.output_stride, method=cfg.micro_method,
    )
    return _micro.run_micro(run_cfg), facts


def _run_micro(cfg: ScenarioConfig, tmp: str, jobs: int, t0: float) -> None:
    results = _pmap(_micro_seed_run, [(cfg, s) for s in cfg.micro_seeds], jobs)
    facts = results[0][1]
    header = _config_lines(cfg)
    stacks = {name: [] for name in ("err_L", "err_F", "kl_L", "kl_F")}
    t_grid = results[0][0].t
    for (res, _), seed in zip(results, cfg.micro_seeds):
        _write_table(os.path.join(tmp, f"series_seed{seed}.csv"), cfg,
                     _SERIES_COLUMNS, _series_rows(res))
        _micro.write_agents_csv(
            res.final_state, os.path.join(tmp, f"agents_final_seed{seed}.csv"),
            header_lines=header,
        )
        for name in stacks:
            stacks[name].append(getattr(res, name))
    ens_rows = []
    for i in range(t_grid.size):
        row = [t_grid[i]]
        for name in ("err_L", "err_F", "kl_L", "kl_F"):
            col = np.array([s[i] for s in stacks[name]])
            row += [col.mean(), col.std()]
        ens_rows.append(tuple(row))
    _write_table(
        os.path.join(tmp, "ensemble.csv"), cfg,
        ("t", "err_L_mean", "err_L_std", "err_F_mean", "err_F_std",
         "kl_L_mean", "kl_L_std", "kl_F_mean", "kl_F_std"),
        ens_rows,
    )
    mesh = build_mesh(cfg)
    mass_F = cfg.N_F / (cfg.N_F + cfg.N_L)
    target = build_target(cfg, mesh, mass_F)
    final_errs = [res.err_F[-1] for res, _ in results]
    lines = [
        f"agents: {cfg.N_L} leaders, {cfg.N_F} followers "
        f"(M_L={1.0 - mass_F:.6g})",
        f"mass thresholds: M_hat_1={facts['M_hat_1']:.6g} "
        f"M_hat_2={facts['M_hat_2']:.6g} zero_set_ok={facts['zero_set_ok']}",
        "reference: " + ("feasible" if facts["feasible"] else "infeasible")
        + (" (clamped fallback)" if facts["fallback_used"] else ""),
        *_stability_lines(cfg, mesh, target, 1.0 - mass_F),
        f"ensemble final err_F: mean={np.mean(final_errs):.6g} "
        f"std={np.std(final_errs):.6g} over {len(final_errs)} seeds",
        "seed manifest: " + ",".join(str(s) for s in cfg.micro_seeds),
    ]
    _write_report(tmp, cfg, jobs, t0, lines)


def _sweep_point(args) -> tuple:
    cfg, M_L, refined = args
    mesh = build_mesh(cfg)
    target = build_target(cfg, mesh, 1.0 - M_L)
    rho_L_ref, facts = _leader_reference(cfg, mesh, target, M_L)
    ff_spec = build_ff_spec(cfg)
    run_cfg = _macro.MacroRunConfig(
        mesh=mesh, dt=cfg.dt, T=cfg.T, K=cfg.K, D=cfg.D,
        fl_kernel=_kernels.materialize(build_fl_spec(cfg), mesh),
        ff_kernel=_kernels.materialize(ff_spec, mesh) if ff_spec else None,
        target=target, rho_L_ref=rho_L_ref, output_stride=max(1, int(cfg.T / cfg.dt)),
    )
    res = _macro.run(run_cfg)
    return (M_L, res.err_F[-1], res.err_F[0], res.kl_F[-1],
            facts["feasible"], facts["fallback_used"], refined)


def _knee_intervals(finals: np.ndarray) -> list[int]:
    """Interval indices containing a knee of the error curve: adjacent
    final-error jumps within a factor 4 of the largest jump."""
    gaps = np.abs(np.diff(finals))
    top = float(gaps.max()) if gaps.size else 0.0
    if top <= 0.0:
        return []
    return [int(i) for i in np.nonzero(gaps >= 0.25 * top)[0]]


def _run_sweep_ml(cfg: ScenarioConfig, tmp: str, jobs: int, t0: float) -> None:
    coarse = np.linspace(*cfg.ML_range)
    rows = _pmap(_sweep_point, [(cfg, float(m), 0) for m in coarse], jobs)
    finals = np.array([r[1] for r in rows])
    extra: list[float] = []
    for i in _knee_intervals(finals):
        inner = np.linspace(coarse[i], coarse[i + 1], cfg.sweep_resolution + 2)[1:-1]
        extra.extend(float(m) for m in inner)
    if extra:
        rows += _pmap(_sweep_point, [(cfg, m, 1) for m in extra], jobs)
    rows.sort(key=lambda r: r[0])
    _write_table(
        os.path.join(tmp, "sweep.csv"), cfg,
        ("M_L", "err_F_final", "err_F_initial", "kl_F_final",
         "feasible", "fallback_used", "refined"),
        rows,
    )
    mesh = build_mesh(cfg)
    probe = build_target(cfg, mesh, 1.0 - float(coarse[0]))
    ff_spec = build_ff_spec(cfg)
    ff_kernel = _kernels.materialize(ff_spec, mesh) if ff_spec else None
    rep = _feas.theorem1_report(probe, ff_kernel, cfg.fl_ell, cfg.D)
    mid = float(coarse[coarse.size // 2])
    lines = [
        f"coarse points: {coarse.size}, refined points: {len(extra)}",
        f"mass thresholds at swept target: M_hat_1={rep.M_hat_1:.6g} "
        f"M_hat_2={rep.M_hat_2:.6g} zero_set_ok={rep.zero_set_ok}",
        f"target L2 size: {l2_norm(probe.profile):.6g} (at M_L={coarse[0]:.6g})",
        *_stability_lines(cfg, mesh, build_target(cfg, mesh, 1.0 - mid), mid),
        "seed manifest: none (deterministic continuum runs)",
    ]
    _write_report(tmp, cfg, jobs, t0, lines)


def _expand_axis(v) -> np.ndarray:
    if isinstance(v, tuple):
        return np.linspace(*v)
    return np.array([float(v)])


def _run_basin(cfg: ScenarioConfig, tmp: str, jobs: int, t0: float) -> None:
    axes = [
        _expand_axis(getattr(cfg, f"basin_{name}"))
        for name in ("alpha", "beta", "gamma", "delta", "k")
    ]
    rows = []
    present = 0
    for a in axes[0]:
        for b in axes[1]:
            for g in axes[2]:
                for d in axes[3]:
                    for k in axes[4]:
                        est = _lemma.basin_estimate(
                            _lemma.LemmaParams(float(a), float(b), float(g),
                                               float(d), float(k))
                        )
                        ok = est.basin_bound is not None
                        present += ok
                        rows.append((float(a), float(b), float(g), float(d),
                                     float(k), est.eta_1, est.eta_2, ok))
    _write_table(
        os.path.join(tmp, "basin.csv"), cfg,
        ("alpha", "beta", "gamma", "delta", "k", "eta_1", "eta_2",
         "bound_present"),
        rows,
    )
    lines = [
        f"parameter tuples: {len(rows)}",
        f"tuples with a basin bound: {present}",
        "stability condition: not applicable (comparison-ODE study)",
        "seed manifest: none (closed-form bounds, no randomness)",
    ]
    _write_report(tmp, cfg, jobs, t0, lines)


_MODE_DRIVERS = {
    "feasibility-map": _run_feasibility_map,
    "macro": _run_macro,
    "micro": _run_micro,
    "sweep-ml": _run_sweep_ml,
    "basin": _run_basin,
}


def run_mode(cfg: ScenarioConfig, jobs: int = 1) -> str:
    """Execute the configured mode; returns the final artifact directory.

    Numerical failures propagate after the staging directory is removed,
    so no partial artifacts survive.
    """
    validate_mode_requirements(cfg)
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    t0 = time.monotonic()
    tmp, final = _claim_run_dir(cfg.out_dir, cfg.mode)
    try:
        _MODE_DRIVERS[cfg.mode](cfg, tmp, jobs, t0)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.replace(tmp, final)
    return final


# ----------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # report as a config error, not SystemExit(2)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="densctl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cli_mode", metavar="mode")
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run the {mode} mode")
        p.add_argument("--config", required=True, help="scenario config file")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker processes (default: DENSCTL_JOBS or 1)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--out", default=None, help="override output.dir")
    return parser


def main(argv=None) -> int:
    try:
        ns = _build_parser().parse_args(argv)
        if ns.cli_mode is None:
            raise ConfigError("a mode subcommand is required")
        try:
            with open(ns.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, base_dir=os.path.dirname(os.path.abspath(ns.config)))
        cfg = resolve_mode(cfg, ns.cli_mode)
        if ns.seed is not None:
            if ns.seed < 0:
                raise ConfigError("seed: must be nonnegative")
            cfg = dataclasses.replace(cfg, seed=ns.seed)
        if ns.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=ns.out)
        if ns.jobs is not None:
            jobs = ns.jobs
        else:
            jobs = _parse_int("DENSCTL_JOBS", os.environ.get("DENSCTL_JOBS", "1"))
        if jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {jobs}")
        validate_mode_requirements(cfg)
    except ConfigError as exc:
        print(f"densctl: config error: {exc}", file=sys.stderr)
        return 1
    try:
        final = run_mode(cfg, jobs)
    except ConfigError as exc:
        print(f"densctl: config error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"densctl: numerical abort: {exc}", file=sys.stderr)
        return 2
    print(final)
    return 0


if __name__ == "__main__":
    sys.exit(main())
