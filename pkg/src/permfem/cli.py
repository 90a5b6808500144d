"""Command-line pipeline: grid -> phantom -> forward -> invert -> eval.

Each subcommand reads a flat ``key=value`` config, validates it completely
(unknown keys, types, input paths) and only then touches the output
directory. Relative paths in a config file resolve against that file's
directory.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .encoding import load_protocol, standard_protocol
from .fem import DEFAULT_DIFFUSIVITY, DEFAULT_KAPPA_SCALE, CouplingStructure, assemble_operators
from .inversion import InversionConfig, InversionError, read_key_values, run_inversion
from .mesh import (
    BentCylinder,
    Cylinder,
    MeshFormatError,
    Sphere,
    Torus,
    build_ambient_grid,
    extract_interface,
    generate_ground_truth,
    load_field,
    load_interface,
    load_mesh,
    save_field,
    save_interface,
    save_mesh,
    seeded_phantom,
    two_axon_crossing,
)
from .metrics import CSV_HEADER, evaluate
from .solver import EigensolverError, load_signals, save_signals, simulate_protocol

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SHAPES = ("sphere", "cylinder", "torus", "bent_cylinder", "two_axon",
          "random_sphere", "random_cylinder")

# output file names inside --out
MESH_FILE = "mesh.txt"
TRUTH_FIELD = "truth_field.txt"
TRUTH_INTERFACE = "truth_interface.txt"
SIGNALS_FILE = "signals.txt"
FIELD_FILE = "field.txt"
INTERFACE_FILE = "interface.txt"
FIT_SIGNALS = "fit_signals.txt"
HISTORY_FILE = "history.csv"
METRICS_TEXT = "metrics.txt"
METRICS_CSV = "metrics.csv"


class ConfigError(ValueError):
    pass


class DataFileError(OSError):
    pass


def _vector(text):
    vals = tuple(float(x) for x in str(text).replace(",", " ").split())
    if len(vals) != 3:
        raise ValueError("expected three numbers")
    return vals


@dataclass(frozen=True)
class RunConfig:
    case: str = "case"
    # inputs
    mesh: Path | None = None
    protocol: Path | None = None
    field: Path | None = None
    signals: Path | None = None
    interface: Path | None = None
    reference: Path | None = None
    target: Path | None = None
    # grid
    n: int = 10
    half_extent: float = 13.6
    # phantom
    shape: str = "sphere"
    radius: float = 8.0
    center: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    major_radius: float = 8.0
    minor_radius: float = 3.0
    offset: float = 4.0
    # physics
    diffusivity: float = DEFAULT_DIFFUSIVITY
    t2: float = float("inf")
    kappa_scale: float = DEFAULT_KAPPA_SCALE
    rho: float = 1.0
    inversion: InversionConfig = dataclasses.field(default_factory=InversionConfig)

    PATH_KEYS = ("mesh", "protocol", "field", "signals", "interface", "reference", "target")

    @classmethod
    def from_mapping(cls, values, base=Path(".")):
        values = dict(values)
        inv_keys = {f.name for f in fields(InversionConfig)}
        inv = {k: values.pop(k) for k in list(values) if k in inv_keys}
        if "mode" in values:
            inv["schedule"] = values.pop("mode")
        own = {f.name: f for f in fields(cls) if f.name != "inversion"}
        unknown = sorted(set(values) - set(own))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        try:
            for key, raw in values.items():
                default = own[key].default
                if key in cls.PATH_KEYS:
                    kwargs[key] = base / str(raw).strip()
                elif key in ("center", "axis"):
                    kwargs[key] = _vector(raw)
                elif key in ("case", "shape"):
                    kwargs[key] = str(raw).strip()
                else:
                    kwargs[key] = type(default)(str(raw).strip())
            kwargs["inversion"] = InversionConfig.from_mapping(inv)
        except KeyError as err:
            raise ConfigError(str(err.args[0])) from None
        except ValueError as err:
            raise ConfigError(str(err)) from None
        cfg = cls(**kwargs)
        cfg.check_values()
        return cfg

    def check_values(self):
        if self.n < 1:
            raise ConfigError("grid resolution n must be >= 1")
        if not self.half_extent > 0:
            raise ConfigError("half_extent must be positive")
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {', '.join(SHAPES)}")
        for name in ("diffusivity", "t2", "kappa_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def require(self, *names):
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"config key '{name}' is required for this command")
            if not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path}")

    def check_optional(self, *names):
        for name in names:
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path}")


def load_run_config(path=None, seed=None, mode=None):
    values, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = read_key_values(path)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        base = path.parent
    cfg = RunConfig.from_mapping(values, base)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if mode is not None:
        changes["schedule"] = mode
    if changes:
        try:
            cfg = replace(cfg, inversion=replace(cfg.inversion, **changes))
        except ValueError as err:
            raise ConfigError(str(err)) from None
    return cfg


def build_shape(cfg):
    seed = cfg.inversion.seed
    try:
        if cfg.shape == "sphere":
            return Sphere(cfg.radius, cfg.center)
        if cfg.shape == "cylinder":
            return Cylinder(cfg.radius, cfg.axis, cfg.center)
        if cfg.shape == "torus":
            return Torus(cfg.major_radius, cfg.minor_radius, cfg.center, cfg.axis)
        if cfg.shape == "bent_cylinder":
            return BentCylinder(cfg.radius)
        if cfg.shape == "two_axon":
            return two_axon_crossing(cfg.radius, cfg.offset)
        return seeded_phantom(cfg.shape.split("_", 1)[1], seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _read(loader, path, *args, **kwargs):
    try:
        return loader(path, *args, **kwargs)
    except (ValueError, MeshFormatError) as err:
        raise DataFileError(f"{path}: {err}") from None


def _out_dir(out):
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _protocol(cfg):
    return _read(load_protocol, cfg.protocol) if cfg.protocol is not None else standard_protocol()


def _physics(cfg, mesh):
    ops = assemble_operators(mesh, diffusivity=cfg.diffusivity, t2=cfg.t2)
    return ops, CouplingStructure(mesh, kappa_scale=cfg.kappa_scale)


# --------------------------------------------------------------------------
# subcommands


def cmd_grid(cfg, out, workers=None):
    mesh = build_ambient_grid(cfg.n, cfg.half_extent)
    out = _out_dir(out)
    save_mesh(mesh, out / MESH_FILE)
    print(f"{len(mesh.vertices)} vertices, {mesh.n_tets} tets, {mesh.n_faces} interior faces")
    return mesh


def _mesh_or_grid(cfg):
    if cfg.mesh is not None:
        return _read(load_mesh, cfg.mesh)
    return build_ambient_grid(cfg.n, cfg.half_extent)


def cmd_phantom(cfg, out, workers=None):
    cfg.check_optional("mesh")
    shape = build_shape(cfg)
    mesh = _mesh_or_grid(cfg)
    try:
        truth = generate_ground_truth(mesh, shape)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    interface = extract_interface(truth)
    out = _out_dir(out)
    if cfg.mesh is None:
        save_mesh(mesh, out / MESH_FILE)
    save_field(truth, out / TRUTH_FIELD)
    save_interface(mesh, interface, out / TRUTH_INTERFACE)
    print(f"{cfg.shape}: {len(interface)} barrier faces of {mesh.n_faces}")
    return truth, interface


def cmd_forward(cfg, out, workers=None):
    cfg.require("mesh", "field")
    cfg.check_optional("protocol")
    protocol = _protocol(cfg)
    mesh = _read(load_mesh, cfg.mesh)
    truth = _read(load_field, cfg.field, mesh.n_faces)
    ops, coupling = _physics(cfg, mesh)
    signals = simulate_protocol(ops, coupling, truth.kappa, protocol, cfg.rho,
                                cfg.inversion.neig, workers)
    out = _out_dir(out)
    save_signals(signals, out / SIGNALS_FILE)
    print(f"{len(protocol)} signals written")
    return signals


def cmd_invert(cfg, out, workers=None):
    cfg.require("mesh", "signals")
    target = _read(load_signals, cfg.signals)
    mesh = _read(load_mesh, cfg.mesh)
    protocol = target.protocol
    icfg = cfg.inversion
    missing = [d for d in (protocol.long_delta, protocol.short_delta) if d not in protocol.groups]
    if icfg.schedule == "staged" and missing:
        raise ConfigError(f"signals lack the Delta groups {missing} needed for staging")
    ops, coupling = _physics(cfg, mesh)
    out = _out_dir(out)
    final, history = run_inversion(mesh, ops, coupling, protocol, target, icfg, cfg.rho,
                                   workers, history_path=out / HISTORY_FILE)
    interface = extract_interface(final, icfg.tau_b)
    fit = simulate_protocol(ops, coupling, final.kappa, protocol, cfg.rho, icfg.neig, workers)
    save_field(final, out / FIELD_FILE)
    save_interface(mesh, interface, out / INTERFACE_FILE)
    save_signals(fit, out / FIT_SIGNALS)
    print(f"{len(history)} iterations, final loss {history[-1]['loss_total']:.6g}, "
          f"{len(interface)} interface faces" if history else "0 iterations")
    return final, history


def cmd_eval(cfg, out, workers=None):
    cfg.require("mesh", "interface", "reference")
    if (cfg.signals is None) != (cfg.target is None):
        raise ConfigError("signals and target must be given together")
    cfg.check_optional("signals", "target")
    mesh = _read(load_mesh, cfg.mesh)
    interface = _read(load_interface, cfg.interface)
    reference = _read(load_interface, cfg.reference)
    for name, s in (("interface", interface), ("reference", reference)):
        if len(s.faces) and (s.faces.min() < 0 or s.faces.max() >= mesh.n_faces):
            raise DataFileError(f"{name} face index outside the mesh")
    signals = target = None
    if cfg.signals is not None:
        signals = _read(load_signals, cfg.signals)
        target = _read(load_signals, cfg.target)
    report = evaluate(mesh, interface, reference, signals, target, cfg.case)
    out = _out_dir(out)
    (out / METRICS_TEXT).write_text(report.to_text())
    (out / METRICS_CSV).write_text(CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(report.to_text(), end="")
    return report


COMMANDS = {"grid": cmd_grid, "phantom": cmd_phantom, "forward": cmd_forward,
            "invert": cmd_invert, "eval": cmd_eval}


def build_parser():
    parser = argparse.ArgumentParser(prog="permfem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--mode", choices=("staged", "joint"))
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_run_config(args.config, args.seed, args.mode)
        COMMANDS[args.command](cfg, args.out, args.workers)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigensolverError, InversionError, FloatingPointError, ZeroDivisionError,
            np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
