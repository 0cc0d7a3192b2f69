"""Command-line front end: ``stmopt run | check-gradients | render``.

Exit codes are distinct per failure class so scripts can tell them apart.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import output
from .fem import SingularSystemError
from .gradcheck import check_gradients
from .model import ProblemError, load_problem
from .optimizer import ActiveSetError, run_optimization

EXIT_OK = 0
EXIT_GRADIENT = 1      # check-gradients ran but a family failed
EXIT_USAGE = 2         # argparse's own convention
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_SOLVER = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _load(path):
    try:
        return load_problem(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read problem file {path}: {exc.strerror or exc}")
    except ProblemError as exc:
        raise CliError(EXIT_CONFIG, f"invalid problem file {path}: {exc}")


def _write(path: Path, data) -> None:
    try:
        output.atomic_write(path, data)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}")


def cmd_run(args) -> int:
    pd = _load(args.problem)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc.strerror or exc}")

    written = []
    nx, ny = pd.nx, pd.ny

    def snapshot(n, rho, record):
        if n % args.stride == 0:
            name = f"density_{n:04d}.pgm"
            _write(out / name, output.pgm_image(rho, nx, ny, pd.rho_min))
            written.append(name)

    try:
        result = run_optimization(pd, callback=snapshot)
    except (SingularSystemError, ActiveSetError, ArithmeticError) as exc:
        raise CliError(EXIT_SOLVER, f"solver failure: {exc}")

    rho = result.final.rho
    files = {
        "density.csv": output.density_csv(rho, nx),
        "density_final.pgm": output.pgm_image(rho, nx, ny, pd.rho_min),
        "history.csv": output.history_csv(result.history, len(result.domains)),
    }
    for name, text in files.items():
        _write(out / name, text)
    written += list(files)
    written.append("manifest.json")
    _write(out / "manifest.json", output.manifest_json(output.manifest(result, written)))

    print(f"{len(result.history)} iterations, termination: {result.termination}, "
          f"objective {result.final.objective:.6g}, {len(result.domains)} inelastic domain(s)")
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_check_gradients(args) -> int:
    pd = _load(args.problem)
    try:
        report = check_gradients(pd, probes=args.probes, seed=args.seed)
    except SingularSystemError as exc:
        raise CliError(EXIT_SOLVER, f"solver failure: {exc}")
    sys.stdout.write(report.text())
    return EXIT_OK if report.passed else EXIT_GRADIENT


def _rho_min_for(csv_path: Path, override):
    if override is not None:
        return override
    manifest = csv_path.parent / "manifest.json"
    if manifest.exists():
        try:
            doc = json.loads(manifest.read_text(encoding="utf-8"))
            return float(doc["problem"]["optimizer"]["rho_min"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read rho_min from {manifest}: {exc}")
    return 1e-3


def cmd_render(args) -> int:
    src = Path(args.csv)
    try:
        rho, nx, ny = output.read_density_csv(src)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {src}: {exc.strerror or exc}")
    except output.FormatError as exc:
        raise CliError(EXIT_CONFIG, f"malformed density file {exc}")
    rho_min = _rho_min_for(src, args.rho_min)
    _write(Path(args.pgm), output.pgm_image(rho, nx, ny, rho_min))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmopt",
        description="Compliance topology optimization with inelastic-domain "
                    "dissipation constraints on structured plane-stress grids.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize a problem file and write results")
    p.add_argument("problem", help="problem JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stride", type=_positive_int, default=50,
                   help="write a density image every N iterations (default 50)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-gradients",
                       help="compare analytic gradients with finite differences")
    p.add_argument("problem", help="problem JSON file")
    p.add_argument("--probes", type=_positive_int, default=20,
                   help="number of random probe elements (default 20)")
    p.add_argument("--seed", type=int, default=0, help="probe selection seed")
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("render", help="turn a density CSV into a PGM image")
    p.add_argument("csv", help="density CSV written by 'run'")
    p.add_argument("pgm", help="output image path")
    p.add_argument("--rho-min", type=float, default=None,
                   help="lower density bound (default: from the sibling manifest.json, else 1e-3)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"stmopt: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
