"""Command line entry point: ``hcsaddle {run,verify,mesh,solve}``.

Exit codes: 0 success, 1 invariant failure or non-convergence, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import assemble, assemble_primal
from .experiments import ConfigError, emit_table, load_config, run_all
from .mesh import Disk, DomainSpec, MeshError, Polygon, generate_mesh, read_mesh, write_mesh
from .saddle import SaddleOperator, rhs
from .solvers import PrecondAction, lanczos_solve, pcg_solve, random_initial_guess
from .spectral import verify_suite

log = logging.getLogger("hcsaddle")


class UsageError(Exception):
    pass


def _shape_from_json(d: dict):
    if "disk" in d:
        disk = d["disk"]
        return Disk(tuple(disk["center"]), float(disk["radius"]), disk.get("segments"))
    if "polygon" in d:
        return Polygon(tuple(tuple(v) for v in d["polygon"]))
    raise UsageError(f"shape must have a 'disk' or 'polygon' key: {d}")


def domain_spec_from_json(raw: dict) -> DomainSpec:
    allowed = {"outer", "inclusions", "eps", "target_h", "gap_factor"}
    extra = set(raw) - allowed
    if extra:
        raise UsageError(f"unknown domain spec keys: {sorted(extra)}")
    try:
        return DomainSpec(
            outer=_shape_from_json(raw["outer"]),
            inclusions=[_shape_from_json(s) for s in raw.get("inclusions", [])],
            eps=raw.get("eps", "zero"),
            target_h=float(raw["target_h"]),
            gap_factor=float(raw.get("gap_factor", 0.5)),
        )
    except (KeyError, TypeError) as exc:
        raise UsageError(f"invalid domain spec: {exc}") from None


def _parse_eps(text: str, m: int) -> np.ndarray:
    if text == "zero":
        return np.zeros(m)
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse eps list {text!r}") from None
    if len(vals) == 1:
        vals = vals * m
    if len(vals) != m:
        raise UsageError(f"mesh has {m} inclusions but {len(vals)} eps values were given")
    return np.asarray(vals)


def cmd_run(args) -> int:
    try:
        configs = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    rows = run_all(configs)
    emit_table(rows, args.out, args.format, timing=args.timing)
    bad = [r for r in rows if not r.converged]
    for r in bad:
        log.warning("not converged: %s %s after %d iterations", r.eps_spec, r.method, r.iterations)
    return 0


def cmd_verify(args) -> int:
    rep = verify_suite(target_N=args.mesh_N)
    text = rep.to_json(indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    for name, ok in rep.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}", file=sys.stderr)
    return 0 if rep.ok else 1


def cmd_mesh(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read domain spec {args.spec}: {exc}") from None
    spec = domain_spec_from_json(raw)
    mesh = generate_mesh(spec)
    write_mesh(mesh, args.out, args.format)
    print(json.dumps({"nodes": len(mesh.nodes), "triangles": len(mesh.triangles), "N": mesh.N,
                      "n": mesh.n, "n_i": list(mesh.n_i)}))
    return 0


def cmd_solve(args) -> int:
    try:
        mesh = read_mesh(args.mesh, args.mesh_format)
    except OSError as exc:
        raise UsageError(f"cannot read mesh {args.mesh}: {exc}") from None
    eps = _parse_eps(args.eps, mesh.m)
    blocks = assemble(mesh, eps, args.f)
    H = PrecondAction.from_blocks(blocks)
    if args.method == "PL":
        op = SaddleOperator(blocks)
        z0 = random_initial_guess(op.N, op.n, op.offsets, args.seed)
        _, rep = lanczos_solve(op, rhs(blocks), H, z0, tol=args.tol, maxit=args.maxit, seed=args.seed)
    else:
        if np.any(eps == 0):
            raise UsageError("PCG needs eps > 0 on every inclusion")
        _, rep = pcg_solve(assemble_primal(blocks), blocks.F, H.pa_solve, tol=args.tol, maxit=args.maxit)
        rep.eps, rep.n = [float(e) for e in eps], blocks.n
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0 if rep.converged else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcsaddle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run experiment configurations and write a table")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")
    r.add_argument("--timing", action="store_true", help="fill the wall_ms column (output no longer reproducible)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the dense spectral checks")
    v.add_argument("--mesh-N", type=int, default=300, help="free nodes of the coarse desk meshes")
    v.add_argument("--json", help="write the report here instead of stdout")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("mesh", help="generate a mesh from a JSON domain spec")
    m.add_argument("--spec", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--format", choices=("native", "msh2"))
    m.set_defaults(func=cmd_mesh)

    s = sub.add_parser("solve", help="solve one problem on a stored mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--mesh-format", choices=("native", "msh2"))
    s.add_argument("--eps", required=True, help="comma-separated values, one value for all, or 'zero'")
    s.add_argument("--method", choices=("PL", "PCG"), default="PL")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--maxit", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--f", type=float, default=50.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MeshError) as exc:
        parser.print_usage(sys.stderr)
        print(f"hcsaddle: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
