"""Config-driven PL vs. PCG comparisons on disks with many inclusions."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .assembly import FemBlocks, assemble, assemble_primal
from .mesh import Disk, DomainSpec, TriMesh, generate_mesh, ring_layout
from .saddle import SaddleOperator, rhs
from .solvers import BlockPinv, PrecondAction, cholesky, lanczos_solve, pcg_solve, random_initial_guess

log = logging.getLogger(__name__)

SCHEMA_ID = "hcsaddle-experiments/1"
COLUMNS = ("eps_spec", "N", "n", "method", "iterations", "converged", "wall_ms", "seed")


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=1)
def config_schema() -> dict:
    return json.loads(resources.files("hcsaddle").joinpath("data/experiment.schema.json").read_text())


@dataclass(frozen=True)
class Geometry:
    outer_radius: float = 5.0
    layout: str = "concentric-rings"
    rings: tuple[int, ...] = (1, 6, 12, 18)
    grid_shape: tuple[int, int] = (6, 6)
    m: int | None = None
    inclusion_radius: float = 0.45
    spacing: float = 1.35

    def inclusions(self) -> list[Disk]:
        if self.layout == "concentric-rings":
            disks = ring_layout(self.spacing, self.inclusion_radius, self.rings)
        else:
            rows, cols = self.grid_shape
            disks = [
                Disk(((j - (cols - 1) / 2) * self.spacing, (i - (rows - 1) / 2) * self.spacing), self.inclusion_radius)
                for i in range(rows) for j in range(cols)
            ]
        if self.m is not None and self.m != len(disks):
            raise ConfigError(f"geometry.m={self.m} does not match the layout ({len(disks)} inclusions)")
        return disks

    def groups(self) -> list[int]:
        """Ring index of every inclusion (0-based)."""
        if self.layout != "concentric-rings":
            raise ConfigError("eps groups are defined per ring and need the concentric-rings layout")
        return [k for k, cnt in enumerate(self.rings) for _ in range(cnt)]

    @property
    def gap(self) -> float:
        return self.spacing - 2 * self.inclusion_radius


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: Geometry = Geometry()
    eps_mode: dict = field(default_factory=lambda: {"kind": "uniform", "value": 1e-4})
    mesh_target_N: int = 5000
    tol: float = 1e-6
    maxit: int = 5000
    methods: tuple[str, ...] = ("PL", "PCG")
    f_value: float = 50.0
    z0_seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ConfigError("tol must lie in (0, 1)")
        if self.mesh_target_N < 100:
            raise ConfigError("mesh_target_N must be at least 100")
        if self.eps_mode.get("kind") == "groups" and len(self.eps_mode["values"]) != len(self.geometry.rings):
            raise ConfigError("eps groups must match the number of rings")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        geo = Geometry(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("geometry", {}).items()})
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        return cls(geometry=geo, **d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def eps_values(self) -> np.ndarray:
        m = len(self.geometry.inclusions())
        kind = self.eps_mode["kind"]
        if kind == "uniform":
            return np.full(m, float(self.eps_mode["value"]))
        if kind == "groups":
            vals = self.eps_mode["values"]
            return np.array([vals[g] for g in self.geometry.groups()], dtype=float)
        lo, hi = sorted(self.eps_mode["range"])
        rng = np.random.default_rng(self.eps_mode["seed"])
        return 10.0 ** rng.uniform(math.log10(lo), math.log10(hi), m)

    def eps_spec(self) -> str:
        kind = self.eps_mode["kind"]
        if kind == "uniform":
            return f"{self.eps_mode['value']:.0e}"
        if kind == "groups":
            return "/".join(f"{v:.0e}" for v in self.eps_mode["values"])
        lo, hi = sorted(self.eps_mode["range"])
        return f"random[{lo:.0e}..{hi:.0e}]#{self.eps_mode['seed']}"


def load_config(path) -> list[ExperimentConfig]:
    """Read and validate a JSON config file; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return parse_config(raw)


def parse_config(raw: dict) -> list[ExperimentConfig]:
    try:
        jsonschema.validate(raw, config_schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {loc}: {exc.message}") from None
    defaults = raw.get("defaults", {})
    out = []
    for run in raw["runs"]:
        merged = copy.deepcopy(defaults)
        for k, v in run.items():
            if k == "geometry":
                merged.setdefault("geometry", {}).update(v)
            else:
                merged[k] = v
        out.append(ExperimentConfig.from_dict(merged))
    return out


@dataclass
class ResultRow:
    eps_spec: str
    N: int
    n: int
    method: str
    iterations: int
    converged: bool
    wall_ms: float
    seed: int


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


class Workspace:
    """Caches meshes, assembled blocks and factorizations across runs."""

    def __init__(self):
        self._meshes: dict = {}
        self._blocks: dict = {}
        self._factors: dict = {}

    def mesh(self, geometry: Geometry, target_N: int) -> TriMesh:
        key = (geometry, target_N)
        if key not in self._meshes:
            self._meshes[key] = mesh_for_target(geometry, target_N)
        return self._meshes[key]

    def blocks(self, geometry: Geometry, target_N: int, f_value: float) -> FemBlocks:
        key = (geometry, target_N, f_value)
        if key not in self._blocks:
            self._blocks[key] = assemble(self.mesh(geometry, target_N), None, f_value)
        return self._blocks[key]

    def precond(self, geometry: Geometry, target_N: int, f_value: float) -> PrecondAction:
        key = (geometry, target_N)
        if key not in self._factors:
            b = self.blocks(geometry, target_N, f_value)
            self._factors[key] = PrecondAction(cholesky(b.A), BlockPinv(b.B_blocks), b.N)
        return self._factors[key]


def mesh_for_target(geometry: Geometry, target_N: int, rel_tol: float = 0.03, max_rounds: int = 4) -> TriMesh:
    """Generate a mesh whose free-node count is close to ``target_N``."""
    outer = Disk((0.0, 0.0), geometry.outer_radius)
    incs = geometry.inclusions()
    area = math.pi * geometry.outer_radius ** 2
    h = math.sqrt(2 * area / (math.sqrt(3) * target_N))
    best = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(max_rounds):
            mesh = generate_mesh(DomainSpec(outer, incs, target_h=h))
            if best is None or abs(mesh.N - target_N) < abs(best.N - target_N):
                best = mesh
            if abs(mesh.N - target_N) <= rel_tol * target_N:
                break
            h *= math.sqrt(mesh.N / target_N)
    return best


def run_experiment(config: ExperimentConfig, workspace: Workspace | None = None,
                   return_solutions: bool = False):
    """Run every requested method on one configuration; never raises on non-convergence."""
    ws = workspace or Workspace()
    geo = config.geometry
    base = ws.blocks(geo, config.mesh_target_N, config.f_value)
    blocks = base.with_eps(config.eps_values())
    H = ws.precond(geo, config.mesh_target_N, config.f_value)
    rows, sols = [], {}
    for method in config.methods:
        if method == "PL":
            op = SaddleOperator(blocks)
            z0 = random_initial_guess(op.N, op.n, op.offsets, config.z0_seed)
            x, rep = lanczos_solve(op, rhs(blocks), H, z0, tol=config.tol, maxit=config.maxit,
                                   seed=config.z0_seed)
            sols["PL"] = x[: blocks.N]
        elif method == "PCG":
            K = assemble_primal(blocks)
            u, rep = pcg_solve(K, blocks.F, H.pa_solve, tol=config.tol, maxit=config.maxit)
            sols["PCG"] = u
        else:
            raise ConfigError(f"unknown method {method!r}")
        log.info("%s %s N=%d iterations=%d converged=%s", config.eps_spec(), method, blocks.N,
                 rep.iterations, rep.converged)
        rows.append(ResultRow(config.eps_spec(), blocks.N, blocks.n, method, rep.iterations, rep.converged,
                              round(rep.wall_ms, 3), config.z0_seed))
    if return_solutions:
        return rows, sols
    return rows


def run_all(configs: Iterable[ExperimentConfig], workspace: Workspace | None = None) -> list[ResultRow]:
    ws = workspace or Workspace()
    rows: list[ResultRow] = []
    for cfg in configs:
        rows.extend(run_experiment(cfg, ws))
    return rows


# --------------------------------------------------------------------------
# Tables
# --------------------------------------------------------------------------


def _row_values(row: ResultRow, timing: bool) -> list:
    d = asdict(row)
    if not timing:
        d["wall_ms"] = ""
    return [d[c] for c in COLUMNS]


def format_table(rows: Sequence[ResultRow], fmt: str = "csv", timing: bool = False) -> str:
    """Render rows; wall times are left blank unless ``timing`` so outputs are reproducible."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(_row_values(r, timing))
        return buf.getvalue()
    if fmt == "json":
        recs = [dict(zip(COLUMNS, _row_values(r, timing))) for r in rows]
        return json.dumps(recs, indent=2) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        for r in rows:
            lines.append("| " + " | ".join(str(v) for v in _row_values(r, timing)) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def emit_table(rows: Sequence[ResultRow], path, fmt: str = "csv", timing: bool = False) -> Path:
    path = Path(path)
    path.write_text(format_table(rows, fmt, timing))
    return path


def read_table(path, fmt: str = "csv") -> list[dict]:
    """Parse a table written by :func:`emit_table` back into typed records."""
    text = Path(path).read_text()
    if fmt == "json":
        return json.loads(text)
    if fmt == "csv":
        recs = list(csv.DictReader(io.StringIO(text)))
    elif fmt == "markdown":
        body = [ln for ln in text.splitlines()[2:] if ln.strip()]
        recs = [dict(zip(COLUMNS, [c.strip() for c in ln.strip("|").split("|")])) for ln in body]
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    for r in recs:
        r["N"], r["n"], r["iterations"], r["seed"] = int(r["N"]), int(r["n"]), int(r["iterations"]), int(r["seed"])
        r["converged"] = r["converged"] == "True"
        r["wall_ms"] = float(r["wall_ms"]) if r["wall_ms"] != "" else ""
    return recs
