"""Triangulations of 2D domains with disjoint high-contrast inclusions.

Two generators are provided:

* a structured right-triangle grid for an axis-aligned rectangle whose
  inclusions are grid-aligned rectangles;
* a point-placement + Delaunay generator for a disk (or convex polygon)
  containing disk inclusions.  Inclusion circles are replaced by inscribed
  polygons whose vertices are mesh nodes; every boundary edge is kept
  Delaunay by keeping all other nodes out of its diametral circle.

Node labels: ``0`` background, ``i >= 1`` closed inclusion ``i``,
``-1`` Dirichlet boundary.  Element labels: ``0`` or ``i >= 1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay

BACKGROUND = 0
GAMMA = -1


class MeshError(ValueError):
    """Raised for invalid geometry or a mesh violating its invariants."""


class MeshParseError(MeshError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)


# --------------------------------------------------------------------------
# Geometry descriptors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float
    segments: int | None = None  # boundary polygon size; default from h

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside."""
        return np.hypot(p[..., 0] - self.center[0], p[..., 1] - self.center[1]) - self.radius

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return cx - r, cy - r, cx + r, cy + r


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise MeshError("polygon needs at least 3 vertices")
        area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area < 0:
            object.__setattr__(self, "vertices", tuple(map(tuple, v[::-1])))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def diameter(self) -> float:
        v = self.array
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)))

    def is_axis_rectangle(self) -> bool:
        v = self.array
        if len(v) != 4:
            return False
        xs, ys = np.unique(np.round(v[:, 0], 14)), np.unique(np.round(v[:, 1], 14))
        return len(xs) == 2 and len(ys) == 2

    def bbox(self):
        v = self.array
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def is_convex(self) -> bool:
        v = self.array
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
        return bool(np.all(cross > -1e-14))

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        """Signed distance for a convex polygon (exact inside, lower bound outside)."""
        v = self.array
        e = np.roll(v, -1, axis=0) - v
        nrm = np.stack([e[:, 1], -e[:, 0]], axis=1)
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        rel = p[..., None, :] - v  # (..., k, 2)
        return np.max(np.sum(rel * nrm, axis=-1), axis=-1)

    def contains(self, p: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.signed_distance(p) <= tol


def rectangle(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


@dataclass
class DomainSpec:
    """Outer domain, inclusions, per-inclusion contrasts and mesh scale.

    ``eps`` is a sequence of positive contrasts, or the string ``"zero"``
    for the limit problem with perfectly conducting inclusions.
    """

    outer: Disk | Polygon
    inclusions: Sequence[Disk | Polygon]
    eps: Sequence[float] | str = "zero"
    target_h: float = 0.1
    gap_factor: float = 0.5

    @property
    def m(self) -> int:
        return len(self.inclusions)

    def eps_values(self) -> np.ndarray:
        if isinstance(self.eps, str):
            if self.eps != "zero":
                raise MeshError(f"unknown eps symbol {self.eps!r}")
            return np.zeros(self.m)
        eps = np.asarray(self.eps, dtype=float)
        if eps.shape != (self.m,):
            raise MeshError(f"expected {self.m} eps values, got {eps.size}")
        return eps

    def validate(self) -> None:
        if not self.target_h > 0:
            raise MeshError("target_h must be positive")
        if isinstance(self.outer, Polygon) and not self.outer.is_convex():
            raise MeshError("outer polygon must be convex")
        for i, inc in enumerate(self.inclusions, start=1):
            if isinstance(inc, Disk):
                if inc.radius <= 0:
                    raise MeshError(f"inclusion {i}: radius must be positive")
                inside = self.outer.signed_distance(np.asarray(inc.center, float)) < -inc.radius
            else:
                inside = bool(np.all(self.outer.signed_distance(inc.array) < 0))
            if not inside:
                raise MeshError(f"inclusion {i} is not strictly inside the outer boundary")
        gaps = inclusion_gaps(self.inclusions)
        for (i, j), g in gaps.items():
            if g <= 0:
                raise MeshError(f"inclusions {i} and {j} overlap")
        if gaps:
            dmax = max(inc.diameter for inc in self.inclusions)
            gmin = min(gaps.values())
            if gmin < self.gap_factor * dmax * (1 - 1e-9):
                warnings.warn(
                    f"minimum inclusion gap {gmin:.4g} is below "
                    f"{self.gap_factor} x max diameter {dmax:.4g}",
                    stacklevel=2,
                )
        self.eps_values()


def inclusion_gaps(inclusions) -> dict[tuple[int, int], float]:
    """Pairwise distances between inclusion boundaries (1-based keys)."""
    out = {}
    for i in range(len(inclusions)):
        for j in range(i + 1, len(inclusions)):
            a, b = inclusions[i], inclusions[j]
            if isinstance(a, Disk) and isinstance(b, Disk):
                g = math.dist(a.center, b.center) - a.radius - b.radius
            else:
                pa = _boundary_samples(a)
                pb = _boundary_samples(b)
                g = float(np.min(np.linalg.norm(pa[:, None] - pb[None], axis=-1)))
                if np.any(b.signed_distance(pa) < 0) or np.any(a.signed_distance(pb) < 0):
                    g = -1.0
            out[(i + 1, j + 1)] = g
    return out


def _boundary_samples(shape, k: int = 64) -> np.ndarray:
    if isinstance(shape, Disk):
        t = np.linspace(0, 2 * np.pi, 4 * k, endpoint=False)
        return np.c_[shape.center[0] + shape.radius * np.cos(t), shape.center[1] + shape.radius * np.sin(t)]
    v = shape.array
    pts = [v[i] + s * (v[(i + 1) % len(v)] - v[i]) for i in range(len(v)) for s in np.linspace(0, 1, k, endpoint=False)]
    return np.asarray(pts)


# --------------------------------------------------------------------------
# Mesh container
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TriMesh:
    """Conforming labelled triangulation.

    ``order`` lists free node indices in block order (inclusion 1, ...,
    inclusion m, background); ``dof`` is its inverse (-1 on Dirichlet nodes).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    node_label: np.ndarray
    elem_label: np.ndarray
    m: int
    order: np.ndarray | None = None
    dof: np.ndarray | None = None
    block_sizes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for name in ("nodes", "triangles", "node_label", "elem_label", "order", "dof"):
            a = getattr(self, name)
            if a is not None:
                a = np.array(a, copy=True)
                a.flags.writeable = False
                object.__setattr__(self, name, a)

    @property
    def is_ordered(self) -> bool:
        return self.order is not None

    @property
    def N(self) -> int:
        return int(np.count_nonzero(self.node_label != GAMMA))

    @property
    def n_i(self) -> tuple[int, ...]:
        return tuple(int(np.count_nonzero(self.node_label == i)) for i in range(1, self.m + 1))

    @property
    def n(self) -> int:
        return sum(self.n_i)

    @property
    def n0(self) -> int:
        return self.N - self.n

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each inclusion block in the ordered dof vector, plus n."""
        return np.concatenate([[0], np.cumsum(self.n_i)]).astype(int)

    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0)

    def boundary_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    def with_labels(self, node_label=None, elem_label=None) -> "TriMesh":
        return TriMesh(
            self.nodes,
            self.triangles,
            self.node_label if node_label is None else node_label,
            self.elem_label if elem_label is None else elem_label,
            self.m,
        )


# --------------------------------------------------------------------------
# Ordering
# --------------------------------------------------------------------------


def classify_and_order(mesh: TriMesh) -> TriMesh:
    """Derive closed-inclusion node labels and the block dof ordering.

    A free node belongs to inclusion ``i`` iff it is a vertex of a triangle
    labelled ``i``.  The ordering is a stable sort by (block, node index).
    """
    nodes_lab = np.where(mesh.node_label == GAMMA, GAMMA, BACKGROUND).astype(int)
    for i in range(1, mesh.m + 1):
        verts = np.unique(mesh.triangles[mesh.elem_label == i])
        clash = verts[(nodes_lab[verts] > 0) & (nodes_lab[verts] != i)]
        if clash.size:
            j = int(nodes_lab[clash[0]])
            raise MeshError(f"node {int(clash[0])} is adjacent to inclusions {j} and {i}")
        if np.any(nodes_lab[verts] == GAMMA):
            raise MeshError(f"inclusion {i} touches the Dirichlet boundary")
        nodes_lab[verts] = i
    free = np.flatnonzero(nodes_lab != GAMMA)
    key = np.where(nodes_lab[free] == BACKGROUND, mesh.m + 1, nodes_lab[free])
    order = free[np.argsort(key, kind="stable")]
    dof = np.full(len(mesh.nodes), -1, dtype=int)
    dof[order] = np.arange(order.size)
    sizes = tuple(int(np.count_nonzero(nodes_lab == i)) for i in range(1, mesh.m + 1))
    return TriMesh(mesh.nodes, mesh.triangles, nodes_lab, mesh.elem_label, mesh.m, order, dof, sizes)


# --------------------------------------------------------------------------
# Quality
# --------------------------------------------------------------------------


def mesh_quality(mesh: TriMesh) -> dict[str, float]:
    """Edge-length extremes, their ratio and the smallest interior angle (degrees)."""
    p = mesh.nodes[mesh.triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    L = np.linalg.norm(e, axis=-1)
    angles = []
    for k in range(3):
        a, b = -e[:, k - 1], e[:, k]  # edges meeting at vertex k
        c = np.sum(a * b, axis=1) / (L[:, k - 1] * L[:, k])
        angles.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    h_max, h_min = float(L.max()), float(L.min())
    return {
        "h_max": h_max,
        "h_min": h_min,
        "q_ratio": h_max / h_min,
        "min_angle": float(np.min(angles)),
    }


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


def generate_mesh(spec: DomainSpec) -> TriMesh:
    spec.validate()
    structured = (
        isinstance(spec.outer, Polygon)
        and spec.outer.is_axis_rectangle()
        and all(isinstance(c, Polygon) and c.is_axis_rectangle() for c in spec.inclusions)
    )
    if structured:
        mesh = _structured_mesh(spec)
    elif all(isinstance(c, Disk) for c in spec.inclusions):
        mesh = _disk_mesh(spec)
    else:
        raise MeshError("polygonal inclusions are only supported as grid-aligned rectangles in a rectangle")
    mesh = classify_and_order(mesh)
    for i, ni in enumerate(mesh.n_i, start=1):
        if ni < 3:
            raise MeshError(f"inclusion {i} has only {ni} nodes")
    return mesh


def _structured_mesh(spec: DomainSpec) -> TriMesh:
    x0, y0, x1, y1 = spec.outer.bbox()
    nx = max(1, math.ceil((x1 - x0) / spec.target_h - 1e-9))
    ny = max(1, math.ceil((y1 - y0) / spec.target_h - 1e-9))
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    xs = x0 + hx * np.arange(nx + 1)
    ys = y0 + hy * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.c_[X.ravel(), Y.ravel()]
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    tris = np.concatenate([np.c_[a, b, c], np.c_[a, c, d]])

    node_label = np.zeros(len(nodes), dtype=int)
    on_edge = (np.isclose(nodes[:, 0], x0) | np.isclose(nodes[:, 0], x1) |
               np.isclose(nodes[:, 1], y0) | np.isclose(nodes[:, 1], y1))
    node_label[on_edge] = GAMMA

    cent = nodes[tris].mean(axis=1)
    elem_label = np.zeros(len(tris), dtype=int)
    for i, inc in enumerate(spec.inclusions, start=1):
        bx0, by0, bx1, by1 = inc.bbox()
        for val, step, origin in ((bx0, hx, x0), (bx1, hx, x0), (by0, hy, y0), (by1, hy, y0)):
            k = (val - origin) / step
            if abs(k - round(k)) > 1e-9:
                raise MeshError(f"inclusion {i} is not aligned with the grid at h={spec.target_h}")
        perimeter_edges = round((bx1 - bx0) / hx) * 2 + round((by1 - by0) / hy) * 2
        if perimeter_edges < 3 or round((bx1 - bx0) / hx) < 1 or round((by1 - by0) / hy) < 1:
            raise MeshError(f"h={spec.target_h} is too coarse to resolve inclusion {i}")
        inside = (cent[:, 0] > bx0) & (cent[:, 0] < bx1) & (cent[:, 1] > by0) & (cent[:, 1] < by1)
        elem_label[inside] = i
    return TriMesh(nodes, tris, node_label, elem_label, spec.m)


class _PointSet:
    """Greedy point accumulator with a uniform-grid spatial hash."""

    def __init__(self, cell: float):
        self.cell = cell
        self.points: list[tuple[float, float]] = []
        self.grid: dict[tuple[int, int], list[int]] = {}

    def _key(self, x, y):
        return (math.floor(x / self.cell), math.floor(y / self.cell))

    def too_close(self, x: float, y: float, dmin: float) -> bool:
        kx, ky = self._key(x, y)
        r = math.ceil(dmin / self.cell)
        d2 = dmin * dmin
        for i in range(kx - r, kx + r + 1):
            for j in range(ky - r, ky + r + 1):
                for k in self.grid.get((i, j), ()):
                    px, py = self.points[k]
                    if (px - x) ** 2 + (py - y) ** 2 < d2:
                        return True
        return False

    def add(self, x: float, y: float) -> int:
        k = len(self.points)
        self.points.append((x, y))
        self.grid.setdefault(self._key(x, y), []).append(k)
        return k


def _circle_points(center, radius, count, phase=0.0) -> np.ndarray:
    t = phase + 2 * np.pi * np.arange(count) / count
    return np.c_[center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]


def _disk_mesh(spec: DomainSpec) -> TriMesh:
    h = spec.target_h
    delta = h * math.sqrt(3) / 2  # layer spacing of equilateral rows
    keep_off = 0.55 * h  # clearance from inclusion circles and the outer boundary
    spacing = 0.7 * h
    outer = spec.outer
    discs: list[Disk] = list(spec.inclusions)

    def clearance(p):
        d = -outer.signed_distance(p)
        for disk in discs:
            d = np.minimum(d, np.abs(disk.signed_distance(p)))
        return d

    ps = _PointSet(spacing)
    labels: list[int] = []  # per point: GAMMA, i (on inclusion i boundary) or 0 (free)

    # outer boundary (protected)
    if isinstance(outer, Disk):
        M = outer.segments or max(8, math.ceil(2 * math.pi * outer.radius / h))
        bpts = _circle_points(outer.center, outer.radius, M)
    else:
        v = outer.array
        bl = []
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            cnt = max(1, math.ceil(np.linalg.norm(b - a) / h))
            bl.extend(a + (b - a) * s for s in np.arange(cnt) / cnt)
        bpts = np.asarray(bl)
    for x, y in bpts:
        ps.add(x, y)
        labels.append(GAMMA)

    # inclusion boundaries (protected)
    polys = []
    for i, disk in enumerate(discs, start=1):
        M = disk.segments or math.ceil(2 * math.pi * disk.radius / h - 1e-9)
        if 2 * math.pi * disk.radius / h < 3 and disk.segments is None or M < 3:
            raise MeshError(f"h={h} is too coarse to resolve inclusion {i} (fewer than 3 boundary edges)")
        pts = _circle_points(disk.center, disk.radius, M)
        polys.append((disk, M))
        for x, y in pts:
            ps.add(x, y)
            labels.append(i)

    def offer(cands):
        for x, y in cands:
            if clearance(np.array([x, y])) < keep_off:
                continue
            if ps.too_close(x, y, spacing):
                continue
            ps.add(x, y)
            labels.append(0)

    # layered rings inside each inclusion
    for disk, M in polys:
        k = 1
        while True:
            rk = disk.radius - k * delta
            if rk < 0.5 * delta:
                offer([disk.center])
                break
            cnt = max(3, round(2 * math.pi * rk / h))
            offer(_circle_points(disk.center, rk, cnt, phase=np.pi * k / cnt))
            k += 1
    # one offset ring outside each inclusion and inside the outer circle
    for disk, M in polys:
        rk = disk.radius + delta
        offer(_circle_points(disk.center, rk, max(3, round(2 * math.pi * rk / h)), phase=np.pi / M))
    if isinstance(outer, Disk):
        rk = outer.radius - delta
        offer(_circle_points(outer.center, rk, max(3, round(2 * math.pi * rk / h)), phase=np.pi / len(bpts)))
    # background hexagonal lattice
    x0, y0, x1, y1 = outer.bbox()
    ys = np.arange(y0, y1 + delta, delta)
    lattice = []
    for r, y in enumerate(ys):
        xs = np.arange(x0 + (0.5 * h if r % 2 else 0.0), x1 + h, h)
        lattice.append(np.c_[xs, np.full_like(xs, y)])
    lattice = np.concatenate(lattice)
    lattice = lattice[clearance(lattice) >= keep_off]
    offer(lattice)

    nodes = np.asarray(ps.points)
    labels = np.asarray(labels)
    tri = Delaunay(nodes).simplices.astype(int)
    # orient counterclockwise
    p = nodes[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) -
                  (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    area = np.abs(area)
    if np.any(area <= 1e-10 * h * h):
        raise MeshError("degenerate triangles produced by the point placement")

    # closed-inclusion membership of each node
    member = np.zeros(len(nodes), dtype=int)
    for i, disk in enumerate(discs, start=1):
        inside = disk.signed_distance(nodes) < 0
        member[inside & (labels == 0)] = i
        member[labels == i] = i
    elem_label = np.zeros(len(tri), dtype=int)
    for i in range(1, len(discs) + 1):
        in_i = member[tri] == i
        interior = in_i & (labels[tri] == 0)
        full = np.all(in_i, axis=1)
        elem_label[full] = i
        straddle = np.any(interior, axis=1) & ~full
        if np.any(straddle):
            raise MeshError(f"triangle {int(np.flatnonzero(straddle)[0])} straddles the boundary of inclusion {i}")
    node_label = np.where(labels == GAMMA, GAMMA, 0)
    return TriMesh(nodes, tri, node_label, elem_label, spec.m)


# --------------------------------------------------------------------------
# Ring layout used by the experiments
# --------------------------------------------------------------------------


def ring_layout(spacing: float, radius: float, rings: Sequence[int] = (1, 6, 12, 18),
                center=(0.0, 0.0)) -> list[Disk]:
    """Concentric rings of disks; ring ``k`` sits at radius ``k * spacing``."""
    out = []
    for k, count in enumerate(rings):
        if k == 0:
            if count != 1:
                raise MeshError("the innermost ring must hold a single disk")
            out.append(Disk((center[0], center[1]), radius))
            continue
        for j in range(count):
            t = 2 * np.pi * j / count
            out.append(Disk((center[0] + k * spacing * math.cos(t), center[1] + k * spacing * math.sin(t)), radius))
    return out


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

_NATIVE_HEADER = "hcsaddle-mesh v1"


def _label_str(lab: int) -> str:
    if lab == GAMMA:
        return "gamma"
    return "bg" if lab == BACKGROUND else f"inc:{lab}"


def _parse_label(tok: str, lineno: int) -> int:
    if tok == "gamma":
        return GAMMA
    if tok == "bg":
        return BACKGROUND
    if tok.startswith("inc:"):
        try:
            i = int(tok[4:])
        except ValueError:
            raise MeshParseError(f"bad label {tok!r}", lineno) from None
        if i >= 1:
            return i
    raise MeshParseError(f"bad label {tok!r}", lineno)


def write_mesh(mesh: TriMesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("msh2" if path.suffix == ".msh" else "native")
    if fmt == "native":
        lines = [_NATIVE_HEADER]
        for k, (x, y) in enumerate(mesh.nodes):
            lines.append(f"node {k} {float(x)!r} {float(y)!r} {_label_str(int(mesh.node_label[k]))}")
        for k, (a, b, c) in enumerate(mesh.triangles):
            lines.append(f"tri {k} {a} {b} {c} {_label_str(int(mesh.elem_label[k]))}")
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "msh2":
        path.write_text(_format_msh2(mesh))
    else:
        raise MeshError(f"unknown mesh format {fmt!r}")


def read_mesh(path, fmt: str | None = None) -> TriMesh:
    path = Path(path)
    fmt = fmt or ("msh2" if path.suffix == ".msh" else "native")
    text = path.read_text()
    if fmt == "native":
        return _parse_native(text)
    if fmt == "msh2":
        return _parse_msh2(text)
    raise MeshError(f"unknown mesh format {fmt!r}")


def _parse_native(text: str) -> TriMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _NATIVE_HEADER:
        raise MeshParseError(f"expected header {_NATIVE_HEADER!r}", 1)
    nodes: dict[int, tuple[float, float, int]] = {}
    tris: dict[int, tuple[int, int, int, int]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "node" and len(tok) == 5:
                k = int(tok[1])
                if k in nodes:
                    raise MeshParseError(f"duplicated node id {k}", lineno)
                nodes[k] = (float(tok[2]), float(tok[3]), _parse_label(tok[4], lineno))
            elif tok[0] == "tri" and len(tok) == 6:
                k = int(tok[1])
                if k in tris:
                    raise MeshParseError(f"duplicated triangle id {k}", lineno)
                lab = _parse_label(tok[5], lineno)
                if lab == GAMMA:
                    raise MeshParseError("triangles cannot carry the gamma label", lineno)
                tris[k] = (int(tok[2]), int(tok[3]), int(tok[4]), lab)
            else:
                raise MeshParseError(f"unrecognised record {line.strip()!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, MeshParseError):
                raise
            raise MeshParseError(str(exc), lineno) from None
    if sorted(nodes) != list(range(len(nodes))):
        raise MeshParseError("node ids must be 0..P-1")
    if sorted(tris) != list(range(len(tris))):
        raise MeshParseError("triangle ids must be 0..T-1")
    xy = np.array([nodes[k][:2] for k in range(len(nodes))], dtype=float)
    nl = np.array([nodes[k][2] for k in range(len(nodes))], dtype=int)
    t = np.array([tris[k][:3] for k in range(len(tris))], dtype=int).reshape(-1, 3)
    el = np.array([tris[k][3] for k in range(len(tris))], dtype=int)
    if t.size and (t.min() < 0 or t.max() >= len(xy)):
        raise MeshParseError("triangle references an unknown node")
    m = int(max(nl.max(initial=0), el.max(initial=0)))
    return classify_and_order(TriMesh(xy, t, np.where(nl == GAMMA, GAMMA, 0), el, m))


_GAMMA_TAG = 1000


def _format_msh2(mesh: TriMesh) -> str:
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(mesh.m + 2)]
    out.append(f'1 {_GAMMA_TAG} "gamma"')
    out.append('2 1 "bg"')
    for i in range(1, mesh.m + 1):
        out.append(f'2 {i + 1} "inc:{i}"')
    out += ["$EndPhysicalNames", "$Nodes", str(len(mesh.nodes))]
    for k, (x, y) in enumerate(mesh.nodes, start=1):
        out.append(f"{k} {float(x)!r} {float(y)!r} 0")
    out.append("$EndNodes")
    gamma = set(np.flatnonzero(mesh.node_label == GAMMA).tolist())
    bedges = [e for e in mesh.boundary_edges() if e[0] in gamma and e[1] in gamma]
    elems = []
    for a, b in bedges:
        elems.append(f"1 2 {_GAMMA_TAG} {_GAMMA_TAG} {a + 1} {b + 1}")
    for (a, b, c), lab in zip(mesh.triangles, mesh.elem_label):
        tag = int(lab) + 1
        elems.append(f"2 2 {tag} {tag} {a + 1} {b + 1} {c + 1}")
    out += ["$Elements", str(len(elems))]
    out += [f"{k} {e}" for k, e in enumerate(elems, start=1)]
    out.append("$EndElements")
    return "\n".join(out) + "\n"


# Gmsh v2 element types: nodes per element and dimension
_MSH_TYPES = {15: (1, 0), 1: (2, 1), 2: (3, 2), 3: (4, 2), 4: (4, 3), 5: (8, 3), 6: (6, 3), 7: (5, 3),
              8: (3, 1), 9: (6, 2), 10: (9, 2), 11: (10, 3)}


def _parse_msh2(text: str) -> TriMesh:
    lines = text.splitlines()
    pos = 0

    def expect(tag):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines) or lines[pos].strip() != tag:
            raise MeshParseError(f"expected {tag}", pos + 1)
        pos += 1

    names: dict[int, str] = {}
    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    lines_gamma: list[tuple[int, int]] = []
    tris: list[tuple[int, int, int]] = []
    tri_tags: list[int] = []
    seen_nodes = seen_elems = False
    while pos < len(lines):
        head = lines[pos].strip()
        if not head:
            pos += 1
            continue
        try:
            if head == "$MeshFormat":
                pos += 1
                ver = lines[pos].split()
                if not ver or not ver[0].startswith("2"):
                    raise MeshParseError(f"unsupported msh version {ver[0] if ver else ''!r}", pos + 1)
                if len(ver) > 1 and ver[1] != "0":
                    raise MeshParseError("binary msh files are not supported", pos + 1)
                pos += 1
                expect("$EndMeshFormat")
            elif head == "$PhysicalNames":
                pos += 1
                cnt = int(lines[pos])
                pos += 1
                for _ in range(cnt):
                    tok = lines[pos].split(maxsplit=2)
                    names[int(tok[1])] = tok[2].strip().strip('"')
                    pos += 1
                expect("$EndPhysicalNames")
            elif head == "$Nodes":
                pos += 1
                cnt = int(lines[pos])
                pos += 1
                for _ in range(cnt):
                    tok = lines[pos].split()
                    nid = int(tok[0])
                    if nid in node_ids:
                        raise MeshParseError(f"duplicated node id {nid}", pos + 1)
                    if len(tok) >= 4 and float(tok[3]) != 0.0:
                        raise MeshParseError("unsupported dimension: node with nonzero z", pos + 1)
                    node_ids[nid] = len(coords)
                    coords.append((float(tok[1]), float(tok[2])))
                    pos += 1
                expect("$EndNodes")
                seen_nodes = True
            elif head == "$Elements":
                pos += 1
                cnt = int(lines[pos])
                pos += 1
                for _ in range(cnt):
                    tok = [int(t) for t in lines[pos].split()]
                    etype, ntags = tok[1], tok[2]
                    if etype not in _MSH_TYPES:
                        raise MeshParseError(f"unsupported element type {etype}", pos + 1)
                    nn, dim = _MSH_TYPES[etype]
                    if dim == 3:
                        raise MeshParseError(f"unsupported dimension 3 (element type {etype})", pos + 1)
                    phys = tok[3] if ntags >= 1 else 0
                    vs = tok[3 + ntags:]
                    if len(vs) != nn:
                        raise MeshParseError(f"element has {len(vs)} nodes, expected {nn}", pos + 1)
                    try:
                        vs = [node_ids[v] for v in vs]
                    except KeyError as exc:
                        raise MeshParseError(f"unknown node id {exc.args[0]}", pos + 1) from None
                    if etype == 2:
                        tris.append(tuple(vs))
                        tri_tags.append(phys)
                    elif etype == 1:
                        if names.get(phys) == "gamma" or (not names and phys == _GAMMA_TAG):
                            lines_gamma.append(tuple(vs))
                    elif etype == 15:
                        pass
                    else:
                        raise MeshParseError(f"unsupported element type {etype}", pos + 1)
                    pos += 1
                expect("$EndElements")
                seen_elems = True
            else:
                # skip unknown sections
                end = "$End" + head[1:]
                pos += 1
                while pos < len(lines) and lines[pos].strip() != end:
                    pos += 1
                pos += 1
        except (ValueError, IndexError) as exc:
            if isinstance(exc, MeshParseError):
                raise
            raise MeshParseError(f"malformed record: {exc}", pos + 1) from None
    if not (seen_nodes and seen_elems):
        raise MeshParseError("missing $Nodes or $Elements section")

    def tag_label(tag: int) -> int:
        name = names.get(tag)
        if name is not None:
            if name == "bg":
                return BACKGROUND
            if name.startswith("inc:"):
                return int(name[4:])
        return max(tag - 1, 0)

    xy = np.asarray(coords, dtype=float)
    t = np.asarray(tris, dtype=int).reshape(-1, 3)
    el = np.array([tag_label(g) for g in tri_tags], dtype=int)
    nl = np.zeros(len(xy), dtype=int)
    if lines_gamma:
        nl[np.unique(np.asarray(lines_gamma))] = GAMMA
    else:
        tmp = TriMesh(xy, t, nl, el, 0)
        nl[np.unique(tmp.boundary_edges())] = GAMMA
    return classify_and_order(TriMesh(xy, t, nl, el, int(el.max(initial=0))))
