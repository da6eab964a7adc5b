"""Triangulations of the unit disk and unit square with boundary-last node ordering.

Meshes are immutable after construction: all arrays are frozen, so values can
be shared read-only across workers.  Boundary nodes always occupy the last
``n_gamma`` indices, and ``boundary_edges`` traces the closed boundary polygon
as consecutive index pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Triangles with area below this factor times h^2 are rejected.
DEGENERATE_AREA_FACTOR = 1e-14

# Memory guard for generate_disk_mesh.
MAX_NODES = 2_000_000


class MeshError(Exception):
    """Invalid mesh data or unreadable mesh file."""


class MeshResourceError(MeshError):
    """Requested mesh exceeds the node budget."""


class MeshMetrics(NamedTuple):
    h: float
    h_gamma: float
    theta: float


@dataclass(frozen=True)
class Mesh:
    """2D triangulation with boundary-last node ordering.

    Attributes
    ----------
    nodes : (n_omega, 2) float array
    triangles : (n_tri, 3) int array, positively oriented
    boundary_edges : (n_gamma, 2) int array, consecutive edges of the
        closed boundary cycle
    n_omega, n_gamma : total and boundary node counts
    h, h_gamma : max edge length overall and on the boundary
    theta : quasi-uniformity parameter, max over elements of R/r
    reorder_map : old-to-new node permutation when the input had to be
        reordered boundary-last, else None
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    n_omega: int
    n_gamma: int
    h: float
    h_gamma: float
    theta: float
    reorder_map: np.ndarray | None = None

    @property
    def n_interior(self) -> int:
        return self.n_omega - self.n_gamma

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Coordinates of the boundary nodes (the trailing n_gamma rows)."""
        return self.nodes[self.n_omega - self.n_gamma:]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def triangle_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Signed areas of all triangles."""
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def _edge_lengths(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Edge lengths per triangle, shape (n_tri, 3); edge i is opposite vertex i."""
    p = nodes[triangles]  # (n_tri, 3, 2)
    d = p[:, [1, 2, 0], :] - p[:, [2, 0, 1], :]
    return np.hypot(d[..., 0], d[..., 1])


def _metrics(nodes: np.ndarray, triangles: np.ndarray,
             boundary_edges: np.ndarray) -> MeshMetrics:
    lengths = _edge_lengths(nodes, triangles)
    areas = np.abs(triangle_areas(nodes, triangles))
    if np.any(areas <= 0.0):
        raise MeshError(f"degenerate triangle {int(np.argmin(areas))}: zero area")
    h = float(lengths.max())
    d = nodes[boundary_edges[:, 0]] - nodes[boundary_edges[:, 1]]
    h_gamma = float(np.hypot(d[:, 0], d[:, 1]).max())
    # R = abc / (4T), r = 2T / (a+b+c)  ->  R/r = abc (a+b+c) / (8 T^2)
    abc = lengths.prod(axis=1)
    peri = lengths.sum(axis=1)
    theta = float((abc * peri / (8.0 * areas ** 2)).max())
    return MeshMetrics(h=h, h_gamma=h_gamma, theta=theta)


def mesh_metrics(mesh: Mesh) -> MeshMetrics:
    """Recompute (h, h_gamma, theta) from the mesh arrays."""
    return _metrics(mesh.nodes, mesh.triangles, mesh.boundary_edges)


def reorder_boundary_last(nodes, triangles, boundary_edges):
    """Stable permutation moving the boundary nodes to the trailing indices.

    Interior and boundary nodes both keep their relative input order.
    Returns (nodes, triangles, boundary_edges, old_to_new) where old_to_new
    is None when no reordering was necessary.
    """
    nodes = np.asarray(nodes, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
    n = len(nodes)
    on_boundary = np.zeros(n, dtype=bool)
    on_boundary[boundary_edges.ravel()] = True
    k = int(on_boundary.sum())
    expected = np.arange(n - k, n)
    if np.array_equal(np.flatnonzero(on_boundary), expected):
        return nodes, triangles, boundary_edges, None
    order = np.concatenate([np.flatnonzero(~on_boundary),
                            np.flatnonzero(on_boundary)])
    old_to_new = np.empty(n, dtype=np.int64)
    old_to_new[order] = np.arange(n)
    return (nodes[order], old_to_new[triangles], old_to_new[boundary_edges],
            old_to_new)


def _validate_boundary_cycle(boundary_edges: np.ndarray, n: int) -> None:
    if boundary_edges.ndim != 2 or boundary_edges.shape[1] != 2:
        raise MeshError("boundary edge list must have two indices per edge")
    k = len(boundary_edges)
    if k < 3:
        raise MeshError("boundary cycle needs at least 3 edges")
    heads = boundary_edges[:, 0]
    tails = boundary_edges[:, 1]
    if not np.array_equal(np.roll(heads, -1), tails):
        raise MeshError("boundary edges do not form consecutive edges of one cycle")
    if len(np.unique(heads)) != k:
        raise MeshError("open or self-intersecting boundary cycle: repeated node")


def _validate_edge_incidence(triangles: np.ndarray,
                             boundary_edges: np.ndarray) -> None:
    """Every listed boundary edge must bound exactly one triangle, and the
    set of one-triangle edges must equal the listed boundary."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                        triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if counts.max() > 2:
        raise MeshError("non-manifold edge shared by more than two triangles")
    exterior = {tuple(row) for row in uniq[counts == 1]}
    listed = {tuple(sorted(row)) for row in boundary_edges.tolist()}
    if exterior != listed:
        raise MeshError("boundary edge list does not match the triangulation "
                        "boundary (each boundary edge must belong to exactly "
                        "one triangle)")


def mesh_from_arrays(nodes, triangles, boundary_edges, *,
                     check_unit_circle: bool = False) -> Mesh:
    """Build a validated Mesh, reorienting triangles and reordering nodes
    boundary-last if necessary."""
    nodes = np.asarray(nodes, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an (n, 2) array")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("non-finite node coordinate")
    n = len(nodes)
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError("triangles must be an (m, 3) array")
    for name, idx in (("triangle", triangles), ("boundary edge", boundary_edges)):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MeshError(f"{name} node index out of range")

    _validate_boundary_cycle(boundary_edges, n)
    _validate_edge_incidence(triangles, boundary_edges)

    nodes, triangles, boundary_edges, old_to_new = reorder_boundary_last(
        nodes, triangles, boundary_edges)

    areas = triangle_areas(nodes, triangles)
    flip = areas < 0.0
    if np.any(flip):
        triangles = triangles.copy()
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        areas = np.abs(areas)

    metrics = _metrics(nodes, triangles, boundary_edges)
    bad = areas < DEGENERATE_AREA_FACTOR * metrics.h ** 2
    if np.any(bad):
        raise MeshError(f"degenerate triangle {int(np.argmax(bad))}: area "
                        f"{areas[np.argmax(bad)]:.3e} below tolerance")
    if not math.isfinite(metrics.theta) or metrics.theta < 2.0 - 1e-9:
        raise MeshError(f"invalid uniformity parameter theta={metrics.theta}")

    n_gamma = len(boundary_edges)
    if check_unit_circle:
        r = np.hypot(nodes[n - n_gamma:, 0], nodes[n - n_gamma:, 1])
        if np.abs(r - 1.0).max() > 1e-12:
            raise MeshError("disk boundary node off the unit circle")

    return Mesh(nodes=_freeze(nodes), triangles=_freeze(triangles),
                boundary_edges=_freeze(boundary_edges), n_omega=n,
                n_gamma=n_gamma, h=metrics.h, h_gamma=metrics.h_gamma,
                theta=metrics.theta, reorder_map=old_to_new)


def _zip_rings(inner_ids, inner_angles, outer_ids, outer_angles):
    """Triangulate the annulus between two concentric node rings by merging
    the angle sequences."""
    np_in, np_out = len(inner_ids), len(outer_ids)
    two_pi = 2.0 * math.pi
    tris = []
    i = j = 0
    while i < np_in or j < np_out:
        ia = inner_angles[(i + 1) % np_in] + two_pi * ((i + 1) // np_in)
        oa = outer_angles[(j + 1) % np_out] + two_pi * ((j + 1) // np_out)
        if j >= np_out or (i < np_in and ia <= oa):
            tris.append((inner_ids[i % np_in], outer_ids[j % np_out],
                         inner_ids[(i + 1) % np_in]))
            i += 1
        else:
            tris.append((inner_ids[i % np_in], outer_ids[j % np_out],
                         outer_ids[(j + 1) % np_out]))
            j += 1
    return tris


def generate_disk_mesh(target_h: float) -> Mesh:
    """Quasi-uniform triangulation of the unit disk.

    Nodes are placed on concentric rings with spacing below ``target_h`` and
    roughly 2*pi*r/target_h nodes per ring; rings are triangulated pairwise.
    The construction is deterministic and puts the outer ring (exactly on the
    unit circle) last.  Realized h stays within 1.5*target_h.
    """
    if not (0.0 < target_h <= 1.0):
        raise ValueError(f"target_h must lie in (0, 1], got {target_h}")
    m = max(1, math.ceil(1.25 / target_h))
    counts = [max(4, math.ceil(2.0 * math.pi * (i / m) / target_h))
              for i in range(1, m + 1)]
    total = 1 + sum(counts)
    if total > MAX_NODES:
        raise MeshResourceError(
            f"target_h={target_h} needs ~{total} nodes (budget {MAX_NODES})")

    nodes = [np.zeros((1, 2))]
    ring_ids = []
    ring_angles = []
    offset = 1
    for i, cnt in enumerate(counts, start=1):
        ang = 2.0 * math.pi * np.arange(cnt) / cnt
        r = i / m
        if i == m:
            # boundary nodes sit exactly on the unit circle
            nodes.append(np.column_stack([np.cos(ang), np.sin(ang)]))
        else:
            nodes.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        ring_ids.append(np.arange(offset, offset + cnt))
        ring_angles.append(ang)
        offset += cnt

    tris = [(0, ring_ids[0][k], ring_ids[0][(k + 1) % counts[0]])
            for k in range(counts[0])]
    for i in range(1, m):
        tris.extend(_zip_rings(ring_ids[i - 1], ring_angles[i - 1],
                               ring_ids[i], ring_angles[i]))

    last = ring_ids[-1]
    edges = np.column_stack([last, np.roll(last, -1)])
    mesh = mesh_from_arrays(np.vstack(nodes), np.array(tris), edges,
                            check_unit_circle=True)
    if mesh.h > 1.5 * target_h:
        raise MeshError(f"realized h={mesh.h:.4f} exceeds 1.5*target_h")
    return mesh


def generate_crisscross_square(n: int) -> Mesh:
    """Unit square as n x n cells, each cut into 4 triangles by its diagonals."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    g = n + 1
    xs = np.arange(g) / n
    grid = np.array([(x, y) for y in xs for x in xs])
    centers = np.array([((i + 0.5) / n, (j + 0.5) / n)
                        for j in range(n) for i in range(n)])
    nodes = np.vstack([grid, centers])

    def gid(i, j):
        return j * g + i

    tris = []
    for j in range(n):
        for i in range(n):
            c = g * g + j * n + i
            a, b = gid(i, j), gid(i + 1, j)
            d, e = gid(i + 1, j + 1), gid(i, j + 1)
            tris.extend([(a, b, c), (b, d, c), (d, e, c), (e, a, c)])

    perim = ([gid(i, 0) for i in range(n)]
             + [gid(n, j) for j in range(n)]
             + [gid(i, n) for i in range(n, 0, -1)]
             + [gid(0, j) for j in range(n, 0, -1)])
    edges = np.column_stack([perim, np.roll(perim, -1)])
    return mesh_from_arrays(nodes, np.array(tris), edges)


def save_mesh(mesh: Mesh, path) -> None:
    """Write the line-oriented text format (1-based indices)."""
    with open(path, "w") as f:
        f.write(f"NODES {mesh.n_omega}\n")
        for x, y in mesh.nodes:
            f.write(f"{x:.17g} {y:.17g}\n")
        f.write(f"TRIANGLES {len(mesh.triangles)}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i + 1} {j + 1} {k + 1}\n")
        f.write(f"BOUNDARY {mesh.n_gamma}\n")
        for i, j in mesh.boundary_edges:
            f.write(f"{i + 1} {j + 1}\n")


def load_mesh(path) -> Mesh:
    """Read the text format and return a validated, boundary-last Mesh.

    Accepts clockwise triangles (reoriented) and interleaved boundary nodes
    (stably reordered; the permutation is kept on ``reorder_map``).
    """
    tokens = []  # (line_number, [fields])
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.append((ln, line.split()))

    pos = 0

    def take(what: str):
        nonlocal pos
        if pos >= len(tokens):
            raise MeshError(f"{path}: unexpected end of file, expected {what}")
        item = tokens[pos]
        pos += 1
        return item

    def section(name: str) -> int:
        ln, fields = take(f"'{name} <count>'")
        if len(fields) != 2 or fields[0].upper() != name:
            raise MeshError(f"{path}: line {ln}: expected '{name} <count>'")
        try:
            return int(fields[1])
        except ValueError:
            raise MeshError(f"{path}: line {ln}: bad count {fields[1]!r}") from None

    def rows(count: int, width: int, kind, what: str):
        out = []
        for _ in range(count):
            ln, fields = take(what)
            if len(fields) != width:
                raise MeshError(f"{path}: line {ln}: expected {width} fields "
                                f"for {what}")
            try:
                out.append([kind(v) for v in fields])
            except ValueError:
                raise MeshError(f"{path}: line {ln}: bad {what} value") from None
        return out

    n = section("NODES")
    nodes = rows(n, 2, float, "node coordinate")
    m = section("TRIANGLES")
    tris = np.array(rows(m, 3, int, "triangle index"), dtype=np.int64) - 1
    k = section("BOUNDARY")
    edges = np.array(rows(k, 2, int, "boundary edge index"), dtype=np.int64) - 1
    if pos != len(tokens):
        ln = tokens[pos][0]
        raise MeshError(f"{path}: line {ln}: trailing content after BOUNDARY")
    return mesh_from_arrays(np.array(nodes), tris, edges)
