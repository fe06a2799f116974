"""Graded triangulations of the unit square.

Meshes are built layer by layer in the direction normal to the target edge.
Each layer is a single column of rectangular cells; the number of rows per
layer is a power of two and adjacent layers differ by at most a factor of
two.  Where a finer layer meets a coarser one the coarse cell is fanned from
the midpoint of the shared side, so the result has no hanging nodes.

Geometry is stored in flat numpy arrays::

    vertices  (nv, 2) float   coordinates in [0, 1]^2
    boundary  (nv,)   bool    vertex lies on the boundary of the square
    elements  (ne, 3) int     counter-clockwise vertex ids
"""
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

__all__ = [
    "GradingSpec", "Mesh", "MeshError", "make_graded_mesh", "mesh_widths",
    "element_patch", "check_cardinality_assumption", "grading_constants",
    "export_mesh", "import_mesh", "three_patch_mesh", "SHAPE_LIMIT",
]

EDGES = ("left", "right", "bottom", "top", "none")
SHAPE_LIMIT = 10.0
# Thinnest layer we agree to build; below this coordinates stop being distinct.
MIN_LAYER_WIDTH = 1e3 * np.finfo(float).eps


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class GradingSpec:
    """Grading parameters.

    ``alpha`` is 1 for uniform meshes, in (1, inf) for algebraic grading and
    ``math.inf`` for exponential grading.  For finite ``alpha`` the number of
    layers is ``round(1/H)``.  For ``alpha = inf`` the layer count comes from
    ``layers``, or else from ``h_floor`` (fewest layers whose innermost width
    is at most ``h_floor``).
    """
    alpha: float = 1.0
    H: float = 0.25
    target_edge: str = "left"
    layers: int | None = None
    h_floor: float | None = None

    def __post_init__(self):
        if not (self.alpha >= 1.0):
            raise MeshError(f"alpha must be >= 1, got {self.alpha}")
        if not (self.H > 0.0) or not math.isfinite(self.H):
            raise MeshError(f"H must be positive and finite, got {self.H}")
        if self.target_edge not in EDGES:
            raise MeshError(f"target_edge must be one of {EDGES}, got {self.target_edge!r}")
        if self.layers is not None and self.layers < 1:
            raise MeshError("layers must be >= 1")
        if self.h_floor is not None and not (self.h_floor > 0.0):
            raise MeshError("h_floor must be positive")
        if self.alpha > 1.0 and self.target_edge == "none":
            raise MeshError("graded meshes need a target edge")

    @property
    def exponential(self):
        return math.isinf(self.alpha)

    @property
    def sigma(self):
        return 1.0 / (1.0 + self.H)


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    elements: np.ndarray
    boundary: np.ndarray | None = None
    grading: GradingSpec | None = None
    layer_abscissae: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 2)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64).reshape(-1, 3)
        if self.boundary is None:
            v = self.vertices
            self.boundary = np.any((v == 0.0) | (v == 1.0), axis=1)
        self.boundary = np.asarray(self.boundary, dtype=bool)
        for arr in (self.vertices, self.elements, self.boundary):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def __len__(self):
        return self.n_elements

    @cached_property
    def corners(self):
        """(ne, 3, 2) vertex coordinates per element."""
        return self.vertices[self.elements]

    @cached_property
    def twice_areas(self):
        c = self.corners
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    @cached_property
    def areas(self):
        return 0.5 * self.twice_areas

    @cached_property
    def edge_lengths(self):
        """(ne, 3) length of the edge opposite each local vertex."""
        c = self.corners
        return np.stack([
            np.linalg.norm(c[:, 2] - c[:, 1], axis=1),
            np.linalg.norm(c[:, 0] - c[:, 2], axis=1),
            np.linalg.norm(c[:, 1] - c[:, 0], axis=1),
        ], axis=1)

    @cached_property
    def diameters(self):
        return self.edge_lengths.max(axis=1)

    @cached_property
    def inradii(self):
        return self.twice_areas / self.edge_lengths.sum(axis=1)

    @cached_property
    def incenters(self):
        L = self.edge_lengths
        return np.einsum("ek,ekd->ed", L, self.corners) / L.sum(axis=1)[:, None]

    @cached_property
    def shape_ratios(self):
        """h_T / (2 * inradius_T) per element."""
        return self.diameters / (2.0 * self.inradii)

    @property
    def shape_constant(self):
        return float(self.shape_ratios.max())

    @cached_property
    def edges(self):
        """Unique sorted vertex pairs, (n_edges, 2)."""
        return self._edge_data[0]

    @cached_property
    def element_edges(self):
        """(ne, 3) edge id of the edge opposite each local vertex."""
        return self._edge_data[1]

    @cached_property
    def edge_multiplicity(self):
        return np.bincount(self.element_edges.ravel(), minlength=len(self.edges))

    @cached_property
    def _edge_data(self):
        el = self.elements
        local = np.stack([el[:, [1, 2]], el[:, [2, 0]], el[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    @cached_property
    def vertex_elements(self):
        """List of element-id arrays per vertex."""
        order = np.argsort(self.elements.ravel(), kind="stable")
        owners = order // 3
        counts = np.bincount(self.elements.ravel(), minlength=self.n_vertices)
        return np.split(owners, np.cumsum(counts)[:-1])

    def validate(self, area=1.0, shape_limit=SHAPE_LIMIT):
        """Raise ``MeshError`` unless the mesh is a conforming, positively
        oriented, shape-regular triangulation covering ``area``."""
        el = self.elements
        if np.any((el[:, 0] == el[:, 1]) | (el[:, 1] == el[:, 2]) | (el[:, 0] == el[:, 2])):
            raise MeshError("element with repeated vertex")
        if np.any(self.twice_areas <= 0):
            raise MeshError("element with non-positive orientation")
        v = self.vertices
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise MeshError("vertex outside the unit square")
        mult = self.edge_multiplicity
        if np.any(mult > 2):
            raise MeshError("edge shared by more than two elements")
        outer = self.edges[mult == 1]
        mid = 0.5 * (v[outer[:, 0]] + v[outer[:, 1]])
        if not np.all(np.any((mid == 0.0) | (mid == 1.0), axis=1)):
            raise MeshError("unshared edge in the interior (hanging node)")
        if area is not None and abs(self.areas.sum() - area) > 1e-12:
            raise MeshError(f"element areas sum to {self.areas.sum()!r}, expected {area}")
        if shape_limit is not None and self.shape_constant > shape_limit:
            raise MeshError(f"shape constant {self.shape_constant:.3g} exceeds {shape_limit}")
        return self


def _uniform_fallback():
    return GradingSpec(alpha=1.0, H=1.0, target_edge="none")


def _layer_abscissae(spec):
    if spec.alpha == 1.0 or spec.target_edge == "none":
        L = max(1, round(1.0 / spec.H))
        return np.arange(L + 1) / L
    if spec.exponential:
        sigma = spec.sigma
        if spec.layers is not None:
            L = spec.layers
        elif spec.h_floor is not None:
            L = 1 + max(0, math.ceil(math.log(spec.h_floor) / math.log(sigma)))
        else:
            raise MeshError("exponential grading needs layers or h_floor")
        x = np.empty(L + 1)
        x[0] = 0.0
        x[1:] = sigma ** (L - np.arange(1, L + 1))
        return x
    L = max(1, round(1.0 / spec.H))
    return (np.arange(L + 1) / L) ** spec.alpha


def _limit_growth(x, factor=2.0):
    """Subdivide layers that are more than ``factor`` times wider than their
    neighbour towards the target edge.

    Row counts can only halve from one layer to the next, so faster width
    growth produces flat cells.  A too-wide layer is cut into the fewest
    pieces whose widths grow geometrically with ratio at most ``factor``.
    """
    out = [x[0], x[1]]
    for xk in x[2:]:
        prev = out[-1] - out[-2]
        width = xk - out[-1]
        if width > factor * prev * (1 + 1e-12):
            m = 1
            while prev * sum(factor ** j for j in range(1, m + 1)) < width:
                m += 1
            j = np.arange(1, m + 1)
            r = brentq(lambda q: prev * np.sum(q ** j) - width, 1.0, factor)
            out.extend(out[-1] + prev * np.cumsum(r ** j)[:-1])
        out.append(xk)
    return np.array(out)


def _row_counts(x):
    widths = np.diff(x)
    if widths.min() < MIN_LAYER_WIDTH:
        raise MeshError(f"innermost layer width {widths.min():.3g} is below the representable limit")
    n = np.ceil(1.0 / widths - 1e-9).astype(np.int64)
    if np.all(n == n[0]):
        return n
    n = 2 ** np.ceil(np.log2(n)).astype(np.int64)
    # 2:1 balance between neighbouring layers, refining the coarser side
    while True:
        m = n.copy()
        m[1:] = np.maximum(m[1:], n[:-1] // 2)
        m[:-1] = np.maximum(m[:-1], n[1:] // 2)
        if np.array_equal(m, n):
            return n
        n = m


def _build_layers(x, n):
    L = len(n)
    # rows on each vertical line = the finer of the two adjacent layers
    lines = np.empty(L + 1, dtype=np.int64)
    lines[0] = n[0]
    lines[-1] = n[-1]
    lines[1:-1] = np.maximum(n[:-1], n[1:])
    offsets = np.concatenate([[0], np.cumsum(lines + 1)])
    verts = np.empty((offsets[-1], 2))
    for k in range(L + 1):
        m = lines[k]
        verts[offsets[k]:offsets[k + 1], 0] = x[k]
        verts[offsets[k]:offsets[k + 1], 1] = np.arange(m + 1) / m
    tris = []
    for k in range(L):
        rows = n[k]
        rl = lines[k] // rows
        rr = lines[k + 1] // rows
        j = np.arange(rows)
        lb = offsets[k] + j * rl
        lt = offsets[k] + (j + 1) * rl
        rb = offsets[k + 1] + j * rr
        rt = offsets[k + 1] + (j + 1) * rr
        lm = offsets[k] + 2 * j + 1
        rm = offsets[k + 1] + 2 * j + 1
        if rl == 1 and rr == 1:
            pieces = [(lb, rb, rt), (lb, rt, lt)]
        elif rl == 2 and rr == 1:
            pieces = [(lb, rb, lm), (lm, rb, rt), (lm, rt, lt)]
        elif rl == 1 and rr == 2:
            pieces = [(lb, rb, rm), (lb, rm, lt), (lt, rm, rt)]
        else:
            pieces = [(lb, rb, rm), (lb, rm, lm), (lm, rm, rt), (lm, rt, lt)]
        for a, b, c in pieces:
            tris.append(np.stack([a, b, c], axis=1))
    return verts, np.concatenate(tris, axis=0)


def _orient_to_edge(verts, elements, edge):
    x, y = verts[:, 0].copy(), verts[:, 1].copy()
    if edge in ("left", "none"):
        return verts, elements
    if edge == "right":
        out = np.stack([1.0 - x, y], axis=1)
    elif edge == "bottom":
        out = np.stack([y, x], axis=1)
    elif edge == "top":
        out = np.stack([y, 1.0 - x], axis=1)
    c = out[elements]
    twice = (c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1]) - \
        (c[:, 1, 1] - c[:, 0, 1]) * (c[:, 2, 0] - c[:, 0, 0])
    el = elements.copy()
    flip = twice < 0
    el[flip] = el[flip][:, [0, 2, 1]]
    return out, el


def make_graded_mesh(spec):
    """Build and validate a mesh of the unit square graded per ``spec``."""
    if spec.H > 1.0:
        warnings.warn(f"H={spec.H} too large for any layer; single-layer uniform fallback",
                      RuntimeWarning, stacklevel=2)
        spec = _uniform_fallback()
    x = _limit_growth(_layer_abscissae(spec))
    n = _row_counts(x)
    verts, elements = _build_layers(x, n)
    verts, elements = _orient_to_edge(verts, elements, spec.target_edge)
    mesh = Mesh(verts, elements, grading=spec, layer_abscissae=x)
    return mesh.validate()


def mesh_widths(mesh):
    """(h_min, h_max) with h_T the longest edge of T."""
    h = mesh.diameters
    return float(h.min()), float(h.max())


def element_patch(mesh, element_id):
    """Ids of all elements whose closure meets the closure of ``element_id``."""
    if not 0 <= element_id < mesh.n_elements:
        raise IndexError(f"element id {element_id} out of range [0, {mesh.n_elements})")
    ve = mesh.vertex_elements
    return set(np.concatenate([ve[v] for v in mesh.elements[element_id]]).tolist())


def check_cardinality_assumption(mesh, c_card):
    """(card T)^c_card * h_min^2; bounded away from 0 along a family iff the
    cardinality assumption holds with this exponent."""
    if c_card < 1:
        raise ValueError("c_card must be >= 1")
    h_min, _ = mesh_widths(mesh)
    return float(mesh.n_elements) ** c_card * h_min ** 2


def _distance_to_edge(points, edge):
    x, y = points[:, 0], points[:, 1]
    return {"left": x, "right": 1.0 - x, "bottom": y, "top": 1.0 - y}[edge]


def grading_constants(mesh, spec=None):
    """Range (c, C) of h_T / (dist(x_T, edge)^(1 - 1/alpha) * H) over all elements."""
    spec = spec or mesh.grading
    if spec is None:
        raise MeshError("mesh carries no grading information")
    if spec.target_edge == "none" or spec.alpha == 1.0:
        scale = np.full(mesh.n_elements, spec.H)
    else:
        dist = _distance_to_edge(mesh.incenters, spec.target_edge)
        expo = 1.0 if spec.exponential else 1.0 - 1.0 / spec.alpha
        scale = dist ** expo * spec.H
    ratio = mesh.diameters / scale
    return float(ratio.min()), float(ratio.max())


def three_patch_mesh():
    """Three triangles sharing the vertex (0.5, 1); every vertex lies on the
    boundary, so continuous splines vanishing there live on the two
    interior edges and the element interiors."""
    verts = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 1.0)])
    elems = np.array([(0, 1, 4), (1, 2, 4), (0, 4, 3)])
    mesh = Mesh(verts, elems)
    mesh.validate()
    return mesh


def export_mesh(mesh, path):
    if not path:
        raise MeshError("empty output path")
    lines = [f"{mesh.n_vertices} {mesh.n_elements}"]
    for (x, y), b in zip(mesh.vertices, mesh.boundary):
        lines.append(f"{x:.17g} {y:.17g} {int(b)}")
    for a, b, c in mesh.elements:
        lines.append(f"{a} {b} {c}")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_mesh(path):
    with open(os.fspath(path)) as fh:
        tokens = fh.read().split("\n")
    nv, ne = (int(t) for t in tokens[0].split())
    vdata = np.array([ln.split() for ln in tokens[1:1 + nv]], dtype=float).reshape(nv, 3)
    edata = np.array([ln.split() for ln in tokens[1 + nv:1 + nv + ne]], dtype=np.int64).reshape(ne, 3)
    return Mesh(vdata[:, :2], edata, boundary=vdata[:, 2] != 0)
