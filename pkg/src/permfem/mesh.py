"""Ambient tetrahedral grid, synthetic phantoms and barrier-face extraction.

The grid is a structured cube split into ``n**3`` cells, each cut into six
tetrahedra around its main diagonal. Every tetrahedron is later treated as
its own compartment; the only coupling between them lives on the interior
faces, which is why the face and edge incidence tables built here are the
backbone of everything downstream.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Local face i of a tet is the face opposite local vertex i.
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

K_MIN = -5.0
K_MAX = -1.0
BARRIER_KAPPA = 1e-5
OPEN_KAPPA = 1e-1
THRESHOLD_KAPPA = 1e-3


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed; the message names the line."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def signed_volumes(vertices, tets):
    p = vertices[tets]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    e3 = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Tetrahedral mesh with the incidence tables used by the solver.

    Attributes
    ----------
    vertices : (nv, 3) float array, micrometres.
    tets : (nt, 4) int array, positively oriented.
    face_tets : (nf, 2) tets sharing each interior face.
    face_local : (nf, 2) local face index of the face in each of the two tets.
    face_vertices : (nf, 3) sorted global vertex triple of each interior face.
    boundary_faces : (nb, 2) rows of (tet, local face).
    edges : (ne, 2) sorted vertex pairs that carry at least one interior face.
    edge_faces : list of int arrays, interior faces incident to each edge.
    face_adjacency : (npair, 2) interior-face pairs sharing an edge, i < j.
    """

    vertices: np.ndarray
    tets: np.ndarray
    face_tets: np.ndarray = field(repr=False)
    face_local: np.ndarray = field(repr=False)
    face_vertices: np.ndarray = field(repr=False)
    boundary_faces: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    edge_faces: list = field(repr=False)
    face_adjacency: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, tets):
        vertices = np.array(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (nv, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ValueError("tets must have shape (nt, 4)")
        if tets.size and (tets.min() < 0 or tets.max() >= len(vertices)):
            raise ValueError("vertex index out of range")
        vols = signed_volumes(vertices, tets)
        if np.any(vols <= 0):
            bad = int(np.flatnonzero(vols <= 0)[0])
            raise ValueError(f"tet {bad} has non-positive volume")

        nt = len(tets)
        triples = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
        owner = np.repeat(np.arange(nt), 4)
        local = np.tile(np.arange(4), nt)
        order = np.lexsort(triples.T[::-1])
        sorted_triples = triples[order]
        same_next = np.all(sorted_triples[1:] == sorted_triples[:-1], axis=1)
        if np.any(same_next[1:] & same_next[:-1]):
            raise ValueError("a face is shared by more than two tets")
        first = np.flatnonzero(same_next)
        second = first + 1
        paired = np.zeros(len(order), dtype=bool)
        paired[first] = True
        paired[second] = True
        ia, ib = order[first], order[second]
        face_tets = np.stack([owner[ia], owner[ib]], axis=1)
        face_local = np.stack([local[ia], local[ib]], axis=1)
        face_vertices = triples[ia]
        lone = order[~paired]
        boundary_faces = np.stack([owner[lone], local[lone]], axis=1)

        edges, edge_faces = _edge_incidence(face_vertices)
        face_adjacency = _face_pairs(edge_faces)

        for arr in (vertices, tets, face_tets, face_local, face_vertices,
                    boundary_faces, edges, face_adjacency):
            arr.setflags(write=False)
        return cls(vertices, tets, face_tets, face_local, face_vertices,
                   boundary_faces, edges, edge_faces, face_adjacency)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_faces(self):
        return len(self.face_tets)

    @property
    def volumes(self):
        return signed_volumes(self.vertices, self.tets)

    @property
    def centroids(self):
        return self.vertices[self.tets].mean(axis=1)

    def face_centroids(self, faces=None):
        fv = self.face_vertices if faces is None else self.face_vertices[faces]
        return self.vertices[fv].mean(axis=1)

    def face_areas(self):
        p = self.vertices[self.face_vertices]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def _edge_incidence(face_vertices):
    nf = len(face_vertices)
    pairs = np.concatenate([face_vertices[:, [0, 1]], face_vertices[:, [0, 2]],
                            face_vertices[:, [1, 2]]])
    owners = np.tile(np.arange(nf), 3)
    if nf == 0:
        return np.zeros((0, 2), dtype=np.int64), []
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(edges)))[:-1]
    edge_faces = [np.sort(f) for f in np.split(owners[order], splits)]
    return edges, edge_faces


def _face_pairs(edge_faces):
    rows = []
    for faces in edge_faces:
        if len(faces) > 1:
            rows.extend(itertools.combinations(faces.tolist(), 2))
    if not rows:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.array(rows, dtype=np.int64)
    return np.unique(pairs, axis=0)


def build_ambient_grid(cells_per_axis=10, half_extent=13.6):
    """Structured cube ``[-half_extent, half_extent]**3`` cut into 6 tets per cell.

    Each cell uses the Kuhn split: one tet per permutation of the axes, all
    sharing the diagonal from the cell's low corner to its high corner. The
    split is translation invariant, so neighbouring cells conform.
    """
    n = int(cells_per_axis)
    if n != cells_per_axis or n < 1:
        raise ValueError("cells_per_axis must be a positive integer")
    if not half_extent > 0:
        raise ValueError("half_extent must be positive")

    ticks = np.linspace(-half_extent, half_extent, n + 1)
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    vertices = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    tets = []
    for perm in itertools.permutations(range(3)):
        step = np.zeros(3, dtype=np.int64)
        corners = [vid(i, j, k)]
        for axis in perm:
            step[axis] = 1
            corners.append(vid(i + step[0], j + step[1], k + step[2]))
        tets.append(np.stack(corners, axis=1))
    # cell-major ordering keeps the six tets of a cell adjacent
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    vols = signed_volumes(vertices, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Mesh.from_arrays(vertices, tets)


# --------------------------------------------------------------------------
# Shapes


@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, points):
        return np.linalg.norm(np.asarray(points) - np.asarray(self.center), axis=-1) - self.radius

    def extent(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Cylinder:
    """Infinite straight cylinder, clipped by the domain."""

    radius: float
    axis: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")
        if np.linalg.norm(self.axis) == 0:
            raise ValueError("cylinder axis must be non-zero")

    def sdf(self, points):
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        d = np.asarray(points) - np.asarray(self.center)
        radial = d - np.outer(d.reshape(-1, 3) @ a, a).reshape(d.shape)
        return np.linalg.norm(radial, axis=-1) - self.radius

    def extent(self):
        return None


@dataclass(frozen=True)
class BentCylinder:
    """Tube of constant radius around a quadratic Bezier centreline.

    Like :class:`Cylinder` it is meant to cross the whole domain, so the
    centreline is extended linearly past both end control points.
    """

    radius: float
    control_points: tuple = ((0.0, 0.0, -13.6), (4.0, 0.0, 0.0), (0.0, 0.0, 13.6))
    samples: int = 200

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("tube radius must be positive")
        if np.asarray(self.control_points).shape != (3, 3):
            raise ValueError("bent cylinder needs three 3-D control points")

    def _polyline(self):
        p0, p1, p2 = (np.asarray(p, dtype=float) for p in self.control_points)
        t = np.linspace(0.0, 1.0, self.samples)[:, None]
        curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        head = curve[0] - 100.0 * (p1 - p0) / np.linalg.norm(p1 - p0)
        tail = curve[-1] + 100.0 * (p2 - p1) / np.linalg.norm(p2 - p1)
        return np.vstack([head, curve, tail])

    def sdf(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        line = self._polyline()
        a, b = line[:-1], line[1:]
        ab = b - a
        best = np.full(len(pts), np.inf)
        for s in range(len(a)):
            ap = pts - a[s]
            t = np.clip(ap @ ab[s] / (ab[s] @ ab[s]), 0.0, 1.0)
            best = np.minimum(best, np.linalg.norm(ap - np.outer(t, ab[s]), axis=1))
        return (best - self.radius).reshape(np.shape(points)[:-1])

    def extent(self):
        return None


@dataclass(frozen=True)
class Torus:
    major_radius: float
    minor_radius: float
    center: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not (self.major_radius > 0 and self.minor_radius > 0):
            raise ValueError("torus radii must be positive")
        if self.minor_radius >= self.major_radius:
            raise ValueError("torus minor radius must be below the major radius")

    def sdf(self, points):
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        h = d @ a
        radial = np.linalg.norm(d - h[..., None] * a, axis=-1)
        return np.hypot(radial - self.major_radius, h) - self.minor_radius

    def extent(self):
        c = np.asarray(self.center, dtype=float)
        r = self.major_radius + self.minor_radius
        return c - r, c + r


@dataclass(frozen=True)
class Union:
    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ValueError("union needs at least one shape")

    def sdf(self, points):
        return np.min([p.sdf(points) for p in self.parts], axis=0)

    def extent(self):
        boxes = [p.extent() for p in self.parts]
        if any(b is None for b in boxes):
            return None
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo, hi


def two_axon_crossing(radius=3.0, offset=4.0):
    """Two straight axons crossing at right angles, offset along z."""
    return Union((
        Cylinder(radius, axis=(1.0, 0.0, 0.0), center=(0.0, 0.0, -offset)),
        Cylinder(radius, axis=(0.0, 1.0, 0.0), center=(0.0, 0.0, offset)),
    ))


def seeded_phantom(kind, seed):
    """Randomised sphere or straight cylinder, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    center = tuple(rng.uniform(-2.0, 2.0, 3))
    if kind == "sphere":
        return Sphere(float(rng.uniform(6.0, 9.0)), center)
    if kind == "cylinder":
        axis = rng.normal(size=3)
        return Cylinder(float(rng.uniform(3.5, 6.0)), tuple(axis / np.linalg.norm(axis)), center)
    raise ValueError(f"no seeded phantom of kind {kind!r}")


def _check_inside(mesh, shape):
    box = shape.extent()
    if box is None:
        return
    lo, hi = box
    vlo, vhi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if np.any(lo < vlo - 1e-12) or np.any(hi > vhi + 1e-12):
        raise ValueError("shape does not fit inside the mesh domain")


# --------------------------------------------------------------------------
# Permeability fields


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class PermeabilityField:
    """Face permeabilities parametrised by an unconstrained ``theta``.

    ``log10(kappa) = k_min + (k_max - k_min) * sigmoid(theta / temperature)``
    """

    theta: np.ndarray
    k_min: float = K_MIN
    k_max: float = K_MAX
    temperature: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if not self.k_max > self.k_min:
            raise ValueError("k_max must exceed k_min")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def log_kappa(self):
        return self.k_min + (self.k_max - self.k_min) * sigmoid(self.theta / self.temperature)

    @property
    def kappa(self):
        return 10.0 ** self.log_kappa

    @classmethod
    def from_kappa(cls, kappa, k_min=K_MIN, k_max=K_MAX, temperature=1.0, clip=1e-9):
        """Inverse map; values at or beyond the bounds are pulled inside by ``clip``."""
        frac = (np.log10(np.asarray(kappa, dtype=float)) - k_min) / (k_max - k_min)
        frac = np.clip(frac, clip, 1.0 - clip)
        theta = temperature * np.log(frac / (1.0 - frac))
        return cls(theta, k_min, k_max, temperature)

    @classmethod
    def constant(cls, n_faces, kappa=THRESHOLD_KAPPA, **kwargs):
        return cls.from_kappa(np.full(n_faces, kappa), **kwargs)


@dataclass(frozen=True)
class InterfaceSet:
    faces: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.faces)


def classify_tets(mesh, shape):
    """True for tets whose centroid lies strictly inside the shape."""
    return shape.sdf(mesh.centroids) < 0


def straddling_faces(mesh, shape):
    inside = classify_tets(mesh, shape)
    return np.flatnonzero(inside[mesh.face_tets[:, 0]] != inside[mesh.face_tets[:, 1]])


def generate_ground_truth(mesh, shape, temperature=1.0):
    """Barrier kappa on faces whose two tets disagree about being inside ``shape``."""
    _check_inside(mesh, shape)
    kappa = np.full(mesh.n_faces, OPEN_KAPPA)
    kappa[straddling_faces(mesh, shape)] = BARRIER_KAPPA
    return PermeabilityField.from_kappa(kappa, temperature=temperature)


def extract_interface(field, tau_b=THRESHOLD_KAPPA):
    if not 10.0 ** field.k_min < tau_b < 10.0 ** field.k_max:
        raise ValueError("threshold must lie strictly inside the permeability bounds")
    return InterfaceSet(np.flatnonzero(field.kappa < tau_b), tau_b)


# --------------------------------------------------------------------------
# Text I/O


def save_mesh(mesh, path):
    lines = [f"VERTICES {len(mesh.vertices)}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines.append(f"TETS {len(mesh.tets)}")
    lines += [" ".join(str(int(i)) for i in t) for t in mesh.tets]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path):
    text = Path(path).read_text().splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(text):
            pos += 1
            line = text[pos - 1].strip()
            if line and not line.startswith("#"):
                return line
        raise MeshFormatError("unexpected end of input", pos + 1)

    def header(name):
        line = next_line()
        parts = line.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} <count>' header", pos)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad {name} count {parts[1]!r}", pos) from None
        if count < 0:
            raise MeshFormatError(f"negative {name} count", pos)
        return count

    nv = header("VERTICES")
    vertices = np.empty((nv, 3))
    for i in range(nv):
        parts = next_line().split()
        try:
            if len(parts) != 3:
                raise ValueError
            vertices[i] = [float(p) for p in parts]
        except ValueError:
            raise MeshFormatError("expected three coordinates", pos) from None

    nt = header("TETS")
    tets = np.empty((nt, 4), dtype=np.int64)
    for i in range(nt):
        parts = next_line().split()
        try:
            if len(parts) != 4:
                raise ValueError
            tets[i] = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError("expected four vertex indices", pos) from None
        if tets[i].min() < 0 or tets[i].max() >= nv:
            raise MeshFormatError("vertex index out of range", pos)
        if signed_volumes(vertices, tets[i:i + 1])[0] <= 0:
            raise MeshFormatError("tet has non-positive volume", pos)
    return Mesh.from_arrays(vertices, tets)


def save_field(field, path):
    kappa = field.kappa
    Path(path).write_text("".join(f"{i} {repr(float(k))}\n" for i, k in enumerate(kappa)))


def load_field(path, n_faces=None, temperature=1.0):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            idx, val = int(parts[0]), float(parts[1])
        except (ValueError, IndexError):
            raise MeshFormatError("expected 'faceIndex kappa'", lineno) from None
        if idx != len(rows):
            raise MeshFormatError(f"face index {idx} out of sequence", lineno)
        rows.append(val)
    if n_faces is not None and len(rows) != n_faces:
        raise MeshFormatError(f"expected {n_faces} faces, found {len(rows)}")
    return PermeabilityField.from_kappa(np.array(rows), temperature=temperature)


def save_interface(mesh, interface, path):
    lines = [f"{f} {a} {b} {c}" for f, (a, b, c) in
             zip(interface.faces, mesh.face_vertices[interface.faces])]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_interface(path, threshold=THRESHOLD_KAPPA):
    faces = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            faces.append(int(line.split()[0]))
        except ValueError:
            raise MeshFormatError("expected a face index", lineno) from None
    return InterfaceSet(np.array(faces, dtype=np.int64), threshold)
