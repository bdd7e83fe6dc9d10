"""Intrinsic triangulations of closed hyperbolic surfaces.

A mesh is stored purely intrinsically: oriented triangles plus one hyperbolic
length per edge.  Corner angles (hyperbolic law of cosines), face areas (angle
defect with K = -1) and the cotangent stiffness form are all derived from the
lengths, so generated meshes and loaded files go through one validation path.

The generator builds the regular hyperbolic 4g-gon whose standard side word
a1 b1 a1' b1' ... ag bg ag' bg' identifies all polygon corners to a single
point of cone angle exactly 2*pi.  The polygon is fan-triangulated from its
center and midpoint-refined inside the Poincare disk before the sides are
glued and the lengths are measured, which keeps every vertex defect at
floating-point zero.  Two refinement rounds are always applied before the
user-visible subdivision count so the glued quotient is simplicial (no
self-loops or doubled edges); edges can then be keyed by vertex pairs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "FLAT_TOL",
    "MeshError",
    "MeshReport",
    "SurfaceMesh",
    "build_fuchsian_mesh",
    "load_mesh",
    "save_mesh",
    "mesh_report",
    "laplace_pair",
]

FLAT_TOL = 1e-8        # angle-defect / area tolerance on generated meshes
DUP_REL_TOL = 1e-12    # required agreement of duplicate edge lengths
_BASE_LEVELS = 2       # refinement rounds baked in before user subdivisions


class MeshError(ValueError):
    """Invalid mesh topology, geometry or file contents."""


@dataclass(frozen=True)
class MeshReport:
    """Quality summary of a mesh: defects, area budget, angle range."""

    max_vertex_defect: float
    total_area: float
    area_error: float
    min_angle: float
    edge_length_range: tuple[float, float]


def _corner_angles(face_lengths: np.ndarray) -> np.ndarray:
    """Hyperbolic corner angles from per-face side lengths.

    Side s of a face joins local corners s and s+1, so corner c is flanked
    by sides c and c+2 and faces side c+1.
    """
    ch = np.cosh(face_lengths)
    sh = np.sinh(face_lengths)
    ang = np.empty_like(face_lengths)
    for c in range(3):
        s1, s2, opp = c, (c + 2) % 3, (c + 1) % 3
        cosang = (ch[:, s1] * ch[:, s2] - ch[:, opp]) / (sh[:, s1] * sh[:, s2])
        if np.any(np.abs(cosang) > 1.0 + 1e-9):
            raise MeshError("degenerate corner angle (triangle inequality near-violation)")
        ang[:, c] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return ang


class SurfaceMesh:
    """Closed oriented surface of genus >= 2 with hyperbolic edge lengths.

    Immutable after construction; all arrays are set read-only.  Use
    :meth:`from_face_lengths`, :func:`build_fuchsian_mesh` or
    :func:`load_mesh` to construct one.
    """

    def __init__(self, faces, face_lengths, edges, edge_length_arr,
                 corner_angles, face_areas, vertex_areas, genus):
        self.faces = faces
        self.face_lengths = face_lengths
        self.edges = edges
        self.edge_length_arr = edge_length_arr
        self.corner_angles = corner_angles
        self.face_areas = face_areas
        self.vertex_areas = vertex_areas
        self.genus = genus
        self.vertex_count = int(faces.max()) + 1
        self.edge_index = {(int(u), int(v)): e for e, (u, v) in enumerate(edges)}
        self.edge_lengths = {}
        for e, (u, v) in enumerate(edges):
            le = float(edge_length_arr[e])
            self.edge_lengths[(int(u), int(v))] = le
            self.edge_lengths[(int(v), int(u))] = le
        for arr in (self.faces, self.face_lengths, self.edges,
                    self.edge_length_arr, self.corner_angles,
                    self.face_areas, self.vertex_areas):
            arr.setflags(write=False)
        self._frames = None      # lazy cache used by spinops
        self._hash = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_face_lengths(faces, face_lengths, expected_genus=None) -> "SurfaceMesh":
        """Build and fully validate a mesh from faces and per-side lengths.

        ``faces[f] = (i, j, k)`` lists each triangle counterclockwise and
        ``face_lengths[f] = (l_ij, l_jk, l_ki)`` gives the side lengths in
        matching order.  Raises :class:`MeshError` on any structural defect.
        """
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        face_lengths = np.ascontiguousarray(face_lengths, dtype=np.float64)
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] < 4:
            raise MeshError("face list must be (F,3) with F >= 4")
        if face_lengths.shape != faces.shape:
            raise MeshError("face_lengths shape must match faces")
        if faces.min() < 0:
            raise MeshError("negative vertex id")
        nv = int(faces.max()) + 1
        if len(np.unique(faces)) != nv:
            raise MeshError("isolated vertex (unused vertex id)")
        if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) \
                or np.any(faces[:, 2] == faces[:, 0]):
            raise MeshError("face with repeated vertex")
        if not np.all(np.isfinite(face_lengths)) or np.any(face_lengths <= 0.0):
            raise MeshError("nonpositive edge length")
        # strict hyperbolic triangle inequality (same condition as Euclidean)
        perim = face_lengths.sum(axis=1)
        if np.any(face_lengths.max(axis=1) >= perim - face_lengths.max(axis=1)):
            raise MeshError("triangle inequality violated")

        # halfedge bookkeeping: directed edges must be unique (orientation),
        # undirected ones must pair up exactly (closed manifold)
        tails = faces.ravel()
        heads = faces[:, [1, 2, 0]].ravel()
        directed = tails * nv + heads
        if len(np.unique(directed)) != len(directed):
            raise MeshError("directed edge repeated: mesh not consistently oriented")
        lo = np.minimum(tails, heads)
        hi = np.maximum(tails, heads)
        und = lo * nv + hi
        uniq, inverse, counts = np.unique(und, return_inverse=True, return_counts=True)
        if np.any(counts != 2):
            raise MeshError("not a closed manifold surface (unpaired or overshared edge)")
        n_edges = len(uniq)
        chi = nv - n_edges + faces.shape[0]
        if (2 - chi) % 2 != 0:
            raise MeshError(f"odd Euler characteristic {chi}")
        genus = (2 - chi) // 2
        if genus < 2:
            raise MeshError(f"genus below 2 (chi = {chi}, genus = {genus})")
        if expected_genus is not None and genus != expected_genus:
            raise MeshError(f"genus mismatch: built {genus}, expected {expected_genus}")

        # duplicate edge lengths across the two incident faces must agree
        side_len = face_lengths.ravel()
        order = np.argsort(inverse, kind="stable")
        l0 = side_len[order[0::2]]
        l1 = side_len[order[1::2]]
        rel = np.abs(l0 - l1) / np.maximum(l0, l1)
        if np.any(rel > DUP_REL_TOL):
            raise MeshError("inconsistent duplicate edge lengths")
        edge_length_arr = 0.5 * (l0 + l1)
        edges = np.stack([uniq // nv, uniq % nv], axis=1).astype(np.int64)

        # connectivity of the vertex graph
        adj_count = np.zeros(nv, dtype=np.int64)
        np.add.at(adj_count, edges.ravel(), 1)
        seen = np.zeros(nv, dtype=bool)
        stack = [0]
        seen[0] = True
        nbr = [[] for _ in range(nv)]
        for u, v in edges:
            nbr[u].append(v)
            nbr[v].append(u)
        while stack:
            u = stack.pop()
            for v in nbr[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        if not seen.all():
            raise MeshError("disconnected mesh")

        # each vertex link must be a single cycle (no pinched vertices);
        # walk next-around-vertex: next(h) = twin(previous side in face)
        twin = np.empty(3 * faces.shape[0], dtype=np.int64)
        he_of = {}
        for h in range(3 * faces.shape[0]):
            he_of[(int(tails[h]), int(heads[h]))] = h
        for h in range(3 * faces.shape[0]):
            twin[h] = he_of[(int(heads[h]), int(tails[h]))]
        nxt = np.empty_like(twin)
        for f in range(faces.shape[0]):
            for s in range(3):
                nxt[3 * f + s] = twin[3 * f + (s + 2) % 3]
        visited = np.zeros(len(twin), dtype=bool)
        orbits = 0
        for h0 in range(len(twin)):
            if visited[h0]:
                continue
            orbits += 1
            h = h0
            while not visited[h]:
                visited[h] = True
                h = nxt[h]
        if orbits != nv:
            raise MeshError("pinched vertex: link is not a single cycle")

        angles = _corner_angles(face_lengths)
        face_areas = math.pi - angles.sum(axis=1)
        if np.any(face_areas <= 0.0):
            raise MeshError("nonpositive hyperbolic face area")
        vertex_areas = np.zeros(nv)
        np.add.at(vertex_areas, faces.ravel(),
                  np.repeat(face_areas / 3.0, 3))
        return SurfaceMesh(faces, face_lengths, edges, edge_length_arr,
                           angles, face_areas, vertex_areas, genus)

    # -- derived quantities ------------------------------------------------

    def defects(self) -> np.ndarray:
        """Angle defect 2*pi - (cone angle) at every vertex."""
        angsum = np.zeros(self.vertex_count)
        np.add.at(angsum, self.faces.ravel(), self.corner_angles.ravel())
        return 2.0 * math.pi - angsum

    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def mesh_hash(self) -> str:
        if self._hash is None:
            self._hash = hashlib.sha256(_itri_text(self).encode()).hexdigest()[:16]
        return self._hash

    def __repr__(self):
        return (f"SurfaceMesh(V={self.vertex_count}, E={len(self.edges)}, "
                f"F={len(self.faces)}, genus={self.genus})")


# -- Poincare disk helpers (generator only) --------------------------------

def _to_hyperboloid(p: np.ndarray) -> np.ndarray:
    s = np.sum(p * p, axis=-1)
    t = (1.0 + s) / (1.0 - s)
    y = 2.0 * p / (1.0 - s)[..., None]
    return np.concatenate([t[..., None], y], axis=-1)


def _hyp_midpoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    X = _to_hyperboloid(a) + _to_hyperboloid(b)
    norm = math.sqrt(X[0] * X[0] - X[1] * X[1] - X[2] * X[2])
    X = X / norm
    return X[1:] / (1.0 + X[0])


def _hyp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # cosh d - 1 = 2|a-b|^2 / ((1-|a|^2)(1-|b|^2)); evaluating d through
    # log1p avoids the catastrophic cancellation of arccosh near 1 that
    # short edges on fine meshes would otherwise hit
    diff = np.sum((a - b) ** 2, axis=-1)
    z = 2.0 * diff / ((1.0 - np.sum(a * a, axis=-1)) * (1.0 - np.sum(b * b, axis=-1)))
    return np.log1p(z + np.sqrt(z * (z + 2.0)))


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # keep the smaller index as representative for determinism
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb


def build_fuchsian_mesh(genus: int, subdivision: int = 0) -> SurfaceMesh:
    """Regular hyperbolic 4g-gon, fan-triangulated, glued to a genus-g surface.

    The fan triangle has apex angle 2*pi/(4g) at the polygon center and base
    angles pi/(4g), so the 8g base corners identified by the standard side
    word add up to a cone angle of exactly 2*pi.  The fan is refined by
    hyperbolic midpoint subdivision in the disk (two rounds plus
    ``subdivision`` extra rounds) before the boundary is glued.
    """
    if genus < 2:
        raise MeshError(f"genus below 2 (got {genus})")
    if subdivision < 0:
        raise MeshError("subdivision must be >= 0")
    n = 4 * genus
    apex = 2.0 * math.pi / n
    base = math.pi / n
    # hyperbolic law of cosines for angles gives the spoke length
    cosh_spoke = math.cos(base) * (1.0 + math.cos(apex)) / (math.sin(apex) * math.sin(base))
    r_disk = math.tanh(0.5 * math.acosh(cosh_spoke))

    pts = [np.zeros(2)]
    for k in range(n):
        ang = 2.0 * math.pi * k / n
        pts.append(np.array([r_disk * math.cos(ang), r_disk * math.sin(ang)]))
    faces = [(0, 1 + k, 1 + (k + 1) % n) for k in range(n)]

    side_of_edge = {}
    side_params = {k: {} for k in range(n)}
    for k in range(n):
        a, b = 1 + k, 1 + (k + 1) % n
        side_of_edge[frozenset((a, b))] = k
        side_params[k][a] = 0.0
        side_params[k][b] = 1.0

    for _ in range(_BASE_LEVELS + subdivision):
        mid_of = {}

        def midpoint(a, b):
            key = frozenset((a, b))
            m = mid_of.get(key)
            if m is not None:
                return m
            m = len(pts)
            pts.append(_hyp_midpoint(pts[a], pts[b]))
            mid_of[key] = m
            side = side_of_edge.pop(key, None)
            if side is not None:
                tm = 0.5 * (side_params[side][a] + side_params[side][b])
                side_params[side][m] = tm
                side_of_edge[frozenset((a, m))] = side
                side_of_edge[frozenset((m, b))] = side
            return m

        refined = []
        for (i, j, k) in faces:
            mij, mjk, mki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            refined += [(i, mij, mki), (mij, j, mjk), (mjk, k, mki), (mij, mjk, mki)]
        faces = refined

    # glue side 4m+0 to 4m+2 and 4m+1 to 4m+3, reversing the boundary
    # parameter (t <-> 1-t); parameters are dyadic so the float lookups
    # are exact
    uf = _UnionFind(len(pts))
    for m in range(genus):
        for sa, sb in ((4 * m, 4 * m + 2), (4 * m + 1, 4 * m + 3)):
            by_param = {t: v for v, t in side_params[sb].items()}
            for v, t in side_params[sa].items():
                uf.union(v, by_param[1.0 - t])

    roots = sorted({uf.find(i) for i in range(len(pts))})
    relabel = {r: i for i, r in enumerate(roots)}
    coords = np.array(pts)
    faces_arr = np.array(faces, dtype=np.int64)
    a = coords[faces_arr]                      # (F, 3, 2) disk positions
    b = coords[faces_arr[:, [1, 2, 0]]]
    face_lengths = _hyp_distance(a, b)
    qfaces = np.vectorize(lambda v: relabel[uf.find(v)])(faces_arr)
    return SurfaceMesh.from_face_lengths(qfaces, face_lengths, expected_genus=genus)


# -- reports and operators --------------------------------------------------

def mesh_report(mesh: SurfaceMesh) -> MeshReport:
    defects = mesh.defects()
    total = mesh.total_area()
    target = 4.0 * math.pi * (mesh.genus - 1)
    return MeshReport(
        max_vertex_defect=float(np.abs(defects).max()),
        total_area=total,
        area_error=abs(total - target),
        min_angle=float(mesh.corner_angles.min()),
        edge_length_range=(float(mesh.edge_length_arr.min()),
                           float(mesh.edge_length_arr.max())),
    )


def _cotan_edge_weights(mesh: SurfaceMesh) -> np.ndarray:
    """Per-edge cotangent weight (cot a1 + cot a2)/2 from the corner angles."""
    w = np.zeros(len(mesh.edges))
    cot = 1.0 / np.tan(mesh.corner_angles)
    for s in range(3):
        # corner opposite side s is corner (s+2) mod 3
        u = mesh.faces[:, s]
        v = mesh.faces[:, (s + 1) % 3]
        c = cot[:, (s + 2) % 3]
        lo = np.minimum(u, v)
        hi = np.maximum(u, v)
        idx = [mesh.edge_index[(int(a), int(b))] for a, b in zip(lo, hi)]
        np.add.at(w, idx, 0.5 * c)
    return w


def laplace_pair(mesh: SurfaceMesh):
    """Cotangent stiffness form and lumped hyperbolic mass weights.

    The stiffness matrix is symmetric, vanishes on constants by construction,
    and realizes the Dirichlet energy of the per-vertex fields; the mass
    weights realize integrals over the surface.
    """
    w = _cotan_edge_weights(mesh)
    u = mesh.edges[:, 0]
    v = mesh.edges[:, 1]
    rows = np.concatenate([u, v, u, v])
    cols = np.concatenate([v, u, u, v])
    vals = np.concatenate([-w, -w, w, w])
    nv = mesh.vertex_count
    stiffness = sp.csr_matrix((vals, (rows, cols)), shape=(nv, nv))
    return stiffness, mesh.vertex_areas.copy()


# -- ITRI file format --------------------------------------------------------

def _itri_text(mesh: SurfaceMesh) -> str:
    lines = ["ITRI 1", f"{mesh.vertex_count} {len(mesh.faces)} {mesh.genus}"]
    for f in range(len(mesh.faces)):
        i, j, k = (int(x) for x in mesh.faces[f])
        lij, ljk, lki = ("%.17g" % x for x in mesh.face_lengths[f])
        lines.append(f"{i} {j} {k} {lij} {ljk} {lki}")
    return "\n".join(lines) + "\n"


def save_mesh(mesh: SurfaceMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_itri_text(mesh))


def load_mesh(path) -> SurfaceMesh:
    """Parse an ITRI file and validate the mesh it describes.

    The genus is rederived from the Euler characteristic and must match the
    header.  Duplicate edge lengths across faces must agree to 1e-12 relative.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw or raw[0] != "ITRI 1":
        raise MeshError("malformed file: missing 'ITRI 1' header")
    try:
        nv, nf, genus_hdr = (int(tok) for tok in raw[1].split())
    except (IndexError, ValueError) as exc:
        raise MeshError("malformed file: bad count line") from exc
    if len(raw) != 2 + nf:
        raise MeshError(f"malformed file: expected {nf} face lines, got {len(raw) - 2}")
    faces = np.empty((nf, 3), dtype=np.int64)
    lengths = np.empty((nf, 3), dtype=np.float64)
    for f in range(nf):
        toks = raw[2 + f].split()
        if len(toks) != 6:
            raise MeshError(f"malformed file: face line {f} has {len(toks)} tokens")
        try:
            faces[f] = [int(t) for t in toks[:3]]
            lengths[f] = [float(t) for t in toks[3:]]
        except ValueError as exc:
            raise MeshError(f"malformed file: unparsable face line {f}") from exc
    if faces.min() < 0 or faces.max() >= nv:
        raise MeshError("vertex id out of range")
    mesh = SurfaceMesh.from_face_lengths(faces, lengths)
    if mesh.genus != genus_hdr:
        raise MeshError(f"header genus {genus_hdr} disagrees with derived genus {mesh.genus}")
    return mesh
