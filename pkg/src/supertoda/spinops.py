"""Spin structures and the discrete quaternionic Dirac operator.

The spinor fiber at a vertex is the quaternions H = R^4.  Clifford
multiplication by a unit tangent direction at angle phi in the vertex frame
is left multiplication by cos(phi) i + sin(phi) j, the volume element is left
multiplication by k, and frame rotations act by left multiplication by
exp(theta k / 2).  Right multiplication by unit quaternions commutes with all
of these and realizes the three-parameter symmetry of the spinor equations.

A spin structure is an edge-sign assignment on top of the Levi-Civita
transport angles.  Around each oriented face the signed half-angle transports
must compose to the honest spin lift of the frame holonomy of that face loop
(rotation by minus its hyperbolic area); the sign products this forces are
gauge-covariant under vertex flips and leave exactly 2^(2g) classes, which are
enumerated through a tree-cotree decomposition and labeled by sign parities
around a fixed homology cycle basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .hypmesh import MeshError, SurfaceMesh, _cotan_edge_weights

__all__ = [
    "KER_TOL",
    "EXCEPTIONAL_MARGIN",
    "CLUSTER_GAP",
    "V_MAX",
    "SpinError",
    "ExceptionalRhoError",
    "NontrivialKernelError",
    "SpinStructure",
    "DiracOperator",
    "DiracSpectrum",
    "SpectralSplit",
    "transport_angles",
    "vertex_holonomies",
    "link_holonomy_defects",
    "enumerate_spin_classes",
    "gauge_flip",
    "class_signature",
    "assemble_dirac",
    "eigendecompose",
    "spectral_split",
    "eigenvalue_clusters",
    "sobolev_inner",
    "quaternion_act",
    "qmul",
    "random_unit_quaternion",
]

KER_TOL = 1e-6            # |lambda| below this counts as kernel
EXCEPTIONAL_MARGIN = 1e-9  # rho closer than this to an eigenvalue is rejected
CLUSTER_GAP = 1e-7        # eigenvalue clustering gap
V_MAX = 2000              # dense eigendecomposition cap


class SpinError(ValueError):
    """Spin structure inconsistent with the mesh."""


class ExceptionalRhoError(ValueError):
    """rho lies in the Dirac spectrum (within the exceptional margin)."""


class NontrivialKernelError(ValueError):
    """The Dirac operator has a nontrivial kernel."""


# -- quaternions (w, x, y, z) -------------------------------------------------

def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _left_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x,  w, -z,  y],
        [y,  z,  w, -x],
        [z, -y,  x,  w],
    ])


def _right_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x,  w,  z, -y],
        [y, -z,  w,  x],
        [z,  y, -x,  w],
    ])


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def _wrap(x):
    """Wrap to (-pi, pi]."""
    y = np.mod(x + math.pi, 2.0 * math.pi) - math.pi
    return np.where(y <= -math.pi, y + 2.0 * math.pi, y) if np.ndim(y) else \
        (y + 2.0 * math.pi if y <= -math.pi else y)


# -- vertex frames and Levi-Civita transport ---------------------------------

class _FrameData:
    """Halfedge tables, per-vertex frames and transport angles for a mesh.

    Halfedge h = 3*f + s runs from faces[f,s] to faces[f,(s+1)%3].  The frame
    at each vertex lays the outgoing halfedges out counterclockwise with the
    corner angles rescaled so the star closes at exactly 2*pi; the transport
    angle along a halfedge is the frame rotation of straight continuation
    across it and is exactly antisymmetric under edge reversal.
    """

    def __init__(self, mesh: SurfaceMesh):
        self.mesh = mesh
        faces = mesh.faces
        nf = faces.shape[0]
        self.tails = faces.ravel()
        self.heads = faces[:, [1, 2, 0]].ravel()
        he_of = {}
        for h in range(3 * nf):
            he_of[(int(self.tails[h]), int(self.heads[h]))] = h
        self.he_of = he_of
        self.twin = np.array([he_of[(int(self.heads[h]), int(self.tails[h]))]
                              for h in range(3 * nf)], dtype=np.int64)
        # ccw-next outgoing halfedge around the tail vertex
        self.next_ccw = np.empty(3 * nf, dtype=np.int64)
        for f in range(nf):
            for s in range(3):
                self.next_ccw[3 * f + s] = self.twin[3 * f + (s + 2) % 3]
        # corner angle between h and next_ccw(h) sits at corner s of face f
        corner = mesh.corner_angles.ravel()

        angsum = np.zeros(mesh.vertex_count)
        np.add.at(angsum, self.tails, corner)
        scale = 2.0 * math.pi / angsum

        outgoing = [[] for _ in range(mesh.vertex_count)]
        for h in range(3 * nf):
            outgoing[self.tails[h]].append(h)
        self.phi = np.empty(3 * nf)
        self.star = []
        for v in range(mesh.vertex_count):
            h0 = min(outgoing[v], key=lambda h: self.heads[h])
            cycle = [h0]
            h = self.next_ccw[h0]
            while h != h0:
                cycle.append(h)
                h = self.next_ccw[h]
            if len(cycle) != len(outgoing[v]):
                raise MeshError("vertex star does not close into one cycle")
            acc = 0.0
            for h in cycle:
                self.phi[h] = acc
                acc += corner[h] * scale[v]
            self.star.append(cycle)

        # transport angles, exactly antisymmetric by construction
        self.theta = np.empty(3 * nf)
        for h in range(3 * nf):
            t = self.twin[h]
            if self.tails[h] < self.heads[h]:
                val = _wrap(math.pi + self.phi[t] - self.phi[h])
                self.theta[h] = val
                self.theta[t] = -val

        # per-face winding parity: sum of transports plus the face area is an
        # integer multiple of 2*pi; its parity pins the sign product the spin
        # lift of the face loop requires
        fsum = self.theta.reshape(nf, 3).sum(axis=1) + mesh.face_areas
        wind = np.rint(fsum / (2.0 * math.pi))
        dev = fsum - 2.0 * math.pi * wind
        if np.any(np.abs(dev) > 1.0):
            raise MeshError("face transport winding is ambiguous (orientation bug?)")
        self.face_winding = wind.astype(np.int64)
        self.face_parity = (self.face_winding % 2).astype(np.uint8)

        # edge id per halfedge
        self.edge_of_he = np.array(
            [mesh.edge_index[(min(int(self.tails[h]), int(self.heads[h])),
                              max(int(self.tails[h]), int(self.heads[h])))]
             for h in range(3 * nf)], dtype=np.int64)


def _frames(mesh: SurfaceMesh) -> _FrameData:
    if mesh._frames is None:
        mesh._frames = _FrameData(mesh)
    return mesh._frames


def transport_angles(mesh: SurfaceMesh) -> dict:
    """Levi-Civita transport angle for every oriented edge.

    Antisymmetric under edge reversal; the induced holonomy around a vertex
    equals its angle defect modulo a full 2*pi frame turn.
    """
    fd = _frames(mesh)
    return {(int(fd.tails[h]), int(fd.heads[h])): float(fd.theta[h])
            for h in range(len(fd.tails))}


def vertex_holonomies(mesh: SurfaceMesh) -> np.ndarray:
    """Lifted frame rotation of a loop around each vertex (2*pi minus defect)."""
    angsum = np.zeros(mesh.vertex_count)
    np.add.at(angsum, mesh.faces.ravel(), mesh.corner_angles.ravel())
    return angsum


def link_holonomy_defects(mesh: SurfaceMesh) -> np.ndarray:
    """Curvature enclosed by each vertex link, from the transport angles.

    Sums the transports along the link cycle of every vertex, corrects by the
    hyperbolic area of the star, and wraps: the result is the vertex defect
    modulo 2*pi, computed from the connection rather than from angle sums.
    """
    fd = _frames(mesh)
    mesh_area = mesh.face_areas
    out = np.empty(mesh.vertex_count)
    for v, cycle in enumerate(fd.star):
        total = 0.0
        for h in cycle:
            # link edge of the face at h runs head(h) -> head(next_ccw(h));
            # that directed edge is halfedge "previous side" in the face of h
            f, s = divmod(h, 3)
            total += fd.theta[3 * f + (s + 1) % 3]
            total += mesh_area[f]
        out[v] = _wrap(total)
    return out


# -- spin structures ----------------------------------------------------------

@dataclass(frozen=True)
class SpinStructure:
    """Edge-sign assignment satisfying the face lift conditions.

    ``signs`` is indexed by the mesh edge list; ``class_index`` packs the sign
    parities around the fixed homology basis into an integer in [0, 2^(2g)).
    """

    mesh_hash: str
    class_index: int
    signs: np.ndarray

    def __post_init__(self):
        self.signs.setflags(write=False)

    def edge_signs(self, mesh: SurfaceMesh) -> dict:
        out = {}
        for e, (u, v) in enumerate(mesh.edges):
            s = int(self.signs[e])
            out[(int(u), int(v))] = s
            out[(int(v), int(u))] = s
        return out

    def transport_angles(self, mesh: SurfaceMesh) -> dict:
        return transport_angles(mesh)


def _check_spin(mesh: SurfaceMesh, signs: np.ndarray) -> None:
    """Verify the face lift conditions and the vertex-star consequence."""
    fd = _frames(mesh)
    nf = mesh.faces.shape[0]
    x = (signs < 0).astype(np.uint8)
    face_par = (x[fd.edge_of_he].reshape(nf, 3).sum(axis=1) % 2).astype(np.uint8)
    if np.any(face_par != fd.face_parity):
        raise SpinError("edge signs violate a face lift condition")
    # derived check: around every vertex star the product of link-edge signs
    # matches the parity of the lifted frame winding, i.e. the sign product
    # times the spin lift of the full frame turn is -1 as it should be
    for v, cycle in enumerate(fd.star):
        total = 0.0
        par = 0
        for h in cycle:
            f, s = divmod(h, 3)
            link_he = 3 * f + (s + 1) % 3
            total += fd.theta[link_he] + mesh.face_areas[f]
            par ^= int(x[fd.edge_of_he[link_he]])
        winding = int(round(total / (2.0 * math.pi)))
        if par != winding % 2:
            raise SpinError("vertex-star spin holonomy is not the trivial lift")


def _gf2_solve(rows, rhs, ncols):
    """Particular solution of a sparse GF(2) system given as index rows."""
    m = np.zeros((len(rows), ncols + 1), dtype=np.uint8)
    for r, idx in enumerate(rows):
        m[r, idx] ^= 1
        m[r, ncols] = rhs[r]
    pivots = []
    r = 0
    for c in range(ncols):
        hit = np.nonzero(m[r:, c])[0]
        if len(hit) == 0:
            continue
        pr = r + hit[0]
        m[[r, pr]] = m[[pr, r]]
        elim = np.nonzero(m[:, c])[0]
        for rr in elim:
            if rr != r:
                m[rr] ^= m[r]
        pivots.append((r, c))
        r += 1
        if r == len(rows):
            break
    if np.any(m[r:, ncols]):
        raise SpinError("no edge-sign assignment satisfies the lift conditions")
    x = np.zeros(ncols, dtype=np.uint8)
    for rr, c in pivots:
        x[c] = m[rr, ncols]
    return x


def _tree_cotree(mesh: SurfaceMesh, fd: _FrameData):
    """Primal spanning tree, dual spanning cotree, and the 2g leftover edges."""
    ne = len(mesh.edges)
    nv = mesh.vertex_count
    nbrs = [[] for _ in range(nv)]
    for e, (u, v) in enumerate(mesh.edges):
        nbrs[int(u)].append((int(v), e))
        nbrs[int(v)].append((int(u), e))
    for lst in nbrs:
        lst.sort()
    in_tree = np.zeros(ne, dtype=bool)
    parent_edge = np.full(nv, -1, dtype=np.int64)
    parent_vert = np.full(nv, -1, dtype=np.int64)
    seen = np.zeros(nv, dtype=bool)
    seen[0] = True
    queue = [0]
    qi = 0
    while qi < len(queue):
        u = queue[qi]
        qi += 1
        for v, e in nbrs[u]:
            if not seen[v]:
                seen[v] = True
                in_tree[e] = True
                parent_edge[v] = e
                parent_vert[v] = u
                queue.append(v)

    nf = mesh.faces.shape[0]
    faces_of_edge = np.empty((ne, 2), dtype=np.int64)
    first = np.full(ne, -1, dtype=np.int64)
    for h in range(3 * nf):
        e = fd.edge_of_he[h]
        if first[e] < 0:
            first[e] = h // 3
        else:
            faces_of_edge[e] = (first[e], h // 3)
    dual_nbrs = [[] for _ in range(nf)]
    for e in range(ne):
        if in_tree[e]:
            continue
        f1, f2 = faces_of_edge[e]
        dual_nbrs[f1].append((int(f2), e))
        dual_nbrs[f2].append((int(f1), e))
    for lst in dual_nbrs:
        lst.sort()
    in_cotree = np.zeros(ne, dtype=bool)
    dparent_edge = np.full(nf, -1, dtype=np.int64)
    dparent_face = np.full(nf, -1, dtype=np.int64)
    dseen = np.zeros(nf, dtype=bool)
    dseen[0] = True
    queue = [0]
    qi = 0
    while qi < len(queue):
        f = queue[qi]
        qi += 1
        for g, e in dual_nbrs[f]:
            if not dseen[g]:
                dseen[g] = True
                in_cotree[e] = True
                dparent_edge[g] = e
                dparent_face[g] = f
                queue.append(g)
    leftover = np.nonzero(~in_tree & ~in_cotree)[0]
    if len(leftover) != 2 * mesh.genus:
        raise SpinError("tree-cotree decomposition inconsistent with genus")
    return (in_tree, parent_edge, parent_vert,
            dparent_edge, dparent_face, faces_of_edge, leftover)


def _tree_path_parity(parent_edge, parent_vert, u, v, ne):
    vec = np.zeros(ne, dtype=np.uint8)
    seen = {}
    x = u
    while x != -1:
        seen[x] = len(seen)
        x = parent_vert[x]
    x = v
    while x not in seen:
        vec[parent_edge[x]] ^= 1
        x = parent_vert[x]
    y = u
    while y != x:
        vec[parent_edge[y]] ^= 1
        y = parent_vert[y]
    return vec


def class_signature(mesh: SurfaceMesh, signs: np.ndarray) -> int:
    """Pack sign parities around the homology cycle basis into an integer."""
    fd = _frames(mesh)
    cycles = _homology_cycles(mesh, fd)
    x = (np.asarray(signs) < 0).astype(np.uint8)
    idx = 0
    for i, cyc in enumerate(cycles):
        idx |= int(np.bitwise_xor.reduce(x[cyc.astype(bool)]) if cyc.any() else 0) << i
    return idx


def _homology_cycles(mesh: SurfaceMesh, fd: _FrameData):
    (in_tree, parent_edge, parent_vert, dparent_edge, dparent_face,
     faces_of_edge, leftover) = _tree_cotree(mesh, fd)
    ne = len(mesh.edges)
    cycles = []
    for e in leftover:
        u, v = (int(x) for x in mesh.edges[e])
        vec = _tree_path_parity(parent_edge, parent_vert, u, v, ne)
        vec[e] ^= 1
        cycles.append(vec)
    return cycles


def _cocycle_moves(mesh: SurfaceMesh, fd: _FrameData):
    (in_tree, parent_edge, parent_vert, dparent_edge, dparent_face,
     faces_of_edge, leftover) = _tree_cotree(mesh, fd)
    ne = len(mesh.edges)
    moves = []
    for e in leftover:
        f1, f2 = (int(x) for x in faces_of_edge[e])
        vec = np.zeros(ne, dtype=np.uint8)
        seen = {}
        x = f1
        while x != -1:
            seen[x] = True
            x = dparent_face[x]
        y = f2
        path_f2 = []
        while y not in seen:
            path_f2.append(dparent_edge[y])
            y = dparent_face[y]
        x = f1
        while x != y:
            vec[dparent_edge[x]] ^= 1
            x = dparent_face[x]
        for pe in path_f2:
            vec[pe] ^= 1
        vec[e] ^= 1
        moves.append(vec)
    return moves


def enumerate_spin_classes(mesh: SurfaceMesh) -> list[SpinStructure]:
    """One representative per spin class, ordered by class index.

    Solves the face lift conditions over GF(2) for a base assignment, then
    sweeps the 2^(2g) cosets generated by the fundamental cocycles of a
    tree-cotree decomposition.  Each cocycle toggles exactly one signature
    bit, so the labels enumerate all classes.
    """
    fd = _frames(mesh)
    nf = mesh.faces.shape[0]
    rows = [fd.edge_of_he[3 * f:3 * f + 3] for f in range(nf)]
    x0 = _gf2_solve(rows, fd.face_parity, len(mesh.edges))
    moves = _cocycle_moves(mesh, fd)
    base_sig = class_signature(mesh, 1 - 2 * x0.astype(np.int8))
    out = []
    for target in range(1 << (2 * mesh.genus)):
        x = x0.copy()
        sel = target ^ base_sig
        for i, mv in enumerate(moves):
            if (sel >> i) & 1:
                x ^= mv
        signs = (1 - 2 * x.astype(np.int8)).astype(np.int8)
        _check_spin(mesh, signs)
        sig = class_signature(mesh, signs)
        if sig != target:
            raise SpinError("class labeling failed to follow the cocycle moves")
        out.append(SpinStructure(mesh.mesh_hash, sig, signs))
    return out


def gauge_flip(mesh: SurfaceMesh, spin: SpinStructure, vertex: int) -> SpinStructure:
    """Flip all signs on edges incident to a vertex (same spin class)."""
    signs = spin.signs.copy()
    for e, (u, v) in enumerate(mesh.edges):
        if u == vertex or v == vertex:
            signs[e] = -signs[e]
    _check_spin(mesh, signs)
    sig = class_signature(mesh, signs)
    if sig != spin.class_index:
        raise SpinError("gauge flip changed the class signature")
    return SpinStructure(spin.mesh_hash, sig, signs)


# -- Dirac operator -----------------------------------------------------------

@dataclass(frozen=True)
class DiracOperator:
    """Dense quaternion-linear Dirac operator on a mesh with a spin structure.

    ``matrix`` acts on spinors flattened vertex-major (4 components per
    vertex) and is self-adjoint for the vertex-area inner product;
    ``omega`` is the volume element, omega^2 = -id, anticommuting with it.
    """

    mesh: SurfaceMesh
    mesh_hash: str
    class_index: int
    matrix: np.ndarray
    omega: np.ndarray
    mass: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def selfadjoint_defect(self) -> float:
        m4 = np.repeat(self.mass, 4)
        adj = (self.matrix.T * m4[None, :]) / m4[:, None]
        return float(np.abs(adj - self.matrix).max())


def assemble_dirac(mesh: SurfaceMesh, spin: SpinStructure) -> DiracOperator:
    """Vertex-based Dirac operator from half-angle transports and edge signs.

    D psi(v) = (1/A_v) sum over neighbors w of c_vw sigma(e_vw) eps_vw T_wv
    psi(w), with cotangent edge weights c_vw, Clifford multiplication sigma
    by the outgoing edge direction in the frame at v, and half-angle spinor
    transport T_wv from w into that frame.  The operator is symmetrized in
    the area inner product; by construction the symmetrization is a
    floating-point no-op, and omega-anticommutation and quaternion
    right-linearity hold exactly.
    """
    if spin.mesh_hash != mesh.mesh_hash:
        raise SpinError("spin structure belongs to a different mesh")
    fd = _frames(mesh)
    weights = _cotan_edge_weights(mesh)
    nv = mesh.vertex_count
    area = mesh.vertex_areas
    D = np.zeros((4 * nv, 4 * nv))
    for h in range(len(fd.tails)):
        v = int(fd.tails[h])
        w = int(fd.heads[h])
        e = int(fd.edge_of_he[h])
        th = fd.theta[fd.twin[h]]          # transport w -> v
        q_dir = np.array([0.0, math.cos(fd.phi[h]), math.sin(fd.phi[h]), 0.0])
        q_tr = np.array([math.cos(0.5 * th), 0.0, 0.0, math.sin(0.5 * th)])
        block = (weights[e] / area[v]) * float(spin.signs[e]) * _left_matrix(qmul(q_dir, q_tr))
        D[4 * v:4 * v + 4, 4 * w:4 * w + 4] += block
    m4 = np.repeat(area, 4)
    D = 0.5 * (D + (D.T * m4[None, :]) / m4[:, None])
    omega = np.zeros_like(D)
    km = _left_matrix(np.array([0.0, 0.0, 0.0, 1.0]))
    for v in range(nv):
        omega[4 * v:4 * v + 4, 4 * v:4 * v + 4] = km
    return DiracOperator(mesh, mesh.mesh_hash, spin.class_index, D, omega, area.copy())


@dataclass(frozen=True)
class SpectralSplit:
    """Index partition of the nonkernel modes for a given rho."""

    idx_neg: np.ndarray
    idx_pos_b: np.ndarray
    idx_pos_a: np.ndarray


@dataclass(frozen=True)
class DiracSpectrum:
    """Full spectrum and L2-orthonormal eigenbasis of a Dirac operator.

    ``modes[:, k]`` is the k-th eigenspinor (flattened vertex-major),
    orthonormal for the vertex-area inner product.  ``rho`` and ``split``
    are attached by :meth:`with_rho`.
    """

    mesh: SurfaceMesh
    mesh_hash: str
    class_index: int
    eigenvalues: np.ndarray
    modes: np.ndarray
    mass: np.ndarray
    kernel_dim: int
    rho: float | None = None
    split: SpectralSplit | None = None

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    @property
    def mass4(self) -> np.ndarray:
        return np.repeat(self.mass, 4)

    @property
    def lambda1(self) -> float:
        pos = self.eigenvalues[self.eigenvalues > KER_TOL]
        if len(pos) == 0:
            raise SpinError("no positive eigenvalues")
        return float(pos[0])

    def analyze(self, psi_flat: np.ndarray) -> np.ndarray:
        return self.modes.T @ (self.mass4 * psi_flat)

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        return self.modes @ coeffs

    def with_rho(self, rho: float) -> "DiracSpectrum":
        return replace(self, rho=float(rho), split=spectral_split(self, rho))


def eigendecompose(D: DiracOperator, v_max: int = V_MAX,
                   tol_ker: float = KER_TOL) -> DiracSpectrum:
    """Dense eigendecomposition, orthonormal for the area inner product."""
    nv = D.mesh.vertex_count
    if nv > v_max:
        raise SpinError(f"mesh too large for dense eigendecomposition ({nv} > {v_max})")
    m4 = np.repeat(D.mass, 4)
    s = np.sqrt(m4)
    S = (s[:, None] * D.matrix) / s[None, :]
    S = 0.5 * (S + S.T)
    lam, Y = np.linalg.eigh(S)
    modes = Y / s[:, None]
    kernel_dim = int(np.count_nonzero(np.abs(lam) < tol_ker))
    return DiracSpectrum(D.mesh, D.mesh_hash, D.class_index, lam, modes,
                         D.mass.copy(), kernel_dim)


def spectral_split(spec: DiracSpectrum, rho: float) -> SpectralSplit:
    """Three-way mode split below 0, in (0, rho), and above rho."""
    rho = float(rho)
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    if np.min(np.abs(spec.eigenvalues - rho)) < EXCEPTIONAL_MARGIN:
        raise ExceptionalRhoError(f"exceptional rho: {rho} lies in the spectrum")
    if spec.kernel_dim > 0:
        raise NontrivialKernelError(
            f"nontrivial kernel (dim {spec.kernel_dim}): choose another spin class")
    lam = spec.eigenvalues
    return SpectralSplit(
        idx_neg=np.nonzero(lam < 0.0)[0],
        idx_pos_b=np.nonzero((lam > 0.0) & (lam < rho))[0],
        idx_pos_a=np.nonzero(lam > rho)[0],
    )


def eigenvalue_clusters(eigenvalues: np.ndarray, gap: float = CLUSTER_GAP):
    """Group eigenvalues into clusters separated by more than ``gap``."""
    clusters = []
    start = 0
    for i in range(1, len(eigenvalues) + 1):
        if i == len(eigenvalues) or \
                eigenvalues[i] - eigenvalues[i - 1] > gap * max(1.0, abs(eigenvalues[i])):
            clusters.append((start, i))
            start = i
    return clusters


def sobolev_inner(spec: DiracSpectrum, psi: np.ndarray, phi: np.ndarray,
                  s: float = 0.5) -> float:
    """Fractional Sobolev inner product with (1 + |lambda|)^(2s) mode weights.

    At s = 0 this is the L2 inner product; at the working exponent s = 1/2
    the mode weights are exactly 1 + |lambda|, the norm used by the Riesz
    maps of the variational layer.
    """
    if s != 0.0 and spec.kernel_dim > 0:
        raise NontrivialKernelError("nontrivial kernel: fractional norms undefined")
    a = spec.analyze(np.asarray(psi).reshape(-1))
    b = spec.analyze(np.asarray(phi).reshape(-1))
    w = (1.0 + np.abs(spec.eigenvalues)) ** (2.0 * s)
    return float(np.sum(w * a * b))


def quaternion_act(psi_pair: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Right-multiply both spinor fields by a unit quaternion."""
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-12:
        raise ValueError("quaternion must have unit norm")
    psi_pair = np.asarray(psi_pair)
    return qmul(psi_pair, np.broadcast_to(q, psi_pair.shape))
