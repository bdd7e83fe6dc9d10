"""Action functional, Euler-Lagrange residuals and the Nehari constraint.

Scalar fields live on vertices; spinor fields are carried primarily by their
coefficients in the Dirac eigenbasis, with the vertex representation kept in
sync.  All spinor quadratic forms are evaluated in coefficient space through
the multiplication matrix

    M_u = e^c I + Psi^T diag(A (e^u - e^c)) Psi,   c = u[0],

which treats the eigenbasis as exactly orthonormal: for constant u the matrix
is exactly e^u times the identity, so constant-u states diagonalize and the
Nehari projection of such states is exactly zero on the negative modes.

The H-inner products behind Riesz gradients are u^T (L + M) v on scalars and
sum (1 + |lambda|) a b on spinor coefficients.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .hypmesh import laplace_pair
from .spinops import DiracSpectrum, SpinError, qmul

__all__ = [
    "U_CAP",
    "DEFAULT_CARTAN",
    "FieldRangeError",
    "FieldState",
    "Gradient",
    "Residuals",
    "field_state",
    "trivial_state",
    "evaluate_J",
    "gradient_J",
    "gradient_norm",
    "el_residual",
    "nehari_constraint",
    "nehari_project",
    "tangent_gradient",
    "state_norms",
    "h1_norm_sq",
    "hhalf_norm_sq",
    "save_state",
    "load_state",
]

U_CAP = 300.0
DEFAULT_CARTAN = np.array([[2.0, -1.0], [-1.0, 2.0]])


class FieldRangeError(ValueError):
    """A scalar field exceeds the numeric range guard."""


class _VarOps:
    """Per-spectrum operator workspace shared by the variational routines."""

    def __init__(self, spec: DiracSpectrum):
        stiffness, mass = laplace_pair(spec.mesh)
        self.L = stiffness.toarray()
        self.mass = mass
        self.m4 = spec.mass4
        self.h1_mat = self.L + np.diag(mass)
        self.h1_cho = sla.cho_factor(self.h1_mat)
        self.lam = spec.eigenvalues
        self.hw = 1.0 + np.abs(self.lam)
        self.Psi = spec.modes


def _ops(spec: DiracSpectrum) -> _VarOps:
    cache = spec.__dict__.get("_varops")
    if cache is None:
        cache = _VarOps(spec)
        object.__setattr__(spec, "_varops", cache)
    return cache


def _check_cartan(cartan: np.ndarray) -> np.ndarray:
    cartan = np.asarray(cartan, dtype=float)
    if cartan.shape != (2, 2) or not np.allclose(cartan, cartan.T, atol=1e-14):
        raise ValueError("cartan matrix must be symmetric 2x2")
    if cartan[0, 0] <= 0 or cartan[1, 1] <= 0:
        raise ValueError("cartan matrix needs a positive diagonal")
    if abs(cartan[0, 1]) >= min(cartan[0, 0], cartan[1, 1]):
        raise ValueError("cartan matrix must be diagonally dominant")
    return cartan


@dataclass(frozen=True)
class FieldState:
    """Two scalar fields and two spinor fields, vertex and spectral views.

    ``coeffs[j]`` are the eigenbasis coefficients of ``psi[j]``; both views
    are kept and must agree under synthesis.
    """

    u: np.ndarray        # (2, V)
    psi: np.ndarray      # (2, V, 4)
    coeffs: np.ndarray   # (2, 4V)
    rho: float
    cartan: np.ndarray

    def __post_init__(self):
        for arr in (self.u, self.psi, self.coeffs, self.cartan):
            arr.setflags(write=False)

    @property
    def u1(self):
        return self.u[0]

    @property
    def u2(self):
        return self.u[1]

    @property
    def psi_coeffs(self):
        return self.coeffs


def field_state(spec: DiracSpectrum, u, coeffs=None, psi=None,
                rho: float | None = None, cartan=None) -> FieldState:
    """Build a consistent FieldState from either spinor representation."""
    nv = spec.mesh.vertex_count
    u = np.array(u, dtype=float).reshape(2, nv)
    if rho is None:
        if spec.rho is None:
            raise ValueError("rho not given and not attached to the spectrum")
        rho = spec.rho
    cartan = _check_cartan(DEFAULT_CARTAN if cartan is None else cartan)
    if coeffs is None and psi is None:
        raise ValueError("need coeffs or psi")
    if coeffs is not None:
        coeffs = np.array(coeffs, dtype=float).reshape(2, 4 * nv)
        psi_arr = np.stack([spec.synthesize(coeffs[j]).reshape(nv, 4)
                            for j in range(2)])
        if psi is not None:
            given = np.asarray(psi, dtype=float).reshape(2, nv, 4)
            scale = max(1.0, float(np.abs(given).max()))
            if np.abs(given - psi_arr).max() > 1e-10 * scale:
                raise ValueError("psi and coeffs disagree under synthesis")
            psi_arr = given
    else:
        psi_arr = np.array(psi, dtype=float).reshape(2, nv, 4)
        coeffs = np.stack([spec.analyze(psi_arr[j].reshape(-1)) for j in range(2)])
    return FieldState(u, psi_arr, coeffs, float(rho), cartan)


def trivial_state(spec: DiracSpectrum, rho: float | None = None) -> FieldState:
    nv = spec.mesh.vertex_count
    return field_state(spec, np.zeros((2, nv)), coeffs=np.zeros((2, 4 * nv)), rho=rho)


def _guard(u: np.ndarray) -> None:
    if np.any(u > U_CAP):
        raise FieldRangeError("field out of numeric range (u > 300)")


def _mult_matrix(spec: DiracSpectrum, u_j: np.ndarray) -> np.ndarray:
    """Coefficient-space matrix of multiplication by e^(u_j), area-weighted.

    Splitting off e^(u_j[0]) times the identity keeps constant fields exactly
    diagonal regardless of the floating-point Gram of the eigenbasis.
    """
    ops = _ops(spec)
    c = float(u_j[0])
    w = ops.mass * (np.exp(u_j) - math.exp(c))
    if not w.any():
        em = np.zeros((spec.dimension, spec.dimension))
    else:
        w4 = np.repeat(w, 4)
        em = ops.Psi.T @ (w4[:, None] * ops.Psi)
        em = 0.5 * (em + em.T)
    em[np.diag_indices_from(em)] += math.exp(c)
    return em


def _em_pair(state: FieldState, spec: DiracSpectrum):
    cache = state.__dict__.get("_em")
    if cache is None or cache[0] is not spec:
        cache = (spec, [_mult_matrix(spec, state.u[j]) for j in range(2)])
        object.__setattr__(state, "_em", cache)
    return cache[1]


def evaluate_J(state: FieldState, spec: DiracSpectrum):
    """Action value with its convex scalar part and spinor quadratic part.

    J = F + Q with

        F(u) = int (1/2) grad(u)^T A^{-1} grad(u) + sum_j (e^(2 u_j) - 1 - 2 u_j)
        Q(u, psi) = sum_j < D psi_j - rho e^(u_j) psi_j, psi_j >

    normalized so the trivial state gives exactly zero.
    """
    _guard(state.u)
    ops = _ops(spec)
    ainv = np.linalg.inv(state.cartan)
    Lu = np.stack([ops.L @ state.u[j] for j in range(2)])
    dirichlet = 0.5 * sum(ainv[j, k] * float(state.u[j] @ Lu[k])
                          for j in range(2) for k in range(2))
    potential = sum(float(ops.mass @ (np.expm1(2.0 * state.u[j]) - 2.0 * state.u[j]))
                    for j in range(2))
    F = dirichlet + potential
    em = _em_pair(state, spec)
    Q = 0.0
    for j in range(2):
        a = state.coeffs[j]
        Q += float(np.sum(ops.lam * a * a)) - state.rho * float(a @ (em[j] @ a))
    return F + Q, F, Q


@dataclass(frozen=True)
class Gradient:
    """Riesz gradient: H1 representative on u, (1+|lambda|)-weighted on psi."""

    u: np.ndarray       # (2, V)
    coeffs: np.ndarray  # (2, 4V)


def _covectors(state: FieldState, spec: DiracSpectrum):
    """Raw derivative covectors of J (before any Riesz identification)."""
    _guard(state.u)
    ops = _ops(spec)
    ainv = np.linalg.inv(state.cartan)
    em = _em_pair(state, spec)
    psi_sq = np.sum(state.psi ** 2, axis=2)          # (2, V)
    cu = np.empty((2, len(ops.mass)))
    ca = np.empty_like(state.coeffs)
    for j in range(2):
        lin = ainv[j, 0] * (ops.L @ state.u[0]) + ainv[j, 1] * (ops.L @ state.u[1])
        cu[j] = lin + ops.mass * (2.0 * np.expm1(2.0 * state.u[j])
                                  - state.rho * np.exp(state.u[j]) * psi_sq[j])
        ca[j] = 2.0 * (ops.lam * state.coeffs[j] - state.rho * (em[j] @ state.coeffs[j]))
    return cu, ca


def gradient_J(state: FieldState, spec: DiracSpectrum) -> Gradient:
    """Riesz representative of dJ; vanishes exactly at discrete critical points."""
    ops = _ops(spec)
    cu, ca = _covectors(state, spec)
    gu = np.stack([sla.cho_solve(ops.h1_cho, cu[j]) for j in range(2)])
    ga = ca / ops.hw[None, :]
    return Gradient(gu, ga)


def gradient_norm(grad: Gradient, spec: DiracSpectrum) -> float:
    ops = _ops(spec)
    total = sum(float(grad.u[j] @ (ops.h1_mat @ grad.u[j])) for j in range(2))
    total += float(np.sum(ops.hw[None, :] * grad.coeffs ** 2))
    return math.sqrt(total)


@dataclass(frozen=True)
class Residuals:
    """Euler-Lagrange residuals in both equivalent forms plus dual norms."""

    r_sT_u: np.ndarray          # (2, V) pointwise scalar residual functions
    r_sT_psi: np.ndarray        # (2, 4V) spinor residual coefficients
    r_sT_psi_vertex: np.ndarray  # (2, V, 4)
    r_sTprime: np.ndarray       # (2, V)
    norm_sT_u: np.ndarray       # (2,) H^-1 dual norms
    norm_sT_psi: np.ndarray     # (2,) H^-1/2 dual norms
    norm_sTprime: np.ndarray    # (2,)

    def max_norm(self) -> float:
        return float(max(self.norm_sT_u.max(), self.norm_sT_psi.max()))

    def norms_dict(self) -> dict:
        return {
            "sT_u": float(self.norm_sT_u.max()),
            "sT_psi": float(self.norm_sT_psi.max()),
            "sTprime": float(self.norm_sTprime.max()),
        }


def el_residual(state: FieldState, spec: DiracSpectrum) -> Residuals:
    """Both Euler-Lagrange residual forms; the prime form is Cartan times
    the plain form on the scalar blocks (sign fixed by that identity)."""
    _guard(state.u)
    ops = _ops(spec)
    ainv = np.linalg.inv(state.cartan)
    em = _em_pair(state, spec)
    psi_sq = np.sum(state.psi ** 2, axis=2)
    kg = -1.0
    Lu = np.stack([ops.L @ state.u[j] for j in range(2)])
    nonlin = np.empty((2, len(ops.mass)))
    ru = np.empty((2, len(ops.mass)))
    for j in range(2):
        nonlin[j] = (2.0 * kg + 2.0 * np.exp(2.0 * state.u[j])
                     - state.rho * np.exp(state.u[j]) * psi_sq[j])
        ru[j] = (ainv[j, 0] * Lu[0] + ainv[j, 1] * Lu[1]) / ops.mass + nonlin[j]
    rprime = np.empty_like(ru)
    for j in range(2):
        rprime[j] = Lu[j] / ops.mass + (state.cartan[j, 0] * nonlin[0]
                                        + state.cartan[j, 1] * nonlin[1])
    rpsi = np.empty_like(state.coeffs)
    for j in range(2):
        rpsi[j] = ops.lam * state.coeffs[j] - state.rho * (em[j] @ state.coeffs[j])
    rpsi_vertex = np.stack([spec.synthesize(rpsi[j]).reshape(-1, 4) for j in range(2)])

    norm_u = np.empty(2)
    norm_p = np.empty(2)
    norm_pr = np.empty(2)
    for j in range(2):
        cov = ops.mass * ru[j]
        norm_u[j] = math.sqrt(float(cov @ sla.cho_solve(ops.h1_cho, cov)))
        covp = ops.mass * rprime[j]
        norm_pr[j] = math.sqrt(float(covp @ sla.cho_solve(ops.h1_cho, covp)))
        norm_p[j] = math.sqrt(float(np.sum(rpsi[j] ** 2 / ops.hw)))
    return Residuals(ru, rpsi, rpsi_vertex, rprime, norm_u, norm_p, norm_pr)


def nehari_constraint(state: FieldState, spec: DiracSpectrum) -> np.ndarray:
    """Smoothed negative-mode components of the spinor EL equations.

    g[j, k] = (1 + |lambda_k|)^-1 (lambda_k a[j,k] - rho <e^(u_j) psi_j, Psi_k>)
    over the negative modes k; zero exactly on the Nehari manifold.
    """
    if spec.split is None:
        raise SpinError("spectrum carries no rho split")
    ops = _ops(spec)
    em = _em_pair(state, spec)
    neg = spec.split.idx_neg
    out = np.empty((2, len(neg)))
    for j in range(2):
        full = ops.lam * state.coeffs[j] - state.rho * (em[j] @ state.coeffs[j])
        out[j] = full[neg] / ops.hw[neg]
    return out


def nehari_project(u, psi_plus, spec: DiracSpectrum, cartan=None) -> FieldState:
    """Fill in the negative spinor modes so the Nehari constraint vanishes.

    ``psi_plus[j]`` holds the coefficients on the positive modes (ascending
    eigenvalue order).  Solves (Lambda^- - rho M^--) a^- = rho M^-+ a^+ per
    field; the system matrix is negative definite, hence always solvable.
    """
    if spec.split is None:
        raise SpinError("spectrum carries no rho split")
    ops = _ops(spec)
    nv = spec.mesh.vertex_count
    u = np.array(u, dtype=float).reshape(2, nv)
    _guard(u)
    neg = spec.split.idx_neg
    pos = np.concatenate([spec.split.idx_pos_b, spec.split.idx_pos_a])
    pos.sort()
    psi_plus = np.array(psi_plus, dtype=float).reshape(2, len(pos))
    coeffs = np.zeros((2, spec.dimension))
    ems = []
    for j in range(2):
        em = _mult_matrix(spec, u[j])
        ems.append(em)
        lhs = np.diag(ops.lam[neg]) - spec_rho(spec) * em[np.ix_(neg, neg)]
        rhs = spec_rho(spec) * (em[np.ix_(neg, pos)] @ psi_plus[j])
        try:
            a_neg = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:   # pragma: no cover - contract
            raise RuntimeError("negative-block system singular: spectrum "
                               "inconsistent with the split") from exc
        coeffs[j, pos] = psi_plus[j]
        coeffs[j, neg] = a_neg
    state = field_state(spec, u, coeffs=coeffs, rho=spec.rho, cartan=cartan)
    object.__setattr__(state, "_em", (spec, ems))
    return state


def spec_rho(spec: DiracSpectrum) -> float:
    if spec.rho is None:
        raise SpinError("spectrum carries no rho")
    return float(spec.rho)


def _constraint_jacobian(state: FieldState, spec: DiracSpectrum):
    """Rows of dG per field: u-part covectors (n_neg, V) and a-part (n_neg, 4V)."""
    ops = _ops(spec)
    em = _em_pair(state, spec)
    neg = spec.split.idx_neg
    rows_u = []
    rows_a = []
    nv = spec.mesh.vertex_count
    Psi_v = ops.Psi.reshape(nv, 4, -1)
    for j in range(2):
        # <psi_j(v), Psi_k(v)> per vertex and mode
        P = np.einsum("vc,vck->vk", state.psi[j], Psi_v)
        wu = (-state.rho) * (ops.mass * np.exp(state.u[j]))[:, None] * P
        rows_u.append((wu[:, neg] / ops.hw[neg][None, :]).T)
        Ba = (ops.lam[neg, None] * np.eye(spec.dimension)[neg]
              - state.rho * em[j][neg]) / ops.hw[neg][:, None]
        rows_a.append(Ba)
    return rows_u, rows_a


def tangent_gradient(state: FieldState, spec: DiracSpectrum,
                     constraint_tol: float = 1e-8) -> Gradient:
    """Gradient of J projected onto the tangent space of the Nehari manifold.

    Solves the finite multiplier system so the result is H-orthogonal to the
    range of dG*; at a constraint-satisfying state a vanishing tangent
    gradient forces the free EL residual to vanish.
    """
    g_con = nehari_constraint(state, spec)
    if np.abs(g_con).max() > constraint_tol:
        raise ValueError(f"state violates the Nehari constraint "
                         f"({np.abs(g_con).max():.2e} > {constraint_tol:.0e})")
    ops = _ops(spec)
    grad = gradient_J(state, spec)
    rows_u, rows_a = _constraint_jacobian(state, spec)
    gu = grad.u.copy()
    ga = grad.coeffs.copy()
    for j in range(2):
        Wu, Ba = rows_u[j], rows_a[j]
        # Riesz representatives of the constraint rows
        Zu = sla.cho_solve(ops.h1_cho, Wu.T).T           # (n_neg, V)
        Za = Ba / ops.hw[None, :]                        # (n_neg, 4V)
        gram = Wu @ Zu.T + Ba @ Za.T
        rhs = Wu @ grad.u[j] + Ba @ grad.coeffs[j]
        try:
            mu = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as exc:   # pragma: no cover - contract
            raise RuntimeError("multiplier system singular: constraint "
                               "nondegeneracy violated") from exc
        gu[j] -= Zu.T @ mu
        ga[j] -= Za.T @ mu
    return Gradient(gu, ga)


# -- norms --------------------------------------------------------------------

def h1_norm_sq(spec: DiracSpectrum, u: np.ndarray) -> float:
    ops = _ops(spec)
    u = np.atleast_2d(u)
    return sum(float(row @ (ops.h1_mat @ row)) for row in u)


def hhalf_norm_sq(spec: DiracSpectrum, coeffs: np.ndarray) -> float:
    ops = _ops(spec)
    coeffs = np.atleast_2d(coeffs)
    return float(np.sum(ops.hw[None, :] * coeffs ** 2))


def state_norms(state: FieldState, spec: DiracSpectrum) -> dict:
    ops = _ops(spec)
    u_l2 = math.sqrt(sum(float(ops.mass @ (state.u[j] ** 2)) for j in range(2)))
    psi_l2 = math.sqrt(float(np.sum(state.coeffs ** 2)))
    return {
        "u_h1": math.sqrt(h1_norm_sq(spec, state.u)),
        "psi_hhalf": math.sqrt(hhalf_norm_sq(spec, state.coeffs)),
        "u_l2": u_l2,
        "psi_l2": psi_l2,
    }


# -- FieldState files ---------------------------------------------------------

def save_state(state: FieldState, spec: DiracSpectrum, path) -> None:
    """CSV of vertex values plus a JSON sidecar with rho, hashes and Cartan."""
    path = str(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["vertex", "u1", "u2", "p1w", "p1x", "p1y", "p1z",
                     "p2w", "p2x", "p2y", "p2z"])
        for v in range(spec.mesh.vertex_count):
            row = [v, repr(float(state.u[0, v])), repr(float(state.u[1, v]))]
            row += [repr(float(x)) for x in state.psi[0, v]]
            row += [repr(float(x)) for x in state.psi[1, v]]
            wr.writerow(row)
    sidecar = {
        "rho": state.rho,
        "mesh_hash": spec.mesh_hash,
        "spin_class": spec.class_index,
        "cartan": state.cartan.tolist(),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_path(path: str) -> str:
    return path[:-4] + ".json" if path.endswith(".csv") else path + ".json"


def load_state(path, spec: DiracSpectrum) -> FieldState:
    path = str(path)
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["mesh_hash"] != spec.mesh_hash:
        raise ValueError("state file belongs to a different mesh")
    if meta["spin_class"] != spec.class_index:
        raise ValueError("state file belongs to a different spin class")
    nv = spec.mesh.vertex_count
    u = np.zeros((2, nv))
    psi = np.zeros((2, nv, 4))
    with open(path, "r", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[:3] != ["vertex", "u1", "u2"]:
            raise ValueError("bad FieldState csv header")
        count = 0
        for row in rd:
            v = int(row[0])
            u[0, v], u[1, v] = float(row[1]), float(row[2])
            psi[0, v] = [float(x) for x in row[3:7]]
            psi[1, v] = [float(x) for x in row[7:11]]
            count += 1
    if count != nv:
        raise ValueError(f"state file has {count} vertex rows, expected {nv}")
    return field_state(spec, u, psi=psi, rho=float(meta["rho"]),
                       cartan=np.array(meta["cartan"]))
