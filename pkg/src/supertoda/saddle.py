"""Constrained mountain-pass and linking search for nontrivial saddles.

The search deforms a discrete path on the Nehari manifold from the trivial
state to a negative-energy endpoint with constant scalar fields, repeatedly
stepping the path maximizer against the constrained gradient and re-solving
the negative spinor modes after each step.  Above the first eigenvalue the
finitely many modes between zero and rho are additionally ascended before the
outer deformation, realizing the linking geometry.  Converged maximizers are
polished by a Newton iteration on the full Euler-Lagrange system bordered
with the three quaternionic symmetry directions, which removes the structural
degeneracy of nontrivial roots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .spinops import DiracSpectrum, SpinError, quaternion_act, qmul
from . import variational as vr

__all__ = [
    "MP_GRAD_TOL",
    "SeedError",
    "SolverConfig",
    "SolverReport",
    "VerificationVerdict",
    "seed_state",
    "seed_bifurcation",
    "seed_endpoint",
    "mountain_pass_search",
    "newton_refine",
    "continuation_sweep",
    "verify_solution",
    "estimate_cone_constants",
    "sample_cone_complement",
    "trivial_negative_index",
]

logger = logging.getLogger(__name__)

MP_GRAD_TOL = 1e-8          # constrained gradient norm ending the deformation
_TRIVIAL_J = 1e-12          # trivial-attractor thresholds,
_TRIVIAL_PSI = 1e-6         # held for 100 consecutive steps
_TRIVIAL_STEPS = 100


class SeedError(RuntimeError):
    """Seed construction failed (no negative endpoint, bad mode)."""


@dataclass(frozen=True)
class SolverConfig:
    """Tunables of the saddle search; defaults follow the working setup."""

    rho: float
    R: float = 0.5
    tau: float = 4.0
    path_points: int = 64
    max_deform_steps: int = 5000
    step_size: float = 1e-2
    newton_tol: float = 1e-10
    nontrivial_floor: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.tau > 1.0 and self.R < 1.0):
            raise ValueError("need tau > 1 and R < 1")
        for name in ("rho", "R", "step_size", "newton_tol", "nontrivial_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.path_points < 3 or self.max_deform_steps < 1:
            raise ValueError("path_points >= 3 and max_deform_steps >= 1 required")


@dataclass
class SolverReport:
    """Outcome, diagnostics and the per-step iterate log of one solve."""

    outcome: str
    J_value: float
    residual_norms: dict
    constraint_norm: float
    linking_level_estimate: float
    steps: int
    seed: int
    iterate_log: list = field(default_factory=list)
    symmetry_checked: bool = False
    efimov_flag: bool = False
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "J": self.J_value,
            "residuals": self.residual_norms,
            "constraint_norm": self.constraint_norm,
            "linking_level": self.linking_level_estimate,
            "steps": self.steps,
            "seed": self.seed,
            "efimov_flag": self.efimov_flag,
            "symmetry_checked": self.symmetry_checked,
            "extras": self.extras,
        }


def _pos_indices(spec: DiracSpectrum) -> np.ndarray:
    pos = np.concatenate([spec.split.idx_pos_b, spec.split.idx_pos_a])
    pos.sort()
    return pos


def _require_rho(spec: DiracSpectrum, rho: float | None) -> DiracSpectrum:
    if spec.split is None or (rho is not None and spec.rho != rho):
        return spec.with_rho(rho if rho is not None else spec.rho)
    return spec


# -- seeds --------------------------------------------------------------------

def seed_bifurcation(spec: DiracSpectrum, rho: float, k: int = 1,
                     eps: float = 1e-2) -> vr.FieldState:
    """Both spinor fields on the k-th positive mode with amplitude eps, u = 0.

    Lies on the Nehari manifold as is; J = 2 (lambda_k - rho) eps^2.
    """
    spec = _require_rho(spec, rho)
    pos = np.nonzero(spec.eigenvalues > 0)[0]
    if not (1 <= k <= len(pos)):
        raise SeedError(f"bifurcation mode {k} out of range")
    nv = spec.mesh.vertex_count
    coeffs = np.zeros((2, spec.dimension))
    coeffs[:, pos[k - 1]] = eps
    return vr.field_state(spec, np.zeros((2, nv)), coeffs=coeffs, rho=spec.rho)


def seed_endpoint(spec: DiracSpectrum, rho: float, c: float, k: int = 1,
                  t: float | None = None) -> vr.FieldState:
    """Constant u = (c, c) and spinors on positive mode k, amplitude t with
    J < 0.  Requires rho e^c > lambda_k so the quadratic spinor term can win;
    if t is omitted it is found by doubling (at most 50 times)."""
    spec = _require_rho(spec, rho)
    pos = np.nonzero(spec.eigenvalues > 0)[0]
    if not (1 <= k <= len(pos)):
        raise SeedError(f"endpoint mode {k} out of range")
    lam_k = spec.eigenvalues[pos[k - 1]]
    if spec.rho * math.exp(c) <= lam_k:
        raise SeedError("endpoint needs rho * e^c > lambda_k")
    nv = spec.mesh.vertex_count
    u = np.full((2, nv), float(c))

    def build(tt):
        coeffs = np.zeros((2, spec.dimension))
        coeffs[:, pos[k - 1]] = tt
        return vr.field_state(spec, u, coeffs=coeffs, rho=spec.rho)

    if t is not None:
        return build(t)
    tt = 1.0
    for _ in range(50):
        st = build(tt)
        if vr.evaluate_J(st, spec)[0] < 0.0:
            return st
        tt *= 2.0
    raise SeedError("no negative endpoint within 50 amplitude doublings")


def seed_state(spec: DiracSpectrum, rho: float, mode) -> vr.FieldState:
    """Dispatch ('bifurcation', k, eps) or ('endpoint', c, k[, t])."""
    kind = mode[0]
    if kind == "bifurcation":
        return seed_bifurcation(spec, rho, *mode[1:])
    if kind == "endpoint":
        return seed_endpoint(spec, rho, *mode[1:])
    raise SeedError(f"unknown seed mode {kind!r}")


# -- path deformation ---------------------------------------------------------

def _ascend_b_modes(state: vr.FieldState, spec: DiracSpectrum,
                    ball: float = 2.0, max_iters: int = 12) -> vr.FieldState:
    """Ascend J over the finitely many modes in (0, rho), inside a ball.

    The ball constraint (on the Sobolev norm of the b-block) matters: away
    from u = 0 the Nehari elimination of the negative modes can turn these
    directions positive, so an unconstrained ascent diverges.  Projecting
    back onto the ball makes the ascent idempotent at a constrained maximum,
    which keeps repeated evaluations during path deformation stable.
    """
    b = spec.split.idx_pos_b
    if len(b) == 0:
        return state
    pos = _pos_indices(spec)
    bpos = np.searchsorted(pos, b)
    ops = vr._ops(spec)
    hw_b = ops.hw[b]

    def clip_ball(apos):
        r = math.sqrt(float(np.sum(hw_b[None, :] * apos[:, bpos] ** 2)))
        if r > ball:
            apos = apos.copy()
            apos[:, bpos] *= ball / r
        return apos

    J = vr.evaluate_J(state, spec)[0]
    step0 = 0.5 / max(1.0, spec.rho)
    for _ in range(max_iters):
        cu, ca = vr._covectors(state, spec)
        direction = ca[:, b] / hw_b[None, :]
        if not np.linalg.norm(direction):
            break
        step = step0
        improved = False
        for _ in range(20):
            apos = state.coeffs[:, pos].copy()
            apos[:, bpos] += step * direction
            apos = clip_ball(apos)
            trial = vr.nehari_project(state.u, apos, spec, cartan=state.cartan)
            Jt = vr.evaluate_J(trial, spec)[0]
            if Jt > J + 1e-14 * max(1.0, abs(J)):
                state, J, improved = trial, Jt, True
                break
            step *= 0.5
        if not improved:
            break
    return state


class _PathNode:
    """One path node: coordinates (u, positive coefficients), projected state."""

    __slots__ = ("u", "apos", "state", "J")

    def __init__(self, u, apos, state, J):
        self.u = u
        self.apos = apos
        self.state = state
        self.J = J


def _make_node(spec, u, apos, cartan, ascend_ball):
    st = vr.nehari_project(u, apos, spec, cartan=cartan)
    if ascend_ball is not None:
        st = _ascend_b_modes(st, spec, ball=ascend_ball)
        pos = _pos_indices(spec)
        u, apos = st.u, st.coeffs[:, pos]
    return _PathNode(u, apos, st, vr.evaluate_J(st, spec)[0])


def _coord_inner(ops, pos_hw, du1, da1, du2, da2):
    val = sum(float(du1[j] @ (ops.h1_mat @ du2[j])) for j in range(2))
    return val + float(np.sum(pos_hw[None, :] * da1 * da2))


def _relocate(spec, node, left, right, cartan, ascend_ball, rounds=2):
    """Move a node to the 1-D maximum of J along the chord through it."""
    Tu = right.u - left.u
    Ta = right.apos - left.apos

    def probe(s):
        return _make_node(spec, node.u + s * Tu, node.apos + s * Ta, cartan,
                          ascend_ball)

    best = node
    h = 0.2
    for _ in range(rounds):
        lo, hi = probe(-h), probe(h)
        f0, fl, fh = best.J, lo.J, hi.J
        den = fl - 2.0 * f0 + fh
        cand = None
        if den < 0:
            s_star = 0.5 * h * (fl - fh) / den
            s_star = float(np.clip(s_star, -0.45, 0.45))
            if abs(s_star) > 1e-14:
                cand = probe(s_star)
        for c in (lo, hi, cand):
            if c is not None and c.J > best.J:
                best = c
        h *= 0.25
    return best


def mountain_pass_search(spec: DiracSpectrum, cfg: SolverConfig,
                         endpoint: vr.FieldState | None = None):
    """Deform a Nehari path from the trivial state to a negative endpoint.

    Local-minimax deformation: the path maximizer is first relocated to the
    one-dimensional maximum of J along the chord through its neighbors, then
    stepped against the component of the constrained gradient transverse to
    that chord, so the node cannot slide off the ridge into either valley.
    Accepted deformation steps never increase the path maximum; collapse onto
    the trivial state is detected and reported as its own outcome.
    """
    spec = _require_rho(spec, cfg.rho)
    rho = cfg.rho
    ops = vr._ops(spec)
    pos = _pos_indices(spec)
    pos_hw = ops.hw[pos]
    linking = len(spec.split.idx_pos_b) > 0
    ball = 4.0 * cfg.R if linking else None
    if endpoint is None:
        c = math.log(2.0 * spec.lambda1 / rho)
        endpoint = seed_endpoint(spec, rho, c, k=1)
    cartan = endpoint.cartan

    n = cfg.path_points
    end_u = endpoint.u
    end_apos = endpoint.coeffs[:, pos]
    path = [_make_node(spec, (i / (n - 1)) * end_u, (i / (n - 1)) * end_apos,
                       cartan, ball if 0 < i < n - 1 else None)
            for i in range(n)]

    log_rows = []
    eta = cfg.step_size
    eta_ci = 1.0
    ci_enter = 1e-3        # switch to the climbing endgame below this gnorm
    trivial_run = 0
    outcome = "max_iters"
    monotone = True
    stalls = 0
    step = 0
    state = path[int(np.argmax([nd.J for nd in path]))].state
    grad_cache = None        # (node, gradient) of the last stepped node
    for step in range(1, cfg.max_deform_steps + 1):
        Js = [nd.J for nd in path]
        m = int(np.argmax(Js))
        node = path[m]
        if grad_cache is not None and grad_cache[0] is node:
            gg = grad_cache[1]
        else:
            gg = vr.tangent_gradient(node.state, spec, constraint_tol=1e-6)
            grad_cache = (node, gg)
        gnorm = vr.gradient_norm(gg, spec)
        climbing = gnorm < ci_enter
        if 0 < m < n - 1 and not climbing:
            # probes and trials deform plainly; the b-mode ascent belongs
            # to path construction (it realizes the linking family there)
            relocated = _relocate(spec, node, path[m - 1], path[m + 1],
                                  cartan, None)
            if relocated is not node:
                path[m] = node = relocated
                gg = vr.tangent_gradient(node.state, spec, constraint_tol=1e-6)
                grad_cache = (node, gg)
                gnorm = vr.gradient_norm(gg, spec)
                climbing = gnorm < ci_enter
        state = node.state
        log_rows.append((step, float(node.J), float(gnorm)))

        psi_l2 = math.sqrt(float(np.sum(state.coeffs ** 2)))
        if node.J < _TRIVIAL_J and psi_l2 < _TRIVIAL_PSI:
            trivial_run += 1
            if trivial_run >= _TRIVIAL_STEPS or gnorm <= MP_GRAD_TOL:
                outcome = "trivial_attractor"
                break
        else:
            trivial_run = 0

        if gnorm <= MP_GRAD_TOL:
            outcome = "converged" if psi_l2 >= cfg.nontrivial_floor else "trivial_attractor"
            break
        if m == 0 or m == n - 1:
            # an endpoint is the maximizer: the interior sank below it
            outcome = "trivial_attractor" if m == 0 else "max_iters"
            break

        # gradient in path coordinates and the local chord direction
        gu = gg.u
        ga = gg.coeffs[:, pos]
        Tu = path[m + 1].u - path[m - 1].u
        Ta = path[m + 1].apos - path[m - 1].apos
        tt = _coord_inner(ops, pos_hw, Tu, Ta, Tu, Ta)
        gt = _coord_inner(ops, pos_hw, gu, ga, Tu, Ta) / tt if tt > 0 else 0.0

        accepted = False
        if not climbing:
            # coarse phase: descend transversally to the chord so the node
            # cannot slide off the ridge; accept on J decrease
            du = gu - gt * Tu
            da = ga - gt * Ta
            for k in range(25):
                trial = _make_node(spec, node.u - eta * du, node.apos - eta * da,
                                   cartan, None)
                if trial.J <= node.J + 1e-13 * max(1.0, abs(node.J)):
                    if trial.J > node.J:
                        monotone = False
                    path[m] = trial
                    if k == 0:
                        eta = min(eta * 1.4, 1e3)
                    accepted = True
                    break
                eta *= 0.5
        else:
            # climbing endgame: reverse the chordwise gradient component and
            # accept on gradient-norm decrease, which is immune to the
            # floating-point noise floor of J near the saddle
            du = gu - 2.0 * gt * Tu
            da = ga - 2.0 * gt * Ta
            for k in range(25):
                trial = _make_node(spec, node.u - eta_ci * du,
                                   node.apos - eta_ci * da, cartan, None)
                tg = vr.tangent_gradient(trial.state, spec, constraint_tol=1e-6)
                tn = vr.gradient_norm(tg, spec)
                if tn < gnorm:
                    if trial.J > node.J + 1e-9 * max(1.0, abs(node.J)):
                        monotone = False
                    path[m] = trial
                    grad_cache = (trial, tg)
                    if k == 0:
                        eta_ci = min(eta_ci * 1.4, 4.0)
                    accepted = True
                    break
                eta_ci *= 0.5
            if not accepted:
                eta_ci = 1e-2
        if accepted:
            stalls = 0
        else:
            stalls += 1
            eta = cfg.step_size
            if stalls >= 5:
                outcome = ("converged" if gnorm <= 10 * MP_GRAD_TOL
                           and psi_l2 >= cfg.nontrivial_floor else "max_iters")
                break

    Js = [nd.J for nd in path]
    m = int(np.argmax(Js))
    state = path[m].state
    res = vr.el_residual(state, spec)
    con = float(np.abs(vr.nehari_constraint(state, spec)).max())
    report = SolverReport(
        outcome=outcome,
        J_value=float(Js[m]),
        residual_norms=res.norms_dict(),
        constraint_norm=con,
        linking_level_estimate=float(Js[m]),
        steps=step,
        seed=cfg.rng_seed,
        iterate_log=log_rows,
        extras={"dim_pos_b": int(len(spec.split.idx_pos_b)),
                "linking_mode": bool(linking),
                "monotone_deformation": bool(monotone)},
    )
    logger.info("mountain pass: %s after %d steps, J=%.6g", outcome, step, report.J_value)
    return state, report


# -- Newton refinement --------------------------------------------------------

def _full_hessian(state: vr.FieldState, spec: DiracSpectrum) -> np.ndarray:
    ops = vr._ops(spec)
    em = vr._em_pair(state, spec)
    nv = spec.mesh.vertex_count
    dim = spec.dimension
    n = 2 * nv + 2 * dim
    H = np.zeros((n, n))
    ainv = np.linalg.inv(state.cartan)
    psi_sq = np.sum(state.psi ** 2, axis=2)
    Psi_v = ops.Psi.reshape(nv, 4, dim)
    for j in range(2):
        for k in range(2):
            blk = ainv[j, k] * ops.L
            if j == k:
                blk = blk + np.diag(ops.mass * (4.0 * np.exp(2.0 * state.u[j])
                                                - state.rho * np.exp(state.u[j]) * psi_sq[j]))
            H[j * nv:(j + 1) * nv, k * nv:(k + 1) * nv] = blk
        P = np.einsum("vc,vck->vk", state.psi[j], Psi_v)
        W = -2.0 * state.rho * (ops.mass * np.exp(state.u[j]))[:, None] * P
        r0, c0 = j * nv, 2 * nv + j * dim
        H[r0:r0 + nv, c0:c0 + dim] = W
        H[c0:c0 + dim, r0:r0 + nv] = W.T
        H[c0:c0 + dim, c0:c0 + dim] = 2.0 * (np.diag(ops.lam) - state.rho * em[j])
    return H


def _symmetry_tangents(state: vr.FieldState, spec: DiracSpectrum) -> np.ndarray:
    """Coefficients of psi times the imaginary units (quaternion orbit)."""
    nv = spec.mesh.vertex_count
    dim = spec.dimension
    cols = []
    for unit in (np.array([0.0, 1.0, 0.0, 0.0]),
                 np.array([0.0, 0.0, 1.0, 0.0]),
                 np.array([0.0, 0.0, 0.0, 1.0])):
        rotated = qmul(state.psi, np.broadcast_to(unit, state.psi.shape))
        col = np.zeros(2 * nv + 2 * dim)
        for j in range(2):
            col[2 * nv + j * dim:2 * nv + (j + 1) * dim] = \
                spec.analyze(rotated[j].reshape(-1))
        norm = np.linalg.norm(col)
        if norm > 1e-12:
            cols.append(col / norm)
    if not cols:
        return np.zeros((2 * nv + 2 * dim, 0))
    return np.stack(cols, axis=1)


def newton_refine(state: vr.FieldState, spec: DiracSpectrum, cfg: SolverConfig,
                  max_steps: int = 50):
    """Newton on the full EL system, bordered against the quaternion orbit.

    Quadratically convergent near nondegenerate-modulo-symmetry roots; the
    three orthogonality rows remove the structural singularity of the
    Jacobian along psi i, psi j, psi k.
    """
    spec = _require_rho(spec, cfg.rho)
    nv = spec.mesh.vertex_count
    dim = spec.dimension

    def residual_of(st):
        res = vr.el_residual(st, spec)
        return res, res.max_norm()

    res, rnorm = residual_of(state)
    log_rows = [(0, float(vr.evaluate_J(state, spec)[0]), float(rnorm))]
    outcome = "max_iters"
    grow = 0
    steps_done = 0
    if rnorm <= cfg.newton_tol:
        outcome = "converged"
    else:
        for it in range(1, max_steps + 1):
            cu, ca = vr._covectors(state, spec)
            Fvec = np.concatenate([cu.ravel(), ca.ravel()])
            H = _full_hessian(state, spec)
            B = _symmetry_tangents(state, spec)
            nb = B.shape[1]
            K = np.zeros((len(Fvec) + nb, len(Fvec) + nb))
            K[:len(Fvec), :len(Fvec)] = H
            if nb:
                K[:len(Fvec), len(Fvec):] = B
                K[len(Fvec):, :len(Fvec)] = B.T
            rhs = np.concatenate([-Fvec, np.zeros(nb)])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                outcome = "numeric_failure"
                break
            dz = sol[:len(Fvec)]
            du = dz[:2 * nv].reshape(2, nv)
            da = dz[2 * nv:].reshape(2, dim)

            damp = 1.0
            best = None
            for _ in range(10):
                try:
                    trial = vr.field_state(spec, state.u + damp * du,
                                           coeffs=state.coeffs + damp * da,
                                           rho=state.rho, cartan=state.cartan)
                    tres, tnorm = residual_of(trial)
                except vr.FieldRangeError:
                    tnorm = math.inf
                    trial = tres = None
                if tnorm < rnorm:
                    best = (trial, tres, tnorm)
                    break
                damp *= 0.5
            if best is None:
                grow += 1
                if grow >= 10:
                    outcome = "numeric_failure"
                    break
                # accept the least-bad damped step to keep moving
                trial = vr.field_state(spec, state.u + damp * du,
                                       coeffs=state.coeffs + damp * da,
                                       rho=state.rho, cartan=state.cartan)
                tres, tnorm = residual_of(trial)
                state, res, rnorm = trial, tres, tnorm
            else:
                grow = 0
                state, res, rnorm = best
            steps_done = it
            log_rows.append((it, float(vr.evaluate_J(state, spec)[0]), float(rnorm)))
            if rnorm <= cfg.newton_tol:
                outcome = "converged"
                break
        else:
            outcome = "max_iters"

    J = float(vr.evaluate_J(state, spec)[0])
    con = float(np.abs(vr.nehari_constraint(state, spec)).max())
    verdict = verify_solution(state, spec, cfg)
    report = SolverReport(
        outcome=outcome,
        J_value=J,
        residual_norms=res.norms_dict(),
        constraint_norm=con,
        linking_level_estimate=J,
        steps=steps_done,
        seed=cfg.rng_seed,
        iterate_log=log_rows,
        symmetry_checked=True,
        efimov_flag=verdict.efimov_flag,
        extras={"verdict": verdict.verdict},
    )
    return state, report


# -- verification --------------------------------------------------------------

@dataclass(frozen=True)
class VerificationVerdict:
    residual_ok: bool
    constraint_ok: bool
    nontrivial: bool
    efimov_flag: bool
    classification: str
    verdict: str
    values: dict

    def to_dict(self) -> dict:
        return {
            "residual_ok": self.residual_ok,
            "constraint_ok": self.constraint_ok,
            "nontrivial": self.nontrivial,
            "efimov_flag": self.efimov_flag,
            "classification": self.classification,
            "verdict": self.verdict,
            "values": self.values,
        }


def verify_solution(state: vr.FieldState, spec: DiracSpectrum,
                    cfg: SolverConfig) -> VerificationVerdict:
    """Residual, constraint, nontriviality and constant-u (Efimov) checks."""
    spec = _require_rho(spec, cfg.rho)
    res = vr.el_residual(state, spec)
    residual_ok = bool(res.max_norm() <= 100.0 * cfg.newton_tol
                       and res.norm_sTprime.max() <= 100.0 * cfg.newton_tol)
    con = float(np.abs(vr.nehari_constraint(state, spec)).max())
    constraint_ok = bool(con <= 1e-8)
    norms = vr.state_norms(state, spec)
    size = math.hypot(norms["u_l2"], norms["psi_l2"])
    nontrivial = bool(size >= cfg.nontrivial_floor)
    u_flat = bool(max(float(np.std(state.u[0])), float(np.std(state.u[1]))) <= 1e-6)
    efimov = bool(u_flat and norms["psi_l2"] >= cfg.nontrivial_floor)
    classification = "mountain-pass" if cfg.rho < spec.lambda1 else "linking"
    J = float(vr.evaluate_J(state, spec)[0])
    if residual_ok and not nontrivial:
        verdict = "trivial solution"
    elif residual_ok and constraint_ok and nontrivial:
        verdict = f"nontrivial solution ({classification})"
        if efimov:
            verdict += " [efimov-suspicious]"
    else:
        verdict = "not a solution"
    return VerificationVerdict(
        residual_ok=residual_ok,
        constraint_ok=constraint_ok,
        nontrivial=nontrivial,
        efimov_flag=efimov,
        classification=classification,
        verdict=verdict,
        values={
            "J": J,
            "residuals": res.norms_dict(),
            "constraint_norm": con,
            "u_l2": norms["u_l2"],
            "psi_l2": norms["psi_l2"],
            "u_std_max": max(float(np.std(state.u[0])), float(np.std(state.u[1]))),
        },
    )


# -- continuation ---------------------------------------------------------------

def continuation_sweep(spec: DiracSpectrum, rho_grid, cfg: SolverConfig):
    """Solve along an increasing rho grid, warm-starting when possible.

    Per-rho failures (including exceptional rho) are recorded and the sweep
    continues; jumps of the finite negative-mode count are logged in the
    report extras.
    """
    reports = []
    prev_state = None
    prev_dim_b = None
    for rho in rho_grid:
        cfg_rho = SolverConfig(rho=float(rho), R=cfg.R, tau=cfg.tau,
                               path_points=cfg.path_points,
                               max_deform_steps=cfg.max_deform_steps,
                               step_size=cfg.step_size, newton_tol=cfg.newton_tol,
                               nontrivial_floor=cfg.nontrivial_floor,
                               rng_seed=cfg.rng_seed)
        try:
            spec_rho = spec.with_rho(float(rho))
        except (SpinError, ValueError) as exc:
            reports.append(SolverReport(
                outcome="numeric_failure", J_value=math.nan, residual_norms={},
                constraint_norm=math.nan, linking_level_estimate=math.nan,
                steps=0, seed=cfg.rng_seed,
                extras={"rho": float(rho), "error": str(exc)}))
            continue
        dim_b = int(len(spec_rho.split.idx_pos_b))
        state = None
        report = None
        if prev_state is not None:
            pos = _pos_indices(spec_rho)
            warm = vr.nehari_project(prev_state.u, prev_state.coeffs[:, pos],
                                     spec_rho, cartan=prev_state.cartan)
            state, report = newton_refine(warm, spec_rho, cfg_rho)
            if report.outcome != "converged" or \
                    math.sqrt(float(np.sum(state.coeffs ** 2))) < cfg.nontrivial_floor:
                state = report = None
        if report is None:
            state, report = mountain_pass_search(spec_rho, cfg_rho)
            if report.outcome == "converged":
                state, nrep = newton_refine(state, spec_rho, cfg_rho)
                nrep.linking_level_estimate = report.linking_level_estimate
                nrep.iterate_log = report.iterate_log + nrep.iterate_log
                report = nrep
        report.extras["rho"] = float(rho)
        report.extras["dim_pos_b"] = dim_b
        if prev_dim_b is not None and dim_b != prev_dim_b:
            report.extras["dim_jump"] = dim_b - prev_dim_b
            logger.info("dim N_rho jump at rho=%.6g: %d -> %d", rho, prev_dim_b, dim_b)
        prev_dim_b = dim_b
        if report.outcome == "converged":
            prev_state = state
        reports.append(report)
    return reports


# -- saddle geometry diagnostics -------------------------------------------------

def sample_cone_complement(spec: DiracSpectrum, rho: float, tau: float, R: float,
                           n_samples: int, rng: np.random.Generator):
    """Random Nehari states on the sphere of radius R off the cone around the
    finite negative modes; returns (J values, squared H norms)."""
    spec = _require_rho(spec, rho)
    pos = _pos_indices(spec)
    b = spec.split.idx_pos_b
    nv = spec.mesh.vertex_count
    Js = np.empty(n_samples)
    nsq = np.empty(n_samples)
    kept = 0
    attempts = 0
    while kept < n_samples:
        attempts += 1
        if attempts > 50 * n_samples:
            raise RuntimeError("cone-complement sampling starved")
        xi = rng.uniform(0.1, 0.9)
        r_u, r_psi = R * math.sqrt(xi), R * math.sqrt(1.0 - xi)
        u = rng.standard_normal((2, nv))
        u *= r_u / math.sqrt(vr.h1_norm_sq(spec, u))
        apos = rng.standard_normal((2, len(pos)))
        st = vr.nehari_project(u, apos, spec)
        psi_norm = math.sqrt(vr.hhalf_norm_sq(spec, st.coeffs))
        coeffs = st.coeffs * (r_psi / psi_norm)
        st = vr.field_state(spec, u, coeffs=coeffs, rho=spec.rho)
        if len(b):
            off = (vr.h1_norm_sq(spec, u)
                   + vr.hhalf_norm_sq(spec, coeffs[:, spec.split.idx_neg])
                   + vr.hhalf_norm_sq(spec, coeffs[:, spec.split.idx_pos_a]))
            if off < tau * vr.hhalf_norm_sq(spec, coeffs[:, b]):
                continue   # inside the cone: resample
        Js[kept] = vr.evaluate_J(st, spec)[0]
        nsq[kept] = vr.h1_norm_sq(spec, u) + vr.hhalf_norm_sq(spec, coeffs)
        kept += 1
    return Js, nsq


def estimate_cone_constants(spec: DiracSpectrum, rho: float,
                            tau: float = 4.0, R: float = 0.5,
                            n_samples: int = 200, rng_seed: int = 0):
    """Search (tau, R) with positive sampled J on the off-cone sphere shell.

    Shrinks R and widens the cone until every sample satisfies
    J >= c (|u|^2 + |psi|^2) with c > 0; returns (tau, R, c)."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(8):
        Js, nsq = sample_cone_complement(spec, rho, tau, R, n_samples, rng)
        c = float(np.min(Js / nsq))
        if c > 0:
            return tau, R, c
        R *= 0.5
        tau *= 2.0
    raise RuntimeError("no positive cone constant found")


def trivial_negative_index(spec: DiracSpectrum, rho: float) -> int:
    """Negative eigenvalue count of the constrained Hessian at the trivial
    state, over the full tangent basis (scalar fields + positive modes)."""
    spec = _require_rho(spec, rho)
    ops = vr._ops(spec)
    nv = spec.mesh.vertex_count
    pos = _pos_indices(spec)
    ainv = np.linalg.inv(vr.DEFAULT_CARTAN)
    npos = len(pos)
    n = 2 * nv + 2 * npos
    H = np.zeros((n, n))
    for j in range(2):
        for k in range(2):
            blk = ainv[j, k] * ops.L
            if j == k:
                blk = blk + 4.0 * np.diag(ops.mass)
            H[j * nv:(j + 1) * nv, k * nv:(k + 1) * nv] = blk
        d = 2.0 * (ops.lam[pos] - spec.rho)
        s0 = 2 * nv + j * npos
        H[s0:s0 + npos, s0:s0 + npos] = np.diag(d)
    ev = np.linalg.eigvalsh(H)
    return int(np.count_nonzero(ev < -1e-10))
