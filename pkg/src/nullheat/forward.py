"""Semi-implicit time stepping for the coupled bulk/surface systems.

The scheme treats diffusion implicitly and every lower-order term
explicitly at the left endpoint, which keeps each step adapted (no
look-ahead into the noise):

    (M + dt K(t_{n+1})) z_{n+1} = M z_n + dt L(t_n) z_n + dW N(t_n) z_n
                                  + dt (dt-loads) + dW (dW-loads),

where M is the coupled diagonal mass, K the coupled stiffness, L collects
reaction and weak-divergence convection, and N the multiplicative noise
mass.  States at positive times are trace-conforming and are stored as
reduced vectors over bulk nodes; the initial pair may be non-conforming
and enters only through its mass-weighted load.

The per-step matrices are symmetric positive definite for any dt > 0, so
the implicit solves use a sparse LU factorization cached per time index.
Solves are applied column-by-column in a fixed order, which makes every
reduction bit-stable: a state computed on the full tree matches the state
computed along a single path exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientSet, eval_scalar, eval_vector, sample_sup_norms
from .geometry import (BulkSurfaceField, assemble_operators, couple,
                       weak_divergence_load)
from .noise import NoiseTree, PathEnsemble


class StabilityError(RuntimeError):
    """Explicit convection step-size restriction violated."""


@dataclass
class SourceSet:
    """Right-hand-side data for the inhomogeneous forward system.

    F0/F1 are bulk dt- and dW-sources, F a bulk vector field entering in
    weak divergence form, F0_surf/F1_surf/F_surf their surface analogues
    (F_surf tangential).  Scalar entries may be numbers, callables
    ``f(t, X)``, or per-level lists of per-scenario arrays for adapted
    sources; the vector entries are deterministic (number tuple or
    callable).
    """

    F0: object = None
    F1: object = None
    F: object = None
    F0_surf: object = None
    F1_surf: object = None
    F_surf: object = None


def _resolve_scalar(spec, n, t, X, n_scen):
    """Scalar source values, shape (n_scen or 1, len(X))."""
    if spec is None:
        return None
    if isinstance(spec, (list, tuple)):
        vals = np.asarray(spec[n], dtype=float)
        if vals.ndim == 1:
            vals = vals[None, :]
        return vals
    return eval_scalar(spec, t, X)[None, :]


def _source_loads(sources, mesh, n, t, n_scen):
    """Quadrature-weighted reduced loads (dt_load, dw_load) at step n."""
    if sources is None:
        return None, None
    tidx = mesh.trace_idx
    dt_load = None
    f0 = _resolve_scalar(sources.F0, n, t, mesh.bulk_x, n_scen)
    if f0 is not None:
        dt_load = mesh.w_bulk * f0
    f0s = _resolve_scalar(sources.F0_surf, n, t, mesh.surf_x, n_scen)
    if f0s is not None:
        if dt_load is None:
            dt_load = np.zeros((f0s.shape[0], mesh.n_bulk))
        dt_load[:, tidx] += mesh.w_surf * f0s
    if sources.F is not None or sources.F_surf is not None:
        Fv = (eval_vector(sources.F, t, mesh.bulk_x, mesh.dim)
              if sources.F is not None else np.zeros((mesh.n_bulk, mesh.dim)))
        Fs = (eval_vector(sources.F_surf, t, mesh.surf_x, mesh.dim)
              if sources.F_surf is not None else None)
        wl = weak_divergence_load(Fv, Fs, mesh)
        extra = wl.bulk[None, :].copy()
        extra[:, tidx] += wl.surf
        dt_load = extra if dt_load is None else dt_load + extra

    dw_load = None
    f1 = _resolve_scalar(sources.F1, n, t, mesh.bulk_x, n_scen)
    if f1 is not None:
        dw_load = mesh.w_bulk * f1
    f1s = _resolve_scalar(sources.F1_surf, n, t, mesh.surf_x, n_scen)
    if f1s is not None:
        if dw_load is None:
            dw_load = np.zeros((f1s.shape[0], mesh.n_bulk))
        dw_load[:, tidx] += mesh.w_surf * f1s
    return dt_load, dw_load


@dataclass
class _Bundle:
    t: float
    ops: object
    K_c: sp.csr_matrix
    E_lu: object
    L_G: sp.csr_matrix | None
    L_S: sp.csr_matrix | None
    L_GT: sp.csr_matrix | None
    L_ST: sp.csr_matrix | None
    n_G: np.ndarray | None
    n_S: np.ndarray | None


class CoupledSystem:
    """Cached per-time-index operators and implicit-step factorizations."""

    def __init__(self, mesh, coeffs, grid, lower_order=True):
        self.mesh = mesh
        self.coeffs = coeffs
        self.grid = grid
        self.lower_order = lower_order
        self.m_c = mesh.w_bulk.copy()
        self.m_c[mesh.trace_idx] += mesh.w_surf
        self._bundles = {}

    def _key(self, n):
        return n if self.coeffs.time_dependent else 0

    def bundle(self, n):
        key = self._key(n)
        if key not in self._bundles:
            t = key * self.grid.dt
            ops = assemble_operators(self.mesh, self.coeffs, t)
            K_c = couple(self.mesh, ops.K_A, ops.K_AGamma)
            E = (sp.diags(self.m_c) + self.grid.dt * K_c).tocsc()
            E_lu = spla.splu(E)
            L_G = L_S = L_GT = L_ST = None
            n_G = n_S = None
            if self.lower_order:
                L_G = (-(ops.R_a1 + ops.C_B.T)).tocsr()
                L_S = (-(ops.R_b1 + ops.C_BGamma.T)).tocsr()
                L_GT = L_G.T.tocsr()
                L_ST = L_S.T.tocsr()
                n_G = -self.mesh.w_bulk * eval_scalar(self.coeffs.a2, t,
                                                      self.mesh.bulk_x)
                n_S = -self.mesh.w_surf * eval_scalar(self.coeffs.b2, t,
                                                      self.mesh.surf_x)
            self._bundles[key] = _Bundle(t=t, ops=ops, K_c=K_c, E_lu=E_lu,
                                         L_G=L_G, L_S=L_S, L_GT=L_GT,
                                         L_ST=L_ST, n_G=n_G, n_S=n_S)
        return self._bundles[key]

    @staticmethod
    def _apply(mat, Z):
        return (mat @ Z.T).T

    def explicit(self, n, Zb, Zs):
        """Mass plus explicit lower-order terms applied to a pair batch.

        Returns (base, noisevec): the step rhs is
        base + dt_loads * dt + dW * (noisevec + dw_loads).
        """
        mesh, dt = self.mesh, self.grid.dt
        tidx = mesh.trace_idx
        b = self.bundle(n)
        base = mesh.w_bulk * Zb
        base[:, tidx] += mesh.w_surf * Zs
        noisevec = np.zeros_like(base)
        if self.lower_order:
            base += dt * self._apply(b.L_G, Zb)
            base[:, tidx] += dt * self._apply(b.L_S, Zs)
            noisevec += b.n_G * Zb
            noisevec[:, tidx] += b.n_S * Zs
        return base, noisevec

    def E_solve(self, n, RHS):
        # SuperLU processes right-hand sides column-wise, so batched
        # solves are bit-identical to single-scenario ones
        lu = self.bundle(n).E_lu
        return np.ascontiguousarray(lu.solve(RHS.T).T)

    def transpose_interior(self, n, P, Q):
        """Reduced co-state update (M + dt L^T) P + dt N^T Q at time t_n."""
        mesh, dt = self.mesh, self.grid.dt
        tidx = mesh.trace_idx
        b = self.bundle(n)
        out = self.m_c * P
        if self.lower_order:
            out += dt * self._apply(b.L_GT, P)
            out[:, tidx] += dt * self._apply(b.L_ST, P[:, tidx])
            out += dt * (b.n_G * Q)
            out[:, tidx] += dt * (b.n_S * Q[:, tidx])
        return out

    def forward_dual(self, n, W):
        """(M + dt L) W and dt N W on the reduced space (adjoint sweeps)."""
        mesh, dt = self.mesh, self.grid.dt
        tidx = mesh.trace_idx
        b = self.bundle(n)
        out = self.m_c * W
        nq = np.zeros_like(W)
        if self.lower_order:
            out += dt * self._apply(b.L_G, W)
            out[:, tidx] += dt * self._apply(b.L_S, W[:, tidx])
            nq += dt * (b.n_G * W)
            nq[:, tidx] += dt * (b.n_S * W[:, tidx])
        return out, nq


@dataclass
class ForwardTrajectory:
    """States of a forward solve on a tree or a path ensemble.

    states[n] for n >= 1 holds reduced conforming vectors with one row per
    scenario; the (possibly non-conforming) initial pair is kept
    separately and states[0] is None.
    """

    mesh: object
    grid: object
    backend: str
    noise: object
    initial: BulkSurfaceField
    states: list
    meta: dict = field(default_factory=dict)

    def n_scen(self, n):
        if n == 0:
            return 1
        return self.states[n].shape[0]

    def probs(self, n):
        if n == 0:
            return np.ones(1)
        if self.backend == "tree":
            return self.noise.probs[n]
        return np.full(self.noise.n_paths, 1.0 / self.noise.n_paths)

    def pair(self, n):
        if n == 0:
            return self.initial.bulk[None, :], self.initial.surf[None, :]
        Z = self.states[n]
        return Z, Z[:, self.mesh.trace_idx]

    def expect_l2_sq(self, n):
        Zb, Zs = self.pair(n)
        per = (Zb * Zb) @ self.mesh.w_bulk + (Zs * Zs) @ self.mesh.w_surf
        return float(self.probs(n) @ per)

    def expect_h1_sq(self, n):
        Zb, Zs = self.pair(n)
        per = (Zb * Zb) @ self.mesh.w_bulk + (Zs * Zs) @ self.mesh.w_surf
        G = (self.mesh.grad @ Zb.T).T
        per = per + (G * G) @ self.mesh.w_edge
        if self.mesh.w_sedge.size:
            Gs = (self.mesh.surf_grad @ Zs.T).T
            per = per + (Gs * Gs) @ self.mesh.w_sedge
        return float(self.probs(n) @ per)

    def mean_pair(self, n):
        Zb, Zs = self.pair(n)
        p = self.probs(n)
        return p @ Zb, p @ Zs

    def control_values(self, n):
        """Bulk values on the control region, one row per scenario."""
        Zb, _ = self.pair(n)
        return Zb[:, self.mesh.control_mask]


def check_convection_stability(mesh, coeffs, grid, force=False):
    """Refuse dt > h / (2 |B|_inf) for the explicit convection term."""
    if coeffs.B is None and coeffs.norms.get("B", 0.0) == 0.0:
        return
    sup = coeffs.norms.get("B")
    if sup is None:
        sup = 0.0
        for t in (0.0, grid.T / 2, grid.T):
            Bv = eval_vector(coeffs.B, t, mesh.bulk_x, mesh.dim)
            sup = max(sup, float(np.linalg.norm(Bv, axis=1).max(initial=0.0)))
    if sup > 0 and grid.dt > mesh.h / (2.0 * sup):
        msg = (f"explicit convection unstable: dt={grid.dt:.3g} > "
               f"h/(2|B|)={mesh.h / (2 * sup):.3g}")
        if not force:
            raise StabilityError(msg)
        warnings.warn(msg, RuntimeWarning)


def step_forward(mesh, state, coeffs, grid, n, dW, sources=None,
                 lower_order=True, system=None):
    """One semi-implicit step from a (bulk, surface) pair at index n."""
    sys_ = system or CoupledSystem(mesh, coeffs, grid, lower_order)
    base, nz = sys_.explicit(n, state.bulk[None, :].copy(),
                             state.surf[None, :].copy())
    dt_load, dw_load = _source_loads(sources, mesh, n, n * grid.dt, 1)
    rhs = base
    if dt_load is not None:
        rhs = rhs + grid.dt * dt_load
    rhs = rhs + dW * nz
    if dw_load is not None:
        rhs = rhs + dW * dw_load
    Z = sys_.E_solve(n + 1, rhs)[0]
    return BulkSurfaceField.from_bulk(mesh, Z)


def solve_forward(mesh, z0, coeffs, noise, grid, sources=None,
                  lower_order=True, force_stability=False, system=None):
    """Solve the forward system on a noise tree or a path ensemble.

    With ``lower_order`` the reaction, convection and noise terms are
    built from the coefficients (the adjoint system); without it only
    diffusion acts and all data enters through ``sources``.
    """
    if lower_order:
        check_convection_stability(mesh, coeffs, grid, force_stability)
    sys_ = system or CoupledSystem(mesh, coeffs, grid, lower_order)
    n_t, dt = grid.n_t, grid.dt
    s = np.sqrt(dt)
    states = [None] * (n_t + 1)

    if isinstance(noise, NoiseTree):
        if noise.n_t != n_t or abs(noise.T - grid.T) > 1e-12:
            raise ValueError("noise tree does not match the time grid")
        Zb = z0.bulk[None, :].copy()
        Zs = z0.surf[None, :].copy()
        for n in range(n_t):
            base, nz = sys_.explicit(n, Zb, Zs)
            dt_load, dw_load = _source_loads(sources, mesh, n, n * dt,
                                             base.shape[0])
            if dt_load is not None:
                base = base + dt * dt_load
            if dw_load is not None:
                nz = nz + dw_load
            if noise.recombining:
                down = base - s * nz
                up = base + s * nz
                if base.shape[0] > 1:
                    gap = np.abs(down[1:] - up[:-1]).max()
                    scale = max(np.abs(up).max(), np.abs(down).max(), 1e-30)
                    if gap > 1e-9 * scale:
                        raise ValueError(
                            "state is path dependent; a recombining tree "
                            "is not a valid backend here")
                rhs = np.vstack([down, up[-1:]])
            else:
                rhs = np.empty((2 * base.shape[0], mesh.n_bulk))
                rhs[0::2] = base - s * nz
                rhs[1::2] = base + s * nz
            Z1 = sys_.E_solve(n + 1, rhs)
            states[n + 1] = Z1
            Zb, Zs = Z1, Z1[:, mesh.trace_idx]
        backend = "tree"
    elif isinstance(noise, PathEnsemble):
        if noise.n_t != n_t or abs(noise.T - grid.T) > 1e-12:
            raise ValueError("path ensemble does not match the time grid")
        Zb = z0.bulk[None, :].copy()
        Zs = z0.surf[None, :].copy()
        for n in range(n_t):
            base, nz = sys_.explicit(n, Zb, Zs)
            dt_load, dw_load = _source_loads(sources, mesh, n, n * dt,
                                             base.shape[0])
            if dt_load is not None:
                base = base + dt * dt_load
            if dw_load is not None:
                nz = nz + dw_load
            dW = noise.increments[:, n][:, None]
            rhs = base + dW * nz
            Z1 = sys_.E_solve(n + 1, np.ascontiguousarray(rhs))
            states[n + 1] = Z1
            Zb, Zs = Z1, Z1[:, mesh.trace_idx]
        backend = "paths"
    else:
        raise TypeError("noise must be a NoiseTree or a PathEnsemble")

    return ForwardTrajectory(mesh=mesh, grid=grid, backend=backend,
                             noise=noise, initial=z0.copy(), states=states)


def factorization_oracle(mesh, z0, coeffs, noise, grid, refine=16):
    """Pathwise reference solution for constant noise intensities.

    For spatially constant a2 = b2 = c the substitution
    z = exp(-c W(t) - c^2 t / 2) v turns the forward system into a
    deterministic one for v (the noise terms cancel exactly), which is
    solved once with a ``refine`` times finer deterministic stepper and
    then multiplied by the exact exponential factor per path or node.
    """
    a2 = coeffs.a2 if coeffs.a2 is not None else 0.0
    b2 = coeffs.b2 if coeffs.b2 is not None else 0.0
    if callable(a2) or callable(b2):
        raise ValueError("factorization needs spatially constant a2 = b2")
    c = float(a2)
    if abs(c - float(b2)) > 1e-14:
        raise ValueError("factorization needs a2 == b2")

    det = CoefficientSet(A=coeffs.A, A_surf=coeffs.A_surf, a1=coeffs.a1,
                         b1=coeffs.b1, B=coeffs.B, beta=coeffs.beta,
                         norms=dict(coeffs.norms),
                         time_dependent=coeffs.time_dependent)
    fine = grid.refined(refine)
    sys_ = CoupledSystem(mesh, det, fine, lower_order=True)
    Zb = z0.bulk[None, :].copy()
    Zs = z0.surf[None, :].copy()
    v_states = [None] * (grid.n_t + 1)
    for m in range(fine.n_t):
        base, _ = sys_.explicit(m, Zb, Zs)
        Z1 = sys_.E_solve(m + 1, base)
        if (m + 1) % refine == 0:
            v_states[(m + 1) // refine] = Z1
        Zb, Zs = Z1, Z1[:, mesh.trace_idx]

    def xi(W, t):
        return np.exp(-c * W - 0.5 * c * c * t)

    states = [None] * (grid.n_t + 1)
    if isinstance(noise, NoiseTree):
        for n in range(1, grid.n_t + 1):
            states[n] = xi(noise.levels[n], n * grid.dt)[:, None] * v_states[n]
        backend = "tree"
    else:
        W = noise.cumulative()
        for n in range(1, grid.n_t + 1):
            states[n] = xi(W[:, n], n * grid.dt)[:, None] * v_states[n]
        backend = "paths"
    return ForwardTrajectory(mesh=mesh, grid=grid, backend=backend,
                             noise=noise, initial=z0.copy(), states=states,
                             meta={"oracle": "factorization", "refine": refine})


def deterministic_expm_reference(mesh, z0, T):
    """Exact-in-time semigroup reference for the zero-coefficient system.

    Solves M dz/dt = -K z with the dense matrix exponential of the
    semi-discrete generator; independent of the time stepper.
    """
    ops = assemble_operators(mesh, CoefficientSet.zero(), 0.0)
    K_c = couple(mesh, ops.K_A, ops.K_AGamma).toarray()
    m_c = mesh.w_bulk.copy()
    m_c[mesh.trace_idx] += mesh.w_surf
    gen = -K_c / m_c[:, None]
    w0 = mesh.w_bulk * z0.bulk
    w0[mesh.trace_idx] += mesh.w_surf * z0.surf
    zr0 = w0 / m_c
    zT = scipy.linalg.expm(T * gen) @ zr0
    return BulkSurfaceField.from_bulk(mesh, zT)


def energy_estimate_check(traj, coeffs=None):
    """Energy report for one trajectory.

    Ratio of the time-integrated H1 norm to the initial L2 norm, the sup
    in time of the expected squared L2 norm, and exact per-step
    monotonicity flags of t -> E |(z, z_surf)|^2.
    """
    grid = traj.grid
    l2 = np.array([traj.expect_l2_sq(n) for n in range(grid.n_t + 1)])
    h1_int = grid.dt * sum(traj.expect_h1_sq(n) for n in range(1, grid.n_t + 1))
    init = np.sqrt(l2[0])
    ratio = 0.0 if init == 0.0 else np.sqrt(h1_int) / init
    steps_monotone = bool(np.all(np.diff(l2) <= 1e-12 * max(l2.max(), 1e-300)))
    return {
        "ratio_h1_over_initial": float(ratio),
        "sup_expected_l2_sq": float(l2.max()),
        "l2_sq_series": l2.tolist(),
        "monotone_nonincreasing": steps_monotone,
        "finite": bool(np.all(np.isfinite(l2)) and np.isfinite(h1_int)),
    }


def random_smooth_pair(mesh, rng, amplitude=1.0):
    """Random smooth trace-conforming field (low-order modes)."""
    X = mesh.bulk_x
    c = rng.standard_normal(6) * amplitude
    if mesh.dim == 1:
        a, b = mesh.geometry.a, mesh.geometry.b
        xh = (X[:, 0] - a) / (b - a)
        vals = (c[0] + c[1] * np.cos(np.pi * xh) + c[2] * np.sin(np.pi * xh)
                + c[3] * np.cos(2 * np.pi * xh) + c[4] * xh * (1 - xh))
    else:
        x, y = X[:, 0], X[:, 1]
        vals = (c[0] + c[1] * x + c[2] * y + c[3] * x * y
                + c[4] * (x * x - y * y) + c[5] * (x * x + y * y))
    return BulkSurfaceField.from_bulk(mesh, vals)


def energy_stability_study(mesh, coeffs, noise, grid, n_init=10, seed=0):
    """Energy ratios over a family of random initial data."""
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_init):
        z0 = random_smooth_pair(mesh, rng)
        traj = solve_forward(mesh, z0, coeffs, noise, grid)
        rep = energy_estimate_check(traj)
        ratios.append(rep["ratio_h1_over_initial"])
    ratios = np.array(ratios)
    return {
        "ratios": ratios.tolist(),
        "max_over_min": float(ratios.max() / max(ratios.min(), 1e-300)),
        "finite": bool(np.all(np.isfinite(ratios))),
    }


def coupled_eigenpairs(mesh, n_modes=None):
    """L2-orthonormal eigenpairs of the unit-coefficient coupled operator.

    Returns (eigenvalues, V) with V^T diag(m_c) V = I; the columns of V
    are reduced conforming vectors, so (V[:, i], V[trace_idx, i]) is an
    orthonormal basis pair of the product space.
    """
    ops = assemble_operators(mesh, CoefficientSet.zero(), 0.0)
    K1 = couple(mesh, ops.K_A, ops.K_AGamma).toarray()
    m_c = mesh.w_bulk.copy()
    m_c[mesh.trace_idx] += mesh.w_surf
    vals, V = scipy.linalg.eigh(K1, np.diag(m_c))
    if n_modes is not None:
        if n_modes > mesh.n_bulk:
            raise ValueError("n_modes exceeds the mesh dimension")
        vals, V = vals[:n_modes], V[:, :n_modes]
    return vals, V


def project_initial(mesh, V, z0):
    """L2-orthogonal projection coefficients of an initial pair."""
    w = mesh.w_bulk * z0.bulk
    w[mesh.trace_idx] += mesh.w_surf * z0.surf
    return V.T @ w


def galerkin_solve(mesh, z0, coeffs, grid, n_modes, noise):
    """Spectral mode: the same semi-implicit stepper in eigencoordinates.

    The initial data is L2-projected onto the first ``n_modes``
    eigenpairs; with the full mode count this is the nodal scheme in a
    rotated basis.
    """
    vals, V = coupled_eigenpairs(mesh, n_modes)
    sys_ = CoupledSystem(mesh, coeffs, grid, lower_order=True)
    tidx = mesh.trace_idx
    dt = grid.dt
    s = np.sqrt(dt)

    def reduced_ops(n):
        b = sys_.bundle(n)
        Ktil = V.T @ (b.K_c @ V)
        LV = b.L_G @ V
        LV[tidx] += b.L_S @ V[tidx]
        Ltil = V.T @ LV
        NV = b.n_G[:, None] * V
        NV[tidx] += b.n_S[:, None] * V[tidx]
        Ntil = V.T @ NV
        return Ktil, Ltil, Ntil

    cache = {}

    def get(n):
        key = n if coeffs.time_dependent else 0
        if key not in cache:
            Ktil, Ltil, Ntil = reduced_ops(key)
            E = np.eye(n_modes) + dt * Ktil
            cache[key] = (scipy.linalg.lu_factor(E), Ltil, Ntil)
        return cache[key]

    zeta = project_initial(mesh, V, z0)[None, :]
    proj_res = None
    zb_proj = V @ zeta[0]
    diff_b = z0.bulk - zb_proj
    diff_s = z0.surf - zb_proj[tidx]
    proj_res = float(np.sqrt(np.dot(mesh.w_bulk * diff_b, diff_b)
                             + np.dot(mesh.w_surf * diff_s, diff_s)))

    states = [None] * (grid.n_t + 1)
    if isinstance(noise, NoiseTree):
        Z = zeta
        for n in range(grid.n_t):
            lu, Ltil, Ntil = get(n)
            lun = get(n + 1)[0] if coeffs.time_dependent else lu
            base = Z + dt * Z @ Ltil.T
            nz = Z @ Ntil.T
            if noise.recombining:
                down = base - s * nz
                up = base + s * nz
                rhs = np.vstack([down, up[-1:]])
            else:
                rhs = np.empty((2 * Z.shape[0], n_modes))
                rhs[0::2] = base - s * nz
                rhs[1::2] = base + s * nz
            Z = scipy.linalg.lu_solve(lun, rhs.T).T
            states[n + 1] = Z @ V.T
        backend = "tree"
    else:
        Z = zeta
        for n in range(grid.n_t):
            lu, Ltil, Ntil = get(n)
            lun = get(n + 1)[0] if coeffs.time_dependent else lu
            base = Z + dt * Z @ Ltil.T
            nz = Z @ Ntil.T
            dW = noise.increments[:, n][:, None]
            Z = scipy.linalg.lu_solve(lun, (base + dW * nz).T).T
            states[n + 1] = Z @ V.T
        backend = "paths"

    return ForwardTrajectory(mesh=mesh, grid=grid, backend=backend,
                             noise=noise, initial=z0.copy(), states=states,
                             meta={"mode": "galerkin", "n_modes": n_modes,
                                   "eigenvalues": vals.tolist(),
                                   "projection_residual": proj_res})
