"""Backward solves on the tree as the exact algebraic adjoint of the
forward stepper.

Rather than re-discretizing the backward system, each backward step is the
transpose of the forward step matrix.  Writing the forward step as
(M + dt K) z_{n+1} = (M + dt L +- sqrt(dt) N) z_n, the adjoint recursion
on the mass-weighted co-state w = M y is

    m_w = (w_up + w_down) / 2,      Y_w = (w_up - w_down) / (2 sqrt(dt)),
    p = (M + dt K)^{-1} m_w,        q = (M + dt K)^{-1} Y_w,
    w_n = (M + dt L^T) p + dt N^T q - dt (control and source loads),

so the martingale part (Y, Y_surf) is read off the children exactly before
the implicit drift solve, and every duality pairing with a forward solve
holds to solver precision.  Interior states are trace conforming; the
terminal leaf data and the time-zero output are genuine (bulk, surface)
pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import CoupledSystem
from .geometry import BulkSurfaceField
from .noise import NoiseTree


@dataclass
class BackwardState:
    """Per-tree-node quadruple: states (y, y_surf) and integrands (Y, Y_surf).

    y_bulk[n] has one row per node of level n.  Y arrays exist for levels
    0 .. n_t - 1 and satisfy the exact reconstruction
    child = E[child | node] +- Y sqrt(dt) component-wise.
    """

    mesh: object
    grid: object
    tree: object
    y_bulk: list
    y_surf: list
    Y_bulk: list
    Y_surf: list
    meta: dict = field(default_factory=dict)

    def pair(self, n):
        return self.y_bulk[n], self.y_surf[n]

    def expect_l2_sq(self, n):
        yb, ys = self.pair(n)
        per = (yb * yb) @ self.mesh.w_bulk + (ys * ys) @ self.mesh.w_surf
        return float(self.tree.probs[n] @ per)

    def expect_integrand_sq(self, n):
        Yb, Ys = self.Y_bulk[n], self.Y_surf[n]
        per = (Yb * Yb) @ self.mesh.w_bulk + (Ys * Ys) @ self.mesh.w_surf
        return float(self.tree.probs[n] @ per)


def _as_leaf_pairs(mesh, tree, y_T):
    n_leaf = tree.n_nodes(tree.n_t)
    if isinstance(y_T, BulkSurfaceField):
        yb = np.broadcast_to(y_T.bulk, (n_leaf, mesh.n_bulk)).copy()
        ys = np.broadcast_to(y_T.surf, (n_leaf, mesh.n_surf)).copy()
        return yb, ys
    yb, ys = y_T
    yb = np.asarray(yb, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if yb.ndim == 1:
        yb = np.broadcast_to(yb, (n_leaf, mesh.n_bulk)).copy()
    if ys.ndim == 1:
        ys = np.broadcast_to(ys, (n_leaf, mesh.n_surf)).copy()
    if yb.shape != (n_leaf, mesh.n_bulk) or ys.shape != (n_leaf, mesh.n_surf):
        raise ValueError("terminal data does not match leaves and mesh")
    return yb, ys


def terminal_from_w(mesh, tree, fn):
    """Leaf terminal pair from a function of (W_T, bulk points, surf points)."""
    W = tree.levels[tree.n_t]
    yb = np.stack([np.asarray(fn(w, mesh.bulk_x), dtype=float) for w in W])
    ys = np.stack([np.asarray(fn(w, mesh.surf_x), dtype=float) for w in W])
    return yb, ys


def _control_load(mesh, u_n, dt):
    """Reduced load dt * E0 u with E0 placing weighted values on G0 nodes."""
    out = np.zeros((u_n.shape[0], mesh.n_bulk))
    out[:, mesh.control_mask] = dt * mesh.w_bulk[mesh.control_mask] * u_n
    return out


def _children(tree, level, arr):
    """(down, up) views of a level + 1 array."""
    if tree.recombining:
        return arr[:-1], arr[1:]
    return arr[0::2], arr[1::2]


def solve_backward(mesh, y_T, coeffs, tree, grid, u=None, f=None,
                   lower_order=True, system=None, _fault_scale=None):
    """Backward induction from leaf data with control and dt-sources.

    ``u`` is an adapted control: a list over levels 0 .. n_t - 1 of arrays
    (n_nodes, n_control_dofs) of values at the control-region bulk nodes.
    ``f`` is an adapted pair source: a list of (f_bulk, f_surf) arrays per
    level, or a callable ``f(t, mesh) -> (fb, fs)``.  The private
    ``_fault_scale`` perturbs the implicit solve and exists so tests can
    verify that duality checks actually detect a broken adjoint.
    """
    if not isinstance(tree, NoiseTree):
        raise TypeError("backward solves require the tree backend")
    if tree.n_t != grid.n_t or abs(tree.T - grid.T) > 1e-12:
        raise ValueError("tree does not match the time grid")
    sys_ = system or CoupledSystem(mesh, coeffs, grid, lower_order)
    n_t, dt = grid.n_t, grid.dt
    s = np.sqrt(dt)
    tidx = mesh.trace_idx
    n_ctrl = int(mesh.control_mask.sum())

    if u is not None:
        if len(u) != n_t:
            raise ValueError("control must have one array per level 0..n_t-1")
        for n, arr in enumerate(u):
            if arr.shape != (tree.n_nodes(n), n_ctrl):
                raise ValueError(f"control at level {n} has wrong shape")

    yb_leaf, ys_leaf = _as_leaf_pairs(mesh, tree, y_T)
    y_bulk = [None] * (n_t + 1)
    y_surf = [None] * (n_t + 1)
    Y_bulk = [None] * n_t
    Y_surf = [None] * n_t
    y_bulk[n_t], y_surf[n_t] = yb_leaf, ys_leaf

    # mass-weighted co-states carried down the tree
    W = mesh.w_bulk * yb_leaf
    W[:, tidx] += mesh.w_surf * ys_leaf

    for n in range(n_t - 1, -1, -1):
        w_dn, w_up = _children(tree, n, W)
        m_w = 0.5 * (w_up + w_dn)
        Y_w = (w_up - w_dn) / (2.0 * s)
        # martingale integrands from the raw child pairs, exact on the tree
        yb_dn, yb_up = _children(tree, n, y_bulk[n + 1])
        ys_dn, ys_up = _children(tree, n, y_surf[n + 1])
        Y_bulk[n] = (yb_up - yb_dn) / (2.0 * s)
        Y_surf[n] = (ys_up - ys_dn) / (2.0 * s)

        P = sys_.E_solve(n + 1, np.ascontiguousarray(m_w))
        Q = sys_.E_solve(n + 1, np.ascontiguousarray(Y_w))
        if _fault_scale is not None:
            P = _fault_scale * P

        load = np.zeros((tree.n_nodes(n), mesh.n_bulk))
        load_s = np.zeros((tree.n_nodes(n), mesh.n_surf))
        if u is not None:
            load += _control_load(mesh, u[n], dt)
        if f is not None:
            if callable(f):
                fb, fs = f(n * dt, mesh)
                fb = np.asarray(fb, dtype=float)[None, :]
                fs = np.asarray(fs, dtype=float)[None, :]
            else:
                fb, fs = f[n]
            load = load + dt * mesh.w_bulk * fb
            load_s = load_s + dt * mesh.w_surf * fs

        if n >= 1:
            Wn = sys_.transpose_interior(n, P, Q) - load
            Wn[:, tidx] -= load_s
            yb = Wn / sys_.m_c
            y_bulk[n], y_surf[n] = yb, yb[:, tidx]
            W = Wn
        else:
            b = sys_.bundle(0)
            extra_b = -load
            extra_s = -load_s
            if lower_order:
                extra_b = extra_b + dt * ((b.L_GT @ P.T).T + b.n_G * Q)
                extra_s = extra_s + dt * ((b.L_ST @ P[:, tidx].T).T
                                          + b.n_S * Q[:, tidx])
            y_bulk[0] = P + extra_b / mesh.w_bulk
            y_surf[0] = P[:, tidx] + extra_s / mesh.w_surf

    return BackwardState(mesh=mesh, grid=grid, tree=tree,
                         y_bulk=y_bulk, y_surf=y_surf,
                         Y_bulk=Y_bulk, Y_surf=Y_surf)


def duality_residual(fwd, bwd, u=None):
    """Mismatch of the discrete duality identity, relative to its terms.

    Checks E<y_T, z(T)> - <y(0), z_0> = sum_n dt E <u_n, z_n>_{G0} and
    returns the absolute gap divided by the largest of the three
    magnitudes.  Exact adjointness makes this zero up to solver roundoff.
    """
    mesh, grid, tree = bwd.mesh, bwd.grid, bwd.tree
    if fwd.backend != "tree" or fwd.noise is not tree:
        raise ValueError("forward and backward runs must share one tree")
    n_t, dt = grid.n_t, grid.dt

    zb_T, zs_T = fwd.pair(n_t)
    yb_T, ys_T = bwd.pair(n_t)
    per = ((yb_T * zb_T) @ mesh.w_bulk + (ys_T * zs_T) @ mesh.w_surf)
    term_T = float(tree.probs[n_t] @ per)

    zb_0, zs_0 = fwd.pair(0)
    yb_0, ys_0 = bwd.pair(0)
    term_0 = float((yb_0[0] * zb_0[0]) @ mesh.w_bulk
                   + (ys_0[0] * zs_0[0]) @ mesh.w_surf)

    term_u = 0.0
    if u is not None:
        w0 = mesh.w_bulk[mesh.control_mask]
        for n in range(n_t):
            zb, _ = fwd.pair(n)
            zc = zb[:, mesh.control_mask]
            per = (u[n] * zc) @ w0
            term_u += dt * float(tree.probs[n] @ per)

    gap = abs(term_T - term_0 - term_u)
    scale = max(abs(term_T), abs(term_0), abs(term_u))
    if scale == 0.0:
        return gap
    return gap / scale
