"""Empirical verification of the weighted-energy, observability and
dissipation inequalities.

"Verification" here means: the constants the theory asserts to exist are
estimated on desk-scale runs and checked for finiteness and stability;
nothing is proved.  All weighted time quadratures clamp to the interior
time nodes, every report is deterministic given the seed, and reductions
run in a fixed scenario order.

Exponentially weighted integrals are evaluated in shifted form
exp(2 lam (alpha - alpha_max)) so that sweeps over large parameters never
underflow; the ratio of the two sides is shift-free and per-term log10
magnitudes are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import solve_backward
from .coefficients import lambda_min
from .control import pcg
from .forward import (CoupledSystem, coupled_eigenpairs, random_smooth_pair,
                      solve_forward)
from .geometry import BulkSurfaceField
from .weights import CarlemanWeights


@dataclass
class CarlemanReport:
    rows: list
    lam_threshold: float
    mode: str
    meta: dict = field(default_factory=dict)

    def ratios(self):
        return [row["ratio"] for row in self.rows]


@dataclass
class ObservabilityReport:
    rows: list
    fit_p: float
    fit_q: float
    fit_r2: float
    excluded: list
    meta: dict = field(default_factory=dict)


def _edge_average(mat, nodal):
    rows = mat.tocoo()
    lo = np.zeros(mat.shape[0], dtype=int)
    hi = np.zeros(mat.shape[0], dtype=int)
    for r, c, v in zip(rows.row, rows.col, rows.data):
        if v < 0:
            lo[r] = c
        else:
            hi[r] = c
    return 0.5 * (nodal[lo] + nodal[hi])


def _carleman_weight_tables(weights, mesh, grid):
    """alpha and log(phi) samples at interior times, plus the alpha max."""
    tabs = []
    a_max = -np.inf
    for n in range(1, grid.n_t):
        t = n * grid.dt
        a_b = weights.alpha(t, mesh.bulk_x)
        a_s = weights.alpha(t, mesh.surf_x)
        a_e = weights.alpha(t, mesh.edge_mid)
        a_se = (weights.alpha(t, mesh.sedge_mid)
                if mesh.w_sedge.size else np.zeros(0))
        lp_b = np.log(weights.phi(t, mesh.bulk_x))
        lp_s = np.log(weights.phi(t, mesh.surf_x))
        lp_e = np.log(weights.phi(t, mesh.edge_mid))
        lp_se = (np.log(weights.phi(t, mesh.sedge_mid))
                 if mesh.w_sedge.size else np.zeros(0))
        a_max = max(a_max, a_b.max(), a_s.max())
        tabs.append((a_b, a_s, a_e, a_se, lp_b, lp_s, lp_e, lp_se))
    return tabs, a_max


def verify_carleman(mesh, coeffs, aux, grid, tree, lam_list, mu=2.0,
                    z0_list=None, n_ensemble=4, seed=0, sources=None,
                    C_user=1.0):
    """Both sides of the weighted-energy inequality over a parameter sweep.

    In adjoint mode (``sources`` is None) the right-hand side is the single
    control-region term; in general-source mode the weighted source terms
    are added.  Trajectories do not depend on the sweep parameter, so each
    ensemble member is solved once and re-weighted per lambda.
    """
    lam1 = lambda_min(coeffs, grid.T, C_user)
    rng = np.random.default_rng(seed)
    if z0_list is None:
        z0_list = [random_smooth_pair(mesh, rng) for _ in range(n_ensemble)]
    adjoint = sources is None
    trajs = [solve_forward(mesh, z0, coeffs, tree, grid, sources=sources,
                           lower_order=adjoint) for z0 in z0_list]

    rows = []
    for lam in lam_list:
        weights = CarlemanWeights(psi=aux, mu=mu, lam=lam, T=grid.T)
        tabs, a_max = _carleman_weight_tables(weights, mesh, grid)
        shift = 2.0 * lam * a_max
        acc = {k: 0.0 for k in ("lhs_z_bulk", "lhs_z_surf", "lhs_grad_bulk",
                                "lhs_grad_surf", "rhs_control",
                                "rhs_sources")}
        for traj in trajs:
            for n in range(1, grid.n_t):
                a_b, a_s, a_e, a_se, lp_b, lp_s, lp_e, lp_se = tabs[n - 1]
                w2p3_b = np.exp(2 * lam * a_b - shift + 3 * lp_b)
                w2p3_s = np.exp(2 * lam * a_s - shift + 3 * lp_s)
                w2p1_e = np.exp(2 * lam * a_e - shift + lp_e)
                pr = traj.probs(n)
                zb, zs = traj.pair(n)
                dtw = grid.dt
                acc["lhs_z_bulk"] += lam ** 3 * dtw * float(
                    pr @ ((zb * zb) @ (mesh.w_bulk * w2p3_b)))
                acc["lhs_z_surf"] += lam ** 3 * dtw * float(
                    pr @ ((zs * zs) @ (mesh.w_surf * w2p3_s)))
                G = (mesh.grad @ zb.T).T
                acc["lhs_grad_bulk"] += lam * dtw * float(
                    pr @ ((G * G) @ (mesh.w_edge * w2p1_e)))
                if mesh.w_sedge.size:
                    w2p1_se = np.exp(2 * lam * a_se - shift + lp_se)
                    Gs = (mesh.surf_grad @ zs.T).T
                    acc["lhs_grad_surf"] += lam * dtw * float(
                        pr @ ((Gs * Gs) @ (mesh.w_sedge * w2p1_se)))
                mask = mesh.control_mask
                acc["rhs_control"] += lam ** 3 * dtw * float(
                    pr @ ((zb[:, mask] * zb[:, mask])
                          @ (mesh.w_bulk[mask] * w2p3_b[mask])))
                if not adjoint:
                    acc["rhs_sources"] += _source_terms(
                        mesh, sources, n, n * grid.dt, lam, shift, a_b, a_s,
                        lp_b, lp_s, dtw)
        lhs = (acc["lhs_z_bulk"] + acc["lhs_z_surf"]
               + acc["lhs_grad_bulk"] + acc["lhs_grad_surf"])
        rhs = acc["rhs_control"] + acc["rhs_sources"]
        row = {"lambda": float(lam), "below_threshold": bool(lam < lam1),
               "log_scale": float(shift),
               "ratio": float(lhs / rhs) if rhs > 0 else 0.0}
        for k, v in acc.items():
            row[k + "_scaled"] = float(v)
            row["log10_" + k] = float(np.log10(v) + shift / np.log(10.0)) \
                if v > 0 else -np.inf
        rows.append(row)
    return CarlemanReport(rows=rows, lam_threshold=float(lam1),
                          mode="adjoint" if adjoint else "sources",
                          meta={"mu": mu, "n_ensemble": len(z0_list)})


def _source_terms(mesh, sources, n, t, lam, shift, a_b, a_s, lp_b, lp_s, dtw):
    """Weighted source contributions to the inequality right-hand side."""
    from .coefficients import eval_scalar, eval_vector
    total = 0.0
    w2_b = np.exp(2 * lam * a_b - shift)
    w2_s = np.exp(2 * lam * a_s - shift)
    w2p2_b = np.exp(2 * lam * a_b - shift + 2 * lp_b)
    w2p2_s = np.exp(2 * lam * a_s - shift + 2 * lp_s)
    if sources.F0 is not None:
        f = eval_scalar(sources.F0, t, mesh.bulk_x)
        total += dtw * float(np.dot(mesh.w_bulk * w2_b, f * f))
    if sources.F1 is not None:
        f = eval_scalar(sources.F1, t, mesh.bulk_x)
        total += lam ** 2 * dtw * float(np.dot(mesh.w_bulk * w2p2_b, f * f))
    if sources.F is not None:
        Fv = eval_vector(sources.F, t, mesh.bulk_x, mesh.dim)
        mag = np.sum(Fv * Fv, axis=1)
        total += lam ** 2 * dtw * float(np.dot(mesh.w_bulk * w2p2_b, mag))
    if sources.F0_surf is not None:
        f = eval_scalar(sources.F0_surf, t, mesh.surf_x)
        total += dtw * float(np.dot(mesh.w_surf * w2_s, f * f))
    if sources.F1_surf is not None:
        f = eval_scalar(sources.F1_surf, t, mesh.surf_x)
        total += lam ** 2 * dtw * float(np.dot(mesh.w_surf * w2p2_s, f * f))
    if sources.F_surf is not None:
        Fv = eval_vector(sources.F_surf, t, mesh.surf_x, mesh.dim)
        mag = np.sum(Fv * Fv, axis=1)
        total += lam ** 2 * dtw * float(np.dot(mesh.w_surf * w2p2_s, mag))
    return total


def _observation_energy(traj, mesh, grid):
    """E int over (0, T) x G0 of z^2 with the interior-time quadrature."""
    total = 0.0
    mask = mesh.control_mask
    w0 = mesh.w_bulk[mask]
    for n in range(1, grid.n_t):
        zb, _ = traj.pair(n)
        zc = zb[:, mask]
        total += grid.dt * float(traj.probs(n) @ ((zc * zc) @ w0))
    return total


def _gram_operators(mesh, coeffs, tree, grid, sys_):
    """Plain-symmetric terminal-energy and observation Gram applies."""
    w_pair = np.concatenate([mesh.w_bulk, mesh.w_surf])
    mask = mesh.control_mask

    def as_pair(x):
        return BulkSurfaceField(x[:mesh.n_bulk].copy(), x[mesh.n_bulk:].copy())

    def terminal_gram(x):
        traj = solve_forward(mesh, as_pair(x), coeffs, tree, grid, system=sys_,
                             force_stability=True)
        zb, zs = traj.pair(grid.n_t)
        st = solve_backward(mesh, (zb, zs), coeffs, tree, grid, system=sys_)
        y0 = np.concatenate([st.y_bulk[0][0], st.y_surf[0][0]])
        return w_pair * y0

    def observation_gram(x):
        traj = solve_forward(mesh, as_pair(x), coeffs, tree, grid, system=sys_,
                             force_stability=True)
        u = []
        for n in range(grid.n_t):
            vals = traj.control_values(n)
            if vals.shape[0] == 1 and tree.n_nodes(n) > 1:
                vals = np.broadcast_to(vals,
                                       (tree.n_nodes(n), vals.shape[1])).copy()
            u.append(np.ascontiguousarray(vals))
        st = solve_backward(mesh, (np.zeros(mesh.n_bulk), np.zeros(mesh.n_surf)),
                            coeffs, tree, grid, u=u, system=sys_)
        y0 = np.concatenate([st.y_bulk[0][0], st.y_surf[0][0]])
        return -w_pair * y0

    return terminal_gram, observation_gram


def verify_observability(mesh, coeffs, T_list, n_t, ensemble=6, seed=0,
                         n_eigen=2, power_iters=2, cg_maxiter=30,
                         tree_builder=None):
    """Observability quotient per horizon and its 1/T exponential fit.

    The quotient E|z(T)|^2 / E int_{Q0} z^2 is maximized over an ensemble
    of deterministic smooth initial pairs plus coupled eigenfunctions, and
    optionally sharpened by generalized power iteration on the two Gram
    operators (the adjoint chain of the transpose contract).  Fits
    log C_obs = p + q / T and reports the fit quality.
    """
    from .geometry import TimeGrid
    from .noise import build_tree

    rng = np.random.default_rng(seed)
    _, V = coupled_eigenpairs(mesh, n_eigen + 1)
    members = []
    for k in range(1, n_eigen + 1):
        members.append(BulkSurfaceField.from_bulk(mesh, V[:, k]))
    for _ in range(ensemble):
        members.append(random_smooth_pair(mesh, rng))

    rows = []
    excluded = []
    for T in T_list:
        grid = TimeGrid(T, n_t)
        tree = tree_builder(n_t, T) if tree_builder else build_tree(n_t, T)
        sys_ = CoupledSystem(mesh, coeffs, grid, lower_order=True)
        best = 0.0
        best_x = None
        for k, z0 in enumerate(members):
            traj = solve_forward(mesh, z0, coeffs, tree, grid, system=sys_,
                                 force_stability=True)
            num = traj.expect_l2_sq(grid.n_t)
            den = _observation_energy(traj, mesh, grid)
            if den < 1e-14 * max(num, 1.0):
                excluded.append({"T": T, "member": k,
                                 "reason": "state vanishes on the control "
                                           "region; would contradict unique "
                                           "continuation"})
                continue
            quotient = num / den
            if quotient > best:
                best = quotient
                best_x = np.concatenate([z0.bulk, z0.surf])
        refined = best
        if power_iters > 0 and best_x is not None:
            tg, og = _gram_operators(mesh, coeffs, tree, grid, sys_)
            x = best_x / np.linalg.norm(best_x)
            for _ in range(power_iters):
                y = tg(x)
                diag = np.concatenate([mesh.w_bulk, mesh.w_surf]) * grid.dt
                xs, _, ok, _ = pcg(og, y, diag, tol=1e-8, maxiter=cg_maxiter)
                if not ok or not np.all(np.isfinite(xs)) \
                        or np.linalg.norm(xs) == 0:
                    break
                x = xs / np.linalg.norm(xs)
                num = float(x @ tg(x))
                den = float(x @ og(x))
                if den > 0 and np.isfinite(num / den):
                    refined = max(refined, num / den)
        rows.append({"T": float(T), "C_obs": float(refined),
                     "C_obs_ensemble": float(best)})

    Ts = np.array([row["T"] for row in rows])
    Cs = np.array([row["C_obs"] for row in rows])
    finite = Cs > 0
    p = q = r2 = np.nan
    if finite.sum() >= 2:
        A = np.stack([np.ones(finite.sum()), 1.0 / Ts[finite]], axis=1)
        yv = np.log(Cs[finite])
        sol, *_ = np.linalg.lstsq(A, yv, rcond=None)
        p, q = float(sol[0]), float(sol[1])
        pred = A @ sol
        ss_res = float(np.sum((yv - pred) ** 2))
        ss_tot = float(np.sum((yv - yv.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ObservabilityReport(rows=rows, fit_p=p, fit_q=q, fit_r2=float(r2),
                               excluded=excluded,
                               meta={"n_t": n_t, "ensemble": len(members)})


def verify_dissipation(traj, coeffs):
    """Terminal-versus-running energy constants of one trajectory.

    r2 = |a1| + |a2|^2 + |B|^2 + |b1| + |b2|^2 + |B_surf|^2; for each
    earlier time the smallest c with E(T) <= exp(c (T - t) r2) E(t) is
    reported; with r2 = 0 the energy must be non-increasing step by step.
    """
    n = coeffs.norms
    r2 = (n["a1"] + n["a2"] ** 2 + n["B"] ** 2
          + n["b1"] + n["b2"] ** 2 + n["B_surf"] ** 2)
    grid = traj.grid
    energies = np.array([traj.expect_l2_sq(k) for k in range(grid.n_t + 1)])
    E_T = energies[-1]
    out = {"r2": float(r2), "energies": energies.tolist(),
           "finite": bool(np.all(np.isfinite(energies)))}
    if r2 == 0.0:
        tol = 1e-12 * max(energies.max(), 1e-300)
        out["monotone_nonincreasing"] = bool(np.all(np.diff(energies) <= tol))
        out["c_values"] = []
        out["c_max"] = 0.0
        return out
    cs = []
    for k in range(grid.n_t):
        t = k * grid.dt
        if energies[k] <= 0.0:
            continue
        ratio = E_T / energies[k]
        cs.append(np.log(max(ratio, 1e-300)) / ((grid.T - t) * r2))
    out["c_values"] = [float(c) for c in cs]
    out["c_max"] = float(max(cs)) if cs else 0.0
    out["monotone_nonincreasing"] = None
    return out


def transpose_identity_check(mesh, coeffs, tree, grid):
    """Entrywise transpose identity between the forward and backward maps.

    Assembles the forward map z0 -> z(T) and the backward map y_T -> y(0)
    column by column from basis pairs and returns the maximal mismatch of
    E <y_T, F z0> = <B y_T, z0> over all basis combinations.
    """
    n_pair = mesh.n_bulk + mesh.n_surf
    n_leaf = tree.n_nodes(tree.n_t)
    if n_pair * n_leaf > 40000:
        raise ValueError("transpose check is meant for small meshes")
    sys_ = CoupledSystem(mesh, coeffs, grid, lower_order=True)
    w_pair = np.concatenate([mesh.w_bulk, mesh.w_surf])
    probs = tree.probs[tree.n_t]

    F = np.zeros((n_leaf * n_pair, n_pair))
    for i in range(n_pair):
        e = np.zeros(n_pair)
        e[i] = 1.0
        z0 = BulkSurfaceField(e[:mesh.n_bulk].copy(), e[mesh.n_bulk:].copy())
        traj = solve_forward(mesh, z0, coeffs, tree, grid, system=sys_,
                             force_stability=True)
        zb, zs = traj.pair(grid.n_t)
        F[:, i] = np.concatenate([zb, zs], axis=1).ravel()

    B = np.zeros((n_pair, n_leaf * n_pair))
    for ell in range(n_leaf):
        for j in range(n_pair):
            yb = np.zeros((n_leaf, mesh.n_bulk))
            ys = np.zeros((n_leaf, mesh.n_surf))
            if j < mesh.n_bulk:
                yb[ell, j] = 1.0
            else:
                ys[ell, j - mesh.n_bulk] = 1.0
            st = solve_backward(mesh, (yb, ys), coeffs, tree, grid,
                                system=sys_)
            B[:, ell * n_pair + j] = np.concatenate(
                [st.y_bulk[0][0], st.y_surf[0][0]])

    # E <delta_{l j}, F e_i> = P_l w_j F[(l, j), i]; <B delta_{l j}, e_i>
    lhs = (np.repeat(probs, n_pair) * np.tile(w_pair, n_leaf))[:, None] * F
    rhs = (w_pair[:, None] * B).T
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-300)
    return float(np.abs(lhs - rhs).max() / scale)


def verify_duality(mesh, coeffs, tree, grid, n_random=3, seed=0,
                   fault_scale=1.001, run_transpose=True):
    """Duality residuals on random data plus a deliberate fault injection."""
    from .backward import duality_residual

    rng = np.random.default_rng(seed)
    sys_ = CoupledSystem(mesh, coeffs, grid, lower_order=True)
    space_dim = int(mesh.control_mask.sum())
    residuals = []
    fault_residuals = []
    for _ in range(n_random):
        z0 = BulkSurfaceField(rng.standard_normal(mesh.n_bulk),
                              rng.standard_normal(mesh.n_surf))
        n_leaf = tree.n_nodes(tree.n_t)
        y_T = (rng.standard_normal((n_leaf, mesh.n_bulk)),
               rng.standard_normal((n_leaf, mesh.n_surf)))
        u = [rng.standard_normal((tree.n_nodes(n), space_dim))
             for n in range(grid.n_t)]
        traj = solve_forward(mesh, z0, coeffs, tree, grid, system=sys_,
                             force_stability=True)
        st = solve_backward(mesh, y_T, coeffs, tree, grid, u=u, system=sys_)
        residuals.append(duality_residual(traj, st, u))
        st_bad = solve_backward(mesh, y_T, coeffs, tree, grid, u=u,
                                system=sys_, _fault_scale=fault_scale)
        fault_residuals.append(duality_residual(traj, st_bad, u))
    report = {
        "residuals": [float(r) for r in residuals],
        "max_residual": float(max(residuals)),
        "fault_residuals": [float(r) for r in fault_residuals],
        "min_fault_residual": float(min(fault_residuals)),
    }
    if run_transpose:
        report["transpose_entrywise"] = transpose_identity_check(
            mesh, coeffs, tree, grid)
    return report
