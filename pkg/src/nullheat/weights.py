"""Auxiliary weight function psi and the exponential space-time weights.

The weight family is built from a closed-form psi that is positive inside
the bulk, vanishes on the boundary, has nonvanishing gradient away from a
designated interior set G1, and has strictly negative outward normal
derivative:

    alpha(t, x) = (t (T - t))^{-1} (e^{mu psi(x)} - e^{2 mu |psi|_inf}),
    phi(t, x)   = (t (T - t))^{-1} e^{mu psi(x)},
    theta       = e^{lambda alpha},

with an optional epsilon shift that replaces t (T - t) by
(t + eps)(T - t + eps) for the penalty weights.  alpha is negative on the
whole closed cylinder, so theta lies in (0, 1) and vanishes at t = 0 and
t = T.  On the boundary psi = 0, hence alpha and phi are spatially
constant there.

Quadratures clamp evaluation times to the grid interior [dt, T - dt];
every weighted time integral vanishes at the endpoints anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AuxFunction:
    """Closed-form psi with its gradient, interior set G1 and boundary slope.

    g1 is (lo, hi): a sub-interval on the interval geometry; on the disk
    lo == 0 denotes the ball r < hi (the only G1 that can contain the
    critical point at the center), lo > 0 an annulus.
    """

    geometry: object
    g1: tuple
    c: float          # lower bound of -(normal derivative) on the boundary
    psi_max: float

    def value(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.geometry.kind == "interval":
            x = X[:, 0]
            return (x - self.geometry.a) * (self.geometry.b - x)
        r2 = np.sum(X * X, axis=1)
        return self.geometry.radius ** 2 - r2

    def grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.geometry.kind == "interval":
            return (self.geometry.a + self.geometry.b - 2.0 * X[:, 0])[:, None]
        return -2.0 * X

    def in_g1(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = self.g1
        if self.geometry.kind == "interval":
            x = X[:, 0]
            return (x > lo) & (x < hi)
        r = np.linalg.norm(X, axis=1)
        if lo == 0.0:
            return r < hi
        return (r > lo) & (r < hi)


def make_psi(geometry, g1=None):
    """Build the auxiliary function for the given geometry.

    The closed forms are psi = (x - a)(b - x) on the interval and
    psi = R^2 - |x|^2 on the disk.  The critical point of psi (midpoint,
    resp. center) must lie inside G1, otherwise the gradient would vanish
    outside G1.  Defaults: G1 = control region on the interval, G1 = ball
    r < r1 on the disk (the control annulus cannot contain the center).
    """
    if g1 is None:
        if geometry.kind == "interval":
            g1 = tuple(geometry.control)
        else:
            g1 = (0.0, geometry.control[1])
    lo, hi = g1

    if geometry.kind == "interval":
        a, b = geometry.a, geometry.b
        if not (a < lo < hi < b):
            raise ValueError("G1 must be strictly inside the bulk interval")
        mid = 0.5 * (a + b)
        if not (lo < mid < hi):
            raise ValueError(
                f"critical point {mid} of psi lies outside G1=({lo}, {hi})")
        return AuxFunction(geometry, (lo, hi), c=b - a,
                           psi_max=0.25 * (b - a) ** 2)

    R = geometry.radius
    if not (0.0 <= lo < hi < R):
        raise ValueError("G1 must be strictly inside the disk")
    if lo > 0.0:
        raise ValueError("critical point (center) of psi lies outside G1")
    return AuxFunction(geometry, (lo, hi), c=2.0 * R, psi_max=R * R)


@dataclass(frozen=True)
class WeightSample:
    alpha: float
    phi: float
    theta: float
    at_boundary: bool = False


@dataclass(frozen=True)
class CarlemanWeights:
    """Evaluators for alpha, phi, theta and their epsilon-shifted variants."""

    psi: AuxFunction
    mu: float
    lam: float
    T: float

    def __post_init__(self):
        if self.mu <= 1 or self.lam <= 1 or self.T <= 0:
            raise ValueError("need mu > 1, lambda > 1 and T > 0")

    def _tfac(self, t, eps=0.0):
        return 1.0 / ((t + eps) * (self.T - t + eps))

    def alpha(self, t, X, eps=0.0):
        e_psi = np.exp(self.mu * self.psi.value(X))
        return self._tfac(t, eps) * (e_psi - np.exp(2.0 * self.mu * self.psi_max))

    def phi(self, t, X):
        return self._tfac(t) * np.exp(self.mu * self.psi.value(X))

    def theta(self, t, X, eps=0.0):
        # alpha < 0 everywhere, exponent capped against overflow of theta^-1
        return np.exp(np.maximum(self.lam * self.alpha(t, X, eps), -745.0))

    def log_theta_sq(self, t, X, eps=0.0):
        """2 lambda alpha, the log of theta^2 (no clipping)."""
        return 2.0 * self.lam * self.alpha(t, X, eps)

    @property
    def psi_max(self):
        return self.psi.psi_max

    def alpha_t(self, t, X, eps=0.0):
        tt = (t + eps) * (self.T - t + eps)
        dfac = -(self.T - 2.0 * t) / (tt * tt)
        e_psi = np.exp(self.mu * self.psi.value(X))
        return dfac * (e_psi - np.exp(2.0 * self.mu * self.psi_max))

    def phi_t(self, t, X):
        tt = t * (self.T - t)
        return -(self.T - 2.0 * t) / (tt * tt) * np.exp(self.mu * self.psi.value(X))

    def clamp_time(self, t, dt):
        """Clamp a time to the grid interior [dt, T - dt] for quadratures."""
        return float(np.clip(t, dt, self.T - dt))


def eval_weights(w, t, x):
    """Point evaluation of (alpha, phi, theta) with endpoint flagging.

    Times outside [0, T] are rejected.  Queries exactly at t = 0 or t = T
    return the limit theta = 0 (alpha = -inf, phi = +inf) with the
    boundary flag set.
    """
    if t < 0.0 or t > w.T:
        raise ValueError(f"time {t} outside [0, {w.T}]")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if t == 0.0 or t == w.T:
        return WeightSample(alpha=-np.inf, phi=np.inf, theta=0.0,
                            at_boundary=True)
    return WeightSample(
        alpha=float(w.alpha(t, X)[0]),
        phi=float(w.phi(t, X)[0]),
        theta=float(w.theta(t, X)[0]),
        at_boundary=False,
    )


def _bound_constants(w, mesh, grid):
    """Smallest constants in the standard weight inequalities on one grid."""
    lam, T = w.lam, w.T
    e2mu = np.exp(2.0 * w.mu * w.psi_max)
    X = np.vstack([mesh.bulk_x, mesh.surf_x])
    gpsi = np.linalg.norm(w.psi.grad(X), axis=1)

    c_phi_low = np.inf
    c_phi_t = 0.0
    c_alpha_t = 0.0
    c_w2phi_t = 0.0
    c_grad_w2phi = 0.0
    for n in range(1, grid.n_t):
        t = n * grid.dt
        phi = w.phi(t, X)
        phi_t = w.phi_t(t, X)
        alpha_t = w.alpha_t(t, X)
        alpha = w.alpha(t, X)
        c_phi_low = min(c_phi_low, float((phi * T * T).min()))
        c_phi_t = max(c_phi_t, float(np.max(np.abs(phi_t) / (T * phi * phi))))
        c_alpha_t = max(c_alpha_t,
                        float(np.max(np.abs(alpha_t) / (T * e2mu * phi * phi))))
        # (theta^2 phi)_t = theta^2 (2 lam alpha_t phi + phi_t)
        num = np.abs(2.0 * lam * alpha_t * phi + phi_t)
        c_w2phi_t = max(c_w2phi_t, float(np.max(num / (T * lam * phi ** 3))))
        # grad(theta^2 phi) = theta^2 mu phi grad(psi) (2 lam phi + 1)
        gnum = w.mu * gpsi * phi * (2.0 * lam * phi + 1.0)
        c_grad_w2phi = max(c_grad_w2phi, float(np.max(gnum / (lam * phi * phi))))
        del alpha
    return {
        "phi_lower_times_T2": c_phi_low,
        "phi_t_over_T_phi2": c_phi_t,
        "alpha_t_over_T_e2mu_phi2": c_alpha_t,
        "theta2phi_t_over_T_lam_theta2_phi3": c_w2phi_t,
        "grad_theta2phi_over_lam_theta2_phi2": c_grad_w2phi,
    }


def check_weight_bounds(w, mesh, grid, sample_factor=4):
    """Estimate the weight-inequality constants and their grid stability.

    The suprema live at the ends of the time interval, so the estimator
    samples ``sample_factor`` times finer than the simulation grid and
    compares against one further doubling.  Returns both estimates, the
    relative change, and a flag that all constants are finite and move by
    less than 10 percent.
    """
    coarse = _bound_constants(w, mesh, grid.refined(sample_factor))
    fine = _bound_constants(w, mesh, grid.refined(2 * sample_factor))
    rel = {}
    stable = True
    for key, cv in coarse.items():
        fv = fine[key]
        denom = max(abs(cv), abs(fv), 1e-300)
        rel[key] = abs(fv - cv) / denom
        if not np.isfinite(cv) or not np.isfinite(fv) or rel[key] >= 0.10:
            stable = False
    return {"coarse": coarse, "fine": fine, "relative_change": rel,
            "stable": stable}


def check_psi_properties(aux, mesh, tol=1e-12):
    """Exact nodal property suite for psi on a mesh.

    Checks positivity inside, zero on the boundary, nonvanishing gradient
    off G1, and normal derivative <= -c on the boundary.
    """
    Xb = mesh.bulk_x
    vals = aux.value(Xb)
    on_gamma = np.zeros(mesh.n_bulk, dtype=bool)
    on_gamma[mesh.trace_idx] = True
    ok_pos = bool(np.all(vals[~on_gamma] > 0.0))
    ok_zero = bool(np.all(np.abs(aux.value(mesh.surf_x)) <= tol))
    g = np.linalg.norm(aux.grad(Xb), axis=1)
    outside = ~aux.in_g1(Xb)
    ok_grad = bool(np.all(g[outside] > tol))
    dn = np.sum(aux.grad(mesh.surf_x) * mesh.normals, axis=1)
    ok_normal = bool(np.all(dn <= -aux.c + tol))
    return {"positive_inside": ok_pos, "zero_on_boundary": ok_zero,
            "gradient_nonzero_off_g1": ok_grad,
            "normal_derivative_below_minus_c": ok_normal,
            "all": ok_pos and ok_zero and ok_grad and ok_normal}
