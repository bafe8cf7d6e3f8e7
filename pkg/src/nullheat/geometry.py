"""Bulk/surface meshes and quadrature-consistent discrete operators.

Two closed-form geometries are supported.  On an interval the boundary is
the two-point set {a, b} carrying counting measure: every tangential
operator vanishes identically and the boundary unknowns are two scalars
coupled to the bulk through the co-normal flux.  On a disk a structured
polar grid (one shared pole node plus n_r rings of n_theta nodes) is used;
the outermost ring doubles as the boundary trace layer.

All stiffness and Dirichlet forms are assembled from staggered edge
gradients, K = G^T diag(w_e a_e) G, so symmetry, positive semidefiniteness
and the comparison v^T K_A v >= beta v^T D v against the unit-coefficient
form hold by construction.  The pole never gets a special-cased strong
equation: its stiffness row ties it to the mean of the first ring, which
is the conservative form of the usual pole treatment.

Fields live as (bulk, surface) pairs; conforming pairs satisfy
surf = bulk[trace_idx] exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .coefficients import diffusion_field, diffusion_min_eig, eval_scalar, eval_vector


@dataclass(frozen=True)
class Geometry:
    """Domain plus the interior control region.

    kind "interval": bulk (a, b), control sub-interval (lo, hi).
    kind "disk": bulk of given radius, control annulus r in (lo, hi).
    The control region must be strictly interior.
    """

    kind: str
    a: float = 0.0
    b: float = 1.0
    radius: float = 1.0
    control: tuple = (0.3, 0.7)

    def __post_init__(self):
        lo, hi = self.control
        if self.kind == "interval":
            if not (self.a < lo < hi < self.b):
                raise ValueError("control region must be strictly inside (a, b)")
        elif self.kind == "disk":
            if self.radius <= 0:
                raise ValueError("disk radius must be positive")
            if not (0.0 < lo < hi < self.radius):
                raise ValueError("control annulus must satisfy 0 < r0 < r1 < R")
        else:
            raise ValueError(f"unknown geometry kind {self.kind!r}")

    def control_indicator(self, X):
        """Boolean mask of the control region over points X (n, d)."""
        lo, hi = self.control
        if self.kind == "interval":
            x = X[:, 0]
            return (x > lo) & (x < hi)
        r = np.linalg.norm(X, axis=1)
        return (r > lo) & (r < hi)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, T]."""

    T: float
    n_t: int

    def __post_init__(self):
        if self.n_t < 2 or self.T <= 0:
            raise ValueError("need n_t >= 2 and T > 0")

    @property
    def dt(self):
        return self.T / self.n_t

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_t + 1)

    def refined(self, factor=2):
        return TimeGrid(self.T, self.n_t * factor)


@dataclass
class BulkSurfaceField:
    """A (bulk, surface) pair of nodal values."""

    bulk: np.ndarray
    surf: np.ndarray

    @classmethod
    def zeros(cls, mesh):
        return cls(np.zeros(mesh.n_bulk), np.zeros(mesh.n_surf))

    @classmethod
    def from_bulk(cls, mesh, bulk):
        bulk = np.asarray(bulk, dtype=float)
        return cls(bulk, bulk[mesh.trace_idx].copy())

    def is_conforming(self, mesh, tol=1e-12):
        return bool(np.max(np.abs(self.bulk[mesh.trace_idx] - self.surf),
                           initial=0.0) <= tol)

    def copy(self):
        return BulkSurfaceField(self.bulk.copy(), self.surf.copy())


@dataclass
class Mesh:
    """Structured mesh with quadrature, trace map and gradient stencils."""

    geometry: Geometry
    bulk_x: np.ndarray          # (n_bulk, d) coordinates
    w_bulk: np.ndarray          # (n_bulk,) quadrature, sums to |G|
    surf_x: np.ndarray          # (n_surf, d)
    w_surf: np.ndarray          # (n_surf,) quadrature, sums to |Gamma|
    trace_idx: np.ndarray       # (n_surf,) bulk index of each boundary node
    normals: np.ndarray         # (n_surf, d) outward unit normals
    control_mask: np.ndarray    # (n_bulk,) bool, control region
    h: float                    # max spacing
    grad: sp.csr_matrix         # (n_edge, n_bulk) edge directional derivative
    w_edge: np.ndarray
    edge_mid: np.ndarray        # (n_edge, d)
    edge_dir: np.ndarray        # (n_edge, d) unit direction of each edge
    surf_grad: sp.csr_matrix    # (n_sedge, n_surf) tangential derivative
    w_sedge: np.ndarray
    sedge_mid: np.ndarray
    sedge_dir: np.ndarray       # unit tangents at surface edge midpoints
    node_grad: tuple            # d sparse (n_bulk, n_bulk) nodal gradient
    surf_node_grad: sp.csr_matrix  # (n_surf, n_surf) nodal tangential derivative
    meta: dict = field(default_factory=dict)

    @property
    def n_bulk(self):
        return len(self.w_bulk)

    @property
    def n_surf(self):
        return len(self.w_surf)

    @property
    def dim(self):
        return self.bulk_x.shape[1]

    def trace(self, bulk_values):
        return np.asarray(bulk_values)[..., self.trace_idx]


def _build_interval(geom, n_x):
    a, b = geom.a, geom.b
    x = np.linspace(a, b, n_x)
    h = (b - a) / (n_x - 1)
    w = np.full(n_x, h)
    w[0] = w[-1] = 0.5 * h

    n_e = n_x - 1
    rows = np.repeat(np.arange(n_e), 2)
    cols = np.stack([np.arange(n_e), np.arange(1, n_x)], axis=1).ravel()
    vals = np.tile([-1.0 / h, 1.0 / h], n_e)
    grad = sp.csr_matrix((vals, (rows, cols)), shape=(n_e, n_x))
    edge_mid = (0.5 * (x[:-1] + x[1:]))[:, None]
    edge_dir = np.ones((n_e, 1))

    # nodal gradient for convection: central inside, one-sided at the ends
    ng = sp.lil_matrix((n_x, n_x))
    for i in range(1, n_x - 1):
        ng[i, i - 1] = -0.5 / h
        ng[i, i + 1] = 0.5 / h
    ng[0, 0], ng[0, 1] = -1.0 / h, 1.0 / h
    ng[-1, -2], ng[-1, -1] = -1.0 / h, 1.0 / h

    return Mesh(
        geometry=geom,
        bulk_x=x[:, None], w_bulk=w,
        surf_x=np.array([[a], [b]]), w_surf=np.ones(2),
        trace_idx=np.array([0, n_x - 1]),
        normals=np.array([[-1.0], [1.0]]),
        control_mask=geom.control_indicator(x[:, None]),
        h=h,
        grad=grad, w_edge=np.full(n_e, h), edge_mid=edge_mid, edge_dir=edge_dir,
        surf_grad=sp.csr_matrix((0, 2)), w_sedge=np.zeros(0),
        sedge_mid=np.zeros((0, 1)), sedge_dir=np.zeros((0, 1)),
        node_grad=(ng.tocsr(),),
        surf_node_grad=sp.csr_matrix((2, 2)),
        meta={"n_x": n_x},
    )


def _build_disk(geom, n_r, n_theta):
    R = geom.radius
    dr = R / n_r
    dth = 2.0 * np.pi / n_theta
    theta = np.arange(n_theta) * dth

    def node(i, j):
        # i = 0 is the single pole node, rings are i = 1..n_r
        return 0 if i == 0 else 1 + (i - 1) * n_theta + (j % n_theta)

    n_bulk = 1 + n_r * n_theta
    bulk_x = np.zeros((n_bulk, 2))
    w_bulk = np.zeros(n_bulk)
    w_bulk[0] = np.pi * (dr / 2.0) ** 2
    for i in range(1, n_r + 1):
        r = i * dr
        idx = 1 + (i - 1) * n_theta + np.arange(n_theta)
        bulk_x[idx, 0] = r * np.cos(theta)
        bulk_x[idx, 1] = r * np.sin(theta)
        if i < n_r:
            w_bulk[idx] = r * dr * dth
        else:
            # boundary ring owns the half cell between R - dr/2 and R
            w_bulk[idx] = (R * dr / 2.0 - dr * dr / 8.0) * dth

    trace_idx = 1 + (n_r - 1) * n_theta + np.arange(n_theta)
    surf_x = bulk_x[trace_idx].copy()
    w_surf = np.full(n_theta, R * dth)
    normals = np.stack([np.cos(theta), np.sin(theta)], axis=1)

    # radial edges (i -> i+1 at fixed angle) then angular ring edges
    rows, cols, vals = [], [], []
    w_edge, edge_mid, edge_dir = [], [], []
    e = 0
    for i in range(n_r):
        rmid = (i + 0.5) * dr
        for j in range(n_theta):
            rows += [e, e]
            cols += [node(i, j), node(i + 1, j)]
            vals += [-1.0 / dr, 1.0 / dr]
            w_edge.append(rmid * dr * dth)
            edge_mid.append([rmid * np.cos(theta[j]), rmid * np.sin(theta[j])])
            edge_dir.append([np.cos(theta[j]), np.sin(theta[j])])
            e += 1
    for i in range(1, n_r + 1):
        r = i * dr
        thickness = dr if i < n_r else dr / 2.0
        for j in range(n_theta):
            tm = theta[j] + 0.5 * dth
            rows += [e, e]
            cols += [node(i, j), node(i, j + 1)]
            vals += [-1.0 / (r * dth), 1.0 / (r * dth)]
            w_edge.append(r * thickness * dth)
            edge_mid.append([r * np.cos(tm), r * np.sin(tm)])
            edge_dir.append([-np.sin(tm), np.cos(tm)])
            e += 1
    grad = sp.csr_matrix((vals, (rows, cols)), shape=(e, n_bulk))

    # surface edges on the boundary circle
    srows, scols, svals = [], [], []
    w_sedge, sedge_mid, sedge_dir = [], [], []
    for j in range(n_theta):
        tm = theta[j] + 0.5 * dth
        srows += [j, j]
        scols += [j, (j + 1) % n_theta]
        svals += [-1.0 / (R * dth), 1.0 / (R * dth)]
        w_sedge.append(R * dth)
        sedge_mid.append([R * np.cos(tm), R * np.sin(tm)])
        sedge_dir.append([-np.sin(tm), np.cos(tm)])
    surf_grad = sp.csr_matrix((svals, (srows, scols)), shape=(n_theta, n_theta))

    # nodal cartesian gradient for convection terms
    gx = sp.lil_matrix((n_bulk, n_bulk))
    gy = sp.lil_matrix((n_bulk, n_bulk))
    # pole: least-squares fit over the first ring
    for j in range(n_theta):
        cgx = 2.0 * np.cos(theta[j]) / (n_theta * dr)
        cgy = 2.0 * np.sin(theta[j]) / (n_theta * dr)
        gx[0, node(1, j)] += cgx
        gx[0, 0] -= cgx
        gy[0, node(1, j)] += cgy
        gy[0, 0] -= cgy
    for i in range(1, n_r + 1):
        r = i * dr
        for j in range(n_theta):
            k = node(i, j)
            c, s = np.cos(theta[j]), np.sin(theta[j])
            # radial part
            if i < n_r:
                dra = [(node(i + 1, j), 0.5 / dr), (node(i - 1, j), -0.5 / dr)]
            else:
                dra = [(node(i, j), 1.5 / dr), (node(i - 1, j), -2.0 / dr),
                       (node(i - 2, j), 0.5 / dr)]
            for col, v in dra:
                gx[k, col] += c * v
                gy[k, col] += s * v
            # angular part, periodic central
            for col, v in [(node(i, j + 1), 0.5 / (r * dth)),
                           (node(i, j - 1), -0.5 / (r * dth))]:
                gx[k, col] += -s * v
                gy[k, col] += c * v

    sng = sp.lil_matrix((n_theta, n_theta))
    for j in range(n_theta):
        sng[j, (j + 1) % n_theta] = 0.5 / (R * dth)
        sng[j, (j - 1) % n_theta] = -0.5 / (R * dth)

    return Mesh(
        geometry=geom,
        bulk_x=bulk_x, w_bulk=w_bulk,
        surf_x=surf_x, w_surf=w_surf,
        trace_idx=trace_idx, normals=normals,
        control_mask=geom.control_indicator(bulk_x),
        h=max(dr, R * dth),
        grad=grad, w_edge=np.array(w_edge),
        edge_mid=np.array(edge_mid), edge_dir=np.array(edge_dir),
        surf_grad=surf_grad, w_sedge=np.array(w_sedge),
        sedge_mid=np.array(sedge_mid), sedge_dir=np.array(sedge_dir),
        node_grad=(gx.tocsr(), gy.tocsr()),
        surf_node_grad=sng.tocsr(),
        meta={"n_r": n_r, "n_theta": n_theta},
    )


def build_mesh(geometry, n_x=None, n_r=None, n_theta=None):
    """Build the structured mesh for the given geometry.

    Interval meshes need ``n_x >= 8`` nodes; disk meshes need
    ``n_r >= 3`` rings and ``n_theta >= 8`` angles.
    """
    if geometry.kind == "interval":
        if n_x is None or n_x < 8:
            raise ValueError("interval mesh needs n_x >= 8")
        return _build_interval(geometry, n_x)
    if n_r is None or n_theta is None or n_r < 3 or n_theta < 8:
        raise ValueError("disk mesh needs n_r >= 3 and n_theta >= 8")
    return _build_disk(geometry, n_r, n_theta)


def inner_l2(u, v, mesh):
    """Coupled L2 inner product of two (bulk, surface) pairs."""
    if u.bulk.shape != (mesh.n_bulk,) or v.bulk.shape != (mesh.n_bulk,):
        raise ValueError("bulk field does not conform to the mesh")
    if u.surf.shape != (mesh.n_surf,) or v.surf.shape != (mesh.n_surf,):
        raise ValueError("surface field does not conform to the mesh")
    return float(np.dot(mesh.w_bulk * u.bulk, v.bulk)
                 + np.dot(mesh.w_surf * u.surf, v.surf))


@dataclass
class DiscreteOperators:
    """Assembled matrices of the coupled weak form at one time."""

    M_G: sp.csr_matrix
    M_Gamma: sp.csr_matrix
    K_A: sp.csr_matrix
    K_AGamma: sp.csr_matrix
    C_B: sp.csr_matrix
    C_BGamma: sp.csr_matrix
    R_a1: sp.csr_matrix
    R_b1: sp.csr_matrix
    t: float


def assemble_operators(mesh, coeffs, t):
    """Assemble mass, stiffness, convection and reaction matrices at time t.

    The bulk stiffness is K_A = G^T diag(w_e a_e) G with a evaluated at
    edge midpoints; the surface stiffness uses the tangential edge
    derivative ((1/R) d/dtheta on the circle) and is identically zero on
    the interval.  Convection matrices C are diag(w) (B . nodal gradient),
    so eta^T C v approximates the pairing of (B . grad v) against eta.
    Rejects diffusion values whose smallest eigenvalue drops below the
    declared ellipticity floor.
    """
    a_edge = diffusion_field(coeffs.A, t, mesh.edge_mid)
    a_node_min = diffusion_min_eig(coeffs.A, t, mesh.bulk_x)
    if coeffs.beta is not None and min(a_node_min, float(a_edge.min())) < coeffs.beta - 1e-12:
        raise EllipticityViolation(
            f"bulk diffusion drops below beta={coeffs.beta} at t={t}")

    K_A = (mesh.grad.T @ sp.diags(mesh.w_edge * a_edge) @ mesh.grad).tocsr()

    n_s = mesh.n_surf
    if mesh.w_sedge.size:
        ag_edge = diffusion_field(coeffs.A_surf, t, mesh.sedge_mid)
        ag_min = diffusion_min_eig(coeffs.A_surf, t, mesh.surf_x)
        if coeffs.beta is not None and min(ag_min, float(ag_edge.min())) < coeffs.beta - 1e-12:
            raise EllipticityViolation(
                f"surface diffusion drops below beta={coeffs.beta} at t={t}")
        K_AG = (mesh.surf_grad.T @ sp.diags(mesh.w_sedge * ag_edge)
                @ mesh.surf_grad).tocsr()
    else:
        K_AG = sp.csr_matrix((n_s, n_s))

    dim = mesh.dim
    Bv = eval_vector(coeffs.B, t, mesh.bulk_x, dim)
    C_B = sp.csr_matrix((mesh.n_bulk, mesh.n_bulk))
    if np.any(Bv):
        C_B = sum(sp.diags(mesh.w_bulk * Bv[:, k]) @ mesh.node_grad[k]
                  for k in range(dim)).tocsr()

    C_BG = sp.csr_matrix((n_s, n_s))
    Bs = eval_vector(coeffs.B_surf, t, mesh.surf_x, dim)
    if np.any(Bs) and mesh.w_sedge.size:
        nrm = np.abs(np.sum(Bs * mesh.normals, axis=1))
        if nrm.max() > 1e-10 * max(1.0, np.abs(Bs).max()):
            raise ValueError("surface convection field is not tangential")
        tangents = np.stack([-mesh.normals[:, 1], mesh.normals[:, 0]], axis=1)
        b_tau = np.sum(Bs * tangents, axis=1)
        C_BG = (sp.diags(mesh.w_surf * b_tau) @ mesh.surf_node_grad).tocsr()

    R_a1 = sp.diags(mesh.w_bulk * eval_scalar(coeffs.a1, t, mesh.bulk_x)).tocsr()
    R_b1 = sp.diags(mesh.w_surf * eval_scalar(coeffs.b1, t, mesh.surf_x)).tocsr()

    return DiscreteOperators(
        M_G=sp.diags(mesh.w_bulk).tocsr(), M_Gamma=sp.diags(mesh.w_surf).tocsr(),
        K_A=K_A, K_AGamma=K_AG, C_B=C_B, C_BGamma=C_BG,
        R_a1=R_a1, R_b1=R_b1, t=t)


class EllipticityViolation(ValueError):
    """Assembly-time diffusion floor violation."""


def couple(mesh, bulk_mat, surf_mat):
    """Lift a (bulk, surface) operator pair to the reduced trace space."""
    P = sp.csr_matrix((np.ones(mesh.n_surf),
                       (mesh.trace_idx, np.arange(mesh.n_surf))),
                      shape=(mesh.n_bulk, mesh.n_surf))
    out = bulk_mat.tocsr(copy=True)
    if surf_mat is not None and surf_mat.nnz:
        out = (out + P @ surf_mat @ P.T).tocsr()
    return out


def weak_divergence_load(F, F_surf, mesh):
    """Coupled load of a weak divergence pair, as pairing coefficients.

    Implements eta -> -int_G F . grad(eta) dx - int_Gamma F_surf . grad_t
    eta_s dsigma.  The normal-flux boundary pairing of the bulk term
    cancels structurally against the explicit surface source, so no
    F (dot) nu term is ever assembled.  F is given at bulk nodes (n, d);
    F_surf must be tangential at boundary nodes (zero or None on the
    interval, whose boundary is zero-dimensional).
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape != (mesh.n_bulk, mesh.dim):
        raise ValueError("bulk vector field has wrong shape")

    rows = mesh.grad.tocoo()
    # edge values by averaging the two endpoint vectors
    i_lo = np.zeros(mesh.grad.shape[0], dtype=int)
    i_hi = np.zeros(mesh.grad.shape[0], dtype=int)
    for r, c, v in zip(rows.row, rows.col, rows.data):
        if v < 0:
            i_lo[r] = c
        else:
            i_hi[r] = c
    F_edge = 0.5 * (F[i_lo] + F[i_hi])
    f_dir = np.sum(F_edge * mesh.edge_dir, axis=1)
    bulk_load = -mesh.grad.T @ (mesh.w_edge * f_dir)

    surf_load = np.zeros(mesh.n_surf)
    if F_surf is not None:
        F_surf = np.asarray(F_surf, dtype=float)
        if F_surf.ndim == 1:
            F_surf = F_surf[:, None]
        if F_surf.shape != (mesh.n_surf, mesh.dim):
            raise ValueError("surface vector field has wrong shape")
        if np.any(F_surf):
            if mesh.w_sedge.size == 0:
                raise ValueError(
                    "surface vectors must vanish on a zero-dimensional boundary")
            nrm = np.abs(np.sum(F_surf * mesh.normals, axis=1))
            if nrm.max() > 1e-10 * max(1.0, np.abs(F_surf).max()):
                raise ValueError("surface field is not tangential")
            srows = mesh.surf_grad.tocoo()
            j_lo = np.zeros(mesh.surf_grad.shape[0], dtype=int)
            j_hi = np.zeros(mesh.surf_grad.shape[0], dtype=int)
            for r, c, v in zip(srows.row, srows.col, srows.data):
                if v < 0:
                    j_lo[r] = c
                else:
                    j_hi[r] = c
            Fs_edge = 0.5 * (F_surf[j_lo] + F_surf[j_hi])
            fs_dir = np.sum(Fs_edge * mesh.sedge_dir, axis=1)
            surf_load = -mesh.surf_grad.T @ (mesh.w_sedge * fs_dir)

    return BulkSurfaceField(np.asarray(bulk_load).ravel(), surf_load)


def mesh_to_json(mesh):
    """JSON-serializable dump of node coordinates, weights and masks."""
    return {
        "kind": mesh.geometry.kind,
        "bulk_x": mesh.bulk_x.tolist(),
        "w_bulk": mesh.w_bulk.tolist(),
        "surf_x": mesh.surf_x.tolist(),
        "w_surf": mesh.w_surf.tolist(),
        "trace_idx": mesh.trace_idx.tolist(),
        "control_mask": mesh.control_mask.astype(int).tolist(),
        "h": mesh.h,
        "meta": mesh.meta,
    }


def dump_mesh_json(mesh, path):
    with open(path, "w") as fh:
        json.dump(mesh_to_json(mesh), fh, indent=2, sort_keys=True)


def dump_operators_matrix_market(ops, directory):
    """Write each assembled operator as a Matrix Market file."""
    import os
    from scipy.io import mmwrite

    for name in ("M_G", "M_Gamma", "K_A", "K_AGamma", "C_B", "C_BGamma",
                 "R_a1", "R_b1"):
        mat = getattr(ops, name)
        mmwrite(os.path.join(directory, f"{name}.mtx"), sp.coo_matrix(mat))
