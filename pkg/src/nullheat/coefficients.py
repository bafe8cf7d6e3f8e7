"""Equation coefficients and the constants derived from their sup norms.

A coefficient set bundles the bulk/surface diffusion fields, the zeroth
order reaction and noise-intensity scalars, and the convection vector
fields, together with the ellipticity floor ``beta`` and the sup norms
that feed the control-cost constant and the weight-parameter threshold.

Coefficients are deterministic functions of (t, x).  Scalars may be given
as plain numbers, as callables ``f(t, X) -> (n,)`` with ``X`` an (n, d)
array of points, or as expression strings compiled by
:func:`expression_field`.  Sup norms obtained by grid sampling are lower
bounds of the true essential sup and are flagged as such.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class EllipticityError(ValueError):
    """Diffusion field fails the uniform ellipticity floor."""


_EXPR_NS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "tanh": np.tanh, "cosh": np.cosh,
    "sinh": np.sinh, "abs": np.abs, "pi": np.pi, "minimum": np.minimum,
    "maximum": np.maximum,
}


def expression_field(expr):
    """Compile an expression string into a scalar field ``f(t, X)``.

    Available names: t, x, y (second coordinate, 0 on the interval),
    r, theta (polar coordinates) and the numpy functions in ``_EXPR_NS``.
    """
    code = compile(expr, "<coefficient>", "eval")

    def f(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x = X[:, 0]
        y = X[:, 1] if X.shape[1] > 1 else np.zeros_like(x)
        env = dict(_EXPR_NS)
        env.update(t=t, x=x, y=y, r=np.sqrt(x * x + y * y),
                   theta=np.arctan2(y, x))
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    return f


def eval_scalar(spec, t, X):
    """Evaluate a scalar coefficient spec at time t on points X (n, d)."""
    n = len(X)
    if spec is None:
        return np.zeros(n)
    if callable(spec):
        return np.asarray(spec(t, X), dtype=float).reshape(n)
    return np.full(n, float(spec))


def eval_vector(spec, t, X, dim):
    """Evaluate a vector coefficient spec at time t, returns (n, dim)."""
    n = len(X)
    if spec is None:
        return np.zeros((n, dim))
    if callable(spec):
        out = np.asarray(spec(t, X), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out.reshape(n, dim)
    out = np.asarray(spec, dtype=float).reshape(-1)
    return np.tile(out, (n, 1))


def diffusion_field(spec, t, X):
    """Scalar (isotropic) diffusion values at points X.

    Matrix-valued specs are accepted only when they act as a scalar
    multiple of the identity; anything else must go through the
    ellipticity checker, not the assembler.
    """
    if isinstance(spec, np.ndarray) and spec.ndim == 2:
        d = spec.shape[0]
        if not np.allclose(spec, spec[0, 0] * np.eye(d), atol=1e-14):
            raise NotImplementedError(
                "anisotropic diffusion matrices are supported by the "
                "ellipticity check but not by the assembler")
        return np.full(len(X), float(spec[0, 0]))
    return eval_scalar(spec if spec is not None else 1.0, t, X)


def diffusion_min_eig(spec, t, X):
    """Smallest eigenvalue of the diffusion tensor over the points X."""
    if isinstance(spec, np.ndarray) and spec.ndim == 2:
        if not np.allclose(spec, spec.T, atol=1e-12):
            raise ValueError("diffusion matrix is not symmetric")
        return float(np.linalg.eigvalsh(spec).min())
    vals = eval_scalar(spec if spec is not None else 1.0, t, X)
    return float(vals.min())


@dataclass
class CoefficientSet:
    """Bulk/surface diffusion, reaction, noise and convection coefficients.

    ``A`` and ``A_surf`` are the bulk and surface diffusion fields
    (scalars, scalar fields, or constant symmetric matrices).  ``a1``/``b1``
    are reaction scalars, ``a2``/``b2`` noise intensities, ``B``/``B_surf``
    convection vector fields (``B_surf`` tangential on the boundary).
    """

    A: object = 1.0
    A_surf: object = 1.0
    a1: object = None
    a2: object = None
    b1: object = None
    b2: object = None
    B: object = None
    B_surf: object = None
    beta: float | None = 1.0
    norms: dict = field(default_factory=dict)
    norms_sampled: bool = False
    time_dependent: bool = False

    @classmethod
    def constant(cls, a1=0.0, a2=0.0, b1=0.0, b2=0.0, B=0.0, B_surf=0.0,
                 A=1.0, A_surf=1.0, beta=None):
        """Build a set with constant coefficients; sup norms are exact."""
        def vec_norm(v):
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            return float(np.linalg.norm(arr))

        norms = {
            "a1": abs(float(a1)), "a2": abs(float(a2)),
            "b1": abs(float(b1)), "b2": abs(float(b2)),
            "B": vec_norm(B), "B_surf": vec_norm(B_surf),
        }
        if beta is None:
            beta = diffusion_min_eig(A if isinstance(A, np.ndarray) else A,
                                     0.0, np.zeros((1, 1)))
        return cls(A=A, A_surf=A_surf,
                   a1=None if a1 == 0 else a1, a2=None if a2 == 0 else a2,
                   b1=None if b1 == 0 else b1, b2=None if b2 == 0 else b2,
                   B=None if np.all(np.asarray(B) == 0) else B,
                   B_surf=None if np.all(np.asarray(B_surf) == 0) else B_surf,
                   beta=beta, norms=norms)

    @classmethod
    def zero(cls):
        """All lower-order coefficients zero, unit diffusion."""
        return cls.constant()

    def sup_norm(self, key):
        if key not in self.norms:
            raise ValueError(
                f"sup norm {key!r} unknown; call sample_sup_norms first")
        return self.norms[key]


def preset_coefficients(name, geometry, amplitude=1.0, values=None):
    """Named coefficient presets addressable from the config file."""
    if name == "zero":
        return CoefficientSet.zero()
    if name == "constant":
        vals = dict(values or {})
        return CoefficientSet.constant(**vals)
    if name == "shear-convection":
        if geometry.kind == "interval":
            a, b = geometry.a, geometry.b

            def B(t, X):
                return (amplitude * np.sin(np.pi * (X[:, 0] - a) / (b - a)))[:, None]

            cs = CoefficientSet(B=B, beta=1.0)
            cs.norms = {"a1": 0.0, "a2": 0.0, "b1": 0.0, "b2": 0.0,
                        "B": amplitude, "B_surf": 0.0}
            return cs
        R = geometry.radius

        def B(t, X):
            out = np.zeros_like(X)
            out[:, 0] = amplitude * X[:, 1]
            return out

        def B_surf(t, X):
            th = np.arctan2(X[:, 1], X[:, 0])
            return amplitude * np.stack([-np.sin(th), np.cos(th)], axis=1)

        cs = CoefficientSet(B=B, B_surf=B_surf, beta=1.0)
        cs.norms = {"a1": 0.0, "a2": 0.0, "b1": 0.0, "b2": 0.0,
                    "B": amplitude * R, "B_surf": amplitude}
        return cs
    raise ValueError(f"unknown coefficient preset {name!r}")


def sample_sup_norms(coeffs, mesh, grid):
    """Return a copy with sup norms estimated on the space-time grid.

    The estimates are maxima over sampled nodes and times, hence lower
    bounds of the true essential sup.
    """
    times = grid.times
    norms = {"a1": 0.0, "a2": 0.0, "b1": 0.0, "b2": 0.0, "B": 0.0,
             "B_surf": 0.0}
    dim = mesh.bulk_x.shape[1]
    for t in times:
        for key, spec, X in (("a1", coeffs.a1, mesh.bulk_x),
                             ("a2", coeffs.a2, mesh.bulk_x),
                             ("b1", coeffs.b1, mesh.surf_x),
                             ("b2", coeffs.b2, mesh.surf_x)):
            vals = eval_scalar(spec, t, X)
            norms[key] = max(norms[key], float(np.abs(vals).max(initial=0.0)))
        Bv = eval_vector(coeffs.B, t, mesh.bulk_x, dim)
        norms["B"] = max(norms["B"], float(np.linalg.norm(Bv, axis=1).max(initial=0.0)))
        Bs = eval_vector(coeffs.B_surf, t, mesh.surf_x, dim)
        norms["B_surf"] = max(norms["B_surf"],
                              float(np.linalg.norm(Bs, axis=1).max(initial=0.0)))
    return replace(coeffs, norms=norms, norms_sampled=True)


def check_ellipticity(coeffs, mesh, grid):
    """Smallest eigenvalue of the diffusion tensors over the sampled grid.

    Raises :class:`EllipticityError` when the minimum is not positive and
    ``ValueError`` when a matrix spec is not symmetric.
    """
    best = np.inf
    for t in grid.times:
        best = min(best, diffusion_min_eig(coeffs.A, t, mesh.bulk_x))
        if mesh.surf_x.shape[0] > 0:
            best = min(best, diffusion_min_eig(coeffs.A_surf, t, mesh.surf_x))
    if best <= 0.0:
        raise EllipticityError(
            f"diffusion loses ellipticity: min eigenvalue {best:.6g} <= 0")
    return float(best)


def cost_constant_K(coeffs, T):
    """Control-cost exponent built from the horizon and the sup norms.

    K = 1 + 1/T + |a1|^{2/3} + T|a1| + |b1|^{2/3} + T|b1|
        + (1+T)(|a2|^2 + |B|^2 + |b2|^2 + |B_surf|^2)
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    n = coeffs.norms
    for key in ("a1", "a2", "b1", "b2", "B", "B_surf"):
        if key not in n:
            raise ValueError("coefficient sup norms unavailable")
    return (1.0 + 1.0 / T
            + n["a1"] ** (2.0 / 3.0) + T * n["a1"]
            + n["b1"] ** (2.0 / 3.0) + T * n["b1"]
            + (1.0 + T) * (n["a2"] ** 2 + n["B"] ** 2
                           + n["b2"] ** 2 + n["B_surf"] ** 2))


def lambda_min(coeffs, T, C=1.0):
    """Smallest admissible weight parameter for the sweep harness.

    lambda_1 = C [T + T^2 (1 + |a1|^{2/3} + |a2|^2 + |B|^2
                            + |b1|^{2/3} + |b2|^2 + |B_surf|^2)]
    """
    if C <= 0:
        raise ValueError("constant C must be positive")
    n = coeffs.norms
    bulk = (1.0 + n["a1"] ** (2.0 / 3.0) + n["a2"] ** 2 + n["B"] ** 2
            + n["b1"] ** (2.0 / 3.0) + n["b2"] ** 2 + n["B_surf"] ** 2)
    return C * (T + T * T * bulk)
