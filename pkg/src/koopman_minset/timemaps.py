"""Koopman eigenfunctions, the time mappings they induce, and independence.

A Koopman eigenfunction ``phi`` with eigenvalue ``lam`` grows as
``phi(x(t)) = phi(x0) exp(lam t)``, so ``g(x) = Log(phi(x) / phi(x0)) / lam``
reads the elapsed time off the state: ``dg/dt = 1`` and ``g(x0) = 0``.
Combinations of time mappings that keep ``dg/dt = 1`` (weighted means with
weights summing to one, geometric means on the orbit of ``x0``) produce new
time mappings; whether a family is redundant is decided geometrically, by
the rank of its stacked gradients.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import evaluate_field
from .errors import (
    ConservationDirectionError,
    ContractViolation,
    DomainError,
    EmptyReportError,
    IllegalActionError,
    SingularPointError,
)


@dataclass(frozen=True)
class KoopmanEigenfunction:
    lam: complex
    eval: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    name: str = "phi"


@dataclass(frozen=True)
class TimeMapping:
    eval: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    origin: np.ndarray
    name: str = "g"


def _is_real_scalar(z):
    return np.isrealobj(z) or np.imag(z) == 0


# ---------------------------------------------------------------------------
# KEF <-> time mapping
# ---------------------------------------------------------------------------


def timemap_from_kef(phi: KoopmanEigenfunction, x0):
    """Time mapping induced by ``phi`` with reference state ``x0``.

    The logarithm is taken of the ratio ``phi(x) / phi(x0)`` so the value at
    ``x0`` is exactly zero and the branch is continuous around ``x0``. A real
    eigenfunction with a real eigenvalue gives a real mapping (``ln|ratio|``).
    """
    lam = complex(phi.lam)
    if lam == 0:
        raise ConservationDirectionError(
            f"{phi.name} has eigenvalue 0: it is a conservation law and induces no time mapping"
        )
    x0 = np.asarray(x0)
    phi0 = np.asarray(phi.eval(x0))
    if np.any(phi0 == 0):
        raise DomainError(f"{phi.name}(x0) = 0: reference state lies on the zero set", x0)
    real = lam.imag == 0 and np.isrealobj(phi0)
    scale = 1.0 / (lam.real if real else lam)

    def g(x):
        ratio = np.asarray(phi.eval(x)) / phi0
        if real and np.isrealobj(ratio):
            return np.log(np.abs(ratio)) * scale
        return np.log(ratio.astype(complex)) * scale

    def grad(x):
        return np.asarray(phi.gradient(x)) * (scale / np.asarray(phi.eval(x)))[..., None]

    return TimeMapping(g, grad, x0.copy(), name=f"g[{phi.name}]")


def kef_from_timemap(g: TimeMapping, lam):
    """``phi = exp(lam * g)``, so ``grad phi = lam * phi * grad g``."""
    if lam == 0:
        raise ContractViolation("eigenvalue must be nonzero")
    real = _is_real_scalar(lam)
    lam_ = float(np.real(lam)) if real else complex(lam)

    def phi(x):
        return np.exp(lam_ * np.asarray(g.eval(x)))

    def grad(x):
        return (lam_ * phi(x))[..., None] * np.asarray(g.gradient(x))

    return KoopmanEigenfunction(lam_, phi, grad, name=f"exp({lam}*{g.name})")


def kef_pde_residual(phi: KoopmanEigenfunction, field, points):
    """``|<grad phi, P> - lam phi|`` at every point."""
    pts = np.asarray(points)
    p = evaluate_field(field, pts)
    lhs = np.einsum("...n,...n->...", np.asarray(phi.gradient(pts)), p)
    return np.abs(lhs - phi.lam * np.asarray(phi.eval(pts)))


def unit_derivative_residual(g: TimeMapping, field, points):
    """``|<grad g, P> - 1|`` at every point."""
    pts = np.asarray(points)
    p = evaluate_field(field, pts)
    return np.abs(np.einsum("...n,...n->...", np.asarray(g.gradient(pts)), p) - 1.0)


# ---------------------------------------------------------------------------
# group structure of KEFs
# ---------------------------------------------------------------------------


def kef_constant(dim):
    """The unit element: ``phi = 1`` with eigenvalue 0."""
    return KoopmanEigenfunction(
        0.0,
        lambda x: np.ones(np.shape(x)[:-1]),
        lambda x: np.zeros(np.shape(x)),
        name="1",
    )


def kef_product(phi1, phi2):
    def ev(x):
        return np.asarray(phi1.eval(x)) * np.asarray(phi2.eval(x))

    def grad(x):
        a, b = np.asarray(phi1.eval(x)), np.asarray(phi2.eval(x))
        return a[..., None] * np.asarray(phi2.gradient(x)) + b[..., None] * np.asarray(phi1.gradient(x))

    return KoopmanEigenfunction(phi1.lam + phi2.lam, ev, grad, name=f"{phi1.name}*{phi2.name}")


def kef_power(phi, beta):
    """``phi ** beta`` (principal power) with eigenvalue ``beta * lam``."""

    def _base(x):
        v = np.asarray(phi.eval(x))
        if np.isrealobj(v) and (np.all(v > 0) or float(beta).is_integer()):
            return v
        return v.astype(complex)

    def ev(x):
        return _base(x) ** beta

    def grad(x):
        return (beta * _base(x) ** (beta - 1))[..., None] * np.asarray(phi.gradient(x))

    return KoopmanEigenfunction(beta * phi.lam, ev, grad, name=f"{phi.name}^{beta}")


def split_kefs(dec):
    """The linear eigenfunctions ``phi_i(x) = <w_i, x>`` of a decomposition."""
    out = []
    for i in range(dec.dim):
        w = dec.dual_vectors[i]
        lam = dec.eigenvalues[i]
        if dec.is_real(i):
            w, lam = w.real.copy(), float(lam.real)
        out.append(
            KoopmanEigenfunction(
                lam,
                lambda x, w=w: np.asarray(x) @ w,
                lambda x, w=w: np.broadcast_to(w, np.shape(x)),
                name=f"y{i + 1}",
            )
        )
    return out


def timemaps_from_chart(chart, x0):
    """One time mapping per component of a canonical chart, anchored at ``x0``."""
    if chart.kind != "canonical":
        raise ContractViolation("time mappings come from canonical charts (unit velocity)")
    x0 = np.asarray(x0)
    if not chart.inside(x0):
        raise DomainError(f"{chart.name}: reference state outside the chart domain", x0)
    base = np.asarray(chart.forward(x0))

    def guarded(fn, x):
        # NaN outside the chart guard, so independence tests skip those points
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.asarray(fn(x))
        bad = ~np.asarray(chart.inside(x))
        if np.any(bad):
            out = out.astype(np.result_type(out, float)).copy()
            out[bad] = np.nan
        return out

    maps = []
    for i in range(chart.dim):
        maps.append(
            TimeMapping(
                lambda x, i=i: guarded(lambda y: np.asarray(chart.forward(y))[..., i] - base[i], x),
                lambda x, i=i: guarded(lambda y: np.asarray(chart.gradient(y))[..., i, :], x),
                x0.copy(),
                name=f"{chart.name}[{i + 1}]",
            )
        )
    return maps


# ---------------------------------------------------------------------------
# legal actions
# ---------------------------------------------------------------------------


def _shared_origin(gs):
    o = np.asarray(gs[0].origin)
    for g in gs[1:]:
        if np.shape(g.origin) != o.shape or not np.allclose(g.origin, o, rtol=0, atol=1e-12):
            raise ContractViolation("time mappings must share the reference state x0")
    return o


def combine_mean(gs, weights):
    """Weighted mean ``sum w_i g_i``; legal exactly when the weights sum to 1."""
    gs = list(gs)
    w = np.asarray(weights, dtype=float)
    if not gs or w.shape != (len(gs),):
        raise ContractViolation("need one weight per time mapping")
    if abs(w.sum() - 1.0) > 1e-12:
        raise IllegalActionError(f"weights sum to {w.sum()!r}, a legal mean needs 1")
    origin = _shared_origin(gs)
    nz = np.flatnonzero(w)
    if nz.size == 1 and w[nz[0]] == 1.0:
        return gs[nz[0]]

    def ev(x):
        return sum(wi * np.asarray(g.eval(x)) for wi, g in zip(w, gs))

    def grad(x):
        return sum(wi * np.asarray(g.gradient(x)) for wi, g in zip(w, gs))

    return TimeMapping(ev, grad, origin, name="mean(" + ",".join(g.name for g in gs) + ")")


def combine_geometric(g1, g2, tol=1e-12):
    """``sqrt(g1 * g2)``.

    On the orbit of the shared reference state both factors equal the
    elapsed time, so the result does too. The principal square root is only
    used where ``Re(g1 g2) >= 0``; anywhere else evaluation raises
    :class:`DomainError` naming the offending points.
    """
    origin = _shared_origin([g1, g2])
    if g1 is g2:
        return g1

    def _product(x):
        x = np.asarray(x)
        prod = np.asarray(g1.eval(x)) * np.asarray(g2.eval(x))
        bad = np.real(prod) < -tol
        if np.any(bad):
            pts = x[bad] if x.ndim > 1 else x
            raise DomainError(f"g1*g2 has negative real part at {np.round(pts, 6).tolist()}", pts)
        return prod

    def ev(x):
        prod = _product(x)
        if np.isrealobj(prod):
            return np.sqrt(np.maximum(prod, 0.0))
        return np.sqrt(prod)

    def grad(x):
        x = np.asarray(x)
        a, b = np.asarray(g1.eval(x)), np.asarray(g2.eval(x))
        root = ev(x)
        num = b[..., None] * np.asarray(g1.gradient(x)) + a[..., None] * np.asarray(g2.gradient(x))
        return num / (2.0 * root)[..., None]

    return TimeMapping(ev, grad, origin, name=f"sqrt({g1.name}*{g2.name})")


# ---------------------------------------------------------------------------
# angle mappings of the real-field rotation (a dependent pair)
# ---------------------------------------------------------------------------


def arccos_timemap(x0):
    """``arccos(x1 / r)`` shifted to vanish at ``x0``; advances with ``theta' = 1``
    in the upper half plane.
    """
    x0 = np.asarray(x0, dtype=float)

    def u(x):
        x = np.asarray(x)
        return x[..., 0] / np.hypot(x[..., 0], x[..., 1])

    def ev(x):
        return np.arccos(u(x)) - np.arccos(u(x0))

    def grad(x):
        x = np.asarray(x)
        x1, x2 = x[..., 0], x[..., 1]
        r3 = np.hypot(x1, x2) ** 3
        du = np.stack([x2 * x2 / r3, -x1 * x2 / r3], axis=-1)
        return -du / np.sqrt(1.0 - u(x) ** 2)[..., None]

    return TimeMapping(ev, grad, x0.copy(), name="arccos")


def arcsin_timemap(x0):
    """``arcsin(x2 / r)`` shifted to vanish at ``x0``; advances with ``theta' = 1``
    in the right half plane.
    """
    x0 = np.asarray(x0, dtype=float)

    def v(x):
        x = np.asarray(x)
        return x[..., 1] / np.hypot(x[..., 0], x[..., 1])

    def ev(x):
        return np.arcsin(v(x)) - np.arcsin(v(x0))

    def grad(x):
        x = np.asarray(x)
        x1, x2 = x[..., 0], x[..., 1]
        r3 = np.hypot(x1, x2) ** 3
        dv = np.stack([-x1 * x2 / r3, x1 * x1 / r3], axis=-1)
        return dv / np.sqrt(1.0 - v(x) ** 2)[..., None]

    return TimeMapping(ev, grad, x0.copy(), name="arcsin")


# ---------------------------------------------------------------------------
# independence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndependenceReport:
    sample_points: np.ndarray
    gradient_matrix_rank: np.ndarray
    min_singular_value: np.ndarray
    singular_values: np.ndarray
    verdict: str
    n_mappings: int
    svd_tol: float
    skipped: int = 0

    def to_dict(self):
        return {
            "n_mappings": self.n_mappings,
            "svd_tol": self.svd_tol,
            "skipped": self.skipped,
            "verdict": self.verdict,
            "points": np.real(self.sample_points).tolist(),
            "ranks": self.gradient_matrix_rank.tolist(),
            "min_singular_value": self.min_singular_value.tolist(),
            "singular_values": self.singular_values.tolist(),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _gradient_fn(g):
    return g.gradient if hasattr(g, "gradient") else g


_SKIPPABLE = (DomainError, SingularPointError, FloatingPointError, ZeroDivisionError)


def stacked_gradients(gs, points):
    """``(M, K, N)`` gradients and a mask of points where all K are finite."""
    pts = np.asarray(points)
    if pts.ndim == 1:
        pts = pts[None, :]
    fns = [_gradient_fn(g) for g in gs]
    try:
        with np.errstate(all="ignore"):
            rows = np.stack([np.asarray(f(pts)) for f in fns], axis=1)
    except _SKIPPABLE:
        rows = np.full((pts.shape[0], len(fns), pts.shape[-1]), np.nan, dtype=complex)
        for m, x in enumerate(pts):
            try:
                with np.errstate(all="ignore"):
                    rows[m] = np.stack([np.asarray(f(x)) for f in fns])
            except _SKIPPABLE:
                pass
    ok = np.all(np.isfinite(rows), axis=(1, 2))
    return pts, rows, ok


def independence_test(gs, points, svd_tol=1e-8):
    """Numeric rank of the stacked gradients at every probe point.

    ``gs`` holds time mappings, eigenfunctions or plain gradient callables.
    The rank counts singular values above ``svd_tol`` times the largest one;
    the verdict is ``"independent"`` when every point has full rank K,
    ``"dependent"`` when none does and ``"mixed"`` otherwise.
    """
    gs = list(gs)
    if len(gs) < 2:
        raise ContractViolation("independence needs at least two mappings")
    pts, rows, ok = stacked_gradients(gs, points)
    if pts.shape[0] == 0:
        raise ContractViolation("independence needs at least one point")
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} point(s) outside a mapping's domain", RuntimeWarning)
    if not np.any(ok):
        raise EmptyReportError("every probe point was outside some mapping's domain")
    sv = np.linalg.svd(rows[ok], compute_uv=False)
    top = sv[:, :1]
    rank = np.sum(sv > svd_tol * top, axis=1) * (top[:, 0] > 0)
    k = len(gs)
    full = rank == k
    verdict = "independent" if full.all() else ("dependent" if not full.any() else "mixed")
    return IndependenceReport(
        sample_points=pts[ok],
        gradient_matrix_rank=rank.astype(int),
        min_singular_value=sv[:, -1],
        singular_values=sv,
        verdict=verdict,
        n_mappings=k,
        svd_tol=svd_tol,
        skipped=skipped,
    )


def relative_gram_determinant(gs, points):
    """``det(G) / prod |grad g_i|^2`` with the Hermitian Gram ``G``; 0 means dependent."""
    _, rows, ok = stacked_gradients(gs, points)
    rows = rows[ok]
    gram = np.einsum("mkn,mjn->mkj", rows, np.conj(rows))
    norms = np.prod(np.real(np.einsum("mkk->mk", gram)), axis=1)
    return np.abs(np.linalg.det(gram)) / norms
