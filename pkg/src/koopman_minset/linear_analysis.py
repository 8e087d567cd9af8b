"""Split, canonical and flowbox coordinate charts.

For a linear system the pipeline is

1. eigendecomposition ``A v_i = lam_i v_i`` with dual rows ``w_i``,
2. split coordinates ``y_i = <w_i, x>`` so that ``y_i' = lam_i y_i``,
3. canonical coordinates ``yhat_i = Log(y_i) / lam_i`` with ``yhat_i' = 1``,
4. flowbox coordinates ``z = R yhat`` with ``z_1' = 1`` and ``z_k' = 0``.

Nonlinear built-ins (limit cycle, Brunton's system) ship hand-derived charts
that plug into the same :class:`CoordinateChart` interface.

Inner products between gradients and velocities are bilinear, never
conjugated, so complex charts compose exactly like real ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import (
    BRUNTON_LAMBDA,
    BRUNTON_MU,
    LinearSystem,
    VectorField,
    evaluate_field,
    get_system,
)
from .errors import (
    ConservationDirectionError,
    ContractViolation,
    DefectiveSystemError,
    SingularPointError,
)

REPEATED_TOL = 1e-9
GUARD_EPS = 1e-10


@dataclass(frozen=True)
class Eigendecomposition:
    """Eigenpairs stored row-wise: ``right_vectors[i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    dual_vectors: np.ndarray

    @property
    def dim(self):
        return self.eigenvalues.size

    def is_real(self, i):
        lam = self.eigenvalues[i]
        return (
            abs(lam.imag) <= 1e-14 * max(1.0, abs(lam))
            and np.all(np.abs(self.dual_vectors[i].imag) <= 1e-14)
        )


@dataclass(frozen=True)
class CoordinateChart:
    """A differentiable map ``x -> coords`` with its Jacobian rows.

    ``domain_guard(x)`` returns a boolean array of shape ``(..., G)``, one
    column per guarded quantity named in ``guard_names``; a point is inside
    the chart when every column is true. ``periods[i]`` is the additive
    ambiguity of component ``i`` from its logarithm branch (0 when single
    valued); flowbox charts keep their canonical ``base`` and ``rotation`` so
    branch tracking can happen before the rotation.
    """

    kind: str
    forward: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    domain_guard: Callable[[np.ndarray], np.ndarray]
    dim: int
    guard_names: tuple = ()
    periods: Optional[np.ndarray] = None
    base: Optional["CoordinateChart"] = None
    rotation: Optional[np.ndarray] = None
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def inside(self, x):
        g = np.asarray(self.domain_guard(np.asarray(x)))
        return np.all(g, axis=-1)


def _no_guard(x):
    return np.ones(np.shape(x)[:-1] + (0,), dtype=bool)


def _as_matrix(sys):
    if isinstance(sys, LinearSystem):
        return sys.matrix_a
    if isinstance(sys, VectorField):
        if sys.matrix is None:
            raise ContractViolation(f"{sys.name} is not a linear system")
        return sys.matrix
    return np.asarray(sys, dtype=float)


def _normalize(v):
    v = v / np.linalg.norm(v)
    k = int(np.flatnonzero(np.abs(v) > 1e-12)[0])
    v = v * (np.conj(v[k]) / abs(v[k]))
    v[k] = abs(v[k])
    return v


def _eig2x2(a):
    (p, q), (r, s) = a
    half_tr = 0.5 * (p + s)
    disc = np.sqrt(complex(half_tr * half_tr - (p * s - q * r)))
    lams = [half_tr + disc, half_tr - disc]
    vecs = []
    for lam in lams:
        c1 = np.array([q, lam - p], dtype=complex)
        c2 = np.array([lam - s, r], dtype=complex)
        vecs.append(c1 if np.linalg.norm(c1) >= np.linalg.norm(c2) else c2)
    return np.array(lams), np.array(vecs)


def eigendecompose(sys):
    """Eigenpairs sorted by ``|Re lam|`` then ``Im lam``, unit vectors with a
    real positive leading entry, and the dual basis ``<w_i, v_j> = delta_ij``.
    """
    a = _as_matrix(sys)
    n = a.shape[0]
    if n == 2:
        lams, vecs = _eig2x2(a)
    else:
        lams, cols = np.linalg.eig(a)
        vecs = cols.T.astype(complex)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(lams[i] - lams[j]) <= REPEATED_TOL:
                raise DefectiveSystemError(f"repeated eigenvalue {lams[i]}")
    order = np.lexsort((np.round(lams.imag, 12), np.round(np.abs(lams.real), 12)))
    lams = np.asarray(lams[order], dtype=complex)
    vecs = np.array([_normalize(vecs[k]) for k in order])
    duals = np.linalg.inv(vecs.T)
    return Eigendecomposition(lams, vecs, duals)


def split_chart(dec: Eigendecomposition):
    """``y_i = <w_i, x>``; each component then obeys ``y_i' = lam_i y_i``."""
    real = all(dec.is_real(i) for i in range(dec.dim))
    w = dec.dual_vectors.real.copy() if real else dec.dual_vectors.copy()

    return CoordinateChart(
        kind="split",
        forward=lambda x: np.asarray(x) @ w.T,
        gradient=lambda x: np.broadcast_to(w, np.shape(x)[:-1] + w.shape),
        domain_guard=_no_guard,
        dim=dec.dim,
        name="split",
        metadata={"eigenvalues": dec.eigenvalues},
    )


def _guard_scale(x):
    return GUARD_EPS * (1.0 + np.linalg.norm(np.real(x), axis=-1))


def canonical_chart(dec: Eigendecomposition):
    """``yhat_i = Log(y_i) / lam_i``; real eigenpairs use ``ln|y_i|``.

    Each connected component of ``{y_i != 0}`` is its own chart domain; the
    guard rejects points too close to any ``y_i = 0`` hyperplane.
    """
    lams = dec.eigenvalues
    if np.any(np.abs(lams) < 1e-12):
        raise ConservationDirectionError(
            "zero eigenvalue: that split coordinate is a conservation law, "
            "it has no canonical (unit-velocity) rescaling"
        )
    real = np.array([dec.is_real(i) for i in range(dec.dim)])
    all_real = bool(real.all())
    w = dec.dual_vectors.real.copy() if all_real else dec.dual_vectors.copy()
    inv_lam = (1.0 / lams.real) if all_real else (1.0 / lams)

    def forward(x):
        y = np.asarray(x) @ w.T
        if all_real:
            return np.log(np.abs(y)) * inv_lam
        out = np.empty(y.shape, dtype=complex)
        for i in range(dec.dim):
            yi = y[..., i]
            out[..., i] = (np.log(np.abs(yi)) if real[i] else np.log(yi.astype(complex))) * inv_lam[i]
        return out

    def gradient(x):
        y = np.asarray(x) @ w.T
        return (inv_lam / y)[..., :, None] * w

    def guard(x):
        y = np.asarray(x) @ w.T
        return np.abs(y) > _guard_scale(x)[..., None]

    periods = np.where(real, 0.0, 2j * np.pi / lams)
    return CoordinateChart(
        kind="canonical",
        forward=forward,
        gradient=gradient,
        domain_guard=guard,
        dim=dec.dim,
        guard_names=tuple(f"y{i + 1}" for i in range(dec.dim)),
        periods=periods,
        name="canonical",
        metadata={"eigenvalues": lams},
    )


def flowbox_rotation(n):
    """Scaled Helmert matrix: first row ``(1/n, ..., 1/n)``, remaining rows
    orthogonal to it and to each other.  ``n = 2`` gives ``[[.5, .5], [.5, -.5]]``.
    """
    h = np.zeros((n, n))
    h[0] = 1.0 / np.sqrt(n)
    for k in range(1, n):
        h[k, :k] = 1.0
        h[k, k] = -float(k)
        h[k] /= np.sqrt(k * (k + 1.0))
    return h / np.sqrt(n)


def flowbox_chart(canonical: CoordinateChart):
    """``z = R yhat``: ``z_1`` advances with unit speed, the rest are conserved."""
    if canonical.kind != "canonical":
        raise ContractViolation(f"flowbox needs a canonical chart, got {canonical.kind}")
    r = flowbox_rotation(canonical.dim)

    def forward(x):
        return canonical.forward(x) @ r.T

    def gradient(x):
        return np.einsum("kj,...jn->...kn", r, canonical.gradient(x))

    return CoordinateChart(
        kind="flowbox",
        forward=forward,
        gradient=gradient,
        domain_guard=canonical.domain_guard,
        dim=canonical.dim,
        guard_names=canonical.guard_names,
        base=canonical,
        rotation=r,
        name=f"flowbox({canonical.name})",
        metadata={**canonical.metadata, "rotation": "scaled-helmert"},
    )


def chart_target(chart):
    """Velocity every point should have in ``chart``."""
    if chart.kind == "canonical":
        return np.ones(chart.dim)
    if chart.kind == "flowbox":
        t = np.zeros(chart.dim)
        t[0] = 1.0
        return t
    raise ContractViolation(f"{chart.kind} charts have no constant target velocity")


def chart_velocity(chart, field, x):
    """Coordinate velocity ``J(x) P(x)`` (chain rule)."""
    x = np.asarray(x)
    guard = np.asarray(chart.domain_guard(x))
    bad = ~guard
    if np.any(bad):
        cols = np.flatnonzero(np.any(bad.reshape(-1, bad.shape[-1]), axis=0))
        names = [chart.guard_names[c] for c in cols]
        raise SingularPointError(
            f"{chart.name}: point outside chart domain (singular {', '.join(names)})", names
        )
    jac = chart.gradient(x)
    p = evaluate_field(field, x)
    return np.einsum("...kn,...n->...k", jac, p)


def evaluate_along(chart, states):
    """Chart values along an ordered sequence of states with log branches
    unwrapped, so the values are continuous along an orbit.
    """
    states = np.asarray(states)
    if chart.base is not None:
        return evaluate_along(chart.base, states) @ chart.rotation.T
    vals = np.array(chart.forward(states))
    if chart.periods is None:
        return vals
    for i, p in enumerate(np.asarray(chart.periods)):
        if p == 0:
            continue
        jumps = np.round(np.real(np.diff(vals[:, i]) / p))
        vals[1:, i] = vals[1:, i] - np.cumsum(jumps) * p
    return vals


# ---------------------------------------------------------------------------
# registered closed-form charts for nonlinear built-ins
# ---------------------------------------------------------------------------


def limit_cycle_charts():
    """Polar construction: ``r' = r(1 - r^2)``, ``theta' = 1``."""

    def polar(x):
        x = np.asarray(x)
        x1, x2 = x[..., 0], x[..., 1]
        return x1, x2, x1 * x1 + x2 * x2

    def split_fwd(x):
        x1, x2, r2 = polar(x)
        return np.stack([np.sqrt(r2), np.arctan2(x2, x1)], axis=-1)

    def split_grad(x):
        x1, x2, r2 = polar(x)
        r = np.sqrt(r2)
        return np.stack(
            [np.stack([x1 / r, x2 / r], -1), np.stack([-x2 / r2, x1 / r2], -1)], axis=-2
        )

    def split_guard(x):
        return (np.sqrt(polar(x)[2]) > GUARD_EPS)[..., None]

    def can_fwd(x):
        x1, x2, r2 = polar(x)
        return np.stack(
            [0.5 * np.log(r2) - 0.5 * np.log(np.abs(1.0 - r2)), np.arctan2(x2, x1)], axis=-1
        )

    def can_grad(x):
        x1, x2, r2 = polar(x)
        c = 1.0 / (r2 * (1.0 - r2))
        return np.stack(
            [np.stack([x1 * c, x2 * c], -1), np.stack([-x2 / r2, x1 / r2], -1)], axis=-2
        )

    def can_guard(x):
        _, _, r2 = polar(x)
        return np.stack([np.sqrt(r2) > GUARD_EPS, np.abs(1.0 - r2) > GUARD_EPS], axis=-1)

    split = CoordinateChart(
        "split", split_fwd, split_grad, split_guard, 2, ("r",), np.array([0.0, 2 * np.pi]),
        name="limit_cycle.split",
    )
    canonical = CoordinateChart(
        "canonical", can_fwd, can_grad, can_guard, 2, ("r", "1-r^2"),
        np.array([0.0, 2 * np.pi]), name="limit_cycle.canonical",
    )
    return {"split": split, "canonical": canonical, "flowbox": flowbox_chart(canonical)}


def brunton_charts(mu=BRUNTON_MU, lam=BRUNTON_LAMBDA):
    """Split by the eigenfunctions ``x1`` (rate mu) and ``x2 - c x1^2`` (rate lam)."""
    c = lam / (lam - 2.0 * mu)
    rates = np.array([mu, lam])

    def split_fwd(x):
        x = np.asarray(x)
        return np.stack([x[..., 0], x[..., 1] - c * x[..., 0] ** 2], axis=-1)

    def split_grad(x):
        x = np.asarray(x)
        one = np.ones_like(x[..., 0])
        return np.stack(
            [np.stack([one, 0 * one], -1), np.stack([-2 * c * x[..., 0], one], -1)], axis=-2
        )

    def can_fwd(x):
        return np.log(np.abs(split_fwd(x))) / rates

    def can_grad(x):
        y = split_fwd(x)
        return split_grad(x) / (rates * y)[..., :, None]

    def can_guard(x):
        return np.abs(split_fwd(x)) > _guard_scale(x)[..., None]

    split = CoordinateChart(
        "split", split_fwd, split_grad, _no_guard, 2, name="brunton.split",
        metadata={"eigenvalues": rates},
    )
    canonical = CoordinateChart(
        "canonical", can_fwd, can_grad, can_guard, 2, ("phi1", "phi2"), np.zeros(2),
        name="brunton.canonical", metadata={"eigenvalues": rates},
    )
    return {"split": split, "canonical": canonical, "flowbox": flowbox_chart(canonical)}


_NONLINEAR_CHARTS = {"limit_cycle": limit_cycle_charts, "brunton": brunton_charts}


def analytic_charts(system):
    """Split, canonical and flowbox charts for a built-in or linear system.

    ``system`` is a registry name, a :class:`VectorField` or a
    :class:`LinearSystem`. Raises ``KeyError`` for a nonlinear field that has
    no registered chart.
    """
    if isinstance(system, str):
        if system in _NONLINEAR_CHARTS:
            return _NONLINEAR_CHARTS[system]()
        system = get_system(system)
    if isinstance(system, VectorField) and system.matrix is None:
        if system.name in _NONLINEAR_CHARTS:
            return _NONLINEAR_CHARTS[system.name]()
        raise KeyError(f"no analytic chart registered for nonlinear system {system.name!r}")
    dec = eigendecompose(system)
    canonical = canonical_chart(dec)
    return {"split": split_chart(dec), "canonical": canonical, "flowbox": flowbox_chart(canonical)}


# ---------------------------------------------------------------------------
# level-set grid export
# ---------------------------------------------------------------------------

LEVELSET_COLUMNS = ("x1", "x2", "p1", "p2", "z1_re", "z1_im", "z2_re", "z2_im")


def levelset_rows(chart, field, points):
    """Rows ``x1,x2,p1,p2,z1_re,z1_im,z2_re,z2_im``; guarded-out points get NaN coordinates."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 2 or chart.dim != 2:
        raise ContractViolation("level-set grids are two-dimensional")
    p = np.real(evaluate_field(field, pts))
    z = np.full(pts.shape, complex(np.nan, np.nan))
    ok = chart.inside(pts)
    if np.any(ok):
        z[ok] = chart.forward(pts[ok])
    return np.column_stack([pts, p, z[:, 0].real, z[:, 0].imag, z[:, 1].real, z[:, 1].imag])


def write_levelset_csv(path, chart, field, points):
    rows = levelset_rows(chart, field, points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEVELSET_COLUMNS)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    return rows
