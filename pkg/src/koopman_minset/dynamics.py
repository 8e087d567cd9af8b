"""Vector fields, built-in example systems, orbit integration and equilibria.

States are numpy arrays whose last axis has length ``dim``; every field
evaluator is vectorized over leading axes, so a ``(M, N)`` batch of points
returns a ``(M, N)`` batch of velocities. Complex states are accepted
everywhere (real systems simply carry zero imaginary parts).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, DivergenceError


# ---------------------------------------------------------------------------
# invariant-set catalog (consumed by the foliation check)
# ---------------------------------------------------------------------------


def _as_box(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or np.any(lo > hi):
        raise ContractViolation(f"bad box lo={lo} hi={hi}")
    return lo, hi


@dataclass(frozen=True)
class InvariantPoint:
    point: np.ndarray
    label: str

    def witness(self, lo, hi):
        lo, hi = _as_box(lo, hi)
        p = np.asarray(self.point, dtype=float)
        if np.all(p >= lo) and np.all(p <= hi):
            return p.copy()
        return None


@dataclass(frozen=True)
class InvariantLine:
    """The line ``{s * direction}`` through the origin (a real eigen-direction)."""

    direction: np.ndarray
    label: str

    def witness(self, lo, hi):
        lo, hi = _as_box(lo, hi)
        v = np.asarray(self.direction, dtype=float)
        s_lo, s_hi = -np.inf, np.inf
        for k in range(v.size):
            if abs(v[k]) < 1e-15:
                if not (lo[k] <= 0.0 <= hi[k]):
                    return None
                continue
            a, b = sorted((lo[k] / v[k], hi[k] / v[k]))
            s_lo, s_hi = max(s_lo, a), min(s_hi, b)
        if s_lo > s_hi + 1e-12:
            return None
        return 0.5 * (s_lo + s_hi) * v


@dataclass(frozen=True)
class InvariantSphere:
    """The sphere ``|x - center| = radius`` (circle in 2D)."""

    center: np.ndarray
    radius: float
    label: str

    def witness(self, lo, hi):
        lo, hi = _as_box(lo, hi)
        c = np.asarray(self.center, dtype=float)
        near = np.clip(c, lo, hi)
        far = np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi)
        d_near = np.linalg.norm(near - c)
        d_far = np.linalg.norm(far - c)
        if not (d_near <= self.radius <= d_far):
            return None
        # the segment near->far stays in the (convex) box; bisect for |x-c| = radius
        a, b = 0.0, 1.0
        for _ in range(80):
            m = 0.5 * (a + b)
            if np.linalg.norm(near + m * (far - near) - c) < self.radius:
                a = m
            else:
                b = m
        return near + 0.5 * (a + b) * (far - near)


@dataclass(frozen=True)
class InvariantZeroSet:
    """Zero set of a scalar function, detected by sign changes on a grid."""

    fn: Callable[[np.ndarray], np.ndarray]
    label: str
    resolution: int = 201

    def witness(self, lo, hi):
        lo, hi = _as_box(lo, hi)
        axes = [np.linspace(a, b, self.resolution) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        vals = np.real(self.fn(pts))
        if vals.min() > 0.0 or vals.max() < 0.0:
            return None
        return pts[np.argmin(np.abs(vals))]


def _line_label(v):
    v = np.asarray(v, dtype=float)
    if v.size != 2:
        return "span(" + ",".join(f"{c:.6g}" for c in v) + ")"
    if abs(v[0]) < 1e-12:
        return "x1=0"
    if abs(v[1]) < 1e-12:
        return "x2=0"
    ratio = v[1] / v[0]
    if abs(ratio - 1.0) < 1e-9:
        return "x1=x2"
    if abs(ratio + 1.0) < 1e-9:
        return "x1=-x2"
    return f"x2={ratio:.6g}*x1"


def linear_invariant_sets(matrix_a):
    """Origin plus the span of every real eigenvector of ``matrix_a``."""
    a = np.asarray(matrix_a, dtype=float)
    sets = [InvariantPoint(np.zeros(a.shape[0]), "origin")]
    lam, vecs = np.linalg.eig(a)
    for k in range(lam.size):
        if abs(lam[k].imag) > 1e-12:
            continue
        v = np.real(vecs[:, k])
        v = v / np.linalg.norm(v)
        sets.append(InvariantLine(v, _line_label(v)))
    return tuple(sets)


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorField:
    """Autonomous field ``x' = P(x)``.

    ``invariant_sets`` is the registered catalog used by the foliation check;
    ``None`` means no catalog is known for this field.
    """

    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    analytic_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "field"
    matrix: Optional[np.ndarray] = None
    invariant_sets: Optional[tuple] = None
    lifted_dim: Optional[int] = None

    def __call__(self, x):
        return evaluate_field(self, x)

    def jacobian(self, x, h=1e-6):
        """Analytic Jacobian when registered, central differences otherwise."""
        x = _check_state(self, x)
        if self.analytic_jacobian is not None:
            return np.asarray(self.analytic_jacobian(x))
        return fd_jacobian(self.eval, x, h)


@dataclass(frozen=True)
class LinearSystem:
    matrix_a: np.ndarray
    name: str = "linear"

    def __post_init__(self):
        a = np.asarray(self.matrix_a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolation(f"matrix must be square, got shape {a.shape}")
        object.__setattr__(self, "matrix_a", a)

    @property
    def dim(self):
        return self.matrix_a.shape[0]

    @property
    def field(self):
        a = self.matrix_a
        return VectorField(
            dim=a.shape[0],
            eval=lambda x: x @ a.T,
            analytic_jacobian=lambda x: np.broadcast_to(a, np.shape(x)[:-1] + a.shape),
            name=self.name,
            matrix=a,
            invariant_sets=linear_invariant_sets(a),
        )


def _check_state(field, x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != field.dim:
        raise ContractViolation(
            f"{field.name}: state has shape {x.shape}, expected last axis {field.dim}"
        )
    return x


def as_field(system):
    """Accept a :class:`VectorField` or a :class:`LinearSystem`."""
    return system.field if isinstance(system, LinearSystem) else system


def evaluate_field(field, x):
    """Velocity ``P(x)``; ``x`` may be a single state or a batch."""
    field = as_field(field)
    x = _check_state(field, x)
    out = np.asarray(field.eval(x))
    if out.shape != x.shape:
        raise ContractViolation(f"{field.name}: eval returned shape {out.shape} for {x.shape}")
    return out


def fd_jacobian(fn, x, h=1e-6):
    """Central-difference Jacobian ``d fn_i / d x_j`` with shape ``(..., M, N)``."""
    x = np.asarray(x)
    n = x.shape[-1]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# built-in systems
# ---------------------------------------------------------------------------

LINEAR_REAL = 0.5 * np.array([[11.0, -5.0], [-5.0, 11.0]])
LINEAR_COMPLEX = 0.1 * np.array([[-4.0, 1.0], [-4.0, -5.0]])
LINEAR_IMAGINARY = np.array([[0.0, 1.0], [-1.0, 0.0]])

BRUNTON_MU = -0.05
BRUNTON_LAMBDA = -1.0


def limit_cycle_field():
    def rhs(x):
        x1, x2 = x[..., 0], x[..., 1]
        s = 1.0 - x1 * x1 - x2 * x2
        return np.stack([-x2 + x1 * s, x1 + x2 * s], axis=-1)

    def jac(x):
        x1, x2 = x[..., 0], x[..., 1]
        s = 1.0 - x1 * x1 - x2 * x2
        row1 = np.stack([s - 2 * x1 * x1, -1.0 - 2 * x1 * x2], axis=-1)
        row2 = np.stack([1.0 - 2 * x1 * x2, s - 2 * x2 * x2], axis=-1)
        return np.stack([row1, row2], axis=-2)

    sets = (
        InvariantPoint(np.zeros(2), "origin"),
        InvariantSphere(np.zeros(2), 1.0, "r=1"),
    )
    return VectorField(2, rhs, jac, name="limit_cycle", invariant_sets=sets)


def brunton_field(mu=BRUNTON_MU, lam=BRUNTON_LAMBDA):
    """``x1' = mu x1``, ``x2' = lam (x2 - x1^2)``."""

    def rhs(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([mu * x1, lam * (x2 - x1 * x1)], axis=-1)

    def jac(x):
        x1 = x[..., 0]
        zero = np.zeros_like(x1)
        row1 = np.stack([zero + mu, zero], axis=-1)
        row2 = np.stack([-2.0 * lam * x1, zero + lam], axis=-1)
        return np.stack([row1, row2], axis=-2)

    c = lam / (lam - 2.0 * mu)
    sets = (
        InvariantPoint(np.zeros(2), "origin"),
        InvariantLine(np.array([0.0, 1.0]), "x1=0"),
        InvariantZeroSet(lambda x: x[..., 1] - c * x[..., 0] ** 2, f"x2={c:.6g}*x1^2"),
    )
    return VectorField(2, rhs, jac, name="brunton", invariant_sets=sets, lifted_dim=3)


def brunton_lifted(mu=BRUNTON_MU, lam=BRUNTON_LAMBDA):
    """Linear system on the lift ``(x1, x2, x1^2)``."""
    a = np.array([[mu, 0.0, 0.0], [0.0, lam, -lam], [0.0, 0.0, 2.0 * mu]])
    return LinearSystem(a, name="brunton_lifted")


_BUILDERS = {
    "linear_real": lambda: LinearSystem(LINEAR_REAL, "linear_real").field,
    "linear_complex": lambda: LinearSystem(LINEAR_COMPLEX, "linear_complex").field,
    "linear_imaginary": lambda: LinearSystem(LINEAR_IMAGINARY, "linear_imaginary").field,
    "limit_cycle": limit_cycle_field,
    "brunton": brunton_field,
}

SYSTEM_NAMES = tuple(_BUILDERS)
WORKED_SYSTEMS = ("linear_real", "linear_complex", "linear_imaginary", "limit_cycle")


def get_system(name):
    """Built-in field by registry name."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {', '.join(SYSTEM_NAMES)}") from None


def describe_system(name):
    f = get_system(name)
    if f.lifted_dim:
        return f"{name} (N={f.dim}, lifted N={f.lifted_dim})"
    return f"{name} (N={f.dim})"


# ---------------------------------------------------------------------------
# orbits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Orbit:
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray

    @property
    def dim(self):
        return self.states.shape[-1]


def rk4_step(rhs, x, h):
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_orbit(field, x0, t_end, steps):
    """Fixed-step classical RK4 on a uniform grid of ``steps + 1`` samples."""
    if steps < 1 or not t_end > 0:
        raise ContractViolation(f"need steps >= 1 and t_end > 0, got {steps}, {t_end}")
    field = as_field(field)
    x0 = _check_state(field, x0)
    dtype = np.complex128 if np.iscomplexobj(x0) else np.float64
    x = x0.astype(dtype)
    times = np.linspace(0.0, float(t_end), int(steps) + 1)
    h = float(t_end) / int(steps)
    states = np.empty((int(steps) + 1,) + x.shape, dtype=dtype)
    states[0] = x
    for k in range(int(steps)):
        with np.errstate(over="ignore", invalid="ignore"):
            x = rk4_step(field.eval, x, h)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"{field.name}: non-finite state after t={times[k]:.6g}", where=times[k]
            )
        states[k + 1] = x
    return Orbit(x0=x0.copy(), times=times, states=states)


def orbit_to_csv(orbit, path):
    """Write ``t,x1,...,xN``; complex coordinates are written as Python complex literals."""
    real = not np.iscomplexobj(orbit.states) or np.all(orbit.states.imag == 0)
    header = ["t"] + [f"x{i + 1}" for i in range(orbit.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, s in zip(orbit.times, orbit.states):
            vals = np.real(s) if real else s
            w.writerow([repr(float(t))] + [repr(v.item()) for v in vals])


# ---------------------------------------------------------------------------
# equilibria and simple-orbit check
# ---------------------------------------------------------------------------

EQUILIBRIUM_TOL = 1e-10


@dataclass(frozen=True)
class EquilibriumReport:
    points: tuple
    residuals: tuple
    seeds: tuple
    converged: tuple


def _newton(field, seed, max_iter=100, tol=EQUILIBRIUM_TOL):
    x = np.asarray(seed, dtype=float).copy()
    r = evaluate_field(field, x)
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn <= tol:
            return x, rn, True
        jac = field.jacobian(x)
        dx = np.linalg.lstsq(jac, -r, rcond=None)[0]
        step = 1.0
        while True:
            x_new = x + step * dx
            r_new = evaluate_field(field, x_new)
            rn_new = np.linalg.norm(r_new)
            if np.isfinite(rn_new) and rn_new <= rn:
                break
            step *= 0.5
            if step < 1e-12:
                return x, rn, False
        x, r, rn = x_new, r_new, rn_new
    return x, rn, bool(rn <= tol)


def find_equilibria(field, seeds: Sequence, dedup=1e-8):
    """Damped Newton from every seed; converged roots are deduplicated."""
    field = as_field(field)
    seeds = [np.asarray(s, dtype=float) for s in seeds]
    if not seeds:
        raise ContractViolation("find_equilibria needs at least one seed")
    points, residuals, flags = [], [], []
    for s in seeds:
        _check_state(field, s)
        x, rn, ok = _newton(field, s)
        flags.append(ok)
        if not ok:
            continue
        if any(np.linalg.norm(x - p) < dedup for p in points):
            continue
        points.append(x)
        residuals.append(float(rn))
    return EquilibriumReport(tuple(points), tuple(residuals), tuple(seeds), tuple(flags))


@dataclass(frozen=True)
class OrbitViolation:
    kind: str  # "revisit" or "equilibrium"
    index: int
    other: Optional[int] = None


def is_simple_orbit(orbit, tol, field=None):
    """Check that a sampled orbit is a simple curve free of equilibria.

    Two samples count as a self-intersection when they are closer than
    ``tol`` while the polyline between them is longer than ``2 * tol``, which
    keeps consecutive samples of a finely resolved curve from tripping the test.
    Velocities come from ``field`` when given, otherwise from finite
    differences of the samples.

    Returns ``(is_simple, first_violation_or_None)``.
    """
    states = np.asarray(orbit.states)
    if states.shape[0] < 2:
        raise ContractViolation("orbit needs at least two samples")
    pts = np.concatenate([states.real, states.imag], axis=-1) if np.iscomplexobj(states) else states
    if field is not None:
        vel = evaluate_field(field, states)
    else:
        vel = np.gradient(states, orbit.times, axis=0)
    speed = np.linalg.norm(vel, axis=-1)
    slow = np.flatnonzero(speed < tol)
    first_eq = int(slow[0]) if slow.size else None

    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=-1))])
    first_rev = None
    for i, j in cKDTree(pts).query_pairs(tol):
        i, j = min(i, j), max(i, j)
        if arc[j] - arc[i] > 2.0 * tol and (first_rev is None or (j, i) < (first_rev[1], first_rev[0])):
            first_rev = (i, j)

    cands = []
    if first_eq is not None:
        cands.append(OrbitViolation("equilibrium", first_eq))
    if first_rev is not None:
        cands.append(OrbitViolation("revisit", first_rev[1], first_rev[0]))
    if not cands:
        return True, None
    return False, min(cands, key=lambda v: v.index)
