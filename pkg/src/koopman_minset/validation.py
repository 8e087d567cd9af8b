"""Residual fields, foliation checks and chart comparison.

The flowbox error "with respect to the z_i axis" is measured as the variance,
over the guarded points of a rectangular grid, of the velocity residual in
coordinate ``i`` (``z_1' - 1`` and ``z_k'`` for ``k >= 2``). Every report
records the grid and this definition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import LinearSystem, VectorField, evaluate_field, find_equilibria, get_system
from .errors import ContractViolation, EmptyReportError
from .linear_analysis import chart_target
from .timemaps import KoopmanEigenfunction, independence_test, kef_pde_residual

RESIDUAL_ESTIMATOR = "population variance over guarded grid points of the chart velocity minus its target"


@dataclass(frozen=True)
class GridSpec:
    box: tuple
    resolution: tuple

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        res = self.resolution
        res = tuple(int(r) for r in res) if np.ndim(res) else (int(res),) * len(box)
        if len(res) != len(box):
            raise ContractViolation("one resolution per axis")
        if any(r < 2 for r in res) or any(not a < b for a, b in box):
            raise ContractViolation(f"need lo < hi and resolution >= 2, got {box}, {res}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "resolution", res)

    @property
    def dim(self):
        return len(self.box)

    def points(self):
        axes = [np.linspace(a, b, r) for (a, b), r in zip(self.box, self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def to_dict(self):
        return {"box": [list(a) for a in self.box], "resolution": list(self.resolution)}


def _stats(r):
    return {
        "mean": float(np.mean(r.real)),
        "mean_imag": float(np.mean(r.imag)) if np.iscomplexobj(r) else 0.0,
        "var": float(np.var(r)),
        "max_abs": float(np.max(np.abs(r))),
        "count": int(r.size),
    }


@dataclass(frozen=True)
class ResidualField:
    points: np.ndarray  # guarded points only
    residuals: np.ndarray  # (M, K) chart velocity minus target
    stats: tuple
    n_grid: int

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.residuals)))


def residual_field(chart, field, grid):
    """Chart velocity minus target at every guarded grid point, with per-coordinate stats."""
    pts = grid.points() if isinstance(grid, GridSpec) else np.asarray(grid, dtype=float)
    target = chart_target(chart)
    with np.errstate(all="ignore"):
        inside = chart.inside(pts)
    pts_in = pts[inside]
    if pts_in.shape[0] == 0:
        raise EmptyReportError(f"{chart.name}: no grid point lies inside the chart domain")
    jac = chart.gradient(pts_in)
    vel = np.einsum("mkn,mn->mk", jac, evaluate_field(field, pts_in))
    res = vel - target
    stats = tuple(_stats(res[:, i]) for i in range(res.shape[1]))
    return ResidualField(pts_in, res, stats, int(pts.shape[0]))


def write_residual_csv(path, rf):
    """``x1,x2,res_z1,res_z2``; complex residuals are written as their modulus."""
    res = rf.residuals
    vals = np.abs(res) if np.iscomplexobj(res) and np.any(res.imag != 0) else np.real(res)
    n, k = rf.points.shape[1], res.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(n)] + [f"res_z{i + 1}" for i in range(k)])
        for p, r in zip(rf.points, vals):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# foliation condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoliationWarning:
    label: str
    witness: tuple

    @property
    def message(self):
        w = ", ".join(f"{v:.6g}" for v in self.witness)
        return f"invariant set {self.label} intersects the patch (witness ({w}))"

    def to_dict(self):
        return {"label": self.label, "witness": list(self.witness), "message": self.message}


@dataclass(frozen=True)
class FoliationResult:
    warnings: tuple
    supported: bool = True
    notice: str = ""

    def to_dict(self):
        return {
            "supported": self.supported,
            "notice": self.notice,
            "warnings": [w.to_dict() for w in self.warnings],
        }


def _patch_bounds(patch):
    arr = np.asarray(patch, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ContractViolation(f"patch must be (lo, hi) pairs per axis, got {patch}")
    return arr[:, 0], arr[:, 1]


def _as_field(system):
    if isinstance(system, str):
        return get_system(system)
    if isinstance(system, LinearSystem):
        return system.field
    return system


def foliation_check(system, patch):
    """Warn for each registered invariant set meeting the closed patch.

    Linear systems carry the origin and the span of each real eigenvector;
    the limit cycle carries the origin and the circle r = 1.
    """
    f = _as_field(system)
    lo, hi = _patch_bounds(patch)
    if f.invariant_sets is None:
        return FoliationResult((), False, f"no invariant-set catalog registered for {f.name}")
    out = []
    for inv in f.invariant_sets:
        w = inv.witness(lo, hi)
        if w is not None:
            out.append(FoliationWarning(inv.label, tuple(float(v) for v in w)))
    return FoliationResult(tuple(out))


def equilibria_in_patch(field, lo, hi):
    """Equilibria found by Newton from the patch corners and centre that lie in the patch."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    n = lo.size
    corners = [np.where([(c >> k) & 1 for k in range(n)], hi, lo) for c in range(2**n)]
    rep = find_equilibria(field, corners + [0.5 * (lo + hi)])
    return [
        FoliationWarning("equilibrium", tuple(float(v) for v in p))
        for p in rep.points
        if np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12)
    ]


# ---------------------------------------------------------------------------
# chart comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChartAgreement:
    cosines: np.ndarray
    mean: float
    p5: float
    skipped: int
    component: int

    def to_dict(self):
        return {
            "component": self.component,
            "mean_abs_cos": self.mean,
            "p5_abs_cos": self.p5,
            "n_points": int(self.cosines.size),
            "skipped": self.skipped,
        }


def compare_charts(learned, analytic, grid, component=1, min_norm=1e-12):
    """Absolute cosine between the gradients of one coordinate of two charts.

    Learned charts agree with analytic ones only up to re-parameterization,
    so level-set directions, not values, are compared. The default compares
    the conserved coordinate ``z_2``.
    """
    if learned.dim != analytic.dim:
        raise ContractViolation("charts have different dimensions")
    pts = grid.points() if isinstance(grid, GridSpec) else np.asarray(grid, dtype=float)
    with np.errstate(all="ignore"):
        ok = learned.inside(pts) & analytic.inside(pts)
    pts = pts[ok]
    if pts.shape[0] == 0:
        raise EmptyReportError("charts share no guarded grid point")
    a = np.asarray(learned.gradient(pts))[:, component, :]
    b = np.asarray(analytic.gradient(pts))[:, component, :]
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    keep = (na > min_norm) & (nb > min_norm)
    cos = np.abs(np.einsum("mn,mn->m", a[keep], np.conj(b[keep]))) / (na[keep] * nb[keep])
    cos = np.minimum(cos, 1.0)
    if cos.size == 0:
        raise EmptyReportError("every compared gradient was numerically zero")
    return ChartAgreement(cos, float(cos.mean()), float(np.percentile(cos, 5)), int((~keep).sum()), component)


# ---------------------------------------------------------------------------
# Brunton lift
# ---------------------------------------------------------------------------


def brunton_eigenfunctions(mu, lam):
    """``phi1 = x1`` (rate mu) and ``phi2 = x2 - lam/(lam - 2 mu) x1^2`` (rate lam)."""
    if lam == 2.0 * mu:
        raise ContractViolation("lam = 2 mu is resonant: phi2 has no polynomial form")
    c = lam / (lam - 2.0 * mu)

    def g1(x):
        x = np.asarray(x)
        return np.stack([np.ones_like(x[..., 0]), np.zeros_like(x[..., 0])], axis=-1)

    def g2(x):
        x = np.asarray(x)
        return np.stack([-2.0 * c * x[..., 0], np.ones_like(x[..., 0])], axis=-1)

    phi1 = KoopmanEigenfunction(mu, lambda x: np.asarray(x)[..., 0], g1, name="phi1")
    phi2 = KoopmanEigenfunction(
        lam, lambda x: np.asarray(x)[..., 1] - c * np.asarray(x)[..., 0] ** 2, g2, name="phi2"
    )
    return phi1, phi2


def lift_jacobian(points):
    """Jacobian of ``(x1, x2, x1^2)``: rows ``(1,0)``, ``(0,1)``, ``(2 x1, 0)``."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    one, zero = np.ones(len(x)), np.zeros(len(x))
    return np.stack(
        [np.stack([one, zero], -1), np.stack([zero, one], -1), np.stack([2 * x[:, 0], zero], -1)],
        axis=1,
    )


def _ranks(mats, tol):
    sv = np.linalg.svd(mats, compute_uv=False)
    return np.sum(sv > tol * sv[:, :1], axis=1)


@dataclass(frozen=True)
class LiftRankReport:
    jacobian_ranks: np.ndarray
    gram_ranks: np.ndarray
    pair_ranks: dict
    dependent_pairs: tuple
    phi2_residual: float
    mu: float
    lam: float

    def to_dict(self):
        return {
            "mu": self.mu,
            "lam": self.lam,
            "jacobian_ranks": self.jacobian_ranks.tolist(),
            "gram_ranks": self.gram_ranks.tolist(),
            "dependent_pairs": [list(p) for p in self.dependent_pairs],
            "phi2_residual": self.phi2_residual,
        }


def lifted_rank_demo(points, mu=-0.05, lam=-1.0, svd_tol=1e-8):
    """Rank of the lift's gradients: at most 2, with ``y1`` and ``y3`` colinear."""
    from .dynamics import brunton_field

    x = np.atleast_2d(np.asarray(points, dtype=float))
    if len(np.unique(x, axis=0)) < 3 or np.any(x[:, 0] == 0):
        raise ContractViolation("need at least 3 distinct points with x1 != 0")
    jac = lift_jacobian(x)
    gram = np.einsum("mkn,mjn->mkj", jac, jac)
    pair_ranks = {}
    for i in range(3):
        for j in range(i + 1, 3):
            pair_ranks[(i, j)] = _ranks(jac[:, [i, j], :], svd_tol)
    dependent = tuple(p for p, r in pair_ranks.items() if np.all(r < 2))
    _, phi2 = brunton_eigenfunctions(mu, lam)
    res = kef_pde_residual(phi2, brunton_field(mu, lam), x)
    return LiftRankReport(
        _ranks(jac, svd_tol), _ranks(gram, svd_tol), pair_ranks, dependent, float(res.max()), mu, lam
    )


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    unit_residual_stats: tuple
    independence: Optional[object]
    foliation: FoliationResult
    comparison: Optional[ChartAgreement] = None
    grid: Optional[GridSpec] = None
    metadata: dict = field(default_factory=dict)

    @property
    def foliation_warnings(self):
        return self.foliation.warnings

    def variances(self):
        return [s["var"] for s in self.unit_residual_stats]

    def meets(self, thresholds):
        """``thresholds`` maps coordinate index (0-based) to the maximum variance."""
        v = self.variances()
        return all(v[i] <= t for i, t in thresholds.items())

    def to_dict(self):
        return {
            "unit_residual_stats": list(self.unit_residual_stats),
            "estimator": RESIDUAL_ESTIMATOR,
            "grid": self.grid.to_dict() if self.grid else None,
            "independence": self.independence.to_dict() if self.independence else None,
            "foliation": self.foliation.to_dict(),
            "comparison": self.comparison.to_dict() if self.comparison else None,
            "metadata": self.metadata,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def validate_chart(chart, field, grid, analytic=None, independence_points=None, svd_tol=1e-8):
    """Residual stats, independence of the chart components, foliation
    warnings for the grid box and, when ``analytic`` is given, gradient
    agreement with it.
    """
    rf = residual_field(chart, field, grid)
    indep = None
    if independence_points is not None:
        comps = [lambda x, i=i: np.asarray(chart.gradient(x))[..., i, :] for i in range(chart.dim)]
        indep = independence_test(comps, independence_points, svd_tol)
    comp = compare_charts(chart, analytic, grid) if analytic is not None else None
    fol = foliation_check(field, grid.box)
    return ValidationReport(
        rf.stats, indep, fol, comp, grid,
        {"guarded_points": int(rf.points.shape[0]), "grid_points": rf.n_grid, "chart": chart.name},
    )
