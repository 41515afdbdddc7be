"""Subordination functions of the free additive convolution.

For ``z`` in the upper half-plane, ``omega1(z)`` is the attracting fixed point
of

    f_z(w) = h_nu(h_mu(w) + z) + z,

and ``omega2(z) = h_mu(omega1(z)) + z``.  Then
``G_{mu+nu}(z) = G_mu(omega1(z)) = G_nu(omega2(z))``.  Real boundary values are
reached only as limits along a ladder of decreasing imaginary parts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, ConvergenceError, DomainError, PoleError
from .measure import (
    DENSITY_CUTOFF,
    SpectralMeasure,
    SupportSet,
    cauchy_transform,
    h_and_derivative,
    reciprocal_cauchy,
    support,
)

log = logging.getLogger(__name__)

FIXED_POINT_TOL = 1e-12
NEAR_AXIS_TOL = 1e-10
NEAR_AXIS = 1e-4
MAX_ITER = 10_000
DEFAULT_LADDER = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
_DAMPING = (1.0, 0.5, 0.1)
_STALL = 25


@dataclass(frozen=True)
class SubordinationPoint:
    """Subordination values at one point ``z`` with convergence metadata."""

    z: complex
    omega1: complex
    omega2: complex
    iterations: int
    residual: float
    derivative_product: complex


@dataclass(frozen=True)
class SubordinationGrid:
    """Vectorised counterpart of :class:`SubordinationPoint`."""

    z: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    derivative_product: np.ndarray
    converged: np.ndarray


def _map(mu, nu, w, z):
    hm, dhm = h_and_derivative(mu, w)
    w2 = hm + z
    hn, dhn = h_and_derivative(nu, w2)
    return hn + z, dhm * dhn, w2


def _tolerance(z):
    return np.where(np.abs(z.imag) < NEAR_AXIS, NEAR_AXIS_TOL, FIXED_POINT_TOL)


def _point_mass_grid(mu, nu, z):
    a, b = mu.point_mass_location, nu.point_mass_location
    if b is not None:
        w1 = z - b
        w2 = z - a if a is not None else np.asarray(reciprocal_cauchy(mu, w1)) + b
    else:
        w2 = z - a
        w1 = np.asarray(reciprocal_cauchy(nu, w2)) + a
    n = z.shape
    return SubordinationGrid(
        z, w1, w2, np.zeros(n, int), np.zeros(n), np.zeros(n, complex), np.ones(n, bool)
    )


def subordination_grid(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    z,
    init=None,
    max_iter: int = MAX_ITER,
) -> SubordinationGrid:
    """Solve for ``omega1, omega2`` at every point of ``z`` (all with ``Im z > 0``).

    The fixed-point map is iterated from ``init`` (default ``z``).  Each step
    first tries a Newton step on ``f_z(w) - w``; it is accepted only if it stays
    in the upper half-plane and lowers the residual, otherwise a plain (later
    damped) iteration step is taken.  Any fixed point in the open upper
    half-plane is the Denjoy-Wolff point, so Newton cannot select a wrong root.
    Points that do not converge are flagged in ``converged`` rather than raised.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
    if np.any(z.imag <= 0):
        raise DomainError("subordination_grid needs Im z > 0")
    if mu.is_point_mass or nu.is_point_mass:
        return _point_mass_grid(mu, nu, z)

    w = z.copy() if init is None else np.atleast_1d(np.asarray(init, dtype=complex)).ravel().copy()
    w = np.where(w.imag > 0, w, z)
    n = z.size
    tol = _tolerance(z)
    omega2 = np.full(n, np.nan, complex)
    iters = np.zeros(n, int)
    resid = np.full(n, np.inf)
    dprod = np.full(n, np.nan, complex)
    done = np.zeros(n, bool)
    level = np.zeros(n, int)
    best = np.full(n, np.inf)
    stall = np.zeros(n, int)

    active = np.arange(n)
    for it in range(max_iter + 1):
        if active.size == 0:
            break
        wa, za = w[active], z[active]
        f, dp, w2 = _map(mu, nu, wa, za)
        r = np.abs(f - wa)
        scale = np.maximum(1.0, np.abs(wa))
        ok = r <= tol[active] * scale
        fin = active[ok]
        omega2[fin] = w2[ok]
        resid[fin] = r[ok]
        dprod[fin] = dp[ok]
        iters[fin] = it
        done[fin] = True
        resid[active] = r
        if it == max_iter:
            break
        keep = ~ok
        active, wa, za, f, dp, r = active[keep], wa[keep], za[keep], f[keep], dp[keep], r[keep]
        if active.size == 0:
            break

        with np.errstate(all="ignore"):
            wn = wa - (f - wa) / (dp - 1.0)
        valid = np.isfinite(wn) & (wn.imag > 0)
        accept = np.zeros(active.size, bool)
        if np.any(valid):
            fn, _, _ = _map(mu, nu, wn[valid], za[valid])
            rn = np.abs(fn - wn[valid])
            accept[valid] = rn < r[valid]

        lam = np.asarray(_DAMPING)[level[active]]
        plain = (1.0 - lam) * wa + lam * f
        w[active] = np.where(accept, wn, plain)

        improved = r < 0.99 * best[active]
        best[active] = np.minimum(best[active], r)
        st = np.where(improved | accept, 0, stall[active] + 1)
        bump = st >= _STALL
        level[active] = np.where(bump, np.minimum(level[active] + 1, len(_DAMPING) - 1), level[active])
        stall[active] = np.where(bump, 0, st)

    if not np.all(done):
        # record the last iterate for diagnostics
        idx = np.flatnonzero(~done)
        _, dp, w2 = _map(mu, nu, w[idx], z[idx])
        omega2[idx] = w2
        dprod[idx] = dp
        iters[idx] = max_iter
    return SubordinationGrid(z, w, omega2, iters, resid, dprod, done)


def denjoy_wolff(mu: SpectralMeasure, nu: SpectralMeasure, z, init=None, max_iter: int = MAX_ITER):
    """Subordination point ``(omega1(z), omega2(z))`` for one non-real ``z``.

    Points in the lower half-plane are handled by reflection,
    ``omega(conj z) = conj omega(z)``.

    Raises
    ------
    DomainError
        If ``z`` is real; use :func:`omega_boundary` for real points.
    ConvergenceError
        If the iteration budget is exhausted.
    """
    z = complex(z)
    if z.imag == 0:
        raise DomainError("denjoy_wolff needs a non-real point; use omega_boundary on the real line")
    flip = z.imag < 0
    zz = z.conjugate() if flip else z
    ini = None if init is None else (complex(init).conjugate() if flip else complex(init))
    res = subordination_grid(mu, nu, zz, init=ini, max_iter=max_iter)
    if not res.converged[0]:
        raise ConvergenceError(f"fixed-point iteration did not converge at z={z!r} (residual {res.residual[0]:.3g})")
    w1, w2, dp = complex(res.omega1[0]), complex(res.omega2[0]), complex(res.derivative_product[0])
    if flip:
        w1, w2, dp = w1.conjugate(), w2.conjugate(), dp.conjugate()
    return SubordinationPoint(z, w1, w2, int(res.iterations[0]), float(res.residual[0]), dp)


def _reflect_solve(mu, nu, z):
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag == 0):
        raise DomainError("points must be non-real")
    flip = z.imag < 0
    zz = np.where(flip, np.conj(z), z)
    res = subordination_grid(mu, nu, zz.ravel())
    if not np.all(res.converged):
        bad = zz.ravel()[~res.converged][0]
        raise ConvergenceError(f"fixed-point iteration did not converge at z={complex(bad)!r}")
    w1 = res.omega1.reshape(z.shape)
    w2 = res.omega2.reshape(z.shape)
    return np.where(flip, np.conj(w1), w1), np.where(flip, np.conj(w2), w2)


def convolution_cauchy(mu: SpectralMeasure, nu: SpectralMeasure, z):
    """``G_{mu + nu}(z) = G_mu(omega1(z))`` for non-real ``z`` (scalar or array)."""
    arr = np.asarray(z, dtype=complex)
    w1, _ = _reflect_solve(mu, nu, arr)
    g = np.asarray(cauchy_transform(mu, w1))
    return complex(g) if arr.ndim == 0 else g


def _neville_at_zero(eps, vals):
    """Polynomial extrapolation of ``vals(eps)`` to ``eps = 0``."""
    eps = list(eps)
    p = [np.asarray(v) for v in vals]
    m = len(eps)
    for k in range(1, m):
        p = [(eps[i + k] * p[i] - eps[i] * p[i + 1]) / (eps[i + k] - eps[i]) for i in range(m - k)]
    return p[0]


def _ladder(mu, nu, x, ladder):
    """Continuation along ``x + i*eps`` for each rung; returns per-rung grids."""
    x = np.asarray(x, dtype=float).ravel()
    out = []
    init = None
    for eps in ladder:
        res = subordination_grid(mu, nu, x + 1j * eps, init=init)
        out.append(res)
        init = np.where(res.converged, res.omega1, x + 1j * eps)
    return out


def _check_ladder(ladder):
    ladder = tuple(float(e) for e in ladder)
    if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("epsilon ladder must be a nonempty strictly decreasing list of positive reals")
    return ladder


def convolution_density(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    grid,
    eps_ladder=DEFAULT_LADDER,
    extrapolate: bool = False,
):
    """Density of ``mu + nu`` (free additive convolution) on a real grid.

    The density is ``-Im G(x + i*eps) / pi`` at the last rung of
    ``eps_ladder``; earlier rungs serve as warm starts.  With
    ``extrapolate=True`` the last three rungs are extrapolated to ``eps = 0``.
    Negative values are clipped to zero.  Grid points whose fixed-point
    iteration fails are returned as NaN and logged.

    Returns
    -------
    x, density : ndarray
    """
    ladder = _check_ladder(eps_ladder)
    x = np.asarray(grid, dtype=float).ravel()
    rungs = _ladder(mu, nu, x, ladder)
    vals = [-np.imag(np.asarray(cauchy_transform(mu, r.omega1))) / np.pi for r in rungs]
    failed = ~rungs[-1].converged
    if extrapolate and len(ladder) >= 3:
        dens = _neville_at_zero(ladder[-3:], vals[-3:])
        failed |= ~rungs[-2].converged | ~rungs[-3].converged
    else:
        dens = vals[-1]
    dens = np.clip(dens, 0.0, None)
    if np.any(failed):
        log.warning("density: %d grid points did not converge", int(failed.sum()))
        dens = np.where(failed, np.nan, dens)
    return x, dens


def convolution_support(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    cutoff: float = DENSITY_CUTOFF,
    points: int = 2001,
    eps_ladder=DEFAULT_LADDER,
    xtol: float = 1e-6,
) -> SupportSet:
    """Numerical support of ``mu + nu``: where the extrapolated density exceeds ``cutoff``.

    A uniform grid over the Minkowski sum of the two hulls (padded by 5%) is
    scanned; each threshold crossing is refined by bisection to ``xtol``.
    """
    a, b = mu.point_mass_location, nu.point_mass_location
    if b is not None:
        return SupportSet(tuple((lo + b, hi + b) for lo, hi in support(mu).intervals))
    if a is not None:
        return SupportSet(tuple((lo + a, hi + a) for lo, hi in support(nu).intervals))
    (l1, h1), (l2, h2) = support(mu).hull, support(nu).hull
    lo, hi = l1 + l2, h1 + h2
    pad = 0.05 * (hi - lo) + 1e-3
    x = np.linspace(lo - pad, hi + pad, points)
    ladder = _check_ladder(eps_ladder)

    def dens(pts):
        _, d = convolution_density(mu, nu, pts, ladder, extrapolate=True)
        return np.nan_to_num(d, nan=np.inf)

    inside = dens(x) > cutoff
    if not np.any(inside):
        raise ConvergenceError("no grid point carries density above the cutoff")

    def refine(x_out, x_in):
        for _ in range(64):
            if abs(x_in - x_out) <= xtol:
                break
            mid = 0.5 * (x_in + x_out)
            if dens(np.array([mid]))[0] > cutoff:
                x_in = mid
            else:
                x_out = mid
        return x_in

    intervals = []
    i = 0
    while i < x.size:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < x.size and inside[j + 1]:
            j += 1
        left = refine(x[i - 1], x[i]) if i > 0 else x[i]
        right = refine(x[j + 1], x[j]) if j + 1 < x.size else x[j]
        intervals.append((left, right))
        i = j + 1
    return SupportSet(tuple(intervals))


def omega_boundary(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    x: float,
    eps_ladder=DEFAULT_LADDER,
    imag_tol: float = 1e-6,
) -> float:
    """Boundary value ``lim_{eps -> 0} omega1(x + i*eps)`` at a real ``x`` off the support.

    Returns ``math.inf`` when ``x`` is a pole of ``omega1``.

    Raises
    ------
    BoundaryError
        If the extrapolated imaginary part exceeds ``imag_tol`` (``x`` is in
        the support, or the ladder is too coarse).
    """
    x = float(x)
    a, b = mu.point_mass_location, nu.point_mass_location
    if b is not None:
        return x - b
    if a is not None:
        try:
            return float(np.real(reciprocal_cauchy(nu, x - a))) + a
        except PoleError:
            return math.inf
        except DomainError as exc:
            raise BoundaryError(str(exc)) from None
    ladder = _check_ladder(eps_ladder)
    rungs = _ladder(mu, nu, [x], ladder)
    if not all(r.converged[0] for r in rungs):
        raise BoundaryError(f"fixed-point iteration failed along the ladder at x={x!r}")
    w = np.array([r.omega1[0] for r in rungs])
    mags = np.abs(w)
    if len(w) >= 3 and np.all(mags[-2:] > 5.0 * mags[-3:-1]):
        return math.inf
    k = min(3, len(ladder))
    w0 = complex(_neville_at_zero(ladder[-k:], list(w[-k:])))
    if abs(w0.imag) > imag_tol * max(1.0, abs(w0.real)):
        raise BoundaryError(f"omega1 does not reach the real line at x={x!r} (Im = {w0.imag:.3g})")
    return w0.real
