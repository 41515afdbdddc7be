"""Outlier locations for the spiked model ``A_N + U* B_N U``.

A spike ``theta`` (an isolated eigenvalue of ``A_N`` off ``supp(mu)``) produces
outliers at the real solutions ``rho`` off ``supp(mu + nu)`` of
``omega1(rho) = theta``.  When neither measure is a point mass these are the
roots of

    h_nu(h_mu(theta) + rho) - theta + rho = 0

for which ``0 < h_mu'(theta) * h_nu'(h_mu(theta) + rho) < 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, FamilyError, PoleError
from .measure import (
    SpectralMeasure,
    SupportSet,
    cauchy_derivative,
    cauchy_transform,
    closed_form_r,
    closed_form_r_derivative,
    h_derivative,
    h_transform,
    support,
)
from .subordination import convolution_support, omega_boundary

log = logging.getLogger(__name__)

ROOT_TOL = 1e-10
ADMISSIBLE = (1e-12, 1.0 - 1e-9)
SCAN_MARGIN = 1e-4
UNRESOLVABLE = 1e-6
MERGE_TOL = 1e-9
SPIKE_MARGIN = 1e-9
CROSS_CHECK_TOL = 1e-5


@dataclass(frozen=True)
class SpikeSet:
    """Spiked eigenvalues ``theta_1 > ... > theta_J`` with multiplicities."""

    spikes: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        sp = tuple((float(t), int(k)) for t, k in self.spikes)
        for t, k in sp:
            if k < 1 or not math.isfinite(t):
                raise ValueError(f"invalid spike ({t}, {k})")
        if any(b[0] >= a[0] for a, b in zip(sp, sp[1:])):
            raise ValueError("spikes must be strictly decreasing in theta")
        object.__setattr__(self, "spikes", sp)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "SpikeSet":
        """Sort by decreasing theta and merge repeated values."""
        acc: dict[float, int] = {}
        for t, k in pairs:
            acc[float(t)] = acc.get(float(t), 0) + int(k)
        return cls(tuple(sorted(acc.items(), key=lambda p: -p[0])))

    @property
    def thetas(self) -> list[float]:
        return [t for t, _ in self.spikes]

    @property
    def rank(self) -> int:
        return sum(k for _, k in self.spikes)

    def diagonal(self) -> np.ndarray:
        """Spikes repeated by multiplicity, in decreasing order."""
        return np.repeat([t for t, _ in self.spikes], [k for _, k in self.spikes]).astype(float)

    def check_outside(self, mu: SpectralMeasure, margin: float = SPIKE_MARGIN):
        S = support(mu)
        for t, _ in self.spikes:
            if S.distance(t) <= margin:
                raise DomainError(f"spike {t} is not outside the support of {mu!r}")

    def __len__(self):
        return len(self.spikes)


@dataclass(frozen=True)
class OutlierPrediction:
    """A predicted outlier location ``rho`` generated by spike ``theta``."""

    rho: float
    theta: float
    multiplicity: int
    derivative_product: float
    residual: float
    distance_to_support: float


CSV_HEADER = "rho,theta,multiplicity,derivative_product,residual,distance_to_support"


def prediction_rows(preds: Sequence[OutlierPrediction]) -> list[str]:
    return [
        f"{p.rho:.12g},{p.theta:.12g},{p.multiplicity},{p.derivative_product:.12g},{p.residual:.6g},{p.distance_to_support:.12g}"
        for p in preds
    ]


# ---------------------------------------------------------------------------
# the spike equation
# ---------------------------------------------------------------------------


def _real(v):
    return np.real(v) if isinstance(v, np.ndarray) else float(np.real(v))


def spike_residual(mu: SpectralMeasure, nu: SpectralMeasure, theta: float, rho):
    """``h_nu(h_mu(theta) + rho) - theta + rho`` (vectorised in ``rho``).

    Raises
    ------
    DomainError
        If ``theta`` lies in ``supp(mu)``, or ``h_mu(theta) + rho`` lies in
        ``supp(nu)`` or at a pole of ``F_nu``.
    """
    c = _real(h_transform(mu, float(theta)))
    rho = np.asarray(rho, dtype=float)
    try:
        hn = _real(h_transform(nu, c + rho))
    except PoleError as exc:
        raise DomainError(str(exc)) from None
    out = hn - theta + rho
    return float(out) if np.ndim(out) == 0 else out


def derivative_product(mu: SpectralMeasure, nu: SpectralMeasure, theta: float, rho):
    """``h_mu'(theta) * h_nu'(h_mu(theta) + rho)``."""
    c = _real(h_transform(mu, float(theta)))
    dm = _real(h_derivative(mu, float(theta)))
    rho = np.asarray(rho, dtype=float)
    try:
        dn = _real(h_derivative(nu, c + rho))
    except PoleError as exc:
        raise DomainError(str(exc)) from None
    out = dm * dn
    return float(out) if np.ndim(out) == 0 else out


def safeguarded_newton(f, df, a, b, fa=None, fb=None, ftol=1e-14, maxiter=200):
    """Root of ``f`` in the sign-change bracket ``[a, b]``.

    Newton steps are taken while they stay strictly inside the current
    bracket; otherwise the bracket is bisected.  Returns ``(x, f(x))``.
    """
    fa = f(a) if fa is None else fa
    fb = f(b) if fb is None else fb
    if fa == 0:
        return a, 0.0
    if fb == 0:
        return b, 0.0
    if np.sign(fa) == np.sign(fb):
        raise ValueError("bracket does not change sign")
    x = 0.5 * (a + b)
    fx = f(x)
    for _ in range(maxiter):
        if abs(fx) <= ftol or (b - a) <= 4e-16 * max(1.0, abs(x)):
            break
        if np.sign(fx) == np.sign(fa):
            a, fa = x, fx
        else:
            b, fb = x, fx
        d = df(x)
        xn = x - fx / d if d != 0 and math.isfinite(d) else math.nan
        if not (a < xn < b):
            xn = 0.5 * (a + b)
        x, fx = xn, f(xn)
    # the best endpoint can beat the last iterate
    best = min(((x, fx), (a, fa), (b, fb)), key=lambda p: abs(p[1]))
    return best


def _zeros_of_g(nu: SpectralMeasure, S: SupportSet) -> list[float]:
    """Zeros of ``G_nu`` on the real line: at most one per bounded gap."""
    zeros = []
    for c, d in S.gaps():
        off = 1e-10 * max(1.0, abs(c), abs(d))
        lo, hi = c + off, d - off
        if hi <= lo:
            continue
        g = lambda x: float(np.real(cauchy_transform(nu, x)))
        glo, ghi = g(lo), g(hi)
        if glo > 0 > ghi:
            dg = lambda x: float(np.real(cauchy_derivative(nu, x)))
            x, _ = safeguarded_newton(g, dg, lo, hi, glo, ghi, ftol=0.0)
            zeros.append(x)
    return zeros


def analytic_pieces(nu: SpectralMeasure, lo: float, hi: float) -> list[tuple[float, float]]:
    """Open intervals of ``[lo, hi]`` on which ``h_nu`` is real analytic.

    These are the components of the complement of ``supp(nu)``, further split at
    the real poles of ``F_nu`` (zeros of ``G_nu``).
    """
    S = support(nu)
    cuts = [-math.inf]
    for a, b in S.intervals:
        cuts += [a, b]
    cuts.append(math.inf)
    comps = [(cuts[i], cuts[i + 1]) for i in range(0, len(cuts), 2)]
    poles = _zeros_of_g(nu, S)
    pieces = []
    for a, b in comps:
        pts = [a] + [p for p in poles if a < p < b] + [b]
        for u, v in zip(pts, pts[1:]):
            u, v = max(u, lo), min(v, hi)
            if v > u:
                pieces.append((u, v))
    return pieces


def _subtract(intervals, holes: SupportSet):
    out = []
    for a, b in intervals:
        cur = [(a, b)]
        for ha, hb in holes.intervals:
            nxt = []
            for u, v in cur:
                if hb <= u or ha >= v:
                    nxt.append((u, v))
                    continue
                if ha > u:
                    nxt.append((u, ha))
                if hb < v:
                    nxt.append((hb, v))
            cur = nxt
        out += cur
    return out


def default_window(K: SupportSet, thetas: Sequence[float]) -> tuple[float, float]:
    lo, hi = K.hull
    diam = max(K.diameter, 1e-3)
    lo, hi = lo - 3 * diam, hi + 3 * diam
    if thetas:
        lo = min(lo, min(thetas) - diam)
        hi = max(hi, max(thetas) + diam)
    return lo, hi


def _merge_close(preds: list[OutlierPrediction]) -> list[OutlierPrediction]:
    preds = sorted(preds, key=lambda p: (p.theta, p.rho))
    out: list[OutlierPrediction] = []
    for p in preds:
        if out and out[-1].theta == p.theta and abs(out[-1].rho - p.rho) <= MERGE_TOL:
            if abs(p.residual) < abs(out[-1].residual):
                out[-1] = p
            continue
        out.append(p)
    return out


def _roots_for_spike(mu, nu, theta, k, window, K, grid_step):
    c = _real(h_transform(mu, theta))
    dm = _real(h_derivative(mu, theta))
    w_pieces = analytic_pieces(nu, window[0] + c, window[1] + c)
    rho_pieces = [(a - c, b - c) for a, b in w_pieces]
    rho_pieces = _subtract(rho_pieces, K.enlarge(SCAN_MARGIN))

    def f(r):
        return float(spike_residual(mu, nu, theta, r))

    def df(r):
        return float(np.real(h_derivative(nu, c + r))) + 1.0

    found = []
    for a, b in rho_pieces:
        off = 1e-10 * max(1.0, abs(a), abs(b))
        a, b = a + off, b - off
        if b <= a:
            continue
        n = max(3, int(math.ceil((b - a) / grid_step)) + 1)
        r = np.linspace(a, b, n)
        with np.errstate(all="ignore"):
            try:
                vals = spike_residual(mu, nu, theta, r)
            except DomainError:
                log.debug("piece (%g, %g) touches the domain boundary; skipped", a, b)
                continue
        finite = np.isfinite(vals)
        for i in range(n - 1):
            if not (finite[i] and finite[i + 1]):
                continue
            if vals[i] == 0 or np.sign(vals[i]) != np.sign(vals[i + 1]):
                if vals[i + 1] == 0:
                    continue
                try:
                    x, fx = safeguarded_newton(f, df, r[i], r[i + 1], vals[i], vals[i + 1])
                except DomainError:
                    log.info("refinement left the domain near rho=%g; dropped", r[i])
                    continue
                if not abs(fx) < ROOT_TOL:
                    log.info("bracket near rho=%g failed to refine (|res|=%.3g); dropped", x, abs(fx))
                    continue
                dp = dm * (float(np.real(h_derivative(nu, c + x))))
                if not ADMISSIBLE[0] < dp < ADMISSIBLE[1]:
                    log.info("root rho=%.10g of spike %g rejected: derivative product %.6g", x, theta, dp)
                    continue
                dist = float(K.distance(x))
                if dist <= UNRESOLVABLE:
                    log.info("root rho=%.10g too close to the support; dropped", x)
                    continue
                found.append(OutlierPrediction(float(x), theta, k, float(dp), float(fx), dist))
    return found


def solve_outliers(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    spikes: SpikeSet,
    window: tuple[float, float] | None = None,
    grid_step: float | None = None,
    K: SupportSet | None = None,
    cross_check: bool = True,
) -> list[OutlierPrediction]:
    """Predicted outliers for every spike, sorted by location.

    Parameters
    ----------
    mu, nu : SpectralMeasure
        Limiting spectral laws of the bulk of ``A_N`` and of ``B_N``.
    spikes : SpikeSet
    window : (float, float), optional
        Real interval scanned for roots.  Defaults to the hull of the
        convolution support inflated by three diameters, widened to contain
        every spike.
    grid_step : float, optional
        Scan resolution; defaults to ``diameter / 2000``.
    K : SupportSet, optional
        Precomputed ``supp(mu + nu)``; computed when omitted.
    cross_check : bool
        Compare ``omega_boundary(rho)`` with ``theta`` for each prediction
        and log disagreements above ``1e-5``.

    Notes
    -----
    Point-mass inputs are routed to :func:`outliers_point_mass` (``mu``) or
    solved as a translation (``nu``).  Roots are refined to ``|res| < 1e-10``;
    roots whose derivative product lies outside ``(1e-12, 1 - 1e-9)`` or that
    sit within ``1e-6`` of ``K`` are discarded.
    """
    if not isinstance(spikes, SpikeSet):
        spikes = SpikeSet.from_pairs(spikes)
    if len(spikes) == 0:
        return []
    spikes.check_outside(mu)
    a = mu.point_mass_location
    if a is not None:
        return outliers_point_mass(nu, spikes, a=a)
    b = nu.point_mass_location
    if b is not None:
        Kb = SupportSet(tuple((lo + b, hi + b) for lo, hi in support(mu).intervals))
        preds = [
            OutlierPrediction(t + b, t, k, 0.0, 0.0, float(Kb.distance(t + b)))
            for t, k in spikes.spikes
        ]
        return sorted(preds, key=lambda p: p.rho)

    if K is None:
        K = convolution_support(mu, nu)
    if window is None:
        window = default_window(K, spikes.thetas)
    if grid_step is None:
        grid_step = max(K.diameter, 1e-3) / 2000.0
    preds = []
    for theta, k in spikes.spikes:
        preds += _roots_for_spike(mu, nu, theta, k, window, K, grid_step)
    preds = _merge_close(preds)
    if cross_check:
        for p in preds:
            try:
                w = omega_boundary(mu, nu, p.rho)
            except Exception as exc:  # diagnostics only
                log.warning("cross-check failed at rho=%.10g: %s", p.rho, exc)
                continue
            if not abs(w - p.theta) <= CROSS_CHECK_TOL:
                log.warning("omega(rho=%.10g)=%.10g differs from theta=%g", p.rho, w, p.theta)
    return sorted(preds, key=lambda p: (p.rho, -p.theta))


# ---------------------------------------------------------------------------
# closed-form special cases
# ---------------------------------------------------------------------------


def subordination_inverse(mu: SpectralMeasure, nu: SpectralMeasure, theta):
    """``H(theta) = theta + R_nu(G_mu(theta))``, the inverse of ``omega1`` for
    freely infinitely divisible ``nu``."""
    g = cauchy_transform(mu, theta)
    return np.real(theta + closed_form_r(nu, g))


def outliers_infdiv(mu: SpectralMeasure, nu: SpectralMeasure, theta: float, fd_step: float = 1e-7):
    """Outlier generated by ``theta`` when ``nu`` is freely infinitely divisible.

    Returns ``H(theta)`` if ``H'(theta) > 0`` and ``None`` otherwise.  ``H'`` is
    computed analytically and by a central difference with step ``fd_step``;
    a disagreement above ``1e-6`` is logged.

    Raises
    ------
    FamilyError
        If ``nu`` has no closed-form R-transform or is not infinitely divisible.
    """
    if not nu.is_infinitely_divisible:
        raise FamilyError(f"{nu!r} is not a freely infinitely divisible family with closed-form R")
    theta = float(theta)
    b = nu.point_mass_location
    if b is not None:
        return theta + b
    if mu.point_mass_location is not None and theta == mu.point_mass_location:
        raise DomainError("spike coincides with the point mass")
    g = float(np.real(cauchy_transform(mu, theta)))
    dg = float(np.real(cauchy_derivative(mu, theta)))
    rho = theta + float(np.real(closed_form_r(nu, g)))
    dH = 1.0 + float(np.real(closed_form_r_derivative(nu, g))) * dg
    dH_fd = float(
        (subordination_inverse(mu, nu, theta + fd_step) - subordination_inverse(mu, nu, theta - fd_step))
        / (2 * fd_step)
    )
    if abs(dH - dH_fd) > 1e-6 * max(1.0, abs(dH)):
        log.warning("H'(%g): analytic %.10g vs finite difference %.10g", theta, dH, dH_fd)
    return rho if dH > 0 else None


def edge_thresholds(nu: SpectralMeasure) -> tuple[float, float]:
    """``(1/G_nu(a-), 1/G_nu(b+))`` at the outer edges of ``supp(nu)``.

    A spike ``gamma`` of a finite-rank perturbation separates from the top of
    the bulk iff ``gamma`` exceeds the second value (from the bottom iff it is
    below the first).
    """
    lo, hi = support(nu).hull
    scale = max(1.0, abs(lo), abs(hi))
    d1, d2 = 1e-10 * scale, 4e-10 * scale
    vals = []
    for x, sgn in ((lo, -1.0), (hi, 1.0)):
        g1 = float(np.real(cauchy_transform(nu, x + sgn * d1)))
        g2 = float(np.real(cauchy_transform(nu, x + sgn * d2)))
        # square-root edges: G(x + d) ~ G0 - c sqrt(d)
        g = 2.0 * g1 - g2
        if not math.isfinite(g) or abs(g1) > 1e6:
            g = g1
        vals.append(1.0 / g if g != 0 else math.inf)
    return vals[0], vals[1]


def outliers_point_mass(nu: SpectralMeasure, gammas, a: float = 0.0) -> list[OutlierPrediction]:
    """Outliers when ``mu = delta_a``: real solutions of ``F_nu(rho - a) + a = gamma``.

    For ``a = 0`` this is the finite-rank setting: a positive ``gamma`` above
    ``1/G_nu(b+)`` yields ``rho = G_nu^{-1}(1/gamma) > b`` and a negative one
    below ``1/G_nu(a-)`` yields a root below the bulk.  Bounded gaps of
    ``supp(nu)`` are searched as well; ``F_nu`` increases on every analytic
    piece so each piece holds at most one solution.

    ``derivative_product`` is reported as 0: ``h_mu`` is constant here.
    """
    spikes = gammas if isinstance(gammas, SpikeSet) else SpikeSet.from_pairs(gammas)
    S = support(nu)
    K = SupportSet(tuple((lo + a, hi + a) for lo, hi in S.intervals))
    m1 = nu.mean
    preds = []
    for gamma, k in spikes.spikes:
        if gamma == a:
            raise DomainError("spike coincides with the point mass")
        target = gamma - a
        reach = S.radius + abs(target) + abs(m1) + 10.0
        lo_h, hi_h = S.hull

        def F(x):
            return float(np.real(1.0 / cauchy_transform(nu, x)))

        def dF(x):
            g = float(np.real(cauchy_transform(nu, x)))
            return -float(np.real(cauchy_derivative(nu, x))) / (g * g)

        for u, v in analytic_pieces(nu, lo_h - reach, hi_h + reach):
            off = 1e-10 * max(1.0, abs(u), abs(v))
            u2, v2 = u + off, v - off
            if v2 <= u2:
                continue
            try:
                with np.errstate(all="ignore"):
                    fu, fv = F(u2) - target, F(v2) - target
            except DomainError:
                continue
            if not (np.isfinite(fu) and np.isfinite(fv)) or np.sign(fu) == np.sign(fv):
                continue
            x, fx = safeguarded_newton(lambda t: F(t) - target, dF, u2, v2, fu, fv)
            rho = x + a
            dist = float(K.distance(rho))
            if not abs(fx) < ROOT_TOL or dist <= UNRESOLVABLE:
                log.info("point-mass root near rho=%g dropped", rho)
                continue
            preds.append(OutlierPrediction(float(rho), gamma, k, 0.0, float(fx), dist))
    return sorted(preds, key=lambda p: (p.rho, -p.theta))
