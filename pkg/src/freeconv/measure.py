"""Compactly supported probability measures on the real line and their transforms.

A :class:`SpectralMeasure` is a finite collection of atoms plus an optional
absolutely continuous part.  The continuous part is either a named closed-form
family (semicircle, Marchenko-Pastur) or a piecewise-linear density tabulated
on node grids.  Every transform accepts scalars or arrays of complex points::

    >>> mu = SpectralMeasure.semicircle(1.0)
    >>> cauchy_transform(mu, 2j)
    (-0-0.41421356237309515j)

Sign conventions
----------------
``G(z) = int dtau(t) / (z - t)``, ``F = 1 / G``, ``h = F - z``.  The Cauchy
transform maps the upper half-plane into the lower one and behaves like
``1 / z`` at infinity; closed forms pick square-root branches accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, FamilyError, InversionError, PoleError

DOMAIN_CUTOFF = 1e-12
POLE_CUTOFF = 1e-12
DENSITY_CUTOFF = 1e-8
MASS_TOL = 1e-10

_FAMILIES = ("semicircle", "marchenko_pastur", "point_mass", "bernoulli_symmetric", "empirical")
_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


# ---------------------------------------------------------------------------
# support sets
# ---------------------------------------------------------------------------


def _merge(intervals: Iterable[Sequence[float]]) -> tuple[tuple[float, float], ...]:
    items = sorted((float(a), float(b)) for a, b in intervals)
    out: list[list[float]] = []
    for a, b in items:
        if b < a:
            raise ValueError(f"empty interval [{a}, {b}]")
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return tuple((a, b) for a, b in out)


@dataclass(frozen=True)
class SupportSet:
    """Ordered disjoint union of closed intervals, optionally an enlargement.

    ``epsilon`` records the radius by which the original support was inflated,
    so ``support(tau).enlarge(eta)`` represents the closed neighbourhood of
    radius ``eta``.
    """

    intervals: tuple[tuple[float, float], ...]
    epsilon: float = 0.0

    def __post_init__(self):
        merged = _merge(self.intervals)
        if not merged:
            raise ValueError("support must be nonempty")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        object.__setattr__(self, "intervals", merged)

    @property
    def hull(self) -> tuple[float, float]:
        return self.intervals[0][0], self.intervals[-1][1]

    @property
    def diameter(self) -> float:
        lo, hi = self.hull
        return hi - lo

    @property
    def radius(self) -> float:
        """Smallest R with the support inside [-R, R]."""
        lo, hi = self.hull
        return max(abs(lo), abs(hi))

    def enlarge(self, eps: float) -> "SupportSet":
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        return SupportSet(tuple((a - eps, b + eps) for a, b in self.intervals), self.epsilon + eps)

    def distance(self, x):
        """Distance from real (or complex) points to the set."""
        x = np.asarray(x)
        re = np.real(x)
        im = np.imag(x) if np.iscomplexobj(x) else np.zeros_like(re, dtype=float)
        lo = np.array([a for a, _ in self.intervals])
        hi = np.array([b for _, b in self.intervals])
        dx = np.maximum(np.maximum(lo - re[..., None], re[..., None] - hi), 0.0)
        d = np.hypot(dx, im[..., None]).min(axis=-1)
        return d if d.ndim else float(d)

    def contains(self, x):
        d = self.distance(x)
        return d <= 0.0

    def gaps(self) -> list[tuple[float, float]]:
        """Bounded open gaps between consecutive intervals."""
        return [(self.intervals[i][1], self.intervals[i + 1][0]) for i in range(len(self.intervals) - 1)]

    def __len__(self):
        return len(self.intervals)


def enlarge(S: SupportSet, eps: float) -> SupportSet:
    """Inflate every interval of ``S`` by ``eps`` and merge overlaps."""
    return S.enlarge(eps)


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityPiece:
    """Piecewise-linear density on ordered nodes."""

    nodes: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        f = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != f.shape or t.size < 2:
            raise ValueError("density piece needs matching node/value lists of length >= 2")
        if np.any(np.diff(t) <= 0):
            raise ValueError("density nodes must be strictly increasing")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ValueError("density values must be finite and nonnegative")
        object.__setattr__(self, "nodes", tuple(t.tolist()))
        object.__setattr__(self, "values", tuple(f.tolist()))

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.nodes))


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """A compactly supported probability measure on the real line.

    Use the constructors (:meth:`semicircle`, :meth:`marchenko_pastur`,
    :meth:`point_mass`, :meth:`bernoulli_symmetric`, :meth:`empirical`,
    :meth:`from_atoms`, :meth:`from_density`, :meth:`from_spec`) rather than
    the raw fields.
    """

    atoms: tuple[tuple[float, float], ...] = ()
    density: tuple[DensityPiece, ...] = ()
    family: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family is not None and self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        atoms = tuple((float(x), float(w)) for x, w in self.atoms)
        for x, w in atoms:
            if not (0 < w <= 1 + MASS_TOL) or not math.isfinite(x):
                raise ValueError(f"invalid atom ({x}, {w})")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "params", dict(self.params))
        pos = np.array([x for x, _ in atoms], dtype=float)
        wt = np.array([w for _, w in atoms], dtype=float)
        object.__setattr__(self, "_pos", pos)
        object.__setattr__(self, "_wt", wt)

        t0, t1, f0, f1 = [], [], [], []
        for piece in self.density:
            t = np.asarray(piece.nodes)
            f = np.asarray(piece.values)
            keep = (f[:-1] > 0) | (f[1:] > 0)
            t0.append(t[:-1][keep])
            t1.append(t[1:][keep])
            f0.append(f[:-1][keep])
            f1.append(f[1:][keep])
        if self.density:
            seg = tuple(np.concatenate(v) for v in (t0, t1, f0, f1))
            pieces = sorted((p.nodes[0], p.nodes[-1]) for p in self.density)
            for (_, b), (a, _) in zip(pieces, pieces[1:]):
                if a < b:
                    raise ValueError("density intervals must be disjoint")
        else:
            seg = None
        object.__setattr__(self, "_seg", seg)

        if self.family in ("semicircle", "marchenko_pastur"):
            self._check_family_params()
        else:
            mass = float(wt.sum()) + sum(p.mass for p in self.density)
            if abs(mass - 1.0) > MASS_TOL:
                raise ValueError(f"total mass {mass!r} differs from 1")

    def _check_family_params(self):
        p = self.params
        if self.family == "semicircle":
            if not p.get("variance", 0) > 0:
                raise ValueError("semicircle variance must be positive")
        else:
            if not p.get("ratio", 0) > 0 or not p.get("scale", 0) > 0:
                raise ValueError("Marchenko-Pastur ratio and scale must be positive")

    # -- constructors -------------------------------------------------------

    @classmethod
    def semicircle(cls, variance: float = 1.0) -> "SpectralMeasure":
        return cls(family="semicircle", params={"variance": float(variance)})

    @classmethod
    def marchenko_pastur(cls, ratio: float = 1.0, scale: float = 1.0) -> "SpectralMeasure":
        """Free Poisson law with aspect ratio ``ratio`` and variance scale ``scale``.

        Mean ``scale``, variance ``ratio * scale**2``; an atom of mass
        ``1 - 1/ratio`` sits at 0 when ``ratio > 1``.
        """
        ratio, scale = float(ratio), float(scale)
        atoms = ((0.0, 1.0 - 1.0 / ratio),) if ratio > 1 else ()
        return cls(atoms=atoms, family="marchenko_pastur", params={"ratio": ratio, "scale": scale})

    @classmethod
    def point_mass(cls, a: float = 0.0) -> "SpectralMeasure":
        return cls(atoms=((float(a), 1.0),), family="point_mass", params={"a": float(a)})

    @classmethod
    def bernoulli_symmetric(cls) -> "SpectralMeasure":
        return cls(atoms=((-1.0, 0.5), (1.0, 0.5)), family="bernoulli_symmetric")

    @classmethod
    def empirical(cls, points: Iterable[float]) -> "SpectralMeasure":
        pts = np.asarray(list(points), dtype=float)
        if pts.size == 0:
            raise ValueError("empirical measure needs at least one point")
        vals, counts = np.unique(pts, return_counts=True)
        atoms = tuple(zip(vals.tolist(), (counts / pts.size).tolist()))
        return cls(atoms=atoms, family="empirical", params={"points": tuple(pts.tolist())})

    @classmethod
    def from_atoms(cls, atoms: Iterable[Sequence[float]]) -> "SpectralMeasure":
        return cls(atoms=tuple((x, w) for x, w in atoms))

    @classmethod
    def from_density(cls, intervals: Iterable[Mapping[str, Any]], atoms=()) -> "SpectralMeasure":
        pieces = tuple(DensityPiece(tuple(iv["nodes"]), tuple(iv["values"])) for iv in intervals)
        return cls(atoms=tuple(atoms), density=pieces)

    @classmethod
    def from_spec(cls, spec: Mapping[str, Any]) -> "SpectralMeasure":
        """Build a measure from its JSON-compatible description.

        Accepted shapes::

            {"family": "semicircle", "variance": 0.25}
            {"family": "marchenko_pastur", "ratio": 0.5, "scale": 1.0}
            {"family": "point_mass", "a": 0.0}
            {"family": "bernoulli_symmetric"}
            {"family": "empirical", "points": [...]}
            {"atoms": [[-1, 0.5], [1, 0.5]]}
            {"density": {"intervals": [{"a": .., "b": .., "nodes": [..], "values": [..]}]}}

        ``atoms`` and ``density`` may appear together.
        """
        fam = spec.get("family")
        if fam == "semicircle":
            return cls.semicircle(spec["variance"])
        if fam == "marchenko_pastur":
            return cls.marchenko_pastur(spec.get("ratio", 1.0), spec.get("scale", 1.0))
        if fam == "point_mass":
            return cls.point_mass(spec.get("a", 0.0))
        if fam == "bernoulli_symmetric":
            return cls.bernoulli_symmetric()
        if fam == "empirical":
            return cls.empirical(spec["points"])
        if fam is not None:
            raise ValueError(f"unknown family {fam!r}")
        atoms = tuple(tuple(a) for a in spec.get("atoms", ()))
        dens = spec.get("density")
        if dens is None:
            if not atoms:
                raise ValueError("measure spec needs a family, atoms or a density")
            return cls.from_atoms(atoms)
        ivs = dens["intervals"]
        for iv in ivs:
            if "a" in iv and "b" in iv:
                if not (np.isclose(iv["nodes"][0], iv["a"]) and np.isclose(iv["nodes"][-1], iv["b"])):
                    raise ValueError("density interval endpoints must match first/last node")
        return cls.from_density(ivs, atoms=atoms)

    def to_spec(self) -> dict:
        if self.family == "semicircle":
            return {"family": "semicircle", "variance": self.params["variance"]}
        if self.family == "marchenko_pastur":
            return {"family": "marchenko_pastur", **self.params}
        if self.family == "point_mass":
            return {"family": "point_mass", "a": self.params["a"]}
        if self.family == "bernoulli_symmetric":
            return {"family": "bernoulli_symmetric"}
        if self.family == "empirical":
            return {"family": "empirical", "points": list(self.params["points"])}
        out: dict = {}
        if self.atoms:
            out["atoms"] = [list(a) for a in self.atoms]
        if self.density:
            out["density"] = {
                "intervals": [
                    {"a": p.nodes[0], "b": p.nodes[-1], "nodes": list(p.nodes), "values": list(p.values)}
                    for p in self.density
                ]
            }
        return out

    # -- structural queries -------------------------------------------------

    @property
    def point_mass_location(self) -> float | None:
        """Location ``a`` when the measure is ``delta_a``, else ``None``."""
        if self.family in ("semicircle", "marchenko_pastur") or self.density:
            return None
        if len(self.atoms) == 1 and abs(self.atoms[0][1] - 1.0) <= MASS_TOL:
            return self.atoms[0][0]
        return None

    @property
    def is_point_mass(self) -> bool:
        return self.point_mass_location is not None

    @property
    def is_infinitely_divisible(self) -> bool:
        """True for the families whose R-transform is known in closed form and
        which are freely infinitely divisible."""
        return self.family in ("semicircle", "marchenko_pastur") or self.is_point_mass

    @property
    def mean(self) -> float:
        if self.family == "semicircle":
            return 0.0
        if self.family == "marchenko_pastur":
            return self.params["scale"]
        m = float(np.dot(self._pos, self._wt))
        if self._seg is not None:
            t0, t1, f0, f1 = self._seg
            h = t1 - t0
            # exact first moment of each linear segment
            m += float(np.sum(h * (f0 * (2 * t0 + t1) + f1 * (t0 + 2 * t1)) / 6.0))
        return m

    def _ac_interval(self) -> tuple[float, float] | None:
        if self.family == "semicircle":
            r = 2.0 * math.sqrt(self.params["variance"])
            return -r, r
        if self.family == "marchenko_pastur":
            lam, s = self.params["ratio"], self.params["scale"]
            return s * (1 - math.sqrt(lam)) ** 2, s * (1 + math.sqrt(lam)) ** 2
        return None

    def _ac_mass(self) -> float:
        if self.family == "semicircle":
            return 1.0
        if self.family == "marchenko_pastur":
            return min(1.0, 1.0 / self.params["ratio"])
        return 1.0 - float(self._wt.sum())

    def pdf(self, x):
        """Density of the absolutely continuous part (atoms are not included)."""
        x = np.asarray(x, dtype=float)
        if self.family == "semicircle":
            t = self.params["variance"]
            return np.sqrt(np.clip(4 * t - x * x, 0, None)) / (2 * np.pi * t)
        if self.family == "marchenko_pastur":
            lam, s = self.params["ratio"], self.params["scale"]
            a, b = self._ac_interval()
            inside = (x > a) & (x < b)
            xs = np.where(inside, x, 0.5 * (a + b))
            val = np.sqrt(np.clip((b - xs) * (xs - a), 0, None)) / (2 * np.pi * lam * s * xs)
            return np.where(inside, val, 0.0)
        out = np.zeros_like(x)
        for piece in self.density:
            t = np.asarray(piece.nodes)
            inside = (x >= t[0]) & (x <= t[-1])
            out = out + np.where(inside, np.interp(x, t, piece.values), 0.0)
        return out

    def _ac_pieces(self) -> list[tuple[float, float, Callable]]:
        iv = self._ac_interval()
        if iv is not None:
            return [(iv[0], iv[1], self.pdf)]
        return [(p.nodes[0], p.nodes[-1], lambda x, p=p: np.interp(x, p.nodes, p.values)) for p in self.density]

    def cdf(self, x):
        """Cumulative distribution function ``tau((-inf, x])``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for pos, w in self.atoms:
            out = out + w * (x >= pos)
        if self.family == "semicircle":
            t = self.params["variance"]
            r = 2.0 * math.sqrt(t)
            xc = np.clip(x, -r, r)
            out = out + 0.5 + xc * np.sqrt(4 * t - xc * xc) / (4 * np.pi * t) + np.arcsin(xc / r) / np.pi
        elif self.family == "marchenko_pastur":
            out = out + self._mp_ac_cdf(x)
        else:
            for piece in self.density:
                t = np.asarray(piece.nodes)
                f = np.asarray(piece.values)
                h = np.diff(t)
                cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (f[:-1] + f[1:]))])
                i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, t.size - 2)
                u = np.clip(x - t[i], 0, h[i])
                s = (f[i + 1] - f[i]) / h[i]
                part = cum[i] + f[i] * u + 0.5 * s * u * u
                out = out + np.where(x < t[0], 0.0, np.where(x >= t[-1], cum[-1], part))
        return out

    def _mp_ac_cdf(self, x):
        table = self.__dict__.get("_mp_table")
        a, b = self._ac_interval()
        if table is None:
            # cosine substitution keeps the integrand smooth at square-root edges
            th = np.linspace(0.0, np.pi, 4001)
            xs = a + 0.5 * (b - a) * (1 - np.cos(th))
            integrand = self.pdf(xs) * 0.5 * (b - a) * np.sin(th)
            integrand[0] = integrand[-1] = 0.0
            if a == 0.0:
                # pdf ~ 1/sqrt(x) at 0; the substituted integrand tends to a finite limit
                integrand[0] = integrand[1]
            cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(th) * (integrand[:-1] + integrand[1:]))])
            cum *= self._ac_mass() / cum[-1]
            table = (th, cum)
            object.__setattr__(self, "_mp_table", table)
        th, cum = table
        xc = np.clip(x, a, b)
        theta = np.arccos(np.clip(1 - 2 * (xc - a) / (b - a), -1, 1))
        return np.interp(theta, th, cum)

    def __repr__(self):
        if self.family is not None and self.family != "empirical":
            args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
            return f"SpectralMeasure.{self.family}({args})"
        return f"SpectralMeasure(atoms={len(self.atoms)}, density_pieces={len(self.density)})"


# ---------------------------------------------------------------------------
# support, sampling, rendering
# ---------------------------------------------------------------------------


def support(tau: SpectralMeasure, cutoff: float = DENSITY_CUTOFF) -> SupportSet:
    """Closed support of ``tau``; grid densities count where they exceed ``cutoff``."""
    ivs: list[tuple[float, float]] = [(x, x) for x, _ in tau.atoms]
    ac = tau._ac_interval()
    if ac is not None:
        ivs.append(ac)
    for piece in tau.density:
        t = np.asarray(piece.nodes)
        f = np.asarray(piece.values)
        pos = (f[:-1] > cutoff) | (f[1:] > cutoff)
        i = 0
        while i < pos.size:
            if not pos[i]:
                i += 1
                continue
            j = i
            while j + 1 < pos.size and pos[j + 1]:
                j += 1
            left = t[i] if f[i] > cutoff else t[i] + (t[i + 1] - t[i]) * (cutoff - f[i]) / (f[i + 1] - f[i])
            right = (
                t[j + 1] if f[j + 1] > cutoff else t[j] + (t[j + 1] - t[j]) * (f[j] - cutoff) / (f[j] - f[j + 1])
            )
            ivs.append((left, right))
            i = j + 1
    return SupportSet(tuple(ivs))


def quantile_sample(tau: SpectralMeasure, n: int):
    """The ``i/(n+1)`` quantiles of ``tau`` for ``i = 1..n``, nondecreasing."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = np.arange(1, n + 1) / (n + 1.0)
    lo_h, hi_h = support(tau, cutoff=0.0).hull
    lo = np.full(n, lo_h - 1.0)
    hi = np.full(n, hi_h)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        ge = tau.cdf(mid) >= p
        hi = np.where(ge, mid, hi)
        lo = np.where(ge, lo, mid)
    q = hi
    for x, _ in tau.atoms:
        q = np.where(np.abs(q - x) < 1e-9, x, q)
    return np.maximum.accumulate(np.clip(q, lo_h, hi_h))


def to_grid(tau: SpectralMeasure, points: int = 2001) -> SpectralMeasure:
    """Render the continuous part of ``tau`` onto a node grid.

    Nodes are cosine-spaced so the square-root edges of equilibrium densities
    are resolved; values are rescaled so the total mass is exactly one.
    """
    pieces = []
    for a, b, fn in tau._ac_pieces():
        th = np.linspace(0.0, np.pi, points)
        x = a + 0.5 * (b - a) * (1 - np.cos(th))
        f = np.asarray(fn(x), dtype=float)
        if not np.isfinite(f[0]):
            f[0] = 0.0
        pieces.append({"nodes": x, "values": f})
    ac_mass = tau._ac_mass()
    total = sum(np.trapezoid(p["values"], p["nodes"]) for p in pieces)
    if pieces:
        for p in pieces:
            p["values"] = p["values"] * (ac_mass / total)
    atoms = tuple(tau.atoms)
    return SpectralMeasure.from_density(pieces, atoms=atoms)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def _as_points(z):
    arr = np.asarray(z)
    real_input = not np.iscomplexobj(arr)
    zc = arr.astype(complex)
    return zc, arr.ndim == 0, real_input


def _check_domain(tau: SpectralMeasure, z: np.ndarray):
    real = z.imag == 0
    if not np.any(real):
        return
    d = support(tau).distance(z.real[real])
    bad = np.atleast_1d(d) < DOMAIN_CUTOFF
    if np.any(bad):
        x = np.atleast_1d(z.real[real])[bad][0]
        raise DomainError(f"point {x!r} lies in the support of {tau!r}")


def _sqrt_pair(z, a, b):
    """Branch of sqrt((z-a)(z-b)) analytic off [a, b] and ~ z at infinity."""
    return np.sqrt(z - a) * np.sqrt(z - b)


def _finish(val, scalar, real_input):
    if real_input:
        val = val.real + 0j
    return complex(val) if scalar else val


def _closed_parts(tau, z):
    """``(u, s, du, ds)`` with ``G = 2 / (u + s)`` for the closed-form families.

    The rationalised form avoids the cancellation in ``(u - s) / c`` at large
    ``|z|``; for Marchenko-Pastur with ratio > 1 the zero of ``u + s`` at the
    origin is the atom.
    """
    if tau.family == "semicircle":
        r = 2 * math.sqrt(tau.params["variance"])
        s = _sqrt_pair(z, -r, r)
        return z, s, 1.0, z / s
    lam, sc = tau.params["ratio"], tau.params["scale"]
    a, b = tau._ac_interval()
    s = _sqrt_pair(z, a, b)
    return z - sc * (1 - lam), s, 1.0, (2 * z - a - b) / (2 * s)


def _g_closed(tau, z):
    u, s, _, _ = _closed_parts(tau, z)
    return 2.0 / (u + s)


def _dg_closed(tau, z):
    u, s, du, ds = _closed_parts(tau, z)
    return -2.0 * (du + ds) / (u + s) ** 2


_SERIES_K = np.arange(1, 25)


def _phi_psi(x):
    """``phi = log1p(x)/x`` and ``psi = (1+x)phi - 1``, stable for small ``|x|``."""
    small = np.abs(x) < 0.1
    xs = np.where(small, x, 0.0)[..., None]
    pw = xs ** _SERIES_K
    sign = np.where(_SERIES_K % 2 == 1, -1.0, 1.0)
    phi_s = 1.0 + np.sum(sign * pw / (_SERIES_K + 1), axis=-1)
    psi_s = np.sum(-sign * pw / (_SERIES_K * (_SERIES_K + 1)), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        xl = np.where(small, 1.0, x)
        phi_l = np.log1p(xl) / xl
        psi_l = (1 + xl) * phi_l - 1
    return np.where(small, phi_s, phi_l), np.where(small, psi_s, psi_l)


def _g_generic(tau, z, deriv=False):
    out = np.zeros(z.shape, dtype=complex)
    d = z[..., None]
    if tau._pos.size:
        diff = d - tau._pos
        if deriv:
            out += -np.sum(tau._wt / diff**2, axis=-1)
        else:
            out += np.sum(tau._wt / diff, axis=-1)
    if tau._seg is not None:
        t0, t1, f0, f1 = tau._seg
        h = t1 - t0
        s = (f1 - f0) / h
        u = d - t0
        v = d - t1
        with np.errstate(divide="ignore", invalid="ignore"):
            x = h / v
            phi, psi = _phi_psi(x)
            # segment integral of the linear interpolant against 1/(z-t):
            # f0*log(u/v) + s*(u*log(u/v) - h), with log(u/v) = x*phi
            if deriv:
                val = s * x * (phi - 1) - f0 * h / (u * v)
            else:
                val = f0 * x * phi + s * h * psi
        out += np.sum(val, axis=-1)
    return out


def _adaptive_gl(fn, a, b, tol=1e-14, max_depth=60):
    def gl(lo, hi):
        m, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        return r * np.sum(_GL_W * fn(m + r * _GL_X))

    total = 0.0
    stack = [(a, b, gl(a, b), 0)]
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = gl(lo, mid), gl(mid, hi)
        if abs(left + right - whole) <= tol or depth >= max_depth:
            total += left + right
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return total


def _g_quadrature(tau, z, deriv=False):
    out = np.zeros(z.shape, dtype=complex)
    for idx in np.ndindex(z.shape):
        zz = z[idx]
        val = 0j
        for x, w in tau.atoms:
            val += -w / (zz - x) ** 2 if deriv else w / (zz - x)
        for a, b, fn in tau._ac_pieces():
            if deriv:
                kern = lambda t, fn=fn: -fn(t) / (zz - t) ** 2
            else:
                kern = lambda t, fn=fn: fn(t) / (zz - t)
            val += _adaptive_gl(kern, a, b)
        out[idx] = val
    return out


def cauchy_transform(tau: SpectralMeasure, z, method: str = "auto"):
    """Cauchy-Stieltjes transform ``G(z) = int dtau(t) / (z - t)``.

    Parameters
    ----------
    tau : SpectralMeasure
    z : complex or array_like
        Evaluation points.  Real points must lie off the support.
    method : {"auto", "quadrature"}
        ``"auto"`` uses closed forms for the semicircle and Marchenko-Pastur
        families and exact integration of the piecewise-linear interpolant for
        grid densities.  ``"quadrature"`` integrates the density with adaptive
        Gauss-Legendre instead; it is slow and meant for cross-checking.

    Raises
    ------
    DomainError
        If a real point lies within ``DOMAIN_CUTOFF`` of the support.
    """
    zc, scalar, real_input = _as_points(z)
    _check_domain(tau, zc)
    if method == "quadrature":
        val = _g_quadrature(tau, zc)
    elif tau.family in ("semicircle", "marchenko_pastur"):
        val = _g_closed(tau, zc)
    else:
        val = _g_generic(tau, zc)
    return _finish(val, scalar, real_input)


def cauchy_derivative(tau: SpectralMeasure, z, method: str = "auto"):
    """``G'(z) = -int dtau(t) / (z - t)**2``."""
    zc, scalar, real_input = _as_points(z)
    _check_domain(tau, zc)
    if method == "quadrature":
        val = _g_quadrature(tau, zc, deriv=True)
    elif tau.family in ("semicircle", "marchenko_pastur"):
        val = _dg_closed(tau, zc)
    else:
        val = _g_generic(tau, zc, deriv=True)
    return _finish(val, scalar, real_input)


def _reciprocal(g, z):
    if np.any(np.abs(g) < POLE_CUTOFF):
        where = np.atleast_1d(z)[np.atleast_1d(np.abs(g) < POLE_CUTOFF)][0]
        raise PoleError(f"reciprocal Cauchy transform has a pole near {complex(where)!r}")
    return 1.0 / g


def reciprocal_cauchy(tau: SpectralMeasure, z):
    """``F(z) = 1 / G(z)``; raises :class:`PoleError` where ``G`` vanishes."""
    zc, scalar, real_input = _as_points(z)
    g = np.asarray(cauchy_transform(tau, zc))
    return _finish(_reciprocal(g, zc), scalar, real_input)


def _h_values(tau: SpectralMeasure, z, g=None):
    """``F(z) - z`` in a form that avoids cancellation where possible."""
    if tau.family == "semicircle":
        return -tau.params["variance"] * (_g_closed(tau, z) if g is None else g)
    if tau.family == "marchenko_pastur":
        lam, sc = tau.params["ratio"], tau.params["scale"]
        _, s, _, _ = _closed_parts(tau, z)
        return -2.0 * sc * z / (s + z + sc * (1 - lam))
    if g is None:
        g = _g_generic(tau, z)
    if tau._seg is None:
        # 1 - zG = -sum w x / (z - x)
        num = np.sum(tau._wt * tau._pos / (z[..., None] - tau._pos), axis=-1)
        return -num / _reciprocal_input(g, z)
    return _reciprocal(g, z) - z


def _reciprocal_input(g, z):
    _reciprocal(g, z)
    return g


def h_transform(tau: SpectralMeasure, z):
    """``h(z) = F(z) - z``.  For ``delta_a`` this is the constant ``-a``."""
    zc, scalar, real_input = _as_points(z)
    a = tau.point_mass_location
    _check_domain(tau, zc)
    if a is not None:
        return _finish(np.full(zc.shape, -a, dtype=complex), scalar, real_input)
    g = np.asarray(cauchy_transform(tau, zc))
    _reciprocal(g, zc)
    return _finish(_h_values(tau, zc, g), scalar, real_input)


def h_and_derivative(tau: SpectralMeasure, z):
    """``(h(z), h'(z))`` for complex array ``z`` off the real axis; no domain checks."""
    z = np.asarray(z, dtype=complex)
    if tau.is_point_mass:
        return np.full(z.shape, -tau.point_mass_location, dtype=complex), np.zeros(z.shape, dtype=complex)
    if tau.family in ("semicircle", "marchenko_pastur"):
        g, dg = _g_closed(tau, z), _dg_closed(tau, z)
    else:
        g, dg = _g_generic(tau, z), _g_generic(tau, z, deriv=True)
    f = 1.0 / g
    return _h_values(tau, z, g), -dg * f * f - 1.0


def h_derivative(tau: SpectralMeasure, z):
    """``h'(z) = F'(z) - 1`` with ``F' = -G' / G**2``."""
    zc, scalar, real_input = _as_points(z)
    if tau.is_point_mass:
        _check_domain(tau, zc)
        return _finish(np.zeros(zc.shape, dtype=complex), scalar, real_input)
    g = np.asarray(cauchy_transform(tau, zc))
    dg = np.asarray(cauchy_derivative(tau, zc))
    f = _reciprocal(g, zc)
    return _finish(-dg * f * f - 1.0, scalar, real_input)


def r_transform(tau: SpectralMeasure, w, max_iter: int = 200, tol: float = 1e-14):
    """R-transform ``R(w) = G^{-1}(w) - 1/w`` by Newton inversion of ``G``.

    Newton starts from ``z = 1/w + mean`` (the two leading terms of the
    inverse at small ``w``) and must reach ``|G(z) - w| <= tol * |w|``.

    Raises
    ------
    InversionError
        If Newton does not converge within ``max_iter`` steps; the message
        reports ``|w|`` so callers can shrink it.
    """
    wc = np.asarray(w, dtype=complex)
    scalar = wc.ndim == 0
    wc = np.atleast_1d(wc)
    if np.any(wc == 0):
        raise DomainError("R-transform is evaluated at w != 0 only")
    out = np.empty_like(wc)
    for k, wk in enumerate(wc):
        z = 1.0 / wk + tau.mean
        for _ in range(max_iter):
            try:
                g = complex(cauchy_transform(tau, z))
                dg = complex(cauchy_derivative(tau, z))
            except DomainError:
                raise InversionError(f"Newton iterate entered the support at |w|={abs(wk):.3g}") from None
            err = g - wk
            if abs(err) <= tol * abs(wk):
                break
            step = err / dg
            z = z - step
            if not np.isfinite(z):
                break
            if abs(step) <= 4e-16 * abs(z):
                break
        else:
            raise InversionError(f"Newton inversion failed for |w|={abs(wk):.3g}")
        if not abs(complex(cauchy_transform(tau, z)) - wk) <= 1e-12 * max(1.0, abs(wk)):
            raise InversionError(f"Newton inversion failed for |w|={abs(wk):.3g}")
        out[k] = z - 1.0 / wk
    return complex(out[0]) if scalar else out


def closed_form_r(tau: SpectralMeasure, w):
    """R-transform in closed form where one is known.

    Raises
    ------
    FamilyError
        For measures without a tabulated R-transform.
    """
    w = np.asarray(w, dtype=complex)
    a = tau.point_mass_location
    if a is not None:
        val = np.full(w.shape, a, dtype=complex)
    elif tau.family == "semicircle":
        val = tau.params["variance"] * w
    elif tau.family == "marchenko_pastur":
        lam, s = tau.params["ratio"], tau.params["scale"]
        val = s / (1 - lam * s * w)
    elif tau.family == "bernoulli_symmetric":
        # (sqrt(1+4w^2) - 1) / (2w), rationalised to stay accurate near w = 0
        val = 2 * w / (np.sqrt(1 + 4 * w * w) + 1)
    else:
        raise FamilyError(f"no closed-form R-transform for {tau!r}")
    return complex(val) if val.ndim == 0 else val


def closed_form_r_derivative(tau: SpectralMeasure, w):
    w = np.asarray(w, dtype=complex)
    if tau.is_point_mass:
        val = np.zeros(w.shape, dtype=complex)
    elif tau.family == "semicircle":
        val = np.full(w.shape, tau.params["variance"], dtype=complex)
    elif tau.family == "marchenko_pastur":
        lam, s = tau.params["ratio"], tau.params["scale"]
        val = lam * s * s / (1 - lam * s * w) ** 2
    elif tau.family == "bernoulli_symmetric":
        q = np.sqrt(1 + 4 * w * w)
        val = (2 * (1 + q) - 8 * w * w / q) / (1 + q) ** 2
    else:
        raise FamilyError(f"no closed-form R-transform for {tau!r}")
    return complex(val) if val.ndim == 0 else val
