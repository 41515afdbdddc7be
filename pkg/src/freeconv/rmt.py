"""Sampling and checking the deformed model ``X_N = A_N + U* B_N U``.

``A_N`` is diagonal with the spikes in its first ``r`` slots followed by
quantiles of ``mu``; ``B_N`` holds quantiles of ``nu``; ``U`` is Haar
distributed on the unitary group.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, DomainError, SingularError, SizeError
from .measure import SpectralMeasure, SupportSet, quantile_sample
from .outlier import OutlierPrediction, SpikeSet
from .subordination import convolution_support

log = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-10
EIGEN_METHODS = ("lapack", "householder_ql")


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; ``stream`` selects an independent jump-ahead."""
    bits = np.random.Philox(int(seed) % 2**64)
    if stream:
        bits = bits.jumped(int(stream))
    return np.random.Generator(bits)


def haar_unitary(N: int, seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Haar-distributed ``N x N`` unitary matrix.

    QR factorisation of a standard complex Gaussian matrix, with the phases of
    ``diag(R)`` pushed into ``Q`` so that the law is exactly Haar.
    """
    if N < 1:
        raise SizeError("N must be at least 1")
    if rng is None:
        rng = generator(0 if seed is None else seed)
    Z = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / math.sqrt(2.0)
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R)
    ph = d / np.abs(d)
    return Q * ph[None, :]


# ---------------------------------------------------------------------------
# eigensolver
# ---------------------------------------------------------------------------


def tridiagonalize(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction of a Hermitian matrix to real symmetric tridiagonal form.

    Returns the diagonal ``d`` and the (nonnegative) off-diagonal ``e``.  The
    complex off-diagonal produced by the reflections is made real by a
    diagonal unitary similarity, which only takes moduli.
    """
    A = np.array(H, dtype=complex, copy=True)
    n = A.shape[0]
    for k in range(n - 2):
        x = A[k + 1 :, k].copy()
        nx = np.linalg.norm(x)
        if nx == 0.0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0
        alpha = -phase * nx
        v = x
        v[0] -= alpha
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        v /= nv
        B = A[k + 1 :, k + 1 :]
        p = B @ v
        K = np.vdot(v, p).real
        w = p - K * v
        B -= 2.0 * (np.outer(v, w.conj()) + np.outer(w, v.conj()))
        A[k + 1 :, k] = 0.0
        A[k, k + 1 :] = 0.0
        A[k + 1, k] = alpha
        A[k, k + 1] = np.conj(alpha)
    d = np.real(np.diagonal(A)).copy()
    e = np.abs(np.diagonal(A, -1)).copy()
    return d, e


def tridiagonal_ql(d: np.ndarray, e: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal matrix by implicit QL with shifts.

    Parameters
    ----------
    d : ndarray, shape (n,)
        Diagonal.
    e : ndarray, shape (n-1,)
        Off-diagonal.
    max_sweeps : int
        Iteration budget per eigenvalue.

    Raises
    ------
    ConvergenceError
        If some eigenvalue needs more than ``max_sweeps`` sweeps.
    """
    d = [float(v) for v in d]
    n = len(d)
    e = [float(v) for v in e] + [0.0]
    eps = np.finfo(float).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_sweeps:
                raise ConvergenceError(f"QL iteration did not converge for eigenvalue {l}")
            # shift from the leading 2x2 block (eigenvalue closer to d[l])
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            deflated = False
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.array(d)


def hermitian_eigenvalues(H: np.ndarray, method: str = "lapack") -> np.ndarray:
    """Eigenvalues of a Hermitian matrix, sorted nonincreasing.

    ``method="householder_ql"`` runs the in-package Householder reduction plus
    implicit QL; ``"lapack"`` calls ``numpy.linalg.eigvalsh``.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be square")
    if H.size and np.max(np.abs(H - H.conj().T)) >= HERMITIAN_TOL:
        raise DomainError("matrix is not Hermitian")
    if method == "lapack":
        ev = np.linalg.eigvalsh(H)
    elif method == "householder_ql":
        ev = tridiagonal_ql(*tridiagonalize(H)) if H.shape[0] else np.zeros(0)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {EIGEN_METHODS}")
    return np.sort(ev)[::-1]


# ---------------------------------------------------------------------------
# model instances
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModelInstance:
    """One draw of ``X_N = diag(a) + U* diag(b) U``."""

    N: int
    a_diag: np.ndarray
    b_diag: np.ndarray
    seed: int
    stream: int = 0
    unitary: np.ndarray | None = field(default=None, repr=False)
    eigenvalues: np.ndarray | None = field(default=None, repr=False)
    rank: int = 0

    def matrix(self) -> np.ndarray:
        U = self.unitary
        X = (U.conj().T * self.b_diag[None, :]) @ U
        X += np.diag(self.a_diag)
        return 0.5 * (X + X.conj().T)

    def solve_spectrum(self, method: str = "lapack") -> np.ndarray:
        self.eigenvalues = hermitian_eigenvalues(self.matrix(), method)
        return self.eigenvalues


def build_model(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    spikes: SpikeSet,
    N: int,
    seed: int,
    stream: int = 0,
) -> ModelInstance:
    """Deterministic ``A_N``, ``B_N`` from quantiles and a seeded Haar ``U``.

    Raises
    ------
    SizeError
        If ``N`` does not exceed the total spike multiplicity.
    """
    if not isinstance(spikes, SpikeSet):
        spikes = SpikeSet.from_pairs(spikes)
    r = spikes.rank
    if N <= r:
        raise SizeError(f"N={N} must exceed the number of spikes r={r}")
    a = np.concatenate([spikes.diagonal(), quantile_sample(mu, N - r)])
    b = np.asarray(quantile_sample(nu, N), dtype=float)
    U = haar_unitary(N, rng=generator(seed, stream))
    return ModelInstance(N, a, b, int(seed), int(stream), U, None, r)


# ---------------------------------------------------------------------------
# determinant diagnostic
# ---------------------------------------------------------------------------


def default_alpha(mu: SpectralMeasure) -> float:
    """A point of ``supp(mu)`` with positive density, near the median.

    Falls back to the median atom for purely atomic measures.
    """
    pts = np.linspace(0.05, 0.95, 19)
    med = quantile_sample(mu, 1)[0]
    with np.errstate(all="ignore"):
        if mu.density or mu.family in ("semicircle", "marchenko_pastur"):
            if mu.pdf(med) > 0:
                return float(med)
            cand = [x for x in quantile_sample(mu, len(pts)) if mu.pdf(x) > 0]
            if cand:
                return float(min(cand, key=lambda x: abs(x - med)))
    return float(med)


def det_m_diagnostic(
    instance: ModelInstance,
    spikes: SpikeSet,
    alpha: float,
    lam: float,
    return_block: bool = False,
):
    """``det(I_r - P R_N(lam) P^T Theta)`` for a sampled instance.

    ``A'`` is ``A_N`` with its spikes replaced by ``alpha``;
    ``R_N(lam) = (lam - (A' + U* B U))^{-1}``; ``Theta = diag(theta_j - alpha)``
    and ``P`` selects the first ``r`` coordinates.  Zeros in ``lam`` coincide
    with eigenvalues of ``X_N`` off the spectrum of ``A' + U* B U``.

    Returns the determinant, plus the ``r x r`` block ``P R_N P^T`` when
    ``return_block`` is set.

    Raises
    ------
    SingularError
        If ``lam`` is (numerically) an eigenvalue of ``A' + U* B U``.
    """
    if not isinstance(spikes, SpikeSet):
        spikes = SpikeSet.from_pairs(spikes)
    r = spikes.rank
    if r == 0:
        one = complex(1.0)
        return (one, np.zeros((0, 0), complex)) if return_block else one
    theta = spikes.diagonal()
    a = instance.a_diag.copy()
    a[:r] = alpha
    U = instance.unitary
    Xp = (U.conj().T * instance.b_diag[None, :]) @ U
    Xp += np.diag(a)
    Xp = 0.5 * (Xp + Xp.conj().T)
    M = lam * np.eye(instance.N) - Xp
    rhs = np.zeros((instance.N, r), complex)
    rhs[np.arange(r), np.arange(r)] = 1.0
    try:
        Y = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        raise SingularError(f"lambda={lam} is an eigenvalue of the unspiked model") from None
    if not np.all(np.isfinite(Y)) or np.max(np.abs(Y)) > 1e12:
        raise SingularError(f"lambda={lam} is numerically an eigenvalue of the unspiked model")
    block = Y[:r, :]
    D = np.eye(r) - block * (theta - alpha)[None, :]
    det = complex(np.linalg.det(D))
    return (det, block) if return_block else det


# ---------------------------------------------------------------------------
# Monte Carlo verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowRow:
    rho: float
    theta: float
    epsilon: float
    expected: int
    observed: tuple[int, ...]

    @property
    def pass_fraction(self) -> float:
        if not self.observed:
            return 1.0
        return sum(o == self.expected for o in self.observed) / len(self.observed)


@dataclass(frozen=True)
class StrayRow:
    trial: int
    eigenvalue: float


@dataclass(frozen=True)
class SimulationReport:
    """Window counts and strays over independent trials."""

    rows: tuple[WindowRow, ...]
    strays: tuple[StrayRow, ...]
    trials: int
    eta: float
    epsilon: float
    N: int
    seed: int
    trial_pass: tuple[bool, ...]
    support: tuple[tuple[float, float], ...] = ()
    boundary_flags: tuple[float, ...] = ()

    @property
    def pass_fraction(self) -> float:
        return sum(self.trial_pass) / self.trials if self.trials else 1.0

    def csv_rows(self) -> list[str]:
        """One ``trial,rho,epsilon,expected,observed`` row per prediction and trial."""
        out = []
        for t in range(self.trials):
            for w in self.rows:
                out.append(f"{t},{w.rho:.12g},{w.epsilon:.12g},{w.expected},{w.observed[t]}")
        return out

    def summary(self) -> dict:
        return {
            "N": self.N,
            "trials": self.trials,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "eta": self.eta,
            "support": [list(iv) for iv in self.support],
            "pass_fraction": self.pass_fraction,
            "trial_pass": list(self.trial_pass),
            "windows": [
                {
                    "rho": w.rho,
                    "theta": w.theta,
                    "expected": w.expected,
                    "observed": list(w.observed),
                    "pass_fraction": w.pass_fraction,
                }
                for w in self.rows
            ],
            "strays": [{"trial": s.trial, "eigenvalue": s.eigenvalue} for s in self.strays],
            "boundary_flags": list(self.boundary_flags),
        }


def default_eta(N: int, K: SupportSet) -> float:
    """``4 N^{-1/3} diam(K)``."""
    return 4.0 * N ** (-1.0 / 3.0) * max(K.diameter, 1e-12)


def check_separation(rhos: Sequence[float], epsilon: float, K: SupportSet, K_eta: SupportSet | None = None):
    """Validate the window half-width ``epsilon``.

    Windows must be pairwise disjoint (``epsilon < min|rho_i - rho_j| / 2``)
    and must not meet ``K`` (``epsilon < d(rho_i, K)``).  Passing ``K_eta``
    applies the stricter ``epsilon < d(rho_i, K_eta) / 2`` instead.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    rs = sorted(rhos)
    for x, y in zip(rs, rs[1:]):
        if not epsilon < 0.5 * (y - x):
            raise ConfigError(f"epsilon={epsilon} does not separate predictions {x} and {y}")
    for x in rs:
        if K_eta is not None:
            if not epsilon < 0.5 * float(K_eta.distance(x)):
                raise ConfigError(f"epsilon={epsilon} too large for rho={x} against K_eta")
        elif not epsilon < float(K.distance(x)):
            raise ConfigError(f"window around rho={x} meets the support")


def boundary_distance(S: SupportSet, x: float) -> float:
    """Distance from ``x`` to the boundary of ``S``."""
    return min(abs(x - e) for iv in S.intervals for e in iv)


def _trial(mu, nu, spikes, N, seed, t, method):
    inst = build_model(mu, nu, spikes, N, seed, stream=t + 1)
    ev = inst.solve_spectrum(method)
    return t, ev


def run_verification(
    mu: SpectralMeasure,
    nu: SpectralMeasure,
    spikes: SpikeSet,
    predictions: Sequence[OutlierPrediction],
    N: int,
    trials: int,
    epsilon: float,
    eta: float | None = None,
    seed: int = 0,
    K: SupportSet | None = None,
    threads: int = 1,
    method: str = "lapack",
    strict: bool = False,
) -> SimulationReport:
    """Count eigenvalues in ``(rho - epsilon, rho + epsilon)`` over trials.

    Trial ``t`` uses generator stream ``t + 1`` of ``seed``.  Eigenvalues more
    than ``eta`` from ``K = supp(mu + nu)`` that fall in no window are strays.
    A trial passes when every window holds exactly its multiplicity and there
    are no strays.

    Raises
    ------
    ConfigError
        If ``epsilon`` fails :func:`check_separation` (``strict`` selects the
        half-distance to ``K_eta`` form) or ``trials < 1``.
    """
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if not isinstance(spikes, SpikeSet):
        spikes = SpikeSet.from_pairs(spikes)
    if K is None:
        K = convolution_support(mu, nu)
    if eta is None:
        eta = default_eta(N, K)
    if not eta > 0:
        raise ConfigError("eta must be positive")
    K_eta = K.enlarge(eta)
    rhos = [p.rho for p in predictions]
    check_separation(rhos, epsilon, K, K_eta if strict else None)
    # predictions this close to the boundary of K_eta are reported, not judged
    flags = tuple(r for r in rhos if boundary_distance(K_eta, r) < 1e-6)
    for r in flags:
        log.warning("prediction rho=%.10g lies within 1e-6 of the boundary of K_eta (eta=%g)", r, eta)

    counts = [[0] * trials for _ in predictions]
    strays: list[StrayRow] = []
    trial_pass = [False] * trials

    def consume(t, ev):
        ok = True
        covered = np.zeros(ev.shape, dtype=bool)
        for j, p in enumerate(predictions):
            inside = (ev > p.rho - epsilon) & (ev < p.rho + epsilon)
            covered |= inside
            counts[j][t] = int(inside.sum())
            ok &= counts[j][t] == p.multiplicity
        far = np.atleast_1d(K.distance(ev)) > eta
        for x in ev[far & ~covered]:
            strays.append(StrayRow(t, float(x)))
            ok = False
        trial_pass[t] = bool(ok)

    # results are folded in on this thread only
    if threads > 1 and trials > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_trial, mu, nu, spikes, N, seed, t, method) for t in range(trials)]
            for fut in futures:
                consume(*fut.result())
    else:
        for t in range(trials):
            consume(*_trial(mu, nu, spikes, N, seed, t, method))

    rows = tuple(
        WindowRow(p.rho, p.theta, float(epsilon), p.multiplicity, tuple(c)) for p, c in zip(predictions, counts)
    )
    strays.sort(key=lambda s: (s.trial, s.eigenvalue))
    return SimulationReport(
        rows, tuple(strays), trials, float(eta), float(epsilon), N, int(seed), tuple(trial_pass), K.intervals, flags
    )
