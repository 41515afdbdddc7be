import numpy as np
import pytest

from freeconv.errors import ConfigError, ConvergenceError, DomainError, SingularError, SizeError
from freeconv.measure import SpectralMeasure
from freeconv.outlier import OutlierPrediction, SpikeSet, solve_outliers
from freeconv.rmt import (
    build_model,
    default_alpha,
    default_eta,
    det_m_diagnostic,
    generator,
    haar_unitary,
    hermitian_eigenvalues,
    run_verification,
    tridiagonal_ql,
)
from freeconv.subordination import convolution_density, convolution_support

SC1 = SpectralMeasure.semicircle(1.0)
SC4 = SpectralMeasure.semicircle(0.25)
BERN = SpectralMeasure.bernoulli_symmetric()
D0 = SpectralMeasure.point_mass(0.0)


def random_hermitian(rng, n):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (A + A.conj().T) / 2


def count_below(H, x):
    """Number of eigenvalues below x from the inertia of H - x I (Sylvester)."""
    A = H - x * np.eye(len(H))
    n = len(A)
    A = A.astype(complex).copy()
    neg = 0
    for k in range(n):
        piv = A[k, k].real
        if piv < 0:
            neg += 1
        if piv == 0:
            piv = 1e-300
        A[k + 1 :, k + 1 :] -= np.outer(A[k + 1 :, k], A[k, k + 1 :]) / piv
    return neg


def bisection_eigenvalues(H, tol=1e-13):
    """Brute-force oracle: bisect on the eigenvalue counting function."""
    n = len(H)
    r = np.max(np.sum(np.abs(H), axis=1)) + 1.0
    out = []
    for k in range(n):
        lo, hi = -r, r
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if count_below(H, mid) > k:
                hi = mid
            else:
                lo = mid
        out.append(0.5 * (lo + hi))
    return np.sort(out)[::-1]


class TestHaar:
    def test_unitary(self):
        for n in (1, 2, 17, 100):
            U = haar_unitary(n, seed=n)
            assert np.max(np.abs(U.conj().T @ U - np.eye(n))) < 1e-12

    def test_trace_moments(self):
        rng = generator(11)
        tr = np.array([np.trace(haar_unitary(50, rng=rng)) for _ in range(2000)])
        assert abs(tr.mean()) < 0.1
        assert np.mean(np.abs(tr) ** 2) == pytest.approx(1.0, abs=0.1)

    def test_deterministic(self):
        np.testing.assert_array_equal(haar_unitary(20, seed=5), haar_unitary(20, seed=5))
        assert not np.array_equal(haar_unitary(20, seed=5), haar_unitary(20, seed=6))

    def test_size(self):
        with pytest.raises(SizeError):
            haar_unitary(0)


class TestEigensolver:
    @pytest.mark.parametrize("method", ["lapack", "householder_ql"])
    def test_diagonal(self, method):
        d = np.array([0.5, -2.0, 3.0, 3.0, 1.0])
        np.testing.assert_allclose(hermitian_eigenvalues(np.diag(d), method), np.sort(d)[::-1], atol=1e-14)

    @pytest.mark.parametrize("method", ["lapack", "householder_ql"])
    def test_unitary_invariance(self, method):
        D = np.linspace(-2, 3, 60)
        U = haar_unitary(60, seed=3)
        H = U.conj().T @ np.diag(D) @ U
        H = (H + H.conj().T) / 2
        np.testing.assert_allclose(hermitian_eigenvalues(H, method), D[::-1], atol=1e-9)

    def test_traces(self):
        rng = np.random.default_rng(2)
        H = random_hermitian(rng, 80)
        ev = hermitian_eigenvalues(H, "householder_ql")
        assert np.all(np.diff(ev) <= 0)
        assert abs(ev.sum() - np.trace(H).real) < 1e-8 * 80
        assert abs((ev**2).sum() - np.trace(H @ H).real) < 1e-8 * 80

    def test_bisection_oracle_5x5(self):
        rng = np.random.default_rng(7)
        H = random_hermitian(rng, 5)
        ref = bisection_eigenvalues(H)
        np.testing.assert_allclose(hermitian_eigenvalues(H, "householder_ql"), ref, atol=1e-8)

    def test_not_hermitian(self):
        with pytest.raises(DomainError):
            hermitian_eigenvalues(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_budget(self):
        with pytest.raises(ConvergenceError):
            tridiagonal_ql(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0]), max_sweeps=0)


class TestModel:
    def test_zero_model(self):
        inst = build_model(D0, D0, SpikeSet(), 30, seed=1)
        np.testing.assert_allclose(inst.solve_spectrum(), 0.0, atol=1e-13)

    def test_point_mass_nu_shifts(self):
        spikes = SpikeSet(((3.0, 2),))
        inst = build_model(SC1, SpectralMeasure.point_mass(0.5), spikes, 40, seed=2)
        np.testing.assert_allclose(inst.solve_spectrum(), np.sort(inst.a_diag + 0.5)[::-1], atol=1e-12)
        np.testing.assert_array_equal(inst.a_diag[:2], [3.0, 3.0])

    def test_size_error(self):
        with pytest.raises(SizeError):
            build_model(SC1, SC1, SpikeSet(((3.0, 2),)), 2, seed=0)

    def test_determinism(self):
        a = build_model(SC4, BERN, SpikeSet(((3.0, 1),)), 50, seed=9, stream=3)
        b = build_model(SC4, BERN, SpikeSet(((3.0, 1),)), 50, seed=9, stream=3)
        np.testing.assert_array_equal(a.a_diag, b.a_diag)
        np.testing.assert_array_equal(a.b_diag, b.b_diag)
        np.testing.assert_array_equal(a.unitary, b.unitary)

    def test_trace_conservation(self):
        inst = build_model(SC4, BERN, SpikeSet(((3.0, 1),)), 200, seed=4)
        ev = inst.solve_spectrum()
        assert abs(ev.sum() - inst.a_diag.sum() - inst.b_diag.sum()) < 1e-8 * 200

    def test_finite_rank_outlier(self):
        ev = build_model(D0, SC1, SpikeSet(((2.0, 1),)), 1000, seed=12).solve_spectrum()
        assert ev[0] == pytest.approx(2.5, abs=0.1)
        assert ev[1] < 2.1


def ks_distance(sample, cdf_x, cdf):
    s = np.sort(sample)
    F = np.interp(s, cdf_x, cdf)
    n = len(s)
    return max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n))


class TestLaws:
    def test_unitary_invariance_in_law(self):
        a = build_model(SC4, BERN, SpikeSet(), 1000, seed=1).solve_spectrum()
        b = build_model(SC4, BERN, SpikeSet(), 1000, seed=2).solve_spectrum()
        grid = np.sort(np.concatenate([a, b]))
        Fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
        Fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
        assert np.max(np.abs(Fa - Fb)) < 0.05

    def test_bulk_matches_convolution(self):
        ev = build_model(SC4, BERN, SpikeSet(((3.0, 1),)), 2000, seed=8).solve_spectrum()
        K = convolution_support(SC4, BERN)
        bulk = ev[K.distance(ev) < 0.1]
        x, d = convolution_density(SC4, BERN, np.linspace(-1.8, 1.8, 3001), extrapolate=True)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(x))])
        cdf /= cdf[-1]
        assert ks_distance(bulk, x, cdf) < 0.05


@pytest.fixture(scope="module")
def spiked_model():
    spikes = SpikeSet(((3.0, 1),))
    inst = build_model(SC4, BERN, spikes, 300, seed=21)
    inst.solve_spectrum()
    return spikes, inst


class TestDeterminant:
    def test_no_spikes(self):
        inst = build_model(SC4, BERN, SpikeSet(), 20, seed=1)
        assert det_m_diagnostic(inst, SpikeSet(), 0.0, 5.0) == 1

    def test_zero_at_outlier(self, spiked_model):
        spikes, inst = spiked_model
        alpha = default_alpha(SC4)
        top = inst.eigenvalues[0]
        assert top == pytest.approx(3.31, abs=0.1)
        assert abs(det_m_diagnostic(inst, spikes, alpha, top)) < 1e-6
        assert abs(det_m_diagnostic(inst, spikes, alpha, top + 0.5)) > 1e-2

    def test_block_near_limit(self, spiked_model):
        spikes, inst = spiked_model
        alpha = default_alpha(SC4)
        _, block = det_m_diagnostic(inst, spikes, alpha, 3.310139713159904, return_block=True)
        assert block[0, 0].real == pytest.approx(1 / (3 - alpha), abs=0.1)

    def test_singular(self, spiked_model):
        spikes, inst = spiked_model
        a = inst.a_diag.copy()
        a[0] = 0.0
        U = inst.unitary
        Xp = np.diag(a) + (U.conj().T * inst.b_diag) @ U
        lam = np.linalg.eigvalsh((Xp + Xp.conj().T) / 2)[-1]
        with pytest.raises(SingularError):
            det_m_diagnostic(inst, spikes, 0.0, lam)

    def test_alpha_in_density(self):
        assert default_alpha(SC4) == pytest.approx(0.0, abs=1e-9)
        assert SC4.pdf(default_alpha(SC4)) > 0
        mp = SpectralMeasure.marchenko_pastur(2.0, 1.0)
        assert mp.pdf(default_alpha(mp)) > 0


class TestVerification:
    def test_no_spikes(self):
        rep = run_verification(SC4, BERN, SpikeSet(), [], 200, 2, 0.1, 0.2, seed=1)
        assert rep.pass_fraction == 1.0 and rep.strays == ()

    def test_small_model(self):
        spikes = SpikeSet(((3.0, 1),))
        K = convolution_support(SC4, BERN)
        preds = solve_outliers(SC4, BERN, spikes, K=K)
        rep = run_verification(SC4, BERN, spikes, preds, 400, 3, 0.1, 0.1, seed=3, K=K, threads=2)
        assert rep.pass_fraction == 1.0
        rows = rep.csv_rows()
        assert len(rows) == 6 and rows[0].startswith("0,")
        summary = rep.summary()
        assert summary["pass_fraction"] == 1.0 and len(summary["windows"]) == 2

    def test_threads_do_not_change_results(self):
        spikes = SpikeSet(((3.0, 1),))
        K = convolution_support(SC4, BERN)
        preds = solve_outliers(SC4, BERN, spikes, K=K)
        a = run_verification(SC4, BERN, spikes, preds, 150, 3, 0.1, 0.1, seed=3, K=K, threads=1)
        b = run_verification(SC4, BERN, spikes, preds, 150, 3, 0.1, 0.1, seed=3, K=K, threads=3)
        assert a.csv_rows() == b.csv_rows() and a.strays == b.strays

    def test_strays_reported(self):
        # a spike with no prediction leaves an unmatched eigenvalue
        spikes = SpikeSet(((3.0, 1),))
        rep = run_verification(SC4, BERN, spikes, [], 200, 2, 0.1, 0.1, seed=1)
        assert rep.pass_fraction == 0.0
        assert len(rep.strays) == 4

    def test_separation(self):
        K = convolution_support(SC4, BERN)
        p = [OutlierPrediction(3.0, 3.0, 1, 0.1, 0.0, 1.0), OutlierPrediction(3.1, 3.0, 1, 0.1, 0.0, 1.0)]
        with pytest.raises(ConfigError):
            run_verification(SC4, BERN, SpikeSet(), p, 100, 1, 0.1, 0.1, K=K)
        q = [OutlierPrediction(1.8, 3.0, 1, 0.1, 0.0, 0.04)]
        with pytest.raises(ConfigError):
            run_verification(SC4, BERN, SpikeSet(), q, 100, 1, 0.1, 0.1, K=K)

    def test_default_eta(self):
        K = convolution_support(SC1, SC1)
        assert default_eta(1000, K) == pytest.approx(4 * 0.1 * 4 * np.sqrt(2), rel=1e-4)


def test_boundary_flag():
    K = convolution_support(SC1, SC1)
    edge = K.intervals[0][1]
    p = [OutlierPrediction(edge + 0.3, 3.0, 1, 0.1, 0.0, 0.3)]
    rep = run_verification(SC1, SC1, SpikeSet(), p, 50, 1, 0.1, 0.3, K=K)
    assert rep.boundary_flags == (edge + 0.3,)
    assert rep.summary()["boundary_flags"] == [edge + 0.3]
