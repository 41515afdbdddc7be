import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeconv.errors import DomainError, FamilyError
from freeconv.measure import SpectralMeasure
from freeconv.outlier import (
    SpikeSet,
    analytic_pieces,
    derivative_product,
    edge_thresholds,
    outliers_infdiv,
    outliers_point_mass,
    safeguarded_newton,
    solve_outliers,
    spike_residual,
)
from freeconv.subordination import convolution_support

SC1 = SpectralMeasure.semicircle(1.0)
SC4 = SpectralMeasure.semicircle(0.25)
BERN = SpectralMeasure.bernoulli_symmetric()
K_EX = convolution_support(SC4, BERN)


def bernoulli_roots(t, theta):
    """Roots for semicircle(t) + Bernoulli.

    With c = h_sc(theta) = -(theta - sqrt(theta^2 - 4t)) / 2 and h_b(w) = -1/w,
    the spike equation becomes (rho - theta)(rho + c) = 1.
    """
    c = -(theta - math.copysign(math.sqrt(theta * theta - 4 * t), theta)) / 2
    disc = math.sqrt((theta + c) ** 2 + 4)
    roots = [((theta - c) + disc) / 2, ((theta - c) - disc) / 2]
    dh = 0.5 * (1 - abs(theta) / math.sqrt(theta * theta - 4 * t))
    dh = -dh  # h = -t G, so h' = -t G' and G' < 0 off the support
    prods = [dh / (c + r) ** 2 for r in roots]
    return roots, prods


class TestSpikeSet:
    def test_ordering(self):
        with pytest.raises(ValueError):
            SpikeSet(((1.0, 1), (2.0, 1)))
        s = SpikeSet.from_pairs([(1.0, 1), (3.0, 2), (1.0, 1)])
        assert s.spikes == ((3.0, 2), (1.0, 2))
        assert s.rank == 4
        np.testing.assert_array_equal(s.diagonal(), [3, 3, 1, 1])

    def test_multiplicity_positive(self):
        with pytest.raises(ValueError):
            SpikeSet(((1.0, 0),))

    def test_spike_in_support(self):
        with pytest.raises(DomainError):
            solve_outliers(SC4, BERN, SpikeSet(((0.5, 1),)))


class TestSemicircleBernoulli:
    def test_two_roots(self):
        preds = solve_outliers(SC4, BERN, SpikeSet(((3.0, 1),)), window=(-5, 5), K=K_EX)
        roots, prods = bernoulli_roots(0.25, 3.0)
        assert len(preds) == 2
        np.testing.assert_allclose([p.rho for p in preds], sorted(roots), atol=1e-10)
        np.testing.assert_allclose([p.derivative_product for p in preds], [prods[1], prods[0]], rtol=1e-9)
        assert all(abs(p.residual) < 1e-10 for p in preds)

    def test_frozen_values(self):
        preds = solve_outliers(SC4, BERN, SpikeSet(((3.0, 1),)), window=(-5, 5), K=K_EX)
        assert preds[0].rho == pytest.approx(-0.22435327553299866, abs=1e-12)
        assert preds[1].rho == pytest.approx(3.310139713159904, abs=1e-12)
        assert preds[0].derivative_product == pytest.approx(0.31532534414871516, rel=1e-10)
        assert preds[1].derivative_product == pytest.approx(0.002917349103583319, rel=1e-10)

    def test_residual_and_product_helpers(self):
        assert spike_residual(SC4, BERN, 3.0, 3.310139713159904) == pytest.approx(0.0, abs=1e-13)
        assert derivative_product(SC4, BERN, 3.0, 3.310139713159904) == pytest.approx(0.002917349103583319)
        # h_sc(3) + rho = 0 is a pole of F_b
        c = -(3 - math.sqrt(8)) / 2
        with pytest.raises(DomainError):
            spike_residual(SC4, BERN, 3.0, -c)

    def test_default_window(self):
        preds = solve_outliers(SC4, BERN, SpikeSet(((3.0, 1),)), K=K_EX)
        assert len(preds) == 2

    def test_pieces_split_at_pole(self):
        pieces = analytic_pieces(BERN, -3, 3)
        assert pieces == [(-3, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 3)]


@settings(max_examples=25, deadline=None)
@given(theta=st.one_of(st.floats(1.05, 6.0), st.floats(-6.0, -1.05)))
def test_bernoulli_family_matches_quadratic(theta):
    roots, prods = bernoulli_roots(0.25, theta)
    expected = sorted(
        r for r, p in zip(roots, prods) if 1e-12 < p < 1 - 1e-9 and K_EX.distance(r) > 1e-4
    )
    got = [p.rho for p in solve_outliers(SC4, BERN, SpikeSet(((theta, 1),)), K=K_EX, cross_check=False)]
    np.testing.assert_allclose(got, expected, atol=1e-9)


class TestFiniteRank:
    def test_above_threshold(self):
        preds = outliers_point_mass(SC1, SpikeSet(((2.0, 1),)))
        assert len(preds) == 1
        assert preds[0].rho == pytest.approx(2.5, abs=1e-12)

    def test_below_threshold(self):
        assert outliers_point_mass(SC1, SpikeSet(((0.9, 1),))) == []

    def test_negative_spike(self):
        preds = outliers_point_mass(SC1, SpikeSet(((-3.0, 1),)))
        assert preds[0].rho == pytest.approx(-3 - 1 / 3, abs=1e-12)

    def test_general_solver_routes_point_mass(self):
        d0 = SpectralMeasure.point_mass(0.0)
        preds = solve_outliers(d0, SC1, SpikeSet(((2.0, 1), (0.9, 1))))
        assert [p.rho for p in preds] == pytest.approx([2.5])

    def test_threshold(self):
        lo, hi = edge_thresholds(SC1)
        assert hi == pytest.approx(1.0, abs=1e-8)
        assert lo == pytest.approx(-1.0, abs=1e-8)

    def test_shifted_point_mass(self):
        preds = outliers_point_mass(SC1, SpikeSet(((3.0, 1),)), a=1.0)
        # F(rho - 1) + 1 = 3 -> rho - 1 = 2 + 1/2
        assert preds[0].rho == pytest.approx(3.5)

    def test_bulk_gap(self):
        # nu = Bernoulli: F(x) = x - 1/x, so F(x) = g has a root in every piece
        preds = outliers_point_mass(BERN, SpikeSet(((0.5, 1),)))
        roots = sorted([(0.5 + math.sqrt(4.25)) / 2, (0.5 - math.sqrt(4.25)) / 2])
        np.testing.assert_allclose([p.rho for p in preds], roots, atol=1e-12)


class TestInfinitelyDivisible:
    def test_semicircle_pair(self):
        # H(theta) = theta + G_sc1(theta)
        rho = outliers_infdiv(SC1, SC1, 3.0)
        assert rho == pytest.approx(3 + (3 - math.sqrt(5)) / 2, abs=1e-14)
        preds = solve_outliers(SC1, SC1, SpikeSet(((3.0, 1),)))
        assert preds[0].rho == pytest.approx(rho, abs=1e-10)

    def test_marchenko_pastur(self):
        mp = SpectralMeasure.marchenko_pastur(0.5, 1.0)
        spikes = SpikeSet(((3.0, 1), (-2.5, 1)))
        preds = solve_outliers(SC1, mp, spikes)
        ref = sorted(outliers_infdiv(SC1, mp, t) for t in spikes.thetas)
        np.testing.assert_allclose([p.rho for p in preds], ref, atol=1e-8)

    def test_subcritical_spike_none(self):
        # H'(theta) <= 0 close to the bulk edge
        assert outliers_infdiv(SC1, SC1, 2.05) is None
        assert solve_outliers(SC1, SC1, SpikeSet(((2.05, 1),))) == []

    def test_not_infinitely_divisible(self):
        with pytest.raises(FamilyError):
            outliers_infdiv(SC1, BERN, 3.0)

    def test_finite_rank_agrees(self):
        d0 = SpectralMeasure.point_mass(0.0)
        assert outliers_infdiv(d0, SC1, 2.0) == pytest.approx(2.5, abs=1e-12)


class TestPointMassNu:
    def test_translation(self):
        preds = solve_outliers(SC1, SpectralMeasure.point_mass(1.0), SpikeSet(((3.0, 2),)))
        assert preds[0].rho == 4.0 and preds[0].multiplicity == 2


class TestSafeguardedNewton:
    def test_cubic(self):
        f = lambda x: x**3 - 2 * x - 5
        df = lambda x: 3 * x**2 - 2
        x, fx = safeguarded_newton(f, df, 2.0, 3.0)
        assert x == pytest.approx(2.0945514815423265, abs=1e-14)

    def test_bad_derivative_falls_back_to_bisection(self):
        x, fx = safeguarded_newton(lambda x: x - 0.3, lambda x: 0.0, 0.0, 1.0)
        assert x == pytest.approx(0.3, abs=1e-14)

    def test_no_sign_change(self):
        with pytest.raises(ValueError):
            safeguarded_newton(lambda x: x * x + 1, lambda x: 2 * x, -1.0, 1.0)
