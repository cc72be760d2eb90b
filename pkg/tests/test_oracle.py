import math

import numpy as np
import pytest

from alflow.geometry import (ROLE_INLET, ROLE_OUTLET, ROLE_WALL, BifurcationParams, Segment,
                             generate_bifurcation)
from alflow.oracle import (AnalyticOracle, FluidConstants, OracleError, VelocityField,
                           label_shape, poiseuille_velocity, segment_mean_speeds)

SEG = Segment((0.0, 0.0, 0.0), (0.0, 0.0, 1e-2), 2e-3)


def cap_flux(shape, field, role, segment, at_end):
    """Disk quadrature: area times the mean normal velocity over the cap lattice."""
    pts = shape.points[shape.mask(role)]
    v = field.values[shape.mask(role)]
    s, _ = segment.local_coords(pts)
    target = segment.length if at_end else 0.0
    near = np.abs(s - target) < 1e-6
    return math.pi * segment.radius**2 * float((v[near] @ segment.axis).mean()), near.sum()


class TestFluidConstants:
    def test_defaults(self):
        c = FluidConstants()
        assert (c.density, c.viscosity) == (1060.0, 3.5e-3)

    @pytest.mark.parametrize("rho, mu", [(0.0, 1e-3), (1000.0, -1.0)])
    def test_positive(self, rho, mu):
        with pytest.raises(ValueError):
            FluidConstants(rho, mu)


class TestPoiseuille:
    def test_on_axis(self):
        v = poiseuille_velocity((0, 0, 5e-3), SEG, 0.05)
        np.testing.assert_allclose(v, [0, 0, 0.1], rtol=1e-15)

    def test_wall(self):
        v = poiseuille_velocity((2e-3, 0, 5e-3), SEG, 0.05)
        assert np.all(v == 0.0)

    def test_half_area_radius(self):
        v = poiseuille_velocity((2e-3 / math.sqrt(2), 0, 5e-3), SEG, 0.05)
        assert np.linalg.norm(v) == pytest.approx(0.05, rel=1e-12)

    def test_outside(self):
        with pytest.raises(OracleError):
            poiseuille_velocity((3e-3, 0, 5e-3), SEG, 0.05)

    def test_tilted_axis(self):
        seg = Segment((0.0, 0.0, 0.0), (1.0, 1.0, 0.0), 0.5)
        v = poiseuille_velocity((0.5, 0.5, 0.0), seg, 1.0)
        np.testing.assert_allclose(v, 2.0 * np.array([1, 1, 0]) / math.sqrt(2), rtol=1e-14)


class TestMeanSpeeds:
    def test_flow_fractions_sum_to_one(self):
        params = BifurcationParams.with_murray(2e-3, 0.7, parent_length=8e-3, child_lengths=(5e-3, 5e-3))
        segs = params.segments()
        speeds = segment_mean_speeds(segs, 0.1)
        parent_q = speeds[0] * segs[0].radius**2
        child_q = sum(v * s.radius**2 for v, s in zip(speeds[1:], segs[1:]))
        assert child_q == pytest.approx(parent_q, rel=1e-14)
        fracs = [s.radius**3 / sum(c.radius**3 for c in segs[1:]) for s in segs[1:]]
        assert sum(fracs) == pytest.approx(1.0, rel=1e-15)


class TestLabelShape:
    def test_no_slip(self, small_bifurcation, small_labels):
        assert np.all(small_labels.values[small_bifurcation.mask(ROLE_WALL)] == 0.0)

    def test_straight_tube_profile(self, straight_tube):
        y = label_shape(straight_tube, inflow=0.05)
        seg = straight_tube.centerline[0]
        _, r = seg.local_coords(straight_tube.points)
        expected = np.where(straight_tube.roles == ROLE_WALL, 0.0, 0.1 * np.maximum(1 - (r / 2e-3) ** 2, 0))
        np.testing.assert_allclose(y.values[:, 2], expected, atol=1e-15)
        assert np.all(y.values[:, :2] == 0)

    def test_symmetric_flux_balance(self):
        params = BifurcationParams.with_murray(2e-3, 1.0, parent_length=8e-3, child_lengths=(6e-3, 6e-3),
                                               child_angles=(0.5, 0.5), seed=2)
        shape = generate_bifurcation(params)
        y = label_shape(shape)
        segs = shape.centerline
        q_in, n_in = cap_flux(shape, y, ROLE_INLET, segs[0], at_end=False)
        q_out = 0.0
        for seg in segs[1:]:
            q, n = cap_flux(shape, y, ROLE_OUTLET, seg, at_end=True)
            assert n == params.n_cap
            q_out += q
        assert n_in == params.n_cap
        assert q_out == pytest.approx(q_in, rel=0.02)

    def test_inflow_scaling(self, small_bifurcation):
        a = label_shape(small_bifurcation, inflow=0.1).values
        b = label_shape(small_bifurcation, inflow=0.2).values
        np.testing.assert_array_equal(b, 2.0 * a)

    def test_stray_point(self, small_bifurcation):
        far = small_bifurcation.points.copy()
        far[0] = (1.0, 1.0, 1.0)
        from alflow.geometry import Shape
        bad = Shape.from_arrays("bad", far, small_bifurcation.roles, small_bifurcation.centerline)
        with pytest.raises(OracleError):
            label_shape(bad)

    def test_nonpositive_inflow(self, small_bifurcation):
        with pytest.raises(OracleError):
            label_shape(small_bifurcation, inflow=0.0)

    def test_noise_is_seeded_and_spares_walls(self, small_bifurcation):
        a = label_shape(small_bifurcation, noise_sigma=1e-3, noise_seed=7)
        b = label_shape(small_bifurcation, noise_sigma=1e-3, noise_seed=7)
        np.testing.assert_array_equal(a.values, b.values)
        assert np.all(a.values[small_bifurcation.mask(ROLE_WALL)] == 0.0)
        clean = label_shape(small_bifurcation)
        resid = (a.values - clean.values)[~small_bifurcation.mask(ROLE_WALL)]
        assert resid.std() == pytest.approx(1e-3, rel=0.1)


class TestAnalyticOracle:
    def test_counts_calls(self, small_bifurcation):
        oracle = AnalyticOracle()
        oracle(small_bifurcation)
        oracle(small_bifurcation)
        assert oracle.calls == 2

    def test_velocity_field_checks(self):
        with pytest.raises(ValueError):
            VelocityField(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            VelocityField(np.array([[np.nan, 0.0, 0.0]]))
