"""Embedded-manifold geometry: charts, frames, projectors, retractions."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oulab.geometry import MANIFOLD_NAMES, make_manifold

ALL = ["circle", "torus2", "sphere2", "euclidean:1", "euclidean:3"]


@pytest.fixture(params=ALL)
def manifold(request):
    return make_manifold(request.param)


def _samples(man, count=64, seed=0):
    gen = np.random.Generator(np.random.Philox(key=[seed, 77]))
    if man.name.startswith("euclidean"):
        return gen.normal(scale=1.5, size=(count, man.dim))
    c = man.sample_chart_coords(count)
    # jitter within the chart to avoid grid artifacts
    return c + 0.0


class TestCharts:
    def test_round_trip(self, manifold):
        c = _samples(manifold)
        x = manifold.from_chart(c)
        assert x.shape == c.shape[:-1] + (manifold.ambient_dim,)
        c2 = manifold.to_chart(x)
        x2 = manifold.from_chart(c2)
        np.testing.assert_allclose(x2, x, atol=1e-12)

    def test_points_on_manifold(self, manifold):
        x = manifold.from_chart(_samples(manifold))
        np.testing.assert_allclose(manifold.retract(x), x, atol=1e-12)

    def test_jacobian_matches_finite_differences(self, manifold):
        c = _samples(manifold, count=8)
        jac = manifold.chart_jacobian(c)
        h = 1e-6
        for k in range(manifold.dim):
            step = np.zeros_like(c)
            step[..., k] = h
            fd = (manifold.from_chart(c + step) - manifold.from_chart(c - step)) / (2 * h)
            np.testing.assert_allclose(jac[..., :, k], fd, atol=1e-8)

    def test_metric_is_jacobian_gram(self, manifold):
        c = _samples(manifold, count=16)
        jac = manifold.chart_jacobian(c)
        gram = np.einsum("...ia,...ib->...ab", jac, jac)
        np.testing.assert_allclose(manifold.metric(c), gram, atol=1e-12)


class TestTangent:
    def test_projector_is_orthogonal_projection(self, manifold):
        x = manifold.from_chart(_samples(manifold, count=16))
        P = manifold.tangent_projector(x)
        np.testing.assert_allclose(P, np.swapaxes(P, -1, -2), atol=1e-12)
        np.testing.assert_allclose(np.einsum("...ij,...jk->...ik", P, P), P, atol=1e-12)
        trace = np.einsum("...ii", P)
        np.testing.assert_allclose(trace, manifold.dim, atol=1e-12)

    def test_frame_orthonormal_spans_projector(self, manifold):
        x = manifold.from_chart(_samples(manifold, count=16))
        E = manifold.frame(x)
        gram = np.einsum("...ia,...ib->...ab", E, E)
        eye = np.broadcast_to(np.eye(manifold.dim), gram.shape)
        np.testing.assert_allclose(gram, eye, atol=1e-12)
        np.testing.assert_allclose(
            np.einsum("...ia,...ja->...ij", E, E),
            manifold.tangent_projector(x),
            atol=1e-12,
        )

    def test_project_tangent_kills_normals(self, manifold):
        gen = np.random.Generator(np.random.Philox(key=[3, 77]))
        x = manifold.from_chart(_samples(manifold, count=16))
        v = gen.normal(size=x.shape)
        pv = manifold.project_tangent(x, v)
        # idempotent and inside the tangent space
        np.testing.assert_allclose(manifold.project_tangent(x, pv), pv, atol=1e-12)
        P = manifold.tangent_projector(x)
        np.testing.assert_allclose(pv, np.einsum("...ij,...j->...i", P, v), atol=1e-12)


class TestRetract:
    @given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
    @settings(max_examples=30, deadline=None)
    def test_circle_retract_normalizes(self, dx, dy):
        man = make_manifold("circle")
        y = np.array([1.0 + dx, dy])
        r = man.retract(y)
        assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-15)

    def test_sphere_retract_normalizes(self):
        man = make_manifold("sphere2")
        gen = np.random.Generator(np.random.Philox(key=[4, 77]))
        y = gen.normal(size=(32, 3)) * 0.2 + np.array([0.0, 0.0, 1.0])
        r = man.retract(y)
        np.testing.assert_allclose(np.linalg.norm(r, axis=-1), 1.0, atol=1e-15)

    def test_torus_retract_projects_both_circles(self):
        man = make_manifold("torus2")
        c = man.sample_chart_coords(16)
        x = man.from_chart(c)
        gen = np.random.Generator(np.random.Philox(key=[5, 77]))
        y = x + 0.05 * gen.normal(size=x.shape)
        r = man.retract(y)
        np.testing.assert_allclose(man.retract(r), r, atol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(r[..., 0:2], axis=-1), 1.0, atol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(r[..., 2:4], axis=-1), 1.0, atol=1e-14)

    def test_retract_idempotent(self, manifold):
        x = manifold.from_chart(_samples(manifold, count=16))
        gen = np.random.Generator(np.random.Philox(key=[6, 77]))
        y = x + 0.03 * gen.normal(size=x.shape)
        r = manifold.retract(y)
        np.testing.assert_allclose(manifold.retract(r), r, atol=1e-12)


class TestSampling:
    def test_sample_shapes_and_ranges(self, manifold):
        # the contract is "count-ish": grids may round to a per-axis power
        c = manifold.sample_chart_coords(100)
        assert c.ndim == 2 and c.shape[1] == manifold.dim
        assert c.shape[0] >= 25
        assert np.all(np.isfinite(c))

    def test_angle_vars_match_chart(self):
        assert make_manifold("circle").angle_vars == frozenset(("theta",))
        assert make_manifold("torus2").angle_vars == frozenset(("theta1", "theta2"))
        assert make_manifold("euclidean:2").angle_vars == frozenset()

    def test_unknown_manifold_rejected(self):
        with pytest.raises(ValueError, match="unknown manifold"):
            make_manifold("klein_bottle")
        assert "circle" in MANIFOLD_NAMES


class TestSphereCharts:
    def test_two_charts_cover(self):
        man = make_manifold("sphere2")
        c = man.sample_chart_coords(32, chart=1)
        x = man.from_chart(c, chart=1)
        np.testing.assert_allclose(np.linalg.norm(x, axis=-1), 1.0, atol=1e-12)

    def test_curvature_enters_laplacian_scale(self):
        # stereographic chart has conformal metric; scale must be positive
        man = make_manifold("sphere2")
        c = man.sample_chart_coords(32)
        s = man.neg_laplacian_scale(c)
        assert np.all(s > 0)
