"""Path simulation: schemes, engines, transport, potentials, lifetimes."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oulab.fields import load_problem
from oulab import stochastics as sto
from oulab.stochastics import (
    PathBatch,
    PathNoise,
    SdeConfig,
    endpoint_state,
    loop_holonomy_angle,
    potential_path,
    resolve_engine,
    simulate_paths,
    transport_path,
)

needs_numba = pytest.mark.skipif(sto._numba is None, reason="numba not installed")


class TestSdeConfig:
    def test_n_steps(self):
        cfg = SdeConfig(dt=1e-2, t_final=1.0, n_paths=10)
        assert cfg.n_steps == 100

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(dt=-1e-2, t_final=1.0, n_paths=1),
            dict(dt=1e-2, t_final=-1.0, n_paths=1),
            dict(dt=1e-2, t_final=1.0, n_paths=0),
            dict(dt=3e-3, t_final=1e-2, n_paths=1),  # not an integer multiple
            dict(dt=1e-2, t_final=1.0, n_paths=1, scheme="euler_maruyama"),
            dict(dt=1e-2, t_final=1.0, n_paths=1, engine="gpu"),
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SdeConfig(**kwargs)


class TestPathNoise:
    def test_bit_identical_to_fresh_generators(self):
        noise = PathNoise(219)
        for i in (0, 1, 17, 2**40):
            want = np.random.Generator(np.random.Philox(key=[219, i])).standard_normal(
                (5, 3)
            )
            got = noise.normals(i, (5, 3))
            np.testing.assert_array_equal(got, want)

    def test_chunk_scaling(self):
        noise = PathNoise(4)
        arr = noise.chunk(2, 5, 7, 2, scale=0.25)
        assert arr.shape == (3, 7, 2)
        want = np.random.Generator(np.random.Philox(key=[4, 3])).standard_normal((7, 2))
        np.testing.assert_allclose(arr[1], 0.25 * want, rtol=0, atol=0)

    def test_reuse_does_not_leak_state(self):
        noise = PathNoise(9)
        first = noise.normals(3, (4,)).copy()
        noise.normals(8, (4,))
        np.testing.assert_array_equal(noise.normals(3, (4,)), first)


def _circle_problem():
    return load_problem({"manifold": "circle", "V": "0"})


def _cfg(**kw):
    base = dict(dt=1e-3, t_final=0.1, n_paths=256, seed=0)
    base.update(kw)
    return SdeConfig(**base)


class TestCirclePaths:
    def test_paths_stay_on_manifold(self):
        batch = simulate_paths(_circle_problem(), np.array([1.0, 0.0]), _cfg())
        radii = np.linalg.norm(batch.positions, axis=-1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-12)

    def test_diffusion_variance_factor_two(self):
        # angle increments are N(0, 2t): E cos(theta_t - theta_0) = e^{-t}
        cfg = _cfg(t_final=0.5, n_paths=20000, dt=5e-3, seed=3)
        state = endpoint_state(_circle_problem(), np.array([1.0, 0.0]), cfg)
        mean_cos = float(np.mean(state.y[:, 0]))
        se = float(np.std(state.y[:, 0]) / math.sqrt(cfg.n_paths))
        assert abs(mean_cos - math.exp(-0.5)) <= 3 * se

    def test_deterministic_across_chunkings(self):
        problem = _circle_problem()
        cfg = _cfg(n_paths=64)
        x0 = np.array([1.0, 0.0])
        whole = endpoint_state(problem, x0, cfg)
        first = endpoint_state(problem, x0, cfg, 0, 40)
        rest = endpoint_state(problem, x0, cfg, 40, 64)
        np.testing.assert_array_equal(np.vstack([first.y, rest.y]), whole.y)

    def test_seed_changes_paths(self):
        problem = _circle_problem()
        x0 = np.array([1.0, 0.0])
        a = endpoint_state(problem, x0, _cfg(seed=0))
        b = endpoint_state(problem, x0, _cfg(seed=1))
        assert not np.array_equal(a.y, b.y)

    def test_x0_must_be_on_manifold(self):
        with pytest.raises(ValueError, match="manifold"):
            simulate_paths(_circle_problem(), np.array([2.0, 0.0]), _cfg(n_paths=2))


class TestEuclideanPaths:
    def test_ou_mean_reversion(self, ou_line):
        cfg = SdeConfig(dt=5e-3, t_final=1.0, n_paths=20000, seed=5)
        state = endpoint_state(ou_line, np.array([1.0]), cfg)
        mean = float(np.mean(state.y[:, 0]))
        se = float(np.std(state.y[:, 0]) / math.sqrt(cfg.n_paths))
        assert abs(mean - math.exp(-1.0)) <= 3 * se

    def test_heat_variance(self):
        problem = load_problem({"manifold": "euclidean:1"})
        cfg = SdeConfig(dt=1e-2, t_final=1.0, n_paths=20000, seed=2)
        state = endpoint_state(problem, np.array([0.0]), cfg)
        # Var(Y_t) = 2t under the factor-two Brownian convention
        var = float(np.mean(state.y[:, 0] ** 2))
        se = float(np.std(state.y[:, 0] ** 2) / math.sqrt(cfg.n_paths))
        assert abs(var - 2.0) <= 3 * se

    def test_blowup_freezes_path(self):
        # phi = -x^4 gives outward drift 4x^3: explosion in finite time
        problem = load_problem({"manifold": "euclidean:1", "phi": "0 - x^4"})
        cfg = SdeConfig(dt=1e-2, t_final=2.0, n_paths=32, seed=1, engine="numpy")
        state = endpoint_state(problem, np.array([3.0]), cfg)
        assert np.any(~state.alive)
        dead = ~state.alive
        assert np.all(state.exit_step[dead] >= 0)
        assert np.all(np.isfinite(state.y[dead]))

    def test_alive_paths_have_sentinel_exit(self):
        state = endpoint_state(
            _circle_problem(), np.array([1.0, 0.0]), _cfg(n_paths=16)
        )
        assert np.all(state.alive)
        assert np.all(state.exit_step == -1)


@needs_numba
class TestEngineAgreement:
    def test_circle_full_problem(self, circle_full):
        x0 = np.array([1.0, 0.0])
        cfg_np = _cfg(n_paths=128, engine="numpy", t_final=0.05)
        cfg_nb = _cfg(n_paths=128, engine="numba", t_final=0.05)
        assert resolve_engine(circle_full, cfg_nb) == "numba"
        a = endpoint_state(circle_full, x0, cfg_np)
        b = endpoint_state(circle_full, x0, cfg_nb)
        np.testing.assert_allclose(a.y, b.y, atol=1e-12)
        np.testing.assert_allclose(a.vsum, b.vsum, atol=1e-12)

    def test_twisted_connection(self, twisted_u1):
        x0 = np.array([1.0, 0.0])
        a = endpoint_state(twisted_u1, x0, _cfg(n_paths=64, engine="numpy"))
        b = endpoint_state(twisted_u1, x0, _cfg(n_paths=64, engine="numba"))
        np.testing.assert_allclose(a.csum, b.csum, atol=1e-12)

    def test_unsupported_forcing_raises(self, torus_full):
        cfg = _cfg(engine="numba")
        with pytest.raises(RuntimeError, match="engine"):
            resolve_engine(torus_full, cfg)

    def test_winding_matches(self):
        problem = _circle_problem()
        x0 = np.array([1.0, 0.0])
        a = endpoint_state(problem, x0, _cfg(n_paths=64, engine="numpy"),
                           track_winding=True)
        b = endpoint_state(problem, x0, _cfg(n_paths=64, engine="numba"),
                           track_winding=True)
        np.testing.assert_allclose(a.wind, b.wind, atol=1e-12)


class TestWeakConvergence:
    def test_observed_order_at_least_0_8(self):
        """Coupled comparison: the accumulated tangential noise gives the exact
        angle theta_0 + N(0, 2t); the scheme's endpoint must approach it at
        first order in dt."""
        problem = _circle_problem()
        x0 = np.array([1.0, 0.0])
        t, n = 0.5, 40000
        errs = []
        dts = (2e-2, 1e-2, 5e-3)
        for dt in dts:
            cfg = SdeConfig(dt=dt, t_final=t, n_paths=n, seed=11)
            state = endpoint_state(problem, x0, cfg, track_winding=True)
            exact = np.cos(state.wind)  # theta0 = 0
            errs.append(abs(float(np.mean(state.y[:, 0] - exact))))
        order = math.log(errs[0] / errs[-1]) / math.log(dts[0] / dts[-1])
        assert order >= 0.8, (errs, order)


class TestTransport:
    def test_flat_trivial_transport_is_identity(self):
        batch = simulate_paths(_circle_problem(), np.array([1.0, 0.0]), _cfg(n_paths=4))
        batch = transport_path(_circle_problem(), batch)
        eye = np.broadcast_to(np.eye(1), batch.transports.shape)
        np.testing.assert_array_equal(batch.transports, eye)

    def test_transport_starts_at_identity_and_stays_unitary(self):
        problem = load_problem(
            {"manifold": "sphere2", "connection": {"bundle": "tangent"}}
        )
        x0 = problem.manifold.from_chart(np.array([0.3, -0.2]))
        cfg = SdeConfig(dt=1e-3, t_final=0.2, n_paths=8, seed=4)
        batch = transport_path(problem, simulate_paths(problem, x0, cfg))
        T = batch.transports
        np.testing.assert_array_equal(T[:, 0], np.broadcast_to(np.eye(2), T[:, 0].shape))
        gram = np.einsum("bkij,bkil->bkjl", T, T)
        defect = np.max(np.abs(gram - np.eye(2)))
        assert defect <= 1e-6

    def test_twisted_phase_magnitude_one(self, twisted_u1):
        batch = simulate_paths(twisted_u1, np.array([1.0, 0.0]), _cfg(n_paths=8))
        batch = transport_path(twisted_u1, batch)
        np.testing.assert_allclose(np.abs(batch.transports), 1.0, atol=1e-12)


class TestHolonomy:
    @staticmethod
    def _latitude_batch(alpha: float, k_steps: int) -> PathBatch:
        problem = load_problem(
            {"manifold": "sphere2", "connection": {"bundle": "tangent"}}
        )
        s = np.linspace(0.0, 2 * np.pi, k_steps + 1)
        pos = np.stack(
            [np.sin(alpha) * np.cos(s), np.sin(alpha) * np.sin(s),
             np.cos(alpha) * np.ones_like(s)],
            axis=-1,
        )[None, :, :]
        cfg = SdeConfig(dt=1.0 / k_steps, t_final=1.0, n_paths=1)
        return PathBatch(
            problem=problem,
            config=cfg,
            x0=pos[0, 0],
            positions=pos,
            alive=np.ones(1, dtype=bool),
            exit_step=np.full(1, -1, dtype=np.int64),
        )

    def test_latitude_loop_angle(self):
        problem = load_problem(
            {"manifold": "sphere2", "connection": {"bundle": "tangent"}}
        )
        batch = transport_path(problem, self._latitude_batch(np.pi / 3, 2000))
        angle = float(loop_holonomy_angle(batch)[0])
        # holonomy of the latitude loop: 2 pi (1 - cos alpha), wrapped
        assert angle == pytest.approx(math.pi, abs=1e-4)

    def test_equator_has_trivial_rotation(self):
        problem = load_problem(
            {"manifold": "sphere2", "connection": {"bundle": "tangent"}}
        )
        batch = transport_path(problem, self._latitude_batch(np.pi / 2, 1000))
        angle = float(loop_holonomy_angle(batch)[0])
        # 2 pi (1 - cos(pi/2)) = 2 pi, which wraps to 0
        assert angle == pytest.approx(0.0, abs=1e-4)


class TestPotentialProcess:
    def test_constant_scalar_potential_exact(self):
        problem = load_problem({"manifold": "circle", "V": "3"})
        cfg = _cfg(n_paths=4, t_final=0.25)
        state = endpoint_state(problem, np.array([1.0, 0.0]), cfg)
        np.testing.assert_allclose(np.exp(-state.vsum), math.exp(-0.75), rtol=1e-12)

    def test_matrix_potential_against_fine_rk4(self):
        problem = load_problem(
            {
                "manifold": "circle",
                "connection": {"bundle": "trivial", "m": 2},
                "V": {"matrix": [["2 + cos(theta)", "sin(theta)"],
                                  ["sin(theta)", "3"]]},
            }
        )
        cfg = SdeConfig(dt=2e-3, t_final=0.1, n_paths=3, seed=8)
        batch = simulate_paths(problem, np.array([1.0, 0.0]), cfg)
        batch = transport_path(problem, batch)
        batch = potential_path(problem, batch)
        V_of = lambda th: np.array(
            [[2 + np.cos(th), np.sin(th)], [np.sin(th), 3.0]]
        )
        for b in range(batch.n_paths):
            # reference: RK4 on dV/ds = -V * V(theta_s) with frozen theta per step
            v_ref = np.eye(2, dtype=complex)
            for k in range(batch.n_steps):
                th = math.atan2(batch.positions[b, k, 1], batch.positions[b, k, 0])
                a_mat = -V_of(th)
                h = cfg.dt
                f = lambda m: m @ a_mat
                k1 = f(v_ref)
                k2 = f(v_ref + 0.5 * h * k1)
                k3 = f(v_ref + 0.5 * h * k2)
                k4 = f(v_ref + h * k3)
                v_ref = v_ref + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            got = batch.potentials[b, -1]
            np.testing.assert_allclose(got, v_ref, atol=5e-8)

    def test_potential_factor_is_contraction_for_nonneg_v(self, circle_full):
        cfg = _cfg(n_paths=16, t_final=0.2)
        batch = simulate_paths(circle_full, np.array([1.0, 0.0]), cfg)
        batch = transport_path(circle_full, batch)
        batch = potential_path(circle_full, batch)
        norms = np.linalg.norm(batch.potentials, ord=2, axis=(-2, -1))
        assert np.all(norms <= 1.0 + 1e-10)
        # and nonincreasing along each path
        diffs = np.diff(norms, axis=1)
        assert np.all(diffs <= 1e-10)


class TestSchemes:
    @given(st.sampled_from(["heun_stratonovich", "projected_euler"]))
    @settings(max_examples=2, deadline=None)
    def test_both_schemes_stay_on_circle(self, scheme):
        cfg = _cfg(n_paths=32, scheme=scheme)
        batch = simulate_paths(_circle_problem(), np.array([1.0, 0.0]), cfg)
        np.testing.assert_allclose(
            np.linalg.norm(batch.positions, axis=-1), 1.0, atol=1e-12
        )

    def test_schemes_differ(self):
        x0 = np.array([1.0, 0.0])
        a = endpoint_state(_circle_problem(), x0, _cfg(scheme="heun_stratonovich"))
        b = endpoint_state(_circle_problem(), x0, _cfg(scheme="projected_euler"))
        assert not np.array_equal(a.y, b.y)
