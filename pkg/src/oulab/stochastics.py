"""Sample paths of the manifold diffusion, with transport and potential factors.

The diffusion has generator ``-laplacian + Z`` (nonnegative Laplacian,
``Z = X - grad(phi)``) and is discretized extrinsically: per step draw
``dW`` with independent N(0, 2 dt) components in the ambient space, apply
the tangent projector, step, and retract back onto the manifold.

Schemes
-------
heun_stratonovich (default)
    predictor  y* = retract(Y + A(Y) dW + Z(Y) dt)
    corrector  Y' = retract(Y + 1/2 [A(Y) + A(y*)] dW + 1/2 [Z(Y) + Z(y*)] dt)
projected_euler
    Y' = retract(Y + A(Y) dW + Z(Y) dt)

Noise is counter-based: path ``i`` consumes exactly the stream of
``Philox(key=(seed, i))``, so results are identical bytes for any chunk
or worker partition.  Hot cases (circle, line) run through optionally
numba-compiled kernels whose field evaluations are trig-linearized
(polynomials in the embedded cos/sin coordinates); everything else uses
the vectorized numpy engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import expressions as ex
from .fields import Problem, make_ambient_drift
from .geometry import TWO_PI

try:  # optional accelerator; the numpy engine is always available
    import numba as _numba
except ImportError:  # pragma: no cover - environment without numba
    _numba = None

__all__ = [
    "SCHEMES",
    "SdeConfig",
    "PathBatch",
    "simulate_paths",
    "transport_path",
    "potential_path",
    "loop_holonomy_angle",
    "endpoint_state",
    "resolve_engine",
    "PathNoise",
    "BLOWUP_RADIUS",
]

SCHEMES = ("heun_stratonovich", "projected_euler")
ENGINES = ("auto", "numpy", "numba")
BLOWUP_RADIUS = 1.0e6
_CHUNK = 16384
_MAX_STEPS = 10**8


@dataclass(frozen=True)
class SdeConfig:
    dt: float
    t_final: float
    n_paths: int
    seed: int = 0
    scheme: str = "heun_stratonovich"
    engine: str = "auto"

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.t_final < 0.0:
            raise ValueError(f"t_final must be >= 0, got {self.t_final}")
        if self.t_final / self.dt > _MAX_STEPS:
            raise ValueError("t_final/dt exceeds 1e8 steps")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        k = round(self.t_final / self.dt)
        if abs(k * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(
                f"t_final={self.t_final} is not an integer multiple of dt={self.dt}"
            )

    @property
    def n_steps(self) -> int:
        return round(self.t_final / self.dt)


# ---------------------------------------------------------------------------
# Per-path noise
# ---------------------------------------------------------------------------


class PathNoise:
    """Standard-normal blocks of the per-path Philox streams.

    ``normals(i, shape)`` returns exactly what
    ``Generator(Philox(key=[seed, i])).standard_normal(shape)`` would,
    but reuses one generator object (state reset per path) to keep the
    per-path cost low.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 64) - 1)
        self._bg = np.random.Philox(key=[self.seed, 0])
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state
        self._counter = np.zeros(4, dtype=np.uint64)
        self._key = np.array([self.seed, 0], dtype=np.uint64)

    def normals(self, path_index: int, shape, out=None) -> np.ndarray:
        self._key[1] = path_index
        st = self._state
        st["state"]["counter"] = self._counter
        st["state"]["key"] = self._key
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        if out is not None:
            return self._gen.standard_normal(out=out)
        return self._gen.standard_normal(shape)

    def chunk(self, lo: int, hi: int, n_steps: int, l: int, scale: float) -> np.ndarray:
        """(hi-lo, n_steps, l) array of N(0, scale^2) increments."""
        arr = np.empty((hi - lo, n_steps, l))
        for j in range(hi - lo):
            self.normals(lo + j, None, out=arr[j])
        arr *= scale
        return arr


# ---------------------------------------------------------------------------
# Compiled chart functions (trig-linearized scalar fields)
# ---------------------------------------------------------------------------

# Placeholder-style sources: "{c}"/"{s}" (circle), "{x}" (line), filled with
# concrete variable names when the kernel source is assembled.
_CIRCLE_NAMES = {ex.cos_symbol("theta"): "{c}", ex.sin_symbol("theta"): "{s}"}


def _circle_expr_source(ast) -> str:
    lin = ex.linearize_trig(ast, ("theta",))
    return ex.to_python(lin, names=_CIRCLE_NAMES)


def _line_expr_source(ast) -> str:
    return ex.to_python(ast, names={"x": "{x}"})


# ---------------------------------------------------------------------------
# numba kernels (circle, line)
# ---------------------------------------------------------------------------

_KERNEL_CACHE: dict = {}


def _compile_kernel(source: str, name: str):
    key = source
    fn = _KERNEL_CACHE.get(key)
    if fn is None:
        ns = {"math": math, "np": np}
        exec(source, ns)  # noqa: S102 - source assembled from validated ASTs
        fn = _numba.njit(ns[name], cache=False, fastmath=False)
        _KERNEL_CACHE[key] = fn
    return fn


def _circle_kernel_source(z_src, v_src, w_src, heun: bool, track_winding: bool) -> str:
    e = {"c": "c", "s": "s"}
    ep = {"c": "pc", "s": "ps"}
    em = {"c": "mc", "s": "ms"}
    lines = [
        "def kernel(y, noise, dt, n_steps, out_pos, out_vsum, out_iw, out_wind):",
        "    n_paths = y.shape[0]",
        "    for i in range(n_paths):",
        "        c = y[i, 0]",
        "        s = y[i, 1]",
        "        vs = 0.0",
        "        iw = 0.0",
        "        wind = 0.0",
        "        for k in range(n_steps):",
        "            dw0 = noise[i, k, 0]",
        "            dw1 = noise[i, k, 1]",
    ]
    a = lines.append
    if v_src is not None:
        a(f"            vs += ({v_src.format(**e)}) * dt")
    a("            xi = c * dw1 - s * dw0")
    if track_winding:
        a("            wind += xi")
    a("            ax = -(xi * s)")
    a("            ay = xi * c")
    if z_src is not None:
        a(f"            z0 = ({z_src.format(**e)}) * dt")
        a("            px = c + ax - z0 * s")
        a("            py = s + ay + z0 * c")
    else:
        a("            px = c + ax")
        a("            py = s + ay")
    a("            inv = 1.0 / math.sqrt(px * px + py * py)")
    a("            pc = px * inv")
    a("            ps = py * inv")
    if heun:
        a("            xj = pc * dw1 - ps * dw0")
        a("            bx = 0.5 * (ax - xj * ps)")
        a("            by = 0.5 * (ay + xj * pc)")
        if z_src is not None:
            a(f"            z1 = ({z_src.format(**ep)}) * dt")
            a("            bx = bx + 0.5 * (-(z0 * s) - z1 * ps)")
            a("            by = by + 0.5 * (z0 * c + z1 * pc)")
        a("            qx = c + bx")
        a("            qy = s + by")
        a("            inv = 1.0 / math.sqrt(qx * qx + qy * qy)")
        a("            nc = qx * inv")
        a("            ns = qy * inv")
    else:
        a("            nc = pc")
        a("            ns = ps")
    if w_src is not None:
        a("            dth = math.atan2(c * ns - s * nc, c * nc + s * ns)")
        a("            mx = c + nc")
        a("            my = s + ns")
        a("            minv = 1.0 / math.sqrt(mx * mx + my * my)")
        a("            mc = mx * minv")
        a("            ms = my * minv")
        a(f"            iw += ({w_src.format(**em)}) * dth")
    a("            c = nc")
    a("            s = ns")
    a("        out_pos[i, 0] = c")
    a("        out_pos[i, 1] = s")
    a("        out_vsum[i] = vs")
    a("        out_iw[i] = iw")
    a("        out_wind[i] = wind")
    return "\n".join(lines)


def _line_kernel_source(z_src, v_src, heun: bool) -> str:
    e = {"x": "x"}
    ep = {"x": "xp"}
    lines = [
        "def kernel(y, noise, dt, n_steps, out_pos, out_vsum, out_alive, out_exit):",
        "    n_paths = y.shape[0]",
        "    for i in range(n_paths):",
        "        x = y[i, 0]",
        "        vs = 0.0",
        "        alive = True",
        "        exitk = -1",
        "        for k in range(n_steps):",
        "            dw = noise[i, k, 0]",
    ]
    a = lines.append
    if v_src is not None:
        a(f"            vs += ({v_src.format(**e)}) * dt")
    if z_src is not None:
        a(f"            z0 = ({z_src.format(**e)}) * dt")
        if heun:
            a("            xp = x + dw + z0")
            a(f"            z1 = ({z_src.format(**ep)}) * dt")
            a("            xn = x + dw + 0.5 * (z0 + z1)")
        else:
            a("            xn = x + dw + z0")
    else:
        a("            xn = x + dw")
    a(f"            if abs(xn) > {BLOWUP_RADIUS!r}:")
    a("                alive = False")
    a("                exitk = k + 1")
    a("                break")
    a("            x = xn")
    a("        out_pos[i, 0] = x")
    a("        out_vsum[i] = vs")
    a("        out_alive[i] = alive")
    a("        out_exit[i] = exitk")
    return "\n".join(lines)


def _kernel_plan(problem: Problem, cfg: SdeConfig):
    """Return (kind, kernel) when the fast kernel applies, else None."""
    if _numba is None or cfg.engine == "numpy":
        return None
    conn = problem.connection
    if conn.bundle != "trivial" or conn.m != 1:
        return None
    if not problem.potential.is_scalar:
        return None
    man = problem.manifold
    heun = cfg.scheme == "heun_stratonovich"
    v_ast = ex.simplify(problem.potential.scalar.ast)
    v_is_zero = ex.is_zero(v_ast)

    if man.name == "circle":
        w_src = None
        if not conn.is_flat:
            (re_f, im_f) = conn.omega[0][0][0]
            if not re_f.is_zero:
                return None  # anti-Hermitian 1x1 must be purely imaginary
            w_src = _circle_expr_source(im_f.ast)
        z_ast = ex.simplify(
            ex.Sub(problem.vector_field.components[0], problem.phi._grad_asts[0])
        )
        z_src = None if ex.is_zero(z_ast) else _circle_expr_source(z_ast)
        v_src = None if v_is_zero else _circle_expr_source(v_ast)
        source = _circle_kernel_source(z_src, v_src, w_src, heun, True)
        return "circle", _compile_kernel(source, "kernel")

    if man.name == "euclidean:1":
        if not conn.is_flat:
            return None
        z_ast = ex.simplify(
            ex.Sub(problem.vector_field.components[0], problem.phi._grad_asts[0])
        )
        z_src = None if ex.is_zero(z_ast) else _line_expr_source(z_ast)
        v_src = None if v_is_zero else _line_expr_source(v_ast)
        source = _line_kernel_source(z_src, v_src, heun)
        return "line", _compile_kernel(source, "kernel")

    return None


def resolve_engine(problem: Problem, cfg: SdeConfig) -> str:
    """Which engine endpoint_state will use ('numba' or 'numpy')."""
    if cfg.engine == "numba" and _numba is None:
        raise RuntimeError("engine='numba' requested but numba is not installed")
    plan = _kernel_plan(problem, cfg)
    if plan is None:
        if cfg.engine == "numba":
            raise RuntimeError(
                "engine='numba' requested but this problem has no compiled kernel "
                "(needs circle or euclidean:1, scalar V, trivial rank-1 bundle)"
            )
        return "numpy"
    return "numba"


# ---------------------------------------------------------------------------
# Endpoint state (fused simulation without storing paths)
# ---------------------------------------------------------------------------


@dataclass
class EndpointState:
    """Per-path terminal data for the Feynman-Kac estimator."""

    y: np.ndarray  # (B, l) final ambient positions
    alive: np.ndarray  # (B,) bool
    exit_step: np.ndarray  # (B,) int64; -1 when the path never exited
    vsum: np.ndarray | None = None  # (B,) integral of scalar V along path
    vmat: np.ndarray | None = None  # (B, m, m) potential factor (matrix V)
    csum: np.ndarray | None = None  # (B,) complex: integral of omega (m=1)
    tmat: np.ndarray | None = None  # (B, m, m) transport (trivial, m>1)
    frame_k: np.ndarray | None = None  # (B, l, n) final frames (tangent bundle)
    wind: np.ndarray | None = None  # (B,) accumulated tangential gaussians


def endpoint_state(
    problem: Problem,
    x0: np.ndarray,
    cfg: SdeConfig,
    lo: int = 0,
    hi: int | None = None,
    track_winding: bool = False,
) -> EndpointState:
    """Terminal path data for paths [lo, hi) of the configured ensemble.

    ``x0`` is an ambient point on the manifold.  Results for path i are
    independent of (lo, hi) chunking.
    """
    hi = cfg.n_paths if hi is None else hi
    plan = _kernel_plan(problem, cfg)
    if plan is not None:
        return _kernel_endpoint(problem, x0, cfg, lo, hi, plan)
    _, state = _numpy_paths(problem, x0, cfg, lo, hi, store=False, track_winding=track_winding)
    return state


def _kernel_endpoint(problem, x0, cfg, lo, hi, plan) -> EndpointState:
    kind, kernel = plan
    man = problem.manifold
    l = man.ambient_dim
    K = cfg.n_steps
    noise_src = PathNoise(cfg.seed)
    scale = math.sqrt(2.0 * cfg.dt)

    n_total = hi - lo
    y_out = np.empty((n_total, l))
    vsum = np.zeros(n_total)
    alive = np.ones(n_total, dtype=bool)
    exit_step = np.full(n_total, -1, dtype=np.int64)
    iw = np.zeros(n_total)
    wind = np.zeros(n_total)

    for clo in range(lo, hi, _CHUNK):
        chi = min(clo + _CHUNK, hi)
        a, b = clo - lo, chi - lo
        B = chi - clo
        y = np.repeat(np.asarray(x0, dtype=float)[None, :], B, axis=0)
        if K > 0:
            noise = noise_src.chunk(clo, chi, K, l, scale)
            if kind == "circle":
                kernel(y, noise, cfg.dt, K, y_out[a:b], vsum[a:b], iw[a:b], wind[a:b])
            else:  # line
                kernel(
                    y, noise, cfg.dt, K, y_out[a:b], vsum[a:b], alive[a:b], exit_step[a:b]
                )
        else:
            y_out[a:b] = y

    has_v = not (problem.potential.is_scalar and problem.potential.scalar.is_zero)
    state = EndpointState(
        y=y_out,
        alive=alive,
        exit_step=exit_step,
        vsum=vsum if has_v else None,
        wind=wind if kind == "circle" else None,
    )
    if not problem.connection.is_flat:
        state.csum = 1j * iw
    return state


# ---------------------------------------------------------------------------
# Generic numpy engine (all manifolds / bundles); optionally stores paths
# ---------------------------------------------------------------------------


def _polar_factor(mats: np.ndarray) -> np.ndarray:
    """Orthonormal polar factor U V^H of (..., l, n) matrices."""
    u, sing, vh = np.linalg.svd(mats, full_matrices=False)
    if np.any(sing < 1e-8):
        raise FloatingPointError(
            "parallel transport lost rank (projection nearly singular); "
            "reduce dt"
        )
    return u @ vh


def _expm_anti_hermitian(s: np.ndarray) -> np.ndarray:
    """exp(S) for anti-Hermitian S of shape (..., m, m)."""
    herm = -1j * s
    w, u = np.linalg.eigh(herm)
    phase = np.exp(1j * w)
    return (u * phase[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def _expm_neg_hermitian(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-dt H) for Hermitian H of shape (..., m, m)."""
    w, u = np.linalg.eigh(h)
    decay = np.exp(-dt * w)
    return (u * decay[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def _wrap_chart_delta(man, c_new: np.ndarray, c_prev: np.ndarray) -> np.ndarray:
    delta = c_new - c_prev
    if man.angle_vars:
        # all chart variables of circle/torus2 are angles
        delta = (delta + np.pi) % TWO_PI - np.pi
    return delta


def _numpy_paths(
    problem: Problem,
    x0: np.ndarray,
    cfg: SdeConfig,
    lo: int,
    hi: int,
    store: bool,
    track_winding: bool = False,
):
    """Reference engine. Returns (positions or None, EndpointState)."""
    man = problem.manifold
    conn = problem.connection
    l = man.ambient_dim
    K = cfg.n_steps
    dt = cfg.dt
    heun = cfg.scheme == "heun_stratonovich"
    is_euclidean = man.name.startswith("euclidean")
    drift_fn = make_ambient_drift(problem)

    pot = problem.potential
    v_scalar = pot.scalar if (pot.is_scalar and not pot.scalar.is_zero) else None
    v_matrix = not pot.is_scalar
    tangent = conn.bundle == "tangent"
    omega_active = conn.bundle == "trivial" and not conn.is_flat
    if v_matrix and tangent:
        raise ValueError("matrix potentials require the trivial bundle")
    need_chart = v_scalar is not None or v_matrix or omega_active

    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (l,):
        raise ValueError(f"x0 must be an ambient point of dimension {l}")
    if np.max(np.abs(man.retract(x0) - x0)) > 1e-9:
        raise ValueError("x0 is not on the manifold (|retract(x0) - x0| > 1e-9)")

    B_total = hi - lo
    if store and B_total * (K + 1) * l > 3 * 10**8:
        raise MemoryError(
            "path storage would exceed ~2.4 GB; use the endpoint estimator "
            "or fewer paths/steps"
        )

    positions = np.empty((B_total, K + 1, l)) if store else None
    y_out = np.empty((B_total, l))
    alive_out = np.ones(B_total, dtype=bool)
    exit_out = np.full(B_total, -1, dtype=np.int64)
    vsum_out = np.zeros(B_total) if v_scalar is not None else None
    vmat_out = (
        np.empty((B_total, conn.m, conn.m), dtype=complex) if v_matrix else None
    )
    csum_out = np.zeros(B_total, dtype=complex) if (omega_active and conn.m == 1) else None
    tmat_out = (
        np.empty((B_total, conn.m, conn.m), dtype=complex)
        if (omega_active and conn.m > 1)
        else None
    )
    frame_out = np.empty((B_total, l, man.dim)) if tangent else None
    wind_out = np.zeros(B_total) if track_winding else None

    noise_src = PathNoise(cfg.seed)
    scale = math.sqrt(2.0 * dt)

    for clo in range(lo, hi, _CHUNK):
        chi = min(clo + _CHUNK, hi)
        a, b = clo - lo, chi - lo
        B = chi - clo
        y = np.repeat(x0[None, :], B, axis=0)
        active = np.ones(B, dtype=bool)
        exit_step = np.full(B, -1, dtype=np.int64)
        vsum = np.zeros(B)
        vmat = np.broadcast_to(np.eye(conn.m, dtype=complex), (B, conn.m, conn.m)).copy()
        csum = np.zeros(B, dtype=complex)
        tmat = np.broadcast_to(np.eye(conn.m, dtype=complex), (B, conn.m, conn.m)).copy()
        frames = man.frame(y) if tangent else None
        wind = np.zeros(B)
        noise = noise_src.chunk(clo, chi, K, l, scale) if K > 0 else None
        if store:
            positions[a:b, 0] = y

        for k in range(K):
            dw = noise[:, k, :]
            c_prev = man.to_chart(y) if need_chart else None

            if v_scalar is not None:
                vsum += np.where(active, v_scalar.value(c_prev), 0.0) * dt
            if v_matrix:
                vk = pot.matrix_values(c_prev).astype(complex)
                if omega_active and conn.m > 1:
                    tk_h = np.conj(np.swapaxes(tmat, -1, -2))
                    vk = tk_h @ vk @ tmat
                step_factor = _expm_neg_hermitian(vk, dt)
                vmat = np.where(active[:, None, None], vmat @ step_factor, vmat)

            if track_winding:
                t1 = man.frame(y)[..., 0]
                wind += np.where(active, np.einsum("...a,...a->...", t1, dw), 0.0)

            a0 = man.project_tangent(y, dw)
            if drift_fn is not None:
                z0 = drift_fn(y) * dt
                pred = man.retract(y + a0 + z0)
            else:
                pred = man.retract(y + a0)
            if heun:
                a1 = man.project_tangent(pred, dw)
                incr = 0.5 * (a0 + a1)
                if drift_fn is not None:
                    incr = incr + 0.5 * (z0 + drift_fn(pred) * dt)
                y_new = man.retract(y + incr)
            else:
                y_new = pred

            if is_euclidean:
                blown = np.linalg.norm(y_new, axis=-1) > BLOWUP_RADIUS
                newly = blown & active
                if np.any(newly):
                    exit_step[newly] = k + 1
                    active = active & ~blown
                y_new = np.where(active[:, None], y_new, y)

            if tangent:
                proj = man.tangent_projector(y_new)
                frames = _polar_factor(proj @ frames)
            if omega_active:
                mid = man.retract(0.5 * (y + y_new))
                c_mid = man.to_chart(mid)
                c_new = man.to_chart(y_new)
                dc = _wrap_chart_delta(man, c_new, c_prev)
                om = conn.omega_values(c_mid)  # (B, n, m, m)
                s_step = np.einsum("...i,...iab->...ab", dc.astype(complex), om)
                if conn.m == 1:
                    csum += s_step[..., 0, 0]
                else:
                    tmat = _expm_anti_hermitian(-s_step) @ tmat

            y = y_new
            if store:
                positions[a:b, k + 1] = y

        y_out[a:b] = y
        alive_out[a:b] = active
        exit_out[a:b] = exit_step
        if vsum_out is not None:
            vsum_out[a:b] = vsum
        if vmat_out is not None:
            vmat_out[a:b] = vmat
        if csum_out is not None:
            csum_out[a:b] = csum
        if tmat_out is not None:
            tmat_out[a:b] = tmat
        if frame_out is not None:
            frame_out[a:b] = frames
        if wind_out is not None:
            wind_out[a:b] = wind

    state = EndpointState(
        y=y_out,
        alive=alive_out,
        exit_step=exit_out,
        vsum=vsum_out,
        vmat=vmat_out,
        csum=csum_out if csum_out is not None else None,
        tmat=tmat_out,
        frame_k=frame_out,
        wind=wind_out,
    )
    return positions, state


# ---------------------------------------------------------------------------
# Stored path batches and their transports / potential factors
# ---------------------------------------------------------------------------


@dataclass
class PathBatch:
    """Stored sample paths; transports and potentials are filled on demand.

    positions: (B, K+1, l) ambient, all on the manifold.
    transports: (B, K+1, m, m) complex (trivial bundle) or (B, K+1, n, n)
        real (tangent bundle, expressed in the reference frames at the
        start/current points).
    potentials: (B, K+1, m, m) complex, ``potentials[:, k] = V_k``.
    """

    problem: Problem
    config: SdeConfig
    x0: np.ndarray
    positions: np.ndarray
    alive: np.ndarray
    exit_step: np.ndarray
    frames: np.ndarray | None = None
    transports: np.ndarray | None = None
    potentials: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1] - 1


def simulate_paths(problem: Problem, x0: np.ndarray, cfg: SdeConfig) -> PathBatch:
    """Simulate and store cfg.n_paths sample paths started at ambient x0."""
    positions, state = _numpy_paths(problem, x0, cfg, 0, cfg.n_paths, store=True)
    return PathBatch(
        problem=problem,
        config=cfg,
        x0=np.asarray(x0, dtype=float),
        positions=positions,
        alive=state.alive,
        exit_step=state.exit_step,
    )


def transport_path(problem: Problem, batch: PathBatch) -> PathBatch:
    """Fill batch.frames / batch.transports along the stored positions."""
    man = problem.manifold
    conn = problem.connection
    pos = batch.positions
    B, K1, l = pos.shape
    m = conn.m

    if conn.bundle == "tangent":
        n = man.dim
        frames = np.empty((B, K1, l, n))
        transports = np.empty((B, K1, n, n))
        e = man.frame(pos[:, 0])
        frames[:, 0] = e
        transports[:, 0] = np.eye(n)
        for k in range(1, K1):
            proj = man.tangent_projector(pos[:, k])
            e = _polar_factor(proj @ e)
            frames[:, k] = e
            transports[:, k] = np.einsum("...li,...lj->...ij", man.frame(pos[:, k]), e)
        batch.frames = frames
        batch.transports = transports
        return batch

    transports = np.empty((B, K1, m, m), dtype=complex)
    transports[:, 0] = np.eye(m)
    if conn.is_flat:
        transports[:, 1:] = np.eye(m)
        batch.transports = transports
        return batch
    t = np.broadcast_to(np.eye(m, dtype=complex), (B, m, m)).copy()
    c_prev = man.to_chart(pos[:, 0])
    for k in range(1, K1):
        c_new = man.to_chart(pos[:, k])
        mid = man.retract(0.5 * (pos[:, k - 1] + pos[:, k]))
        c_mid = man.to_chart(mid)
        dc = _wrap_chart_delta(man, c_new, c_prev)
        om = conn.omega_values(c_mid)
        s_step = np.einsum("...i,...iab->...ab", dc.astype(complex), om)
        t = _expm_anti_hermitian(-s_step) @ t
        transports[:, k] = t
        c_prev = c_new
    batch.transports = transports
    return batch


def potential_path(problem: Problem, batch: PathBatch) -> PathBatch:
    """Fill batch.potentials: V_0 = I, V_{k+1} = V_k exp(-dt T_k^H V(Y_k) T_k)."""
    man = problem.manifold
    pot = problem.potential
    conn = problem.connection
    pos = batch.positions
    B, K1, _ = pos.shape
    m = conn.m
    dt = batch.config.dt

    out = np.empty((B, K1, m, m), dtype=complex)
    out[:, 0] = np.eye(m)

    if pot.is_scalar:
        coords = man.to_chart(pos[:, :-1, :])
        vals = pot.scalar.value(coords)  # (B, K)
        ssum = np.cumsum(vals, axis=1) * dt
        factors = np.exp(-ssum)  # (B, K)
        out[:, 1:] = factors[..., None, None] * np.eye(m)
        batch.potentials = out
        return batch

    if conn.bundle != "trivial":
        raise ValueError("matrix potentials require the trivial bundle")
    if batch.transports is None:
        raise ValueError("matrix potentials need transports: call transport_path first")
    v = np.broadcast_to(np.eye(m, dtype=complex), (B, m, m)).copy()
    for k in range(K1 - 1):
        coords = man.to_chart(pos[:, k])
        vk = pot.matrix_values(coords).astype(complex)
        tk = batch.transports[:, k]
        if not conn.is_flat:
            vk = np.conj(np.swapaxes(tk, -1, -2)) @ vk @ tk
        v = v @ _expm_neg_hermitian(vk, dt)
        out[:, k + 1] = v
    batch.potentials = out
    return batch


def loop_holonomy_angle(batch: PathBatch) -> np.ndarray:
    """Rotation angle of the tangent-bundle holonomy E_0 -> E_K (2d fibers)."""
    if batch.frames is None:
        raise ValueError("call transport_path first")
    e0 = batch.frames[:, 0]
    ek = batch.frames[:, -1]
    mat = np.einsum("...li,...lj->...ij", e0, ek)
    return np.arctan2(mat[..., 1, 0], mat[..., 0, 0])
