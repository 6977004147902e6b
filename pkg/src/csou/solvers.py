"""Model-driven sparse recovery baselines: ISTA and fixed-parameter ADMM.

Both solvers operate on an explicitly materialized forward matrix.  For the
imaging pipeline that matrix is A = Phi @ H (block-average after blur), so
columns can be localized inside observed pixels; tests also drive the updates
with identity or random matrices.

The ADMM splitting solves  min_x 0.5*||A x - y||^2 + lam*||z||_1,  z = x:

    x <- (A'A + rho*I)^-1 (A'y + rho*(z - beta))
    z <- soft_threshold(x + beta, lam/rho)          (prox variant)
    beta <- beta + rho*(x - z)                       (scaled multiplier)

The z-step also exists as a single explicit gradient step on a filter-bank
penalty (``admm_z_update_gradient``), which the prox variant replaces by an
exact minimizer.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .scene import SceneConfig, scene_kernel


class DivergenceError(RuntimeError):
    """Iterates blew up; reports the iteration where it happened."""

    def __init__(self, method, iteration):
        super().__init__("%s diverged at iteration %d" % (method, iteration))
        self.iteration = iteration


@dataclass
class SolverConfig:
    lam: float = 0.05  # l1 weight
    rho: float = 0.01  # ADMM penalty; ~ ||A||^2 / 10 for the default geometry
    step: float | None = None  # ISTA / gradient z-step size; None -> 0.99 / ||A||^2
    max_iters: int = 200
    tol: float = 1e-6  # relative iterate change at which to stop
    variant: str = "prox"  # ADMM z-update: "prox" or "gradient"

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")
        if self.variant not in ("prox", "gradient"):
            raise ValueError("variant must be 'prox' or 'gradient'")


def soft_threshold(v, theta):
    """sign(v) * max(0, |v| - theta); theta may be a scalar or an array."""
    v = np.asarray(v, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    if np.any(th < 0):
        raise ValueError("threshold must be nonnegative")
    return backend.soft_threshold(v, th)


class MaterializedOperator:
    """Dense forward matrix with cached Gram-system inverses per rho."""

    def __init__(self, a):
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.gram = self.a.T @ self.a
        self._solves = {}
        self._lipschitz = None

    @property
    def shape(self):
        return self.a.shape

    def apply(self, x):
        return self.a @ x

    def adjoint(self, r):
        return self.a.T @ r

    def lipschitz(self):
        """Largest eigenvalue of A'A (squared spectral norm of A)."""
        if self._lipschitz is None:
            self._lipschitz = float(np.linalg.norm(self.a, 2) ** 2)
        return self._lipschitz

    def solve_regularized(self, rhs, rho):
        """Solve (A'A + rho*I) u = rhs."""
        inv = self._solves.get(rho)
        if inv is None:
            n = self.gram.shape[0]
            inv = np.linalg.inv(self.gram + rho * np.eye(n))
            self._solves[rho] = inv
        return inv @ rhs


_matrix_cache = {}


def _cfg_key(cfg: SceneConfig):
    return (cfg.m1, cfg.m2, cfg.c, cfg.sigma_psf, cfg.radius)


def psf_matrix(cfg: SceneConfig):
    """Dense (N, N) matrix of the blur on the vectorized high-res grid."""
    key = ("psf",) + _cfg_key(cfg)
    if key in _matrix_cache:
        return _matrix_cache[key]
    kern = scene_kernel(cfg)
    r, taps = kern.radius, kern.taps
    n1, n2 = cfg.n1, cfg.n2
    h = np.zeros((n1 * n2, n1 * n2))
    stamp = np.zeros((n1, n2))
    for i in range(n1):
        for j in range(n2):
            i0, i1 = max(0, i - r), min(n1, i + r + 1)
            j0, j1 = max(0, j - r), min(n2, j + r + 1)
            stamp[:] = 0.0
            stamp[i0:i1, j0:j1] = taps[i0 - i + r : i1 - i + r, j0 - j + r : j1 - j + r]
            h[:, i * n2 + j] = stamp.ravel()
    _matrix_cache[key] = h
    return h


def block_matrix(cfg: SceneConfig):
    """Dense (M, N) block-averaging measurement matrix."""
    key = ("block",) + _cfg_key(cfg)
    if key in _matrix_cache:
        return _matrix_cache[key]
    c, m1, m2, n2 = cfg.c, cfg.m1, cfg.m2, cfg.n2
    phi = np.zeros((m1 * m2, cfg.n1 * n2))
    w = 1.0 / (c * c)
    for pi in range(m1):
        for pj in range(m2):
            p = pi * m2 + pj
            for di in range(c):
                for dj in range(c):
                    phi[p, (pi * c + di) * n2 + (pj * c + dj)] = w
    _matrix_cache[key] = phi
    return phi


def forward_matrix(cfg: SceneConfig):
    """Dense (M, N) matrix of the full forward model (blur then block-average)."""
    key = ("fwd",) + _cfg_key(cfg)
    if key in _matrix_cache:
        return _matrix_cache[key]
    a = block_matrix(cfg) @ psf_matrix(cfg)
    _matrix_cache[key] = a
    return a


def forward_operator(cfg: SceneConfig) -> MaterializedOperator:
    key = ("fwd_op",) + _cfg_key(cfg)
    if key in _matrix_cache:
        return _matrix_cache[key]
    op = MaterializedOperator(forward_matrix(cfg))
    _matrix_cache[key] = op
    return op


def block_operator(cfg: SceneConfig) -> MaterializedOperator:
    key = ("block_op",) + _cfg_key(cfg)
    if key in _matrix_cache:
        return _matrix_cache[key]
    op = MaterializedOperator(block_matrix(cfg))
    _matrix_cache[key] = op
    return op


def admm_x_update(op: MaterializedOperator, y, z, beta, rho):
    """Closed-form minimizer of the quadratic x-subproblem."""
    rhs = op.adjoint(y) + rho * (z - beta)
    return op.solve_regularized(rhs, rho)


def admm_z_update_prox(x, beta, lam, rho):
    """Exact minimizer of (rho/2)||x + beta - z||^2 + lam*||z||_1."""
    return soft_threshold(x + beta, lam / rho)


def _filter_same(img, filt):
    f = np.asarray(filt, dtype=np.float64)
    pad = (f.shape[0] - 1) // 2
    out = backend.conv2d_fwd(img[None, None], f[None, None], None, pad)
    return out[0, 0]


def admm_z_update_gradient(z, x, beta, cfg: SolverConfig, filters, activation=None, shape=None):
    """One explicit gradient step on the filter-bank z-subproblem.

    z <- mu1*z + mu2*(x+beta) - sum_l lam_l_tilde * D_l' act(D_l z)
    with mu1 = 1 - step*rho, mu2 = step*rho, lam_tilde = step*lam.
    Filters are small 2-d stencils applied on the grid (zero padding); their
    adjoint is correlation with the flipped stencil.
    """
    step = cfg.step if cfg.step is not None else 0.09
    mu1 = 1.0 - step * cfg.rho
    if not 0.0 < mu1 < 1.0:
        raise ValueError("need step*rho in (0,1) for a stable gradient z-step")
    mu2 = step * cfg.rho
    lam_t = step * cfg.lam
    if activation is None:
        activation = lambda u: u
    out = mu1 * z + mu2 * (x + beta)
    if lam_t != 0.0 and filters:
        grid = z if z.ndim == 2 else z.reshape(shape)
        acc = np.zeros_like(grid)
        for f in filters:
            f = np.asarray(f, dtype=np.float64)
            acc += _filter_same(activation(_filter_same(grid, f)), f[::-1, ::-1])
        out = out - lam_t * (acc.ravel() if z.ndim == 1 else acc)
    return out


def admm_beta_update(beta, x, z, rho):
    return beta + rho * (x - z)


def lasso_objective(op: MaterializedOperator, y, v, lam):
    r = op.apply(v) - y
    return 0.5 * float(r @ r) + lam * float(np.abs(v).sum())


def augmented_lagrangian(op: MaterializedOperator, y, x, z, beta, lam, rho):
    """Penalized split objective with the scaled multiplier."""
    r = op.apply(x) - y
    gap = x - z
    return (
        0.5 * float(r @ r)
        + lam * float(np.abs(z).sum())
        + rho * float(beta @ gap)
        + 0.5 * rho * float(gap @ gap)
    )


@dataclass
class SolveResult:
    grid: np.ndarray  # (N1, N2) nonnegative estimate
    x: np.ndarray  # raw final iterate, flat
    iterations: int
    converged: bool
    objective: np.ndarray  # per-iteration lasso objective trace
    lagrangian: np.ndarray | None = None  # ADMM only: split objective trace


def _check_finite(v, method, it):
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n > 1e12:
        raise DivergenceError(method, it)


def admm_solve(y, cfg: SolverConfig, op: MaterializedOperator, grid_shape, filters=None,
               activation=None) -> SolveResult:
    """Run the ADMM loop from a zero start until max_iters or tol."""
    yv = np.asarray(y, dtype=np.float64).ravel()
    n = op.shape[1]
    x = np.zeros(n)
    z = np.zeros(n)
    beta = np.zeros(n)
    trace = []
    al_trace = []
    it = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        x = admm_x_update(op, yv, z, beta, cfg.rho)
        z_prev = z
        if cfg.variant == "prox":
            z = admm_z_update_prox(x, beta, cfg.lam, cfg.rho)
        else:
            z = admm_z_update_gradient(z, x, beta, cfg, filters or [], activation,
                                       shape=grid_shape)
        beta = admm_beta_update(beta, x, z, cfg.rho)
        _check_finite(z, "admm", it)
        trace.append(lasso_objective(op, yv, z, cfg.lam))
        al_trace.append(augmented_lagrangian(op, yv, x, z, beta, cfg.lam, cfg.rho))
        # tol-stop needs consensus too: z can stagnate at zero for many
        # iterations when lam/rho is large while x is still far away
        dz = np.linalg.norm(z - z_prev)
        primal = np.linalg.norm(x - z)
        if (dz <= cfg.tol * max(1.0, np.linalg.norm(z_prev))
                and primal <= cfg.tol * max(1.0, np.linalg.norm(z))):
            converged = True
            break
    grid = np.maximum(z, 0.0).reshape(grid_shape)
    return SolveResult(grid=grid, x=z, iterations=it, converged=converged,
                       objective=np.asarray(trace), lagrangian=np.asarray(al_trace))


def ista_solve(y, cfg: SolverConfig, op: MaterializedOperator, grid_shape) -> SolveResult:
    """Proximal gradient on the lasso objective with a fixed step."""
    yv = np.asarray(y, dtype=np.float64).ravel()
    n = op.shape[1]
    step = cfg.step if cfg.step is not None else 0.99 / op.lipschitz()
    x = np.zeros(n)
    trace = []
    it = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        x_prev = x
        grad = op.adjoint(op.apply(x) - yv)
        x = soft_threshold(x - step * grad, step * cfg.lam)
        _check_finite(x, "ista", it)
        trace.append(lasso_objective(op, yv, x, cfg.lam))
        dx = np.linalg.norm(x - x_prev)
        if dx <= cfg.tol * max(1.0, np.linalg.norm(x_prev)):
            converged = True
            break
    grid = np.maximum(x, 0.0).reshape(grid_shape)
    return SolveResult(grid=grid, x=x, iterations=it, converged=converged,
                       objective=np.asarray(trace))
