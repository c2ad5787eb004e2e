"""Independent references used to cross-validate the estimators.

For constant coefficients in one dimension the killed transition density is
the difference of a Gaussian and its mirror image in the boundary; value and
gradient follow by quadrature against that kernel.  The other oracles are
brute force: exact Brownian-bridge subsampling for crossing probabilities,
a weighted-endpoint identity for the reflected law, and common-random-number
central differences of the killed-value estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, NumericError
from .killed_euler import bridge_touch_probability
from .mc_engine import GradEstimate, RunPlan, derive_substream, run_blocks
from .model import ModelSpec

Array = np.ndarray

QUADRATURE_TOL = 1e-8


@dataclass(frozen=True)
class QuadratureConfig:
    """Trapezoid panel layout for the image-kernel integrals."""

    node_count: int = 262144
    truncation: float = 8.0
    rule: str = "trapezoid"

    def __post_init__(self):
        if self.node_count < 64:
            raise ContractError("node_count must be >= 64")
        if self.rule != "trapezoid":
            raise ContractError(f"unsupported rule {self.rule!r}")


def _images_quadrature(a11, L, x, T, f, q: QuadratureConfig, kernel: str) -> float:
    x = float(np.ravel(np.asarray(x, dtype=float))[0])
    if not x > L:
        raise ContractError("start point must be interior")
    s2 = a11 * T
    upper = L + abs(x - L) + q.truncation * math.sqrt(s2)

    def integral(m: int) -> float:
        y = np.linspace(L, upper, m)
        gm = np.exp(-0.5 * (y - x) ** 2 / s2) / math.sqrt(2.0 * math.pi * s2)
        gp = np.exp(-0.5 * (y + x - 2 * L) ** 2 / s2) / math.sqrt(2.0 * math.pi * s2)
        if kernel == "value":
            k = gm - gp
        else:
            k = ((y - x) * gm + (y + x - 2 * L) * gp) / s2
        vals = np.asarray(f(y), dtype=float) * k
        return float(np.trapezoid(vals, y))

    coarse = integral(q.node_count)
    fine = integral(2 * q.node_count)
    if abs(fine - coarse) > QUADRATURE_TOL:
        raise NumericError(
            f"quadrature not converged: refinement moved by {abs(fine - coarse):.3e}"
        )
    return fine


def images_value(a11: float, L: float, x, T: float, f, q: QuadratureConfig | None = None) -> float:
    """Killed value ``E[f(X_T) 1{tau > T}]`` for constant coefficients, 1D.

    ``f`` must be vectorised over a 1D grid: ``(m,) -> (m,)``.
    """
    return _images_quadrature(a11, L, x, T, f, q or QuadratureConfig(), "value")


def images_gradient(a11: float, L: float, x, T: float, f, q: QuadratureConfig | None = None) -> float:
    """d/dx of :func:`images_value` (differentiated kernel, same quadrature)."""
    return _images_quadrature(a11, L, x, T, f, q or QuadratureConfig(), "gradient")


def reflected_identity_check(
    a11: float, L: float, x: float, T: float, f, N: int, seed: int = 0
) -> tuple[float, float, float]:
    """Reflected endpoint law versus the weighted free endpoint.

    Returns ``(lhs, rhs, stderr)`` where lhs averages f over the exact 1D
    reflected endpoint ``L + |x - L + sqrt(a11) W_T|``, rhs averages the free
    endpoint weighted by ``1{U > L}(1 + exp(-2 (U-L)(x-L)/(a11 T)))`` and
    stderr is the standard error of the pathwise difference (common draws).
    """
    plan = RunPlan(seed=seed, paths=N, steps=1, workers=1, estimator_tag="reflected_identity")

    def block(_b: int, start: int, stop: int) -> Array:
        gg = derive_substream(seed, start, "gaussian")
        w = math.sqrt(a11 * T) * gg.standard_normal(stop - start)
        free = x + w
        lhs = np.asarray(f(L + np.abs(free - L)), dtype=float)
        weight = np.where(
            free > L, 1.0 + np.exp(-2.0 * (free - L) * (x - L) / (a11 * T)), 0.0
        )
        rhs = np.asarray(f(free), dtype=float) * weight
        return np.stack([lhs, rhs, lhs - rhs], axis=1)

    acc = run_blocks(plan, block)
    return float(acc.mean[0]), float(acc.mean[1]), float(acc.stderr[2])


def crossing_prob_bruteforce(
    a11: float,
    L: float,
    x_prev1: float,
    x_next1: float,
    dt: float,
    substeps: int = 1000,
    N: int = 100000,
    seed: int = 0,
) -> tuple[float, float]:
    """Fraction of exactly-sampled Brownian bridges whose minimum reaches L.

    The bridge runs from ``x_prev1`` to ``x_next1`` over ``dt`` with variance
    rate ``a11`` and is monitored at ``substeps`` interior points, so the
    estimate is biased low; :func:`crossing_bias_bound` quantifies the gap.
    """
    if substeps < 100:
        raise ContractError("substeps must be >= 100")
    if x_prev1 <= L or x_next1 <= L:
        return 1.0, 0.0
    plan = RunPlan(seed=seed, paths=N, steps=substeps, workers=1, estimator_tag="bridge_mc")
    delta = dt / substeps

    def block(_b: int, start: int, stop: int) -> Array:
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        v = np.full(B, float(x_prev1))
        crossed = np.zeros(B, dtype=bool)
        for j in range(substeps - 1):
            remaining = dt - j * delta
            mean = v + (x_next1 - v) * (delta / remaining)
            var = a11 * delta * (remaining - delta) / remaining
            v = mean + math.sqrt(var) * gg.standard_normal(B)
            crossed |= v <= L
        return crossed.astype(float)[:, None]

    acc = run_blocks(plan, block)
    return float(acc.mean[0]), float(acc.stderr[0])


def crossing_bias_bound(
    a11: float, L: float, x_prev1: float, x_next1: float, dt: float, substeps: int
) -> float:
    """Discrete-monitoring allowance for :func:`crossing_prob_bruteforce`.

    Uses the barrier-shift heuristic: monitoring every ``dt/substeps``
    behaves like a barrier moved inward by ``0.583 sqrt(a11 dt / substeps)``.
    """
    shift = 0.583 * math.sqrt(a11 * dt / substeps)
    p = bridge_touch_probability(
        np.asarray(x_prev1 - L), np.asarray(x_next1 - L), np.asarray(a11), dt
    )
    p_shift = bridge_touch_probability(
        np.asarray(x_prev1 - L + shift), np.asarray(x_next1 - L + shift), np.asarray(a11), dt
    )
    return float(abs(p - p_shift))


def finite_difference_gradient(
    spec: ModelSpec,
    f,
    x: Array,
    n: int,
    N: int,
    bump: float = 0.01,
    seed: int = 0,
    workers: int | str = 1,
    mode: str = "smoothed",
    common_random_numbers: bool = True,
) -> GradEstimate:
    """Central differences of the killed value with common random numbers.

    Both bumped runs replay identical Gaussian (and uniform) streams; the
    standard error is computed from the per-path differenced values.  With
    ``common_random_numbers=False`` the second run draws from the dedicated
    bump channel instead, which is only useful as a variance baseline.
    """
    x = np.asarray(x, dtype=float)
    if not x[0] - bump > spec.L:
        raise ContractError("bump reaches the boundary; decrease it or move x inward")
    from .killed_euler import _killed_value_block

    estimates = np.empty(spec.d)
    stderrs = np.empty(spec.d)
    plan = RunPlan(seed=seed, paths=N, steps=n, workers=workers, estimator_tag="fd")
    for j in range(spec.d):
        xp = x.copy()
        xm = x.copy()
        xp[j] += bump
        xm[j] -= bump

        def block(_b: int, start: int, stop: int, xp=xp, xm=xm) -> Array:
            up = _killed_value_block(start, stop, spec, f, xp, n, mode, seed)
            if common_random_numbers:
                down = _killed_value_block(start, stop, spec, f, xm, n, mode, seed)
            else:
                down = _fd_bump_channel_block(start, stop, spec, f, xm, n, mode, seed)
            return (up - down) / (2.0 * bump)

        acc = run_blocks(plan, block)
        estimates[j] = acc.mean[0]
        stderrs[j] = acc.stderr[0]
    return GradEstimate(
        estimate=estimates, stderr=stderrs, paths=N, seed=seed, estimator_tag="fd"
    )


def _fd_bump_channel_block(start, stop, spec, f, x0, n, mode, seed) -> Array:
    """Killed-value block drawing from the bump channel (independent streams)."""
    B = stop - start
    dt = spec.T / n
    sq = math.sqrt(dt)
    gg = derive_substream(seed, start, "bump")
    X = np.broadcast_to(np.asarray(x0, dtype=float), (B, spec.d)).copy()
    M = np.ones(B)
    from .killed_euler import first_row_squared

    for _ in range(n):
        G = gg.standard_normal((B, spec.d))
        sig = np.asarray(spec.diffusion(X))
        a11 = first_row_squared(sig)
        Xn = X + np.asarray(spec.drift(X)) * dt + np.einsum("bjk,bk->bj", sig, sq * G)
        p = bridge_touch_probability(X[:, 0] - spec.L, Xn[:, 0] - spec.L, a11, dt)
        alive = (Xn[:, 0] > spec.L).astype(float)
        if mode == "bernoulli":
            h = (gg.random(B) <= p).astype(float)
            M *= alive * (1.0 - h)
        else:
            M *= alive * (1.0 - p)
        X = Xn
    return (np.asarray(f(X), dtype=float) * M)[:, None]


def linear_shear_weight_gradient(
    spec: ModelSpec,
    f,
    Df,
    x: Array,
    n: int,
    N: int,
    scale: float = 1.0,
    shear: float = 0.4,
    seed: int = 0,
    workers: int | str = 1,
) -> GradEstimate:
    """Closed-form flow weight for the driftless linear-shear 2D model.

    For sigma(x) = [[scale, 0], [shear * x1, c]] with zero drift the
    derivative weight along a reflected path is available explicitly:

        W_T = [[1, 0],
               [(shear/scale) (Y^1_T - x^1 1{no hit}),  1{no hit}]],

    so ``E[Df(Y_T) W_T]`` is a dual implementation of the flow gradient and
    serves as its reference on this model.
    """
    if spec.d != 2:
        raise ContractError("closed-form shear weight is specific to d = 2")
    x = np.asarray(x, dtype=float)
    dt = spec.T / n
    sq = math.sqrt(dt)
    plan = RunPlan(seed=seed, paths=N, steps=n, workers=workers, estimator_tag="shear_closed_form")

    def block(_b: int, start: int, stop: int) -> Array:
        from .killed_euler import first_row_squared

        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        Y = np.broadcast_to(x, (B, 2)).copy()
        ever_hit = np.zeros(B, dtype=bool)
        for _ in range(n):
            dW = sq * gg.standard_normal((B, 2))
            U = ug.random(B)
            sig = np.asarray(spec.diffusion(Y))
            a11 = first_row_squared(sig)
            z = Y + np.asarray(spec.drift(Y)) * dt + np.einsum("bjk,bk->bj", sig, dW)
            dist_next = np.abs(z[:, 0] - spec.L)
            p = bridge_touch_probability(Y[:, 0] - spec.L, dist_next, a11, dt)
            ever_hit |= (z[:, 0] <= spec.L) | (U <= p)
            Y = z
            Y[:, 0] = spec.L + dist_next
        survived = (~ever_hit).astype(float)
        w21 = (shear / scale) * (Y[:, 0] - x[0] * survived)
        DfY = np.asarray(Df(Y), dtype=float)
        return np.stack([DfY[:, 0] + DfY[:, 1] * w21, DfY[:, 1] * survived], axis=1)

    acc = run_blocks(plan, block)
    return GradEstimate(
        estimate=acc.mean, stderr=acc.stderr, paths=N, seed=seed,
        estimator_tag="shear_closed_form",
    )


def normal_cdf(x: float) -> float:
    """Standard normal CDF (exposed for the closed-form references in tests)."""
    return float(ndtr(x))
