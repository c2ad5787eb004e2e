"""Euler paths for the half-space diffusion with barrier killing.

A path is killed the first time its first coordinate reaches the level L.
On a discrete grid the within-step crossings are accounted for by the
Brownian-bridge survival probability

    p_i = exp(-2 (X_i^1 - L)(X_{i-1}^1 - L) / (a^11_{i-1} Delta)),

which is the exact conditional probability that the continuous first
coordinate touches L between two grid points with the given endpoints.
Killing enters estimators multiplicatively through the per-step weights

    m_i    = 1{X_i^1 > L} (1 - h_i),      h_i = 1{U_i <= p_i},
    mbar_i = 1{X_i^1 > L} (1 + h_i),

whose running products M (killing) and Mbar (a mean-one martingale) convert
free-path statistics into killed-path and reflected-reference statistics.
The smoothed variants replace h_i by p_i and are used for value estimation
only (Rao-Blackwellised, lower variance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ModelError, NumericError
from .mc_engine import RunPlan, derive_substream, run_blocks
from .model import ModelSpec

Array = np.ndarray

GIRSANOV_LOG_CAP = 700.0


def first_row_squared(sig: Array) -> Array:
    """a^11 = |first row of sigma|^2, shape ``(...)`` for sigma ``(..., d, d)``."""
    return np.einsum("...k,...k->...", sig[..., 0, :], sig[..., 0, :])


def euler_step(spec: ModelSpec, x: Array, dW: Array, dt: float, mode: str = "drift") -> Array:
    """One Euler update ``x + b(x) dt [drift mode] + sigma(x) dW``."""
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    sig = np.asarray(spec.diffusion(x))
    out = x + np.einsum("...jk,...k->...j", sig, dW)
    if mode == "drift":
        out = out + np.asarray(spec.drift(x)) * dt
    elif mode != "driftless":
        raise ModelError(f"unknown mode {mode!r}")
    return out


def bridge_touch_probability(dist_prev: Array, dist_next: Array, a11: Array, dt: float) -> Array:
    """Within-step boundary-touch probability from signed distances to L.

    Clamped to [0, 1]; equals 1 whenever either endpoint is at or beyond the
    boundary.
    """
    expo = -2.0 * dist_prev * dist_next / (a11 * dt)
    p = np.exp(np.minimum(expo, 0.0))
    return np.where((dist_prev <= 0.0) | (dist_next <= 0.0), 1.0, p)


def bridge_survival(spec: ModelSpec, x_prev: Array, x_next: Array, dt: float) -> Array:
    """Conditional probability that the bridge between two grid points touches L."""
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    a11 = first_row_squared(np.asarray(spec.diffusion(x_prev)))
    return bridge_touch_probability(x_prev[..., 0] - spec.L, x_next[..., 0] - spec.L, a11, dt)


def step_weights(x_next: Array, p: Array, u: Array, mode: str, L: float) -> tuple[Array, Array]:
    """Per-step killing weights ``(m, mbar)``.

    Bernoulli mode draws the hit indicator ``h = 1{u <= p}``; smoothed mode
    substitutes the probability itself (value estimation only).
    """
    x_next = np.asarray(x_next, dtype=float)
    alive = (x_next[..., 0] > L).astype(float)
    if mode == "bernoulli":
        h = (np.asarray(u) <= np.asarray(p)).astype(float)
        return alive * (1.0 - h), alive * (1.0 + h)
    if mode == "smoothed":
        p = np.asarray(p, dtype=float)
        return alive * (1.0 - p), alive * (1.0 + p)
    raise ModelError(f"unknown weight mode {mode!r}")


def girsanov_log_increment(spec: ModelSpec, x_prev: Array, Z: Array, dt: float) -> Array:
    """Log weight ``(sigma^-1 b)^T Z - |sigma^-1 b|^2 dt / 2`` at ``x_prev``.

    ``Z`` is the Gaussian increment of the driftless scheme; the cumulative
    exponential of these increments converts driftless-measure expectations
    into drifted ones.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    sig = np.asarray(spec.diffusion(x_prev))
    b = np.asarray(spec.drift(x_prev))
    try:
        c = np.linalg.solve(sig, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"diffusion matrix is singular: {exc}") from exc
    return np.einsum("...k,...k->...", c, np.asarray(Z, dtype=float)) - 0.5 * np.einsum(
        "...k,...k->...", c, c
    ) * dt


@dataclass
class EulerPath:
    """One discrete trajectory with its killing bookkeeping."""

    grid: Array
    states: Array
    gaussians: Array
    uniforms: Array
    bridge_probs: Array
    hit_flags: Array
    mode: str


@dataclass
class WeightLedger:
    """Per-path multiplicative weights derived from an :class:`EulerPath`."""

    m: Array
    mbar: Array
    M: Array
    Mbar: Array
    M_suffix: Array
    kappa: Array
    K: Array
    flow_matrices: Array | None = None


def simulate_euler_path(
    spec: ModelSpec,
    x: Array,
    n: int,
    seed: int = 0,
    path_index: int = 0,
    mode: str = "drift",
) -> EulerPath:
    """Simulate a single path on the uniform grid with its own substreams."""
    dt = spec.T / n
    gg = derive_substream(seed, path_index, "gaussian")
    ug = derive_substream(seed, path_index, "uniform")
    states = np.empty((n + 1, spec.d))
    states[0] = np.asarray(x, dtype=float)
    gaussians = math.sqrt(dt) * gg.standard_normal((n, spec.d))
    uniforms = ug.random(n)
    probs = np.empty(n)
    hits = np.empty(n, dtype=bool)
    for i in range(n):
        states[i + 1] = euler_step(spec, states[i], gaussians[i], dt, mode)
        probs[i] = bridge_survival(spec, states[i], states[i + 1], dt)
        hits[i] = uniforms[i] <= probs[i]
    return EulerPath(
        grid=np.linspace(0.0, spec.T, n + 1),
        states=states,
        gaussians=gaussians,
        uniforms=uniforms,
        bridge_probs=probs,
        hit_flags=hits,
        mode=mode,
    )


def build_weight_ledger(spec: ModelSpec, path: EulerPath, with_flow: bool = False) -> WeightLedger:
    """Bernoulli weights, their running/suffix products and Girsanov terms."""
    n = len(path.uniforms)
    dt = path.grid[1] - path.grid[0]
    alive = path.states[1:, 0] > spec.L
    h = path.hit_flags.astype(float)
    m = alive * (1.0 - h)
    mbar = alive * (1.0 + h)
    M = np.concatenate([[1.0], np.cumprod(m)])
    Mbar = np.concatenate([[1.0], np.cumprod(mbar)])
    # M_suffix[i] = product of m over steps i+1..n, indexed i = 0..n
    M_suffix = np.concatenate([np.cumprod(m[::-1])[::-1], [1.0]])

    kappa = np.empty(n)
    for i in range(n):
        sig = np.asarray(spec.diffusion(path.states[i]))
        b = np.asarray(spec.drift(path.states[i]))
        dW = path.gaussians[i]
        Z = dW if path.mode == "driftless" else dW + np.linalg.solve(sig, b) * dt
        kappa[i] = girsanov_log_increment(spec, path.states[i], Z, dt)
    log_K = np.concatenate([[0.0], np.cumsum(kappa)])
    if np.any(np.abs(log_K) > GIRSANOV_LOG_CAP):
        raise NumericError("Girsanov log-weight exceeded the overflow cap")
    K = np.exp(log_K)

    flow = None
    if with_flow:
        from .pushforward_grad import path_flow_matrices

        flow = path_flow_matrices(spec, path)
    return WeightLedger(m=m, mbar=mbar, M=M, Mbar=Mbar, M_suffix=M_suffix, kappa=kappa, K=K, flow_matrices=flow)


def _killed_value_block(
    start: int,
    stop: int,
    spec: ModelSpec,
    f,
    x0: Array,
    n: int,
    mode: str,
    seed: int,
) -> Array:
    B = stop - start
    dt = spec.T / n
    sq = math.sqrt(dt)
    gg = derive_substream(seed, start, "gaussian")
    ug = derive_substream(seed, start, "uniform") if mode == "bernoulli" else None
    X = np.broadcast_to(np.asarray(x0, dtype=float), (B, spec.d)).copy()
    M = np.ones(B)
    for _ in range(n):
        G = gg.standard_normal((B, spec.d))
        sig = np.asarray(spec.diffusion(X))
        a11 = first_row_squared(sig)
        Xn = X + np.asarray(spec.drift(X)) * dt + np.einsum("bjk,bk->bj", sig, sq * G)
        p = bridge_touch_probability(X[:, 0] - spec.L, Xn[:, 0] - spec.L, a11, dt)
        alive = (Xn[:, 0] > spec.L).astype(float)
        if mode == "bernoulli":
            h = (ug.random(B) <= p).astype(float)
            M *= alive * (1.0 - h)
        else:
            M *= alive * (1.0 - p)
        X = Xn
    vals = np.asarray(f(X), dtype=float) * M
    if not np.all(np.isfinite(vals)):
        raise DataError("payoff produced non-finite values")
    return vals[:, None]


def killed_value_mc(
    spec: ModelSpec,
    f,
    x: Array,
    n: int,
    N: int,
    mode: str = "smoothed",
    seed: int = 0,
    workers: int | str = 1,
) -> tuple[float, float]:
    """Monte Carlo value ``E[f(X_n) M_n]`` with its standard error."""
    if mode not in ("bernoulli", "smoothed"):
        raise ModelError(f"unknown weight mode {mode!r}")
    plan = RunPlan(seed=seed, paths=N, steps=n, workers=workers, estimator_tag="killed_value")
    acc = run_blocks(
        plan,
        lambda _b, s, e: _killed_value_block(s, e, spec, f, x, n, mode, seed),
    )
    return float(acc.mean[0]), float(acc.stderr[0])


def hit_moment_diagnostic(
    spec: ModelSpec,
    y_prev: Array,
    dt: float,
    z_power: int = 0,
    dist_power: int = 0,
    N: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """One-step mean of ``|Z|^k X1^m 1{hit}`` from a fixed interior point.

    A statistical diagnostic, not a contract: quantities of this shape scale
    like ``dt^((k+m-1)/2)`` near the boundary, which is what makes the
    hit-weighted remainder terms of the step matrices negligible.
    """
    y_prev = np.asarray(y_prev, dtype=float)
    sig = np.asarray(spec.diffusion(y_prev))
    a11 = float(first_row_squared(sig))
    dist = float(y_prev[0] - spec.L)
    plan = RunPlan(seed=seed, paths=N, steps=1, workers=1, estimator_tag="hit_moment")

    def block(_b: int, start: int, stop: int) -> Array:
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        Z = math.sqrt(dt) * gg.standard_normal((B, spec.d))
        x1 = y_prev[0] + Z @ sig[0, :]
        p = bridge_touch_probability(np.full(B, dist), x1 - spec.L, np.full(B, a11), dt)
        h = (ug.random(B) <= p).astype(float)
        zmag = np.linalg.norm(Z, axis=1) ** z_power if z_power else 1.0
        return (zmag * dist**dist_power * h)[:, None]

    acc = run_blocks(plan, block)
    return float(acc.mean[0]), float(acc.stderr[0])
