"""Normally reflected paths on the half-space and their local time.

The reflected scheme proposes a plain Euler step and folds the first
coordinate back into the domain, ``y^1 -> L + |z^1 - L|``; the remaining
coordinates are untouched (normal reflection, valid because the oblique
covariance entries a^{l1} vanish at the boundary).  A step counts as a
boundary hit when the proposal crosses outright or when the within-step
bridge is sampled to touch L.

Local time is tracked through the predictable increment

    dB_i = 2 dt g(X^1_{i-1} - L) - 2 PhiBar(u) (X^1_{i-1} - L) / a^11,

with g the centred N(0, a^11 dt) density, u the distance in units of
sqrt(a^11 dt) and PhiBar the upper normal tail.  For constant coefficients
this is the exact conditional mean of the one-step local time, and it is
nonnegative because phi(u) >= u PhiBar(u).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .killed_euler import bridge_touch_probability, euler_step, first_row_squared
from .model import ModelSpec
from .mc_engine import derive_substream

Array = np.ndarray


def _phi_bar(u: Array) -> Array:
    """Upper tail of the standard normal, PhiBar(u) = P(N > u)."""
    return ndtr(-np.asarray(u, dtype=float))


def local_time_increment(spec: ModelSpec, y_prev: Array, dt: float) -> Array:
    """Predictable one-step local-time increment at ``y_prev`` (scalar, >= 0)."""
    y_prev = np.asarray(y_prev, dtype=float)
    a11 = first_row_squared(np.asarray(spec.diffusion(y_prev)))
    dist = y_prev[..., 0] - spec.L
    s = np.sqrt(a11 * dt)
    u = dist / s
    gauss = np.exp(-0.5 * u * u) / np.sqrt(2.0 * math.pi * a11 * dt)
    inc = 2.0 * dt * gauss - 2.0 * _phi_bar(u) * dist / a11
    return np.maximum(inc, 0.0)


def vector_local_time_increment(spec: ModelSpec, y_prev: Array, dt: float) -> Array:
    """Vector push ``a(y_prev) e1 dB`` applied by the reflection term."""
    y_prev = np.asarray(y_prev, dtype=float)
    sig = np.asarray(spec.diffusion(y_prev))
    a_col1 = np.einsum("...jk,...k->...j", sig, sig[..., 0, :])
    return a_col1 * local_time_increment(spec, y_prev, dt)[..., None]


def reflected_step(
    spec: ModelSpec,
    y_prev: Array,
    dW: Array,
    u: Array,
    dt: float,
    mode: str = "drift",
) -> tuple[Array, Array]:
    """One reflected update; returns ``(y_next, hit)``.

    ``hit`` is true when the proposal crossed the boundary or the bridge
    sample ``u <= p`` fired.  The bridge probability is evaluated with the
    folded endpoint, which carries the same distance |z^1 - L| as the raw
    proposal.
    """
    y_prev = np.asarray(y_prev, dtype=float)
    z = euler_step(spec, y_prev, dW, dt, mode)
    crossed = z[..., 0] <= spec.L
    y_next = z.copy()
    y_next[..., 0] = spec.L + np.abs(z[..., 0] - spec.L)
    a11 = first_row_squared(np.asarray(spec.diffusion(y_prev)))
    p = bridge_touch_probability(y_prev[..., 0] - spec.L, y_next[..., 0] - spec.L, a11, dt)
    hit = crossed | (np.asarray(u) <= p)
    return y_next, hit


@dataclass
class ReflectedPath:
    """A reflected trajectory with local-time and hit bookkeeping."""

    grid: Array
    states: Array
    gaussians: Array
    uniforms: Array
    local_time_increments: Array
    cumulative_local_time: Array
    hit_flags: Array
    mode: str


def hit_times(path: ReflectedPath) -> tuple[float | None, float | None]:
    """First and last grid hit times ``(tau_bar, rho_bar_T)``; None when no hit.

    A hit recorded at step i is attached to the right grid endpoint t_i.
    """
    idx = np.flatnonzero(path.hit_flags)
    if idx.size == 0:
        return None, None
    return float(path.grid[idx[0] + 1]), float(path.grid[idx[-1] + 1])


def simulate_reflected_path(
    spec: ModelSpec,
    x: Array,
    n: int,
    seed: int = 0,
    path_index: int = 0,
    mode: str = "drift",
) -> ReflectedPath:
    """Simulate one reflected path on the uniform grid."""
    dt = spec.T / n
    gg = derive_substream(seed, path_index, "gaussian")
    ug = derive_substream(seed, path_index, "uniform")
    states = np.empty((n + 1, spec.d))
    states[0] = np.asarray(x, dtype=float)
    gaussians = math.sqrt(dt) * gg.standard_normal((n, spec.d))
    uniforms = ug.random(n)
    incs = np.empty(n)
    hits = np.empty(n, dtype=bool)
    for i in range(n):
        incs[i] = local_time_increment(spec, states[i], dt)
        states[i + 1], hits[i] = reflected_step(spec, states[i], gaussians[i], uniforms[i], dt, mode)
    return ReflectedPath(
        grid=np.linspace(0.0, spec.T, n + 1),
        states=states,
        gaussians=gaussians,
        uniforms=uniforms,
        local_time_increments=incs,
        cumulative_local_time=np.concatenate([[0.0], np.cumsum(incs)]),
        hit_flags=hits,
        mode=mode,
    )
