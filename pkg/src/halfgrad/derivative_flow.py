"""Jump-reset derivative flows along reflected paths and their estimators.

Two matrix flows evolve along a reflected path.  Both restart rows 2..d at
zero whenever the path hits the boundary (row one is never reset), then
accumulate linear increments built from the coefficient Jacobians:

* ``psi`` loads the local time twice,   I + Db dt + Dsigma^k dW^k + 2 b^1 dB I,
* ``xi`` loads the local time once,     I + Db dt + Dsigma^k dW^k +   b^1 dB I,

and in driftless mode both collapse to the flow driven by
``Dbbar = Db - Dsigma^k (sigma^-1 b)^k`` with no local-time loading.
Pathwise, psi equals xi times exp(integral of b^1 dB), which is how the two
gradient representations below are reconciled.

Gradient estimators over drift-mode reflected paths:

* :func:`grad_reflected_psi`            mean of  Df(Y_T) Psi_T,
* :func:`grad_reflected_intermediate`   mean of  Df(Y_T) xi_T
      + f(Y_T) (b^1/a^11)(Y at last hit) e1^T xi(last hit) 1{hit},
  with the flow taken immediately after the reset at the last hit, and
* :func:`grad_bel`                      (1/T) mean of  f(Y_T) S_T,
      S_T = sum over steps after the last hit of dW_i^T sigma^-1 Psi_{i-1}
            + (dist_last / a^11) e1^T Psi(last hit) 1{hit},
  a derivative-free weight (only f is needed).

The second piece of S_T completes the restarted stochastic integral over
the fragment between the true last touch and the next grid point: at the
touch the flow has just been reset to its first row and sigma^-1 is
block-structured on the boundary, so the fragment contracts to the
first-coordinate displacement (the distance to the boundary at the end of
the last hit step) scaled by 1/a^11.  Without it the discrete weight is
biased low by O(sqrt(dt)); with it the bias drops to O(dt) (measured).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import DataError, ModelError, NumericError
from .killed_euler import bridge_touch_probability, first_row_squared
from .mc_engine import GradEstimate, RunPlan, derive_substream, run_blocks
from .model import ModelSpec
from .pushforward_grad import boundary_payoff_check

Array = np.ndarray

FLOW_EXPONENT_CAP = 700.0


@dataclass
class FlowMatrix:
    """State of a jump-reset derivative flow."""

    value: Array
    kind: str = "psi"
    resets: list = field(default_factory=list)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.kind not in ("psi", "xi"):
            raise ModelError(f"unknown flow kind {self.kind!r}")


def identity_flow(d: int, kind: str = "psi") -> FlowMatrix:
    return FlowMatrix(value=np.eye(d), kind=kind)


def _local_time_loading(kind: str, mode: str) -> float:
    if mode == "driftless":
        return 0.0
    return 2.0 if kind == "psi" else 1.0


def flow_increment(
    spec: ModelSpec,
    y_prev: Array,
    dW: Array,
    dB: Array,
    dt: float,
    kind: str,
    mode: str,
) -> Array:
    """One-step multiplier ``I + G dt + Dsigma^k dW^k + c b^1 dB I``."""
    y_prev = np.asarray(y_prev, dtype=float)
    dW = np.asarray(dW, dtype=float)
    d = spec.d
    jac_b = np.asarray(spec.drift_jacobian(y_prev))
    col_jacs = np.asarray(spec.diffusion_column_jacobians(y_prev))
    if mode == "driftless":
        sig = np.asarray(spec.diffusion(y_prev))
        b = np.asarray(spec.drift(y_prev))
        coef = np.linalg.solve(sig, b[..., None])[..., 0]
        G = jac_b - np.einsum("...kjm,...k->...jm", col_jacs, coef)
    elif mode == "drift":
        G = jac_b
    else:
        raise ModelError(f"unknown mode {mode!r}")
    inc = np.eye(d) + G * dt + np.einsum("...kjm,...k->...jm", col_jacs, dW)
    c = _local_time_loading(kind, mode)
    if c != 0.0:
        b1 = np.asarray(spec.drift(y_prev))[..., 0]
        scal = c * b1 * np.asarray(dB, dtype=float)
        inc = inc + scal[..., None, None] * np.eye(d)
    return inc


def reset_rows(value: Array) -> Array:
    """Projection ``e1 e1^T value``: rows 2..d zeroed, row one bit-identical."""
    out = np.zeros_like(value)
    out[..., 0, :] = value[..., 0, :]
    return out


def flow_update(
    spec: ModelSpec,
    flow: FlowMatrix,
    y_prev: Array,
    dW: Array,
    dB: float,
    hit: bool,
    dt: float,
    mode: str = "drift",
    step_index: int | None = None,
) -> FlowMatrix:
    """Advance one step: reset first on a hit, then apply the increment."""
    value = flow.value
    resets = list(flow.resets)
    if hit:
        value = reset_rows(value)
        if step_index is not None:
            resets.append(step_index)
    inc = flow_increment(spec, y_prev, dW, dB, dt, flow.kind, mode)
    return FlowMatrix(value=inc @ value, kind=flow.kind, resets=resets)


def _phi_bar(u: Array) -> Array:
    return ndtr(-np.asarray(u, dtype=float))


def _reflected_flow_block(
    start: int,
    stop: int,
    spec: ModelSpec,
    f,
    Df,
    x0: Array,
    n: int,
    seed: int,
    estimator: str,
) -> Array:
    """Walk one block of reflected paths, carrying the requested flow.

    ``estimator`` selects the statistic: "psi", "intermediate" or "bel".
    """
    B = stop - start
    d = spec.d
    dt = spec.T / n
    sq = math.sqrt(dt)
    kind = "xi" if estimator == "intermediate" else "psi"
    c_load = _local_time_loading(kind, "drift")
    gg = derive_substream(seed, start, "gaussian")
    ug = derive_substream(seed, start, "uniform")

    Y = np.broadcast_to(np.asarray(x0, dtype=float), (B, d)).copy()
    F = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    eye = np.eye(d)

    track_last_hit = estimator in ("intermediate", "bel")
    if track_last_hit:
        last_row1 = np.zeros((B, d))
        coef_last = np.zeros(B)
        pending = np.zeros(B, dtype=bool)
        has_hit = np.zeros(B, dtype=bool)
    if estimator == "bel":
        acc = np.zeros((B, d))
    exponent = np.zeros(B)

    for _ in range(n):
        dW = sq * gg.standard_normal((B, d))
        U = ug.random(B)
        b = np.asarray(spec.drift(Y))
        sig = np.asarray(spec.diffusion(Y))
        a11 = first_row_squared(sig)
        dist = Y[:, 0] - spec.L

        if track_last_hit and pending.any():
            if estimator == "intermediate":
                coef_last[pending] = b[pending, 0] / a11[pending]
            else:
                coef_last[pending] = dist[pending] / a11[pending]
            pending[:] = False
        if estimator == "bel":
            try:
                w = np.linalg.solve(np.swapaxes(sig, -1, -2), dW[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise ModelError(f"diffusion matrix is singular: {exc}") from exc
            acc += np.einsum("bj,bjk->bk", w, F)

        u_dist = dist / np.sqrt(a11 * dt)
        gauss = np.exp(-0.5 * u_dist * u_dist) / np.sqrt(2.0 * math.pi * a11 * dt)
        dB = np.maximum(2.0 * dt * gauss - 2.0 * _phi_bar(u_dist) * dist / a11, 0.0)

        z = Y + b * dt + np.einsum("bjk,bk->bj", sig, dW)
        dist_next = np.abs(z[:, 0] - spec.L)
        p = bridge_touch_probability(dist, dist_next, a11, dt)
        hit = (z[:, 0] <= spec.L) | (U <= p)

        if track_last_hit and hit.any():
            last_row1[hit] = F[hit, 0, :]
            pending |= hit
            has_hit |= hit

        if d > 1 and hit.any():
            F[hit, 1:, :] = 0.0
        jac_b = np.asarray(spec.drift_jacobian(Y))
        col_jacs = np.asarray(spec.diffusion_column_jacobians(Y))
        inc = eye + jac_b * dt + np.einsum("bkjm,bk->bjm", col_jacs, dW)
        if c_load != 0.0:
            scal = c_load * b[:, 0] * dB
            exponent += np.abs(scal)
            inc = inc + scal[:, None, None] * eye
        F = np.einsum("bjk,bkl->bjl", inc, F)

        if estimator == "bel":
            acc[hit] = 0.0

        Y = z
        Y[:, 0] = spec.L + dist_next

    if np.any(exponent > FLOW_EXPONENT_CAP):
        raise NumericError("local-time exponent exceeded the overflow cap")

    fY = np.asarray(f(Y), dtype=float)
    if track_last_hit and pending.any():
        a11 = first_row_squared(np.asarray(spec.diffusion(Y)))
        if estimator == "intermediate":
            b = np.asarray(spec.drift(Y))
            coef_last[pending] = b[pending, 0] / a11[pending]
        else:
            coef_last[pending] = (Y[pending, 0] - spec.L) / a11[pending]
    if estimator == "psi":
        sample = np.einsum("bj,bjk->bk", np.asarray(Df(Y), dtype=float), F)
    elif estimator == "intermediate":
        sample = np.einsum("bj,bjk->bk", np.asarray(Df(Y), dtype=float), F)
        sample += (fY * coef_last * has_hit)[:, None] * last_row1
    elif estimator == "bel":
        weight = acc + (coef_last * has_hit)[:, None] * last_row1
        sample = fY[:, None] * weight / spec.T
    else:
        raise ModelError(f"unknown estimator {estimator!r}")
    if not np.all(np.isfinite(sample)):
        raise DataError("flow estimator produced non-finite values")
    return sample


def _run_flow_estimator(spec, f, Df, x, n, N, seed, workers, estimator) -> GradEstimate:
    boundary_payoff_check(spec, f, x)
    plan = RunPlan(seed=seed, paths=N, steps=n, workers=workers, estimator_tag=estimator)
    acc = run_blocks(
        plan,
        lambda _b, s, e: _reflected_flow_block(s, e, spec, f, Df, x, n, seed, estimator),
    )
    return GradEstimate(
        estimate=acc.mean, stderr=acc.stderr, paths=N, seed=seed, estimator_tag=estimator
    )


def grad_reflected_psi(
    spec: ModelSpec, f, Df, x: Array, n: int, N: int, seed: int = 0, workers: int | str = 1
) -> GradEstimate:
    """Gradient as ``E[Df(Y_T) Psi_T]`` over reflected paths."""
    return _run_flow_estimator(spec, f, Df, x, n, N, seed, workers, "psi")


def grad_reflected_intermediate(
    spec: ModelSpec, f, Df, x: Array, n: int, N: int, seed: int = 0, workers: int | str = 1
) -> GradEstimate:
    """Gradient as ``E[Df(Y_T) xi_T]`` plus the last-hit boundary term."""
    return _run_flow_estimator(spec, f, Df, x, n, N, seed, workers, "intermediate")


def grad_bel(
    spec: ModelSpec, f, x: Array, n: int, N: int, seed: int = 0, workers: int | str = 1
) -> GradEstimate:
    """Derivative-free gradient with the stochastic-integral weight.

    Only f enters; the weight is the discrete Ito sum of
    ``dW^T sigma^-1 Psi`` restarted after the last boundary hit, completed
    by the boundary fragment term (see the module docstring).
    """
    return _run_flow_estimator(spec, f, None, x, n, N, seed, workers, "bel")


def gamma_mean_diagnostic(
    spec: ModelSpec,
    y_prev: Array,
    dt: float,
    N: int,
    seed: int = 0,
    return_stderr: bool = False,
):
    """One-step mean of the martingale-part matrix against its closed form.

    Simulates N driftless steps from ``y_prev`` and averages

        gamma mbar,  gamma = Dsigma^k E[Z^k mbar] - h (Dsigma^k Z^k
                              - X1 sigma^k grad(sigma^{1k}/a^11)),

    which should match 2 PhiBar(u) (Dsigma^k sigma^{k1}/a^11 X1
    + X1 sigma^k grad(sigma^{1k}/a^11)) entry by entry.  A statistical
    self-test of the step algebra, not an estimator.
    """
    y_prev = np.asarray(y_prev, dtype=float)
    if not y_prev[0] > spec.L:
        raise ModelError("diagnostic point must be interior")
    d = spec.d
    sig = np.asarray(spec.diffusion(y_prev))
    a11 = float(first_row_squared(sig))
    col_jacs = np.asarray(spec.diffusion_column_jacobians(y_prev))
    from .pushforward_grad import step_flow_inputs

    bundle = step_flow_inputs(spec, y_prev, np.zeros(d), 0.0, dt)
    grad_s1 = bundle.grad_sig1_over_a11
    dist = float(y_prev[0] - spec.L)
    u = dist / math.sqrt(a11 * dt)

    gauss = math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi * a11 * dt)
    dB = max(2.0 * dt * gauss - 2.0 * float(_phi_bar(u)) * dist / a11, 0.0)
    z_mean = sig[0, :] * dB  # E[Z mbar] = sigma^T e1 dB
    predictable = np.einsum("kjm,k->jm", col_jacs, z_mean)
    outer = np.einsum("jk,km->jm", sig, grad_s1)

    plan = RunPlan(seed=seed, paths=N, steps=1, workers=1, estimator_tag="gamma_diag")

    def block(_b: int, start: int, stop: int) -> Array:
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        Z = math.sqrt(dt) * gg.standard_normal((B, d))
        U = ug.random(B)
        x_next1 = y_prev[0] + Z @ sig[0, :]
        p = bridge_touch_probability(
            np.full(B, dist), x_next1 - spec.L, np.full(B, a11), dt
        )
        h = (U <= p).astype(float)
        mbar = (x_next1 > spec.L).astype(float) * (1.0 + h)
        noise = np.einsum("kjm,bk->bjm", col_jacs, Z)
        gamma = predictable[None] - h[:, None, None] * (noise - dist * outer[None])
        return (gamma * mbar[:, None, None]).reshape(B, d * d)

    acc = run_blocks(plan, block)
    mc_mean = acc.mean.reshape(d, d)
    formula = 2.0 * float(_phi_bar(u)) * (
        np.einsum("kjm,k->jm", col_jacs, sig[:, 0]) * dist / a11 + dist * outer
    )
    if return_stderr:
        return mc_mean, formula, acc.stderr.reshape(d, d)
    return mc_mean, formula
