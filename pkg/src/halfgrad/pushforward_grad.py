"""Discrete push-forward gradient estimator for the killed semigroup.

Differentiating the killed-value expectation through one Euler step with
bridge killing produces, per step, a d x d matrix e_i and a boundary weight
vector rho_i:

    e_i   = I (1 - h_i) + e1 e1^T h_i + ebar_i,
    ebar_i = r_i + Db dt (1 - h_i) + pi X1 h_i,
    r_i   = (1 - h_i) Dsigma^k dW^k + X1 sigma^k (grad sigma^{1k}/a^11) h_i,
    rho_i = (b^1 / a^11) e1 h_i + h_i X1 (grad b^1/a^11)^T,

with X1 = x^1_{i-1} - L the distance to the boundary before the step and h_i
the bridge-hit indicator.  Iterating and collecting terms yields the
per-path gradient weight

    Df(X_n) E_n Mbar_n + sum_i f(X_n) M_{i:n} rho_i^T E_{i-1} Mbar_i,

where E_j = e_j ... e_1, M and Mbar are the killing products, and the inner
conditional value at step i is realised by the same path's suffix killing
product M_{i:n} (tower property; unbiased, no nested simulation).

At a boundary hit started exactly on the boundary every term below row one
carries a factor (1 - h) or X1, so e_i collapses to e1 e1^T: rows 2..d of
the running product jump to zero while row one is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DataError
from .killed_euler import bridge_touch_probability, first_row_squared
from .mc_engine import GradEstimate, RunPlan, derive_substream, run_blocks
from .model import ModelSpec, _hat_a_all

Array = np.ndarray

BOUNDARY_PAYOFF_TOL = 1e-9


@dataclass
class StepFlowInputs:
    """Everything one step of the flow needs, evaluated at ``x_prev``.

    All fields broadcast over leading batch dimensions; ``col_jacs`` has
    layout ``[..., k, j, m] = d sigma^{jk} / d x^m``.
    """

    x_prev: Array
    dW: Array
    h: Array
    dt: float
    sig: Array
    a11: Array
    drift_jac: Array
    col_jacs: Array
    pi: Array
    dist: Array
    b1_over_a11: Array
    grad_sig1_over_a11: Array
    grad_b1_over_a11: Array


def step_flow_inputs(spec: ModelSpec, x_prev: Array, dW: Array, h: Array, dt: float) -> StepFlowInputs:
    """Evaluate the coefficient bundle entering ``e_i`` and ``rho_i``."""
    x_prev = np.asarray(x_prev, dtype=float)
    dW = np.asarray(dW, dtype=float)
    h = np.asarray(h, dtype=float)
    sig = np.asarray(spec.diffusion(x_prev))
    a11 = first_row_squared(sig)
    jac_b = np.asarray(spec.drift_jacobian(x_prev))
    col_jacs = np.asarray(spec.diffusion_column_jacobians(x_prev))
    b = np.asarray(spec.drift(x_prev))

    # grad a^11 = 2 sigma^{1k} grad sigma^{1k}
    grad_sig_row1 = col_jacs[..., :, 0, :]  # [..., k, m] = d sigma^{1k} / d x^m
    grad_a11 = 2.0 * np.einsum("...k,...km->...m", sig[..., 0, :], grad_sig_row1)
    grad_sig1_over_a11 = (
        grad_sig_row1 * a11[..., None, None] - sig[..., 0, :, None] * grad_a11[..., None, :]
    ) / (a11[..., None, None] ** 2)
    grad_b1_over_a11 = (
        jac_b[..., 0, :] * a11[..., None] - b[..., 0, None] * grad_a11
    ) / (a11[..., None] ** 2)

    pi = np.zeros(x_prev.shape[:-1] + (spec.d, spec.d))
    if spec.d > 1:
        pi[..., 1:, 0] = _hat_a_all(spec, x_prev) / a11[..., None]

    return StepFlowInputs(
        x_prev=x_prev,
        dW=dW,
        h=h,
        dt=dt,
        sig=sig,
        a11=a11,
        drift_jac=jac_b,
        col_jacs=col_jacs,
        pi=pi,
        dist=x_prev[..., 0] - spec.L,
        b1_over_a11=b[..., 0] / a11,
        grad_sig1_over_a11=grad_sig1_over_a11,
        grad_b1_over_a11=grad_b1_over_a11,
    )


def ei_matrix(inputs: StepFlowInputs) -> Array:
    """Step matrix ``e_i``, shape ``(..., d, d)``."""
    d = inputs.sig.shape[-1]
    h = inputs.h
    keep = 1.0 - h
    eye = np.eye(d)
    out = keep[..., None, None] * eye
    out[..., 0, 0] += h
    # r_i
    out += keep[..., None, None] * np.einsum("...kjm,...k->...jm", inputs.col_jacs, inputs.dW)
    out += (inputs.dist * h)[..., None, None] * np.einsum(
        "...jk,...km->...jm", inputs.sig, inputs.grad_sig1_over_a11
    )
    # drift and boundary-coupling terms
    out += (inputs.dt * keep)[..., None, None] * inputs.drift_jac
    out += (inputs.dist * h)[..., None, None] * inputs.pi
    return out


def rho_weight(inputs: StepFlowInputs) -> Array:
    """Boundary weight vector ``rho_i``, shape ``(..., d)``."""
    h = inputs.h
    out = (h * inputs.dist)[..., None] * inputs.grad_b1_over_a11
    out[..., 0] += h * inputs.b1_over_a11
    return out


def boundary_payoff_check(spec: ModelSpec, f, x: Array, tol: float = BOUNDARY_PAYOFF_TOL) -> None:
    """Probe that f vanishes on the boundary; raise ContractError otherwise."""
    x = np.asarray(x, dtype=float)
    spread = 3.0 * max(1.0, math.sqrt(spec.T))
    offsets = np.linspace(-spread, spread, 7)
    probes = np.tile(x, (7 * max(spec.d - 1, 1), 1))
    probes[:, 0] = spec.L
    row = 0
    for ell in range(1, spec.d):
        for off in offsets:
            probes[row, ell] = x[ell] + off
            row += 1
    vals = np.abs(np.asarray(f(probes), dtype=float))
    if np.any(vals > tol):
        raise ContractError(
            f"payoff does not vanish on the boundary (max |f| = {vals.max():.3e})"
        )


def path_flow_matrices(spec: ModelSpec, path) -> Array:
    """Running products E_0..E_n of the step matrices along one Euler path."""
    n = len(path.uniforms)
    dt = path.grid[1] - path.grid[0]
    d = spec.d
    out = np.empty((n + 1, d, d))
    out[0] = np.eye(d)
    for i in range(n):
        inputs = step_flow_inputs(
            spec, path.states[i], path.gaussians[i], float(path.hit_flags[i]), dt
        )
        out[i + 1] = ei_matrix(inputs) @ out[i]
    return out


def _pushforward_block(
    start: int,
    stop: int,
    spec: ModelSpec,
    f,
    Df,
    x0: Array,
    n: int,
    seed: int,
    include_rho_tilde: bool,
    mode: str,
) -> Array:
    B = stop - start
    d = spec.d
    dt = spec.T / n
    sq = math.sqrt(dt)
    gg = derive_substream(seed, start, "gaussian")
    ug = derive_substream(seed, start, "uniform") if mode == "bernoulli" else None

    X = np.broadcast_to(np.asarray(x0, dtype=float), (B, d)).copy()
    # E accumulates the ordered product of the per-step matrices with the
    # scalar mbar weights folded in, so no separate running Mbar is needed.
    E = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    rho_terms = np.empty((n, B, d))
    m_steps = np.empty((n, B))

    for i in range(n):
        dW = sq * gg.standard_normal((B, d))
        b = np.asarray(spec.drift(X))
        sig = np.asarray(spec.diffusion(X))
        a11 = first_row_squared(sig)
        Xn = X + b * dt + np.einsum("bjk,bk->bj", sig, dW)
        p = bridge_touch_probability(X[:, 0] - spec.L, Xn[:, 0] - spec.L, a11, dt)
        alive = (Xn[:, 0] > spec.L).astype(float)

        if mode == "bernoulli":
            h = (ug.random(B) <= p).astype(float)
            inputs = step_flow_inputs(spec, X, dW, h, dt)
            rho = rho_weight(inputs)
            if not include_rho_tilde:
                rho = np.zeros_like(rho)
                rho[:, 0] = h * inputs.b1_over_a11
            mbar = alive * (1.0 + h)
            step_matrix = mbar[:, None, None] * ei_matrix(inputs)
            rho_scaled = mbar[:, None] * rho
            m_steps[i] = alive * (1.0 - h)
        else:
            # Exact per-step average over the hit indicator given the path:
            # the indicators never feed back into the states, so every factor
            # of the multilinear weight conditions independently and the
            # Bernoulli 2^hits noise drops out (Rao-Blackwell).
            inputs0 = step_flow_inputs(spec, X, dW, np.zeros(B), dt)
            inputs1 = replace(inputs0, h=np.ones(B))
            rho1 = rho_weight(inputs1)
            if not include_rho_tilde:
                rho1 = np.zeros_like(rho1)
                rho1[:, 0] = inputs1.b1_over_a11
            step_matrix = alive[:, None, None] * (
                (1.0 - p)[:, None, None] * ei_matrix(inputs0)
                + (2.0 * p)[:, None, None] * ei_matrix(inputs1)
            )
            rho_scaled = (alive * 2.0 * p)[:, None] * rho1
            m_steps[i] = alive * (1.0 - p)

        rho_terms[i] = np.einsum("bj,bjk->bk", rho_scaled, E)
        E = np.einsum("bjk,bkl->bjl", step_matrix, E)
        X = Xn

    term = np.einsum("bj,bjk->bk", np.asarray(Df(X), dtype=float), E)
    suffix = np.ones(B)
    boundary = np.zeros((B, d))
    for i in range(n - 1, -1, -1):
        boundary += rho_terms[i] * suffix[:, None]
        suffix *= m_steps[i]
    sample = term + np.asarray(f(X), dtype=float)[:, None] * boundary
    if not np.all(np.isfinite(sample)):
        raise DataError("push-forward weight produced non-finite values")
    return sample


def grad_killed_pushforward(
    spec: ModelSpec,
    f,
    Df,
    x: Array,
    n: int,
    N: int,
    seed: int = 0,
    workers: int | str = 1,
    include_rho_tilde: bool = True,
    mode: str = "bernoulli",
) -> GradEstimate:
    """Monte Carlo gradient of ``E[f(X_n) M_n]`` via the push-forward weights.

    ``mode="bernoulli"`` (default) draws the hit indicators jointly with the
    weights, which is the estimator in its raw form.  ``mode="smoothed"``
    replaces every per-step factor by its exact conditional mean given the
    path; the expectation is unchanged (the indicators never feed back into
    the states, so the multilinear weight factorises) and the Bernoulli part
    of the weight noise drops out.  Either way the weights are heavy-tailed
    near the boundary; that is intrinsic to weighting free paths rather
    than reflecting them.
    """
    if mode not in ("bernoulli", "smoothed"):
        raise ContractError(f"unknown pushforward mode {mode!r}")
    boundary_payoff_check(spec, f, x)
    plan = RunPlan(seed=seed, paths=N, steps=n, workers=workers, estimator_tag="pushforward")
    acc = run_blocks(
        plan,
        lambda _b, s, e: _pushforward_block(
            s, e, spec, f, Df, x, n, seed, include_rho_tilde, mode
        ),
    )
    return GradEstimate(
        estimate=acc.mean, stderr=acc.stderr, paths=N, seed=seed, estimator_tag="pushforward"
    )
