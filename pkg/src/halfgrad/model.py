"""Half-space diffusion models and coefficient plumbing.

A model is a diffusion on the half-space H = (L, inf) x R^(d-1) described by
a drift b(x), a diffusion matrix sigma(x) and their analytic Jacobians.  The
boundary structure we rely on everywhere else is:

* sigma^{1l}(y) = sigma^{l1}(y) = 0 on the boundary {y^1 = L} for l != 1,
* a = sigma sigma^T uniformly elliptic.

Under these conditions a^{l1}(y) factors as hat_a^l(y) * (y^1 - L); the
quotient hat_a^l and the column-one matrix pi built from it drive the jump
structure of the step matrices in :mod:`halfgrad.pushforward_grad`.

All coefficient callables are expected to broadcast: they take points of
shape ``(..., d)`` and return arrays with matching leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ModelError

Array = np.ndarray

# Quotient threshold scale for hat_a and the one-sided difference step used
# below it.  The threshold is relative to max(1, |x1|) so models living far
# from the origin do not fall into the difference branch spuriously.
HAT_A_QUOTIENT_EPS = 1e-6
HAT_A_DIFF_STEP = 1e-5

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a half-space diffusion.

    Parameters
    ----------
    d : int
        State dimension, >= 1.
    L : float
        Boundary level; the domain is (L, inf) x R^(d-1).
    T : float
        Time horizon, > 0.
    drift : callable
        ``(..., d) -> (..., d)`` evaluation of b.
    diffusion : callable
        ``(..., d) -> (..., d, d)`` evaluation of sigma.
    drift_jacobian : callable
        ``(..., d) -> (..., d, d)`` with entry ``[j, m] = d b^j / d x^m``.
    diffusion_column_jacobians : callable
        ``(..., d) -> (..., d, d, d)`` where slot ``[k]`` is the Jacobian of
        the k-th column of sigma: ``[k, j, m] = d sigma^{jk} / d x^m``.
    name : str
        Display name used by the CLI registry.
    """

    d: int
    L: float
    T: float
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    diffusion_column_jacobians: Callable[[Array], Array]
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1:
            raise ModelError(f"dimension must be >= 1, got {self.d}")
        if not self.T > 0:
            raise ModelError(f"horizon must be positive, got {self.T}")


@dataclass(frozen=True)
class HypothesisReport:
    """Result of the sampling-based structural validation of a model."""

    ellipticity_floor: float
    max_boundary_violation: float
    probe_count: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.ellipticity_floor > 0.0 and self.max_boundary_violation <= self.tolerance


def covariance(spec: ModelSpec, x: Array) -> Array:
    """Covariance matrix a(x) = sigma(x) sigma(x)^T, shape ``(..., d, d)``."""
    sig = np.asarray(spec.diffusion(np.asarray(x, dtype=float)))
    return sig @ np.swapaxes(sig, -1, -2)


def hat_a(spec: ModelSpec, x: Array, ell: int) -> Array:
    """Boundary quotient hat_a^ell(x) = a^{ell,1}(x) / (x^1 - L).

    Away from the boundary this is the literal quotient.  Within the
    quotient threshold of the boundary it switches to a one-sided finite
    difference of ``y1 -> a^{ell,1}(y)`` taken at the boundary projection of
    ``x``, which is the smooth limit of the quotient for models with the
    required boundary structure.

    Parameters
    ----------
    ell : int
        Coordinate index in 2..d (1-based; the first coordinate is normal
        to the boundary and excluded).
    """
    if not 2 <= ell <= spec.d:
        raise ModelError(f"hat_a index must be in 2..{spec.d}, got {ell}")
    out = _hat_a_all(spec, np.asarray(x, dtype=float))[..., ell - 2]
    if not np.all(np.isfinite(out)):
        raise ModelError("hat_a evaluated to a non-finite value")
    return out


def _hat_a_all(spec: ModelSpec, x: Array) -> Array:
    """All quotients hat_a^ell, ell = 2..d, stacked on the last axis.

    Returns shape ``(..., d-1)``; empty trailing axis when d == 1.
    """
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    if spec.d == 1:
        return np.zeros(lead + (0,))
    flat = x.reshape(-1, spec.d)
    a = covariance(spec, flat)
    dist = flat[:, 0] - spec.L
    scale = np.maximum(1.0, np.abs(flat[:, 0]))
    near = np.abs(dist) <= HAT_A_QUOTIENT_EPS * scale

    safe = np.where(near, 1.0, dist)
    quotient = a[:, 1:, 0] / safe[:, None]

    if np.any(near):
        proj = flat[near].copy()
        proj[:, 0] = spec.L + HAT_A_DIFF_STEP
        a_step = covariance(spec, proj)
        quotient[near] = a_step[:, 1:, 0] / HAT_A_DIFF_STEP
    return quotient.reshape(lead + (spec.d - 1,))


def pi_matrix(spec: ModelSpec, x: Array) -> Array:
    """Column-one coupling matrix pi(x), shape ``(..., d, d)``.

    Nonzero entries sit in column 1, rows 2..d, and equal
    ``hat_a^ell(x) / a^{11}(x)``.  By construction ``e1^T pi(x) = 0`` and
    ``pi(x) e_m = 0`` for m != 1, which is what the jump algebra of the step
    matrices relies on.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (spec.d, spec.d))
    if spec.d == 1:
        return out
    a11 = covariance(spec, x)[..., 0, 0]
    out[..., 1:, 0] = _hat_a_all(spec, x) / a11[..., None]
    return out


def validate_hypothesis1(
    spec: ModelSpec,
    probe_box: tuple[Array, Array],
    n_probes: int = 256,
    tolerance: float = BOUNDARY_TOL,
) -> HypothesisReport:
    """Probe-based validation of the structural boundary hypothesis.

    Draws a deterministic low-discrepancy grid of interior points inside
    ``probe_box = (lower, upper)`` plus their boundary projections, then
    checks uniform ellipticity of a = sigma sigma^T over all probes and the
    vanishing of sigma^{1l}, sigma^{l1} (l != 1) at the boundary probes.

    Violations are reported, not raised; only non-finite coefficient values
    raise :class:`ModelError`.
    """
    if n_probes < 1:
        raise ModelError("n_probes must be >= 1")
    lower = np.broadcast_to(np.asarray(probe_box[0], dtype=float), (spec.d,))
    upper = np.broadcast_to(np.asarray(probe_box[1], dtype=float), (spec.d,))
    sampler = qmc.Halton(d=spec.d, scramble=False)
    unit = sampler.random(n_probes)
    interior = lower + unit * (upper - lower)
    boundary = interior.copy()
    boundary[:, 0] = spec.L
    probes = np.concatenate([interior, boundary], axis=0)

    sig = np.asarray(spec.diffusion(probes))
    if not np.all(np.isfinite(sig)):
        raise ModelError("diffusion produced non-finite values on probes")
    if not np.all(np.isfinite(np.asarray(spec.drift(probes)))):
        raise ModelError("drift produced non-finite values on probes")

    a = sig @ np.swapaxes(sig, -1, -2)
    floor = float(np.min(np.linalg.eigvalsh(a)))

    sig_b = sig[n_probes:]
    if spec.d > 1:
        violation = float(
            max(np.max(np.abs(sig_b[:, 0, 1:])), np.max(np.abs(sig_b[:, 1:, 0])))
        )
    else:
        violation = 0.0
    return HypothesisReport(
        ellipticity_floor=floor,
        max_boundary_violation=violation,
        probe_count=2 * n_probes,
        tolerance=tolerance,
    )
