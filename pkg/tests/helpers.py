"""Shared test support: finite-difference Jacobians and synthetic models.

The finite-difference Jacobian lives here on purpose: production model
specs carry analytic Jacobians, and this helper is only for checking them.
"""

from __future__ import annotations

import numpy as np

from halfgrad.model import ModelSpec


def fd_jacobian(fn, x, eps=1e-6):
    """Central-difference Jacobian of ``fn: (d,) -> (...)`` at ``x``."""
    x = np.asarray(x, dtype=float)
    base = np.asarray(fn(x), dtype=float)
    out = np.empty(base.shape + (x.size,))
    for m in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[m] += eps
        xm[m] -= eps
        out[..., m] = (np.asarray(fn(xp), dtype=float) - np.asarray(fn(xm), dtype=float)) / (2 * eps)
    return out


class _RandomCoefficients:
    """Smooth random coefficients with the required boundary structure.

    Off-diagonal entries in the first row/column of sigma carry an explicit
    (x^1 - L) factor so they vanish on the boundary; everything else is a
    bounded tanh link with analytic derivatives.
    """

    def __init__(self, rng: np.random.Generator, d: int, L: float, with_drift: bool):
        self.d = d
        self.L = L
        self.w_sig = 0.3 * rng.standard_normal((d, d, d))
        self.c_sig = 0.5 * rng.standard_normal((d, d))
        self.amp = 0.15 * rng.random((d, d)) + 0.05
        self.w_b = 0.4 * rng.standard_normal((d, d))
        self.c_b = 0.5 * rng.standard_normal(d)
        self.b_amp = 0.4 if with_drift else 0.0

    def _bnd(self, j, k):
        return 1.0 if (j == 0) != (k == 0) else 0.0

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.d, self.d))
        dist = x[..., 0] - self.L
        for j in range(self.d):
            for k in range(self.d):
                u = np.tensordot(x, self.w_sig[j, k], axes=(-1, 0)) + self.c_sig[j, k]
                if j == k:
                    out[..., j, k] = 1.0 + 0.3 * np.tanh(u)
                elif self._bnd(j, k):
                    out[..., j, k] = self.amp[j, k] * np.tanh(u) * dist
                else:
                    out[..., j, k] = self.amp[j, k] * np.tanh(u)
        return out

    def col_jacs(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.d, self.d, self.d))
        dist = x[..., 0] - self.L
        for j in range(self.d):
            for k in range(self.d):
                u = np.tensordot(x, self.w_sig[j, k], axes=(-1, 0)) + self.c_sig[j, k]
                sech2 = 1.0 / np.cosh(u) ** 2
                if j == k:
                    grad = 0.3 * sech2[..., None] * self.w_sig[j, k]
                elif self._bnd(j, k):
                    grad = self.amp[j, k] * (
                        sech2[..., None] * self.w_sig[j, k] * dist[..., None]
                    )
                    grad[..., 0] += self.amp[j, k] * np.tanh(u)
                else:
                    grad = self.amp[j, k] * sech2[..., None] * self.w_sig[j, k]
                out[..., k, j, :] = grad
        return out

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        u = np.tensordot(x, self.w_b, axes=(-1, 1)) + self.c_b
        return self.b_amp * np.tanh(u)

    def drift_jac(self, x):
        x = np.asarray(x, dtype=float)
        u = np.tensordot(x, self.w_b, axes=(-1, 1)) + self.c_b
        sech2 = 1.0 / np.cosh(u) ** 2
        return self.b_amp * sech2[..., None] * self.w_b


def make_random_spec(seed: int, d: int = 2, L: float = 0.0, T: float = 1.0,
                     with_drift: bool = True) -> ModelSpec:
    coeff = _RandomCoefficients(np.random.default_rng(seed), d, L, with_drift)
    return ModelSpec(
        d=d, L=L, T=T,
        drift=coeff.drift,
        diffusion=coeff.sigma,
        drift_jacobian=coeff.drift_jac,
        diffusion_column_jacobians=coeff.col_jacs,
        name=f"random{seed}",
    )
