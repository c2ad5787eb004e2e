"""Built-in models and payoff functions for the CLI and the test suite.

All registry models live on the half-space with L = 0 and are batched: the
coefficient callables accept ``(..., d)`` points.  ``offdiag2d_invalid``
deliberately violates the boundary structure (constant off-diagonal sigma)
so the validation command's failure path can be exercised end to end.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model import ModelSpec

Array = np.ndarray

INTRO_SCALE = 1.0
INTRO_SHEAR = 0.4
INTRO_C = 1.0
BM_DRIFT = 0.3
DIAG_DRIFT = 0.1


def _zeros_like_points(x: Array) -> Array:
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_matrix(x: Array, d: int) -> Array:
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + (d, d))


def _zero_col_jacs(x: Array, d: int) -> Array:
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + (d, d, d))


def _bm1d_sigma(x):
    x = np.asarray(x, dtype=float)
    return np.ones(x.shape[:-1] + (1, 1))


def _bm1d_drift(x, b):
    x = np.asarray(x, dtype=float)
    return np.full(x.shape, b)


def _intro2d_sigma(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = INTRO_SCALE
    out[..., 1, 0] = INTRO_SHEAR * x[..., 0]
    out[..., 1, 1] = INTRO_C
    return out


def _intro2d_col_jacs(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2, 2))
    out[..., 0, 1, 0] = INTRO_SHEAR  # d sigma^{2,1} / d x^1
    return out


def _diag2d_sigma(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = 1.0 + 0.2 * np.tanh(x[..., 0])
    out[..., 1, 1] = 1.0 + 0.2 * np.tanh(x[..., 1])
    return out


def _diag2d_col_jacs(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2, 2))
    sech2_0 = 1.0 / np.cosh(x[..., 0]) ** 2
    sech2_1 = 1.0 / np.cosh(x[..., 1]) ** 2
    out[..., 0, 0, 0] = 0.2 * sech2_0  # d sigma^{1,1} / d x^1
    out[..., 1, 1, 1] = 0.2 * sech2_1  # d sigma^{2,2} / d x^2
    return out


def _offdiag_sigma(x):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 0, 1] = 0.3
    out[..., 1, 0] = 0.3
    out[..., 1, 1] = 1.0
    return out


def make_model(name: str, T: float = 1.0) -> ModelSpec:
    """Construct a registry model by name."""
    if name == "bm1d":
        return ModelSpec(
            d=1, L=0.0, T=T,
            drift=lambda x: _zeros_like_points(x),
            diffusion=_bm1d_sigma,
            drift_jacobian=lambda x: _zero_matrix(x, 1),
            diffusion_column_jacobians=lambda x: _zero_col_jacs(x, 1),
            name="bm1d",
        )
    if name == "bm1d_drift":
        return ModelSpec(
            d=1, L=0.0, T=T,
            drift=lambda x: _bm1d_drift(x, BM_DRIFT),
            diffusion=_bm1d_sigma,
            drift_jacobian=lambda x: _zero_matrix(x, 1),
            diffusion_column_jacobians=lambda x: _zero_col_jacs(x, 1),
            name="bm1d_drift",
        )
    if name == "intro2d":
        return ModelSpec(
            d=2, L=0.0, T=T,
            drift=lambda x: _zeros_like_points(x),
            diffusion=_intro2d_sigma,
            drift_jacobian=lambda x: _zero_matrix(x, 2),
            diffusion_column_jacobians=_intro2d_col_jacs,
            name="intro2d",
        )
    if name == "diag2d":
        return ModelSpec(
            d=2, L=0.0, T=T,
            drift=lambda x: np.full_like(np.asarray(x, dtype=float), DIAG_DRIFT),
            diffusion=_diag2d_sigma,
            drift_jacobian=lambda x: _zero_matrix(x, 2),
            diffusion_column_jacobians=_diag2d_col_jacs,
            name="diag2d",
        )
    if name == "offdiag2d_invalid":
        return ModelSpec(
            d=2, L=0.0, T=T,
            drift=lambda x: _zeros_like_points(x),
            diffusion=_offdiag_sigma,
            drift_jacobian=lambda x: _zero_matrix(x, 2),
            diffusion_column_jacobians=lambda x: _zero_col_jacs(x, 2),
            name="offdiag2d_invalid",
        )
    raise ConfigError(f"unknown model {name!r}; known: {sorted(MODEL_NAMES)}")


MODEL_NAMES = ("bm1d", "bm1d_drift", "intro2d", "diag2d", "offdiag2d_invalid")

DEFAULT_START = {
    "bm1d": (1.0,),
    "bm1d_drift": (1.0,),
    "intro2d": (0.5, 0.0),
    "diag2d": (0.5, 0.0),
    "offdiag2d_invalid": (0.5, 0.0),
}


def _linear1(y):
    y = np.asarray(y, dtype=float)
    return y[..., 0]


def _linear1_grad(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    out[..., 0] = 1.0
    return out


def _expsat(y):
    y = np.asarray(y, dtype=float)
    return 1.0 - np.exp(-y[..., 0])


def _expsat_grad(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    out[..., 0] = np.exp(-y[..., 0])
    return out


def _product2d(y):
    y = np.asarray(y, dtype=float)
    return (1.0 - np.exp(-y[..., 0])) * np.cos(y[..., 1])


def _product2d_grad(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    out[..., 0] = np.exp(-y[..., 0]) * np.cos(y[..., 1])
    out[..., 1] = -(1.0 - np.exp(-y[..., 0])) * np.sin(y[..., 1])
    return out


PAYOFFS = {
    "linear1": (_linear1, _linear1_grad, 1),
    "expsat": (_expsat, _expsat_grad, 1),
    "product2d": (_product2d, _product2d_grad, 2),
}


def make_payoff(name: str, d: int):
    """Look up a payoff by name; returns ``(f, Df)`` batched callables.

    Registry payoffs assume L = 0 and vanish on the boundary by
    construction.  The minimum dimension of each payoff must not exceed d.
    """
    try:
        f, df, min_d = PAYOFFS[name]
    except KeyError:
        raise ConfigError(f"unknown payoff {name!r}; known: {sorted(PAYOFFS)}")
    if d < min_d:
        raise ConfigError(f"payoff {name!r} needs dimension >= {min_d}, model has d = {d}")
    return f, df
