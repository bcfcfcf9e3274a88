"""Closed-form conjugate updates of the Gamma and Beta factors.

Each update is a pure function of a state snapshot.  ``conjugate_sweep``
evaluates all four from the same snapshot (Jacobi semantics), so the
order in which they are applied within a sweep does not matter.

Expected squared differences use the exact Gaussian identity
E[(D f)_i^2] = (D mean)_i^2 + sum_j D[i, j]^2 var_j.
"""

from __future__ import annotations

import numpy as np

from .grid import StencilOperator, apply_D, row_squared_apply
from .model import BetaVector, GammaField, Hyperparams, VariationalState
from .var_loss import segmentation_weights


def expected_sq_diff(op: StencilOperator, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    d = apply_D(op, mean)
    return d * d + row_squared_apply(op, var)


def update_q_upsilon(state: VariationalState, h: Hyperparams, op: StencilOperator) -> GammaField:
    w = segmentation_weights(state.q_z)
    edx2 = expected_sq_diff(op, state.q_x.mean, state.q_x.var)  # (1, H, W)
    shape = np.full(edx2.shape, h.gamma_upsilon + 0.5 * state.K)
    rate = 0.5 * np.sum(w * edx2, axis=0, keepdims=True) + h.phi_upsilon
    return GammaField(shape, rate)


def update_q_omega(state: VariationalState, h: Hyperparams, op: StencilOperator) -> GammaField:
    bracket = state.q_pi.neg_log1m_mean()[:, None, None]
    edz2 = expected_sq_diff(op, state.q_z.mean, state.q_z.var)  # (K, H, W)
    shape = np.full(edz2.shape, h.gamma_omega + 0.5)
    rate = 0.5 * bracket * edz2 + h.phi_omega
    return GammaField(shape, rate)


def update_q_pi(state: VariationalState, h: Hyperparams, op: StencilOperator) -> BetaVector:
    d = state.q_z.mean[0].size
    edz2 = expected_sq_diff(op, state.q_z.mean, state.q_z.var)
    alpha = np.full(state.K, h.alpha_pi + 0.5 * d)
    beta = 0.5 * np.sum(state.q_omega.mean * edz2, axis=(1, 2)) + h.beta_pi
    return BetaVector(alpha, beta)


def update_q_rho(state: VariationalState, h: Hyperparams, y, x_sample=None, m_sample=None,
                 exact: bool = False) -> GammaField:
    """Noise precision update.

    By default the squared residual comes from one reparameterized sample of
    x and m.  With ``exact=True`` it is replaced by its expectation
    (y - mean_x - mean_m)^2 + var_x + var_m and the samples are ignored.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != tuple(state.grid_shape):
        raise ValueError("update_q_rho: image does not match state grid")
    if exact:
        r2 = (y - state.q_x.mean[0] - state.q_m.mean[0]) ** 2 + state.q_x.var[0] + state.q_m.var[0]
    else:
        if x_sample is None or m_sample is None:
            raise ValueError("update_q_rho needs x and m samples unless exact=True")
        x_sample = np.asarray(x_sample, dtype=float).reshape(-1, *y.shape)[0]
        m_sample = np.asarray(m_sample, dtype=float).reshape(-1, *y.shape)[0]
        r2 = (y - x_sample - m_sample) ** 2
    shape = np.full((1,) + y.shape, h.gamma_rho + 0.5)
    rate = (0.5 * r2 + h.phi_rho)[None]
    return GammaField(shape, rate)


def conjugate_sweep(state: VariationalState, h: Hyperparams, op: StencilOperator, y,
                    x_sample=None, m_sample=None, exact_rho: bool = False) -> VariationalState:
    """All four updates from one snapshot; returns a new state."""
    snap = state
    new = state.copy()
    new.q_upsilon = update_q_upsilon(snap, h, op)
    new.q_omega = update_q_omega(snap, h, op)
    new.q_pi = update_q_pi(snap, h, op)
    new.q_rho = update_q_rho(snap, h, y, x_sample, m_sample, exact=exact_rho)
    return new
