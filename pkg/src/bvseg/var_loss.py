"""Variational loss terms, cross-entropy, their analytic gradients and the
full free energy used as a diagnostic.

Gaussian factors carry (mean, log-variance); gradients are taken with
respect to exactly those parameters.  Gamma and Beta factors enter only
through their posterior expectations and receive no gradient: they are
refreshed by the closed-form updates in ``vb_updates``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import distributions as dist
from .grid import StencilOperator, apply_D, apply_D_transpose, row_squared_apply
from .model import BetaVector, GammaField, GaussianField, Hyperparams, VariationalState

GRADIENT_FIELDS = ("x_mean", "x_log_var", "m_mean", "m_log_var", "z_mean", "z_log_var")
LOSS_TERMS = ("L_y", "L_mu_z", "L_sigma_z", "L_mu_x", "L_sigma_x", "L_mu_m", "L_sigma_m")


@dataclass
class LossBreakdown:
    L_y: float
    L_mu_z: float
    L_sigma_z: float
    L_mu_x: float
    L_sigma_x: float
    L_mu_m: float
    L_sigma_m: float
    L_ce: float
    lam: float

    @property
    def L_var(self) -> float:
        return (self.L_y + self.L_mu_z + self.L_sigma_z + self.L_mu_x + self.L_sigma_x
                + self.L_mu_m + self.L_sigma_m)

    @property
    def total(self) -> float:
        return self.L_ce + self.lam * self.L_var

    def as_dict(self) -> dict:
        d = asdict(self)
        d["L_var"] = self.L_var
        d["total"] = self.total
        return d

    def first_nonfinite(self):
        for name, value in self.as_dict().items():
            if not np.isfinite(value):
                return name
        return None


@dataclass
class NoiseDraws:
    """Standard-normal draws for the reparameterized samples.

    Arrays have a leading sample axis: eps_x and eps_m are (S, 1, H, W),
    eps_z is (S, K, H, W).  Loss terms that consume samples are averaged
    over S.
    """

    eps_x: np.ndarray
    eps_m: np.ndarray
    eps_z: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, K: int, shape, samples: int = 1) -> "NoiseDraws":
        H, W = shape
        return cls(
            eps_x=rng.standard_normal((samples, 1, H, W)),
            eps_m=rng.standard_normal((samples, 1, H, W)),
            eps_z=rng.standard_normal((samples, K, H, W)),
        )

    @classmethod
    def zeros(cls, K: int, shape, samples: int = 1) -> "NoiseDraws":
        H, W = shape
        return cls(np.zeros((samples, 1, H, W)), np.zeros((samples, 1, H, W)),
                   np.zeros((samples, K, H, W)))


@dataclass
class Gradients:
    x_mean: np.ndarray
    x_log_var: np.ndarray
    m_mean: np.ndarray
    m_log_var: np.ndarray
    z_mean: np.ndarray
    z_log_var: np.ndarray

    def items(self):
        return ((f, getattr(self, f)) for f in GRADIENT_FIELDS)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g ** 2) for _, g in self.items())))


def softmax_channels(z: np.ndarray) -> np.ndarray:
    """Softmax over the leading channel axis of a (K, H, W) field."""
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def segmentation_weights(q_z: GaussianField) -> np.ndarray:
    """Non-negative per-pixel class weights (summing to one) from the label means."""
    return softmax_channels(q_z.mean)


# --------------------------------------------------------------------------
# individual terms


def loss_y(y, x_sample, m_sample, rho_mean) -> float:
    y = np.asarray(y, dtype=float)
    x_sample = np.asarray(x_sample, dtype=float)
    m_sample = np.asarray(m_sample, dtype=float)
    rho_mean = np.asarray(rho_mean, dtype=float)
    if not (y.shape[-2:] == x_sample.shape[-2:] == m_sample.shape[-2:] == rho_mean.shape[-2:]):
        raise ValueError("loss_y: grid dimensions differ")
    if np.any(rho_mean <= 0):
        raise ValueError("loss_y: rho_mean must be positive")
    r = y - x_sample - m_sample
    return float(0.5 * np.sum(rho_mean * r * r))


def loss_z(q_z: GaussianField, q_omega: GammaField, q_pi: BetaVector, op: StencilOperator):
    bracket = q_pi.neg_log1m_mean()[:, None, None]
    omega = q_omega.mean
    dz = apply_D(op, q_z.mean)
    L_mu = 0.5 * float(np.sum(bracket * omega * dz * dz))
    L_sigma = 0.5 * float(np.sum(bracket * (2.0 * omega * q_z.var - q_z.log_var)))
    return L_mu, L_sigma


def loss_x(q_x: GaussianField, weights, upsilon_mean, op: StencilOperator):
    """Contour terms.  ``weights`` is the (K, H, W) class-weight field."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("loss_x: class weights must be non-negative")
    prec = weights * upsilon_mean  # (K, H, W)
    dx = apply_D(op, q_x.mean)
    L_mu = 0.5 * float(np.sum(prec * dx * dx))
    # the 1/K on the log-determinant cancels against the sum over k
    L_sigma = 0.5 * float(np.sum(2.0 * prec * q_x.var) - np.sum(q_x.log_var))
    return L_mu, L_sigma


def loss_m(q_m: GaussianField, h: Hyperparams):
    d = q_m.mean - h.mu0
    L_mu = 0.5 * h.sigma0 * float(np.sum(d * d))
    L_sigma = 0.5 * float(h.sigma0 * np.sum(q_m.var) - np.sum(q_m.log_var))
    return L_mu, L_sigma


def _check_labels(labels, K, shape):
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise ValueError(f"labels shape {labels.shape} does not match grid {tuple(shape)}")
    if np.any(labels < 0) or np.any(labels >= K) or np.any(labels != np.round(labels)):
        raise ValueError(f"labels must be integer class ids in [0, {K})")
    return labels.astype(np.int64)


def _ce_and_grad(z_sample, labels, mask):
    """Mean negative log-softmax of the true class; gradient w.r.t. the logits."""
    K = z_sample.shape[0]
    lab = _check_labels(labels, K, z_sample.shape[1:])
    if mask is None:
        mask = np.ones(lab.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(z_sample)
    shifted = z_sample - z_sample.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=0))
    logp_true = np.take_along_axis(shifted, lab[None], axis=0)[0] - logsum
    ce = -float(np.sum(logp_true[mask])) / n
    p = np.exp(shifted - logsum[None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, lab[None], 1.0, axis=0)
    grad = (p - onehot) * mask[None] / n
    return ce, grad


def cross_entropy(z_sample, labels, mask=None) -> float:
    """Per-pixel softmax over channels, mean NLL of the true class over unmasked pixels."""
    return _ce_and_grad(np.asarray(z_sample, dtype=float), labels, mask)[0]


# --------------------------------------------------------------------------
# total objective and its gradient


def _evaluate(state: VariationalState, y, labels, h: Hyperparams, op: StencilOperator,
              draws: NoiseDraws, mask=None, with_grad: bool = True, ce_reduction: str = "sum"):
    y = np.asarray(y, dtype=float)
    op.check(y)
    q_x, q_m, q_z = state.q_x, state.q_m, state.q_z
    S = draws.eps_x.shape[0]
    rho = state.q_rho.mean
    ups = state.q_upsilon.mean
    omega = state.q_omega.mean
    bracket = state.q_pi.neg_log1m_mean()[:, None, None]
    sx, sm, sz = q_x.std, q_m.std, q_z.std

    # L_y, averaged over the S reparameterized samples
    x_s = q_x.mean[None] + sx[None] * draws.eps_x
    m_s = q_m.mean[None] + sm[None] * draws.eps_m
    resid = y[None, None] - x_s - m_s
    L_y = 0.5 * float(np.sum(rho[None] * resid ** 2)) / S
    g_resid = -rho[None] * resid / S  # dL_y / dx_s (= dL_y / dm_s)

    L_mu_z, L_sigma_z = loss_z(q_z, state.q_omega, state.q_pi, op)
    w = softmax_channels(q_z.mean)
    L_mu_x, L_sigma_x = loss_x(q_x, w, ups, op)
    L_mu_m, L_sigma_m = loss_m(q_m, h)

    ce = 0.0
    g_zs = None
    if labels is not None:
        if ce_reduction == "sum":
            scale = float(y.size if mask is None else np.count_nonzero(mask))
        elif ce_reduction == "mean":
            scale = 1.0
        else:
            raise ValueError(f"unknown ce_reduction {ce_reduction!r}")
        g_zs = np.zeros((S,) + q_z.mean.shape)
        for s in range(S):
            z_s = q_z.mean + sz * draws.eps_z[s]
            c, g = _ce_and_grad(z_s, labels, mask)
            ce += scale * c / S
            g_zs[s] = scale * g / S

    losses = LossBreakdown(L_y, L_mu_z, L_sigma_z, L_mu_x, L_sigma_x, L_mu_m, L_sigma_m,
                           ce, float(h.lam))
    if not with_grad:
        return losses, None

    lam = float(h.lam)
    # contour
    dx = apply_D(op, q_x.mean)
    wsum = w.sum(axis=0)
    g_xm = lam * (g_resid.sum(axis=0) + apply_D_transpose(op, wsum * ups * dx))
    g_xlv = lam * ((g_resid * draws.eps_x).sum(axis=0) * 0.5 * sx
                   + wsum * ups * q_x.var - 0.5)
    # basis
    g_mm = lam * (g_resid.sum(axis=0) + h.sigma0 * (q_m.mean - h.mu0))
    g_mlv = lam * ((g_resid * draws.eps_m).sum(axis=0) * 0.5 * sm
                   + 0.5 * (h.sigma0 * q_m.var - 1.0))
    # labels: SAR terms, contour weighting through the softmax, then CE
    dz = apply_D(op, q_z.mean)
    g_zm = lam * bracket * apply_D_transpose(op, omega * dz)
    g_w = 0.5 * ups * dx * dx + ups * q_x.var  # dL_var / dw_k, same for every k
    g_w = np.broadcast_to(g_w, w.shape)
    g_zm = g_zm + lam * w * (g_w - np.sum(w * g_w, axis=0, keepdims=True))
    g_zlv = lam * 0.5 * bracket * (2.0 * omega * q_z.var - 1.0)
    if g_zs is not None:
        g_zm = g_zm + g_zs.sum(axis=0)
        g_zlv = g_zlv + (g_zs * draws.eps_z).sum(axis=0) * 0.5 * sz
    grads = Gradients(g_xm, g_xlv, g_mm, g_mlv, g_zm, g_zlv)
    return losses, grads


def total_loss(state: VariationalState, y, labels, h: Hyperparams, op: StencilOperator,
               rng=None, draws: NoiseDraws | None = None, mask=None,
               samples: int = 1, ce_reduction: str = "sum") -> LossBreakdown:
    """L_ce + lambda * L_var at one (or ``samples``) reparameterized draw(s).

    Without labels the cross-entropy is zero (unsupervised mode).  L_ce is
    summed over labelled pixels by default, matching the pixel sums in
    L_var; ``ce_reduction="mean"`` averages it instead.
    """
    if draws is None:
        if rng is None:
            raise ValueError("total_loss needs an rng or explicit draws")
        draws = NoiseDraws.draw(rng, state.K, state.grid_shape, samples)
    return _evaluate(state, y, labels, h, op, draws, mask, False, ce_reduction)[0]


def grad_var_loss(state: VariationalState, y, h: Hyperparams, op: StencilOperator,
                  draws: NoiseDraws, labels=None, mask=None, ce_reduction: str = "sum"):
    """Analytic gradient of L_ce + lambda * L_var for fixed noise draws.

    Returns (LossBreakdown, Gradients).  rho, upsilon, omega and pi are
    held at their current posterior expectations.
    """
    return _evaluate(state, y, labels, h, op, draws, mask, True, ce_reduction)


# --------------------------------------------------------------------------
# full free energy


def free_energy(state: VariationalState, y, h: Hyperparams, op: StencilOperator,
                x_sample=None, m_sample=None) -> float:
    """Negative ELBO, KL(q || p) - E_q[ln p(y | psi)], up to an additive constant.

    Expectations are exact except two documented choices: the label field
    weights the contour prior through softmax(mean z), and the log-determinant
    of the label prior uses E[ln pi] in place of E[ln(-ln(1 - pi))], which is
    what makes the Beta factor conjugate.  If samples of x and m are given the
    likelihood uses that residual instead of its expectation.
    """
    y = np.asarray(y, dtype=float)
    q_x, q_m, q_z = state.q_x, state.q_m, state.q_z
    d = y.size

    # likelihood
    rho_a, rho_b = state.q_rho.shape, state.q_rho.rate
    if x_sample is None:
        r2 = (y - q_x.mean[0] - q_m.mean[0]) ** 2 + q_x.var[0] + q_m.var[0]
    else:
        r2 = (y - np.asarray(x_sample).reshape(y.shape) - np.asarray(m_sample).reshape(y.shape)) ** 2
    e_ln_rho = dist.digamma(rho_a) - np.log(rho_b)
    nll = float(np.sum(0.5 * (rho_a / rho_b)[0] * r2 - 0.5 * e_ln_rho[0]))

    # contour prior
    w = softmax_channels(q_z.mean)
    ups_a, ups_b = state.q_upsilon.shape, state.q_upsilon.rate
    e_ups = (ups_a / ups_b)[0]
    e_ln_ups = (dist.digamma(ups_a) - np.log(ups_b))[0]
    edx2 = apply_D(op, q_x.mean)[0] ** 2 + row_squared_apply(op, q_x.var)[0]
    nlp_x = float(np.sum(0.5 * w * e_ups * edx2 - 0.5 * (np.log(w) + e_ln_ups)))

    # label prior
    om_a, om_b = state.q_omega.shape, state.q_omega.rate
    e_om = om_a / om_b
    e_ln_om = dist.digamma(om_a) - np.log(om_b)
    a_pi, b_pi = state.q_pi.alpha, state.q_pi.beta
    e_ln_pi = dist.digamma(a_pi) - dist.digamma(a_pi + b_pi)
    bracket = state.q_pi.neg_log1m_mean()
    edz2 = apply_D(op, q_z.mean) ** 2 + row_squared_apply(op, q_z.var)
    nlp_z = float(np.sum(0.5 * bracket[:, None, None] * e_om * edz2 - 0.5 * e_ln_om)
                  - 0.5 * d * np.sum(e_ln_pi))

    kl = 0.0
    kl += float(np.sum(dist.kl_gamma(dist.GammaParams(rho_a, rho_b),
                                     dist.GammaParams(h.gamma_rho, h.phi_rho))))
    kl += float(np.sum(dist.kl_gamma(dist.GammaParams(ups_a, ups_b),
                                     dist.GammaParams(h.gamma_upsilon, h.phi_upsilon))))
    kl += float(np.sum(dist.kl_gamma(dist.GammaParams(om_a, om_b),
                                     dist.GammaParams(h.gamma_omega, h.phi_omega))))
    kl += float(np.sum(dist.kl_beta(dist.BetaParams(a_pi, b_pi),
                                    dist.BetaParams(h.alpha_pi, h.beta_pi))))
    kl += float(np.sum(dist.kl_gaussian(dist.GaussianParams(q_m.mean, q_m.var),
                                        dist.GaussianParams(h.mu0, 1.0 / h.sigma0))))
    # x and z have no separate KL: their priors sit in nlp_x / nlp_z, so only
    # the negative entropies remain
    neg_entropy = -0.5 * float(np.sum(q_x.log_var) + np.sum(q_z.log_var))
    return kl + neg_entropy + nll + nlp_x + nlp_z


__all__ = [
    "LossBreakdown", "NoiseDraws", "Gradients", "LOSS_TERMS", "softmax_channels",
    "segmentation_weights", "loss_y", "loss_z", "loss_x", "loss_m", "cross_entropy",
    "total_loss", "grad_var_loss", "free_energy",
]
