"""Variational state, hyperparameters, reparameterized sampling and the
synthetic scene generator.

All per-pixel fields are float64 arrays of shape (channels, height, width):
one channel for the contour x, the basis mean m, rho and upsilon, and K
channels for the label z and the boundary field omega.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from .grid import StencilOperator

INIT_LOG_VARIANCE = math.log(1e-2)

# Counter-based random streams: one Philox key per run seed, the counter's
# upper words select the consumer and the sweep.
STREAM_FIT_NOISE = 1
STREAM_RHO_SAMPLE = 2
STREAM_MONITOR = 3
STREAM_SCENE = 4
STREAM_INIT = 5


def make_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for (seed, stream, index)."""
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    counter = [0, 0, int(stream), int(index)]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass
class Hyperparams:
    K: int = 2
    mu0: float = 0.0
    sigma0: float = 1.0
    phi_rho: float = 2.0
    gamma_rho: float = 1e-6
    phi_upsilon: float = 2.0
    gamma_upsilon: float = 1e-8
    phi_omega: float = 2.0
    gamma_omega: float = 1e-4
    alpha_pi: float = 2.0
    beta_pi: float = 2.0
    lam: float = 100.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be an integer >= 1")
        self.K = int(self.K)
        if not math.isfinite(self.mu0):
            raise ValueError("mu0 must be finite")
        for name in ("sigma0", "phi_rho", "gamma_rho", "phi_upsilon", "gamma_upsilon",
                     "phi_omega", "gamma_omega", "alpha_pi", "beta_pi"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0, got {v}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class GaussianField:
    mean: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def copy(self) -> "GaussianField":
        return GaussianField(self.mean.copy(), self.log_var.copy())


@dataclass
class GammaField:
    shape: np.ndarray
    rate: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.shape / self.rate

    def copy(self) -> "GammaField":
        return GammaField(self.shape.copy(), self.rate.copy())


@dataclass
class BetaVector:
    alpha: np.ndarray
    beta: np.ndarray

    def neg_log1m_mean(self) -> np.ndarray:
        """E[-ln(1 - pi_k)] per class."""
        from .distributions import digamma

        return np.atleast_1d(digamma(self.alpha + self.beta) - digamma(self.beta))

    def copy(self) -> "BetaVector":
        return BetaVector(self.alpha.copy(), self.beta.copy())


@dataclass
class VariationalState:
    q_x: GaussianField
    q_m: GaussianField
    q_z: GaussianField
    q_rho: GammaField
    q_upsilon: GammaField
    q_omega: GammaField
    q_pi: BetaVector

    @property
    def K(self) -> int:
        return self.q_z.mean.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.q_x.mean.shape[-2:]

    def copy(self) -> "VariationalState":
        return VariationalState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def validate(self) -> None:
        H, W = self.grid_shape
        K = self.K
        expected = {"q_x": 1, "q_m": 1, "q_z": K, "q_rho": 1, "q_upsilon": 1, "q_omega": K}
        for name, channels in expected.items():
            for arr in _field_arrays(getattr(self, name)):
                if arr.shape != (channels, H, W):
                    raise ValueError(f"{name} has shape {arr.shape}, expected {(channels, H, W)}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name} contains non-finite values")
        for g in (self.q_rho, self.q_upsilon, self.q_omega):
            if np.any(g.shape <= 0) or np.any(g.rate <= 0):
                raise ValueError("Gamma fields must be positive")
        if self.q_pi.alpha.shape != (K,) or self.q_pi.beta.shape != (K,):
            raise ValueError("q_pi must hold K entries")
        if np.any(self.q_pi.alpha <= 0) or np.any(self.q_pi.beta <= 0):
            raise ValueError("q_pi must be positive")


def _field_arrays(f):
    if isinstance(f, GaussianField):
        return f.mean, f.log_var
    if isinstance(f, GammaField):
        return f.shape, f.rate
    return f.alpha, f.beta


def init_state(y, h: Hyperparams, seed: int = 0) -> VariationalState:
    """Starting point for a fit.

    The basis mean starts at the spatial mean of y, the contour mean at the
    remainder, labels at zero (uniform) and every Gamma/Beta factor at its
    prior.  No randomness is consumed, so the result is trivially
    deterministic in ``seed``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError("y must be a 2-D image")
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    H, W = y.shape
    K = h.K
    lv = lambda c: np.full((c, H, W), INIT_LOG_VARIANCE)  # noqa: E731
    ybar = float(y.mean())
    return VariationalState(
        q_x=GaussianField((y - ybar)[None].copy(), lv(1)),
        q_m=GaussianField(np.full((1, H, W), ybar), lv(1)),
        q_z=GaussianField(np.zeros((K, H, W)), lv(K)),
        q_rho=GammaField(np.full((1, H, W), h.gamma_rho), np.full((1, H, W), h.phi_rho)),
        q_upsilon=GammaField(np.full((1, H, W), h.gamma_upsilon),
                             np.full((1, H, W), h.phi_upsilon)),
        q_omega=GammaField(np.full((K, H, W), h.gamma_omega), np.full((K, H, W), h.phi_omega)),
        q_pi=BetaVector(np.full(K, float(h.alpha_pi)), np.full(K, float(h.beta_pi))),
    )


def sample_gaussian_field(f: GaussianField, rng=None, eps=None) -> np.ndarray:
    """Reparameterized draw mean + std * eps, one eps per pixel and channel.

    Pass ``eps`` to reuse fixed noise (e.g. zeros, or draws frozen for a
    gradient step); otherwise it is drawn from ``rng``.
    """
    if eps is None:
        if rng is None:
            raise ValueError("need an rng or explicit eps")
        eps = rng.standard_normal(f.mean.shape)
    return f.mean + f.std * eps


SAR_DENSE_MAX_PIXELS = 256


def sample_sar_dense(weights, rng: np.random.Generator, samples: int = 1) -> np.ndarray:
    """Exact draws from N(0, (D^T diag(weights) D)^-1) on a small grid.

    Uses a dense Cholesky factor of the precision, so it is limited to grids
    of at most 16x16 pixels.  Returns an array of shape (samples, H, W).
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2:
        raise ValueError("weights must be a 2-D field")
    H, W = weights.shape
    if H * W > SAR_DENSE_MAX_PIXELS:
        raise ValueError(f"dense SAR sampling is limited to {SAR_DENSE_MAX_PIXELS} pixels")
    if np.any(weights <= 0):
        raise ValueError("SAR weights must be positive")
    D = StencilOperator(H, W).dense()
    precision = D.T @ (weights.ravel()[:, None] * D)
    L = np.linalg.cholesky(precision)
    eps = rng.standard_normal((H * W, samples))
    # x = L^-T eps has covariance (L L^T)^-1
    x = np.linalg.solve(L.T, eps)
    return x.T.reshape(samples, H, W)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    """Nested-disk test scene.

    Class 0 is the background; classes 1..K-1 are concentric disks whose
    radii shrink linearly, so with K = 3 class 1 is an annulus around a
    central disk (a cavity inside a wall).  ``disk_radius`` is the outermost
    radius as a fraction of min(height, width).
    """

    height: int = 32
    width: int = 32
    K: int = 2
    levels: tuple = ()
    bias_amplitude: float = 0.5
    bias_angle: float = 0.5
    noise_std: float = 0.05
    disk_radius: float = 0.35

    def __post_init__(self):
        self.levels = tuple(float(v) for v in self.levels) or tuple(
            np.linspace(0.0, 1.0, self.K).tolist()
        )
        if self.height < 2 or self.width < 2:
            raise ValueError("scene must be at least 2x2")
        if self.K < 1 or len(self.levels) != self.K:
            raise ValueError("levels must give one intensity per class")
        if self.noise_std < 0 or self.bias_amplitude < 0:
            raise ValueError("noise_std and bias_amplitude must be >= 0")
        if not 0 < self.disk_radius <= 0.5:
            raise ValueError("disk_radius must be in (0, 0.5]")


def scene_labels(spec: SceneSpec) -> np.ndarray:
    H, W = spec.height, spec.width
    r = np.arange(H)[:, None] + 0.5
    c = np.arange(W)[None, :] + 0.5
    cy, cx = H / 2.0, W / 2.0
    labels = np.zeros((H, W), dtype=np.int64)
    if spec.K == 1:
        return labels
    outer = spec.disk_radius * min(H, W)
    d2 = (r - cy) ** 2 + (c - cx) ** 2
    for k in range(1, spec.K):
        radius = outer * (spec.K - k) / (spec.K - 1)
        labels[d2 <= radius ** 2] = k
    return labels


def synthesize(spec: SceneSpec, seed: int = 0):
    """Return (y, gt_label, gt_basis, gt_contour) for a scene.

    gt_contour is the zero-mean piecewise-constant intensity map of the
    partition; gt_basis is a single low-frequency cosine plus the global
    mean; y adds white Gaussian noise of std ``noise_std``.
    """
    H, W = spec.height, spec.width
    labels = scene_labels(spec)
    intensity = np.asarray(spec.levels)[labels]
    mean = float(intensity.mean())
    contour = intensity - mean
    r = (np.arange(H)[:, None] + 0.5) / H
    c = (np.arange(W)[None, :] + 0.5) / W
    phase = np.pi * (c * math.cos(spec.bias_angle) + r * math.sin(spec.bias_angle))
    basis = mean + spec.bias_amplitude * np.cos(phase)
    rng = make_rng(seed, STREAM_SCENE)
    noise = rng.standard_normal((H, W)) * spec.noise_std
    y = contour + basis + noise
    return y, labels, basis, contour


# --------------------------------------------------------------------------
# state serialization
#
# Layout (all little-endian):
#   magic    4 bytes  b"BSS1"
#   width    u32
#   height   u32
#   K        u32
#   nfields  u32
#   per field: name_len u16, name (ascii), channels u32
#   payload: for each field in header order, channels*height*width f64
#
# Values are stored as 64-bit floats so that a float64 state round-trips
# bit-exactly.

STATE_MAGIC = b"BSS1"

_STATE_FIELDS = (
    ("x_mean", "q_x", "mean"),
    ("x_log_var", "q_x", "log_var"),
    ("m_mean", "q_m", "mean"),
    ("m_log_var", "q_m", "log_var"),
    ("z_mean", "q_z", "mean"),
    ("z_log_var", "q_z", "log_var"),
    ("rho_shape", "q_rho", "shape"),
    ("rho_rate", "q_rho", "rate"),
    ("upsilon_shape", "q_upsilon", "shape"),
    ("upsilon_rate", "q_upsilon", "rate"),
    ("omega_shape", "q_omega", "shape"),
    ("omega_rate", "q_omega", "rate"),
    ("pi_alpha", "q_pi", "alpha"),
    ("pi_beta", "q_pi", "beta"),
)


def state_to_bytes(state: VariationalState) -> bytes:
    state.validate()
    H, W = state.grid_shape
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<IIII", W, H, state.K, len(_STATE_FIELDS)))
    arrays = []
    for name, attr, part in _STATE_FIELDS:
        arr = np.asarray(getattr(getattr(state, attr), part), dtype="<f8")
        channels = arr.shape[0]
        encoded = name.encode("ascii")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", channels))
        arrays.append(arr)
    for arr in arrays:
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def state_from_bytes(data: bytes) -> VariationalState:
    if data[:4] != STATE_MAGIC:
        raise ValueError("not a state file (bad magic)")
    try:
        W, H, K, nfields = struct.unpack_from("<IIII", data, 4)
        pos = 20
        header = []
        for _ in range(nfields):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("ascii")
            pos += n
            (channels,) = struct.unpack_from("<I", data, pos)
            pos += 4
            header.append((name, channels))
    except struct.error as exc:
        raise ValueError("truncated state header") from exc
    parts = {}
    for name, channels in header:
        count = channels if name.startswith("pi_") else channels * H * W
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise ValueError("truncated state payload")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        parts[name] = arr if name.startswith("pi_") else arr.reshape(channels, H, W)
        pos += nbytes
    if pos != len(data):
        raise ValueError("trailing bytes after state payload")
    missing = {n for n, _, _ in _STATE_FIELDS} - parts.keys()
    if missing:
        raise ValueError(f"state file lacks fields {sorted(missing)}")
    state = VariationalState(
        q_x=GaussianField(parts["x_mean"], parts["x_log_var"]),
        q_m=GaussianField(parts["m_mean"], parts["m_log_var"]),
        q_z=GaussianField(parts["z_mean"], parts["z_log_var"]),
        q_rho=GammaField(parts["rho_shape"], parts["rho_rate"]),
        q_upsilon=GammaField(parts["upsilon_shape"], parts["upsilon_rate"]),
        q_omega=GammaField(parts["omega_shape"], parts["omega_rate"]),
        q_pi=BetaVector(parts["pi_alpha"], parts["pi_beta"]),
    )
    if state.K != K:
        raise ValueError("header K does not match payload")
    state.validate()
    return state


def hyperparams_dict(h: Hyperparams) -> dict:
    return {f.name: getattr(h, f.name) for f in fields(h)}


__all__ = [
    "Hyperparams", "GaussianField", "GammaField", "BetaVector", "VariationalState",
    "SceneSpec", "init_state", "sample_gaussian_field", "synthesize", "scene_labels",
    "state_to_bytes", "state_from_bytes", "make_rng", "sample_sar_dense",
]
