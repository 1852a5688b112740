"""
Scenario generation: system dimensions, UE/RRH placement, pathloss, spatial
correlation and channel sampling for the cell-free uplink.

Complex Gaussian convention: CN(0, 1) has independent real and imaginary parts
of variance 1/2 each.

>>> float(pathloss(10.0))
0.5
>>> correlation_matrix(1)
array([[1.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import linalg, special

from errors import ConfigError

# --- CONFIGURATION ---
DEFAULT_POWER = 1.0
DEFAULT_SNR_DB = 10.0
DEFAULT_AREA_SIDE_M = 100.0
DEFAULT_D_OVER_LAMBDA = 0.5
DEFAULT_DELTA_SPREAD = 25.0
PATHLOSS_REFERENCE_M = 10.0
PATHLOSS_EXPONENT = 3.0
EIGEN_CLAMP_TOL = 1e-10

GAIN_RULES = ("sqrt_half", "sqrt_2_over_pi")


@dataclass(frozen=True)
class SystemConfig:
    n_ue: int
    n_rrh: int
    m_antennas: int
    l_chains: int
    tau: int
    power_per_ue: float = DEFAULT_POWER
    snr_db: float = DEFAULT_SNR_DB
    # explicit sigma^2; overrides snr_db when set (0.0 gives the noiseless path)
    noise_var: float | None = None
    area_side_m: float = DEFAULT_AREA_SIDE_M
    d_over_lambda: float = DEFAULT_D_OVER_LAMBDA
    delta_spread: float = DEFAULT_DELTA_SPREAD
    bussgang_gain: str = "sqrt_half"
    rng_seed: int = 0

    def __post_init__(self):
        for key in ("n_ue", "n_rrh", "m_antennas", "l_chains", "tau"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"system.{key} must be >= 1, got {getattr(self, key)}")
        if self.l_chains > self.m_antennas:
            raise ConfigError(
                f"system.l_chains={self.l_chains} exceeds system.m_antennas={self.m_antennas}"
            )
        if self.power_per_ue < 0:
            raise ConfigError(f"system.power_per_ue must be >= 0, got {self.power_per_ue}")
        if self.noise_var is not None and self.noise_var < 0:
            raise ConfigError(f"system.noise_var must be >= 0, got {self.noise_var}")
        if self.area_side_m < 0:
            raise ConfigError(f"system.area_side_m must be >= 0, got {self.area_side_m}")
        if self.delta_spread <= 0:
            raise ConfigError(f"system.delta_spread must be > 0, got {self.delta_spread}")
        if self.bussgang_gain not in GAIN_RULES:
            raise ConfigError(
                f"system.bussgang_gain must be one of {', '.join(GAIN_RULES)}, got {self.bussgang_gain!r}"
            )

    @property
    def noise_variance(self) -> float:
        """sigma^2, either given explicitly or P * 10^(-SNR/10)."""
        if self.noise_var is not None:
            return float(self.noise_var)
        return self.power_per_ue * 10.0 ** (-self.snr_db / 10.0)

    @property
    def power_budget(self) -> np.ndarray:
        return np.full(self.n_ue, float(self.power_per_ue))


@dataclass(frozen=True)
class Geometry:
    ue_positions: np.ndarray   # (N_U, 2) meters
    rrh_positions: np.ndarray  # (N_R, 2) meters
    distances: np.ndarray      # (N_R, N_U) meters


@dataclass(frozen=True)
class ChannelStats:
    rho: np.ndarray      # (N_R, N_U)
    q_corr: np.ndarray   # (N_R, M, M)
    q_sqrt: np.ndarray   # (N_R, M, M)
    theta: np.ndarray = field(repr=False)  # (N_U, M N_R, M N_R)

    @property
    def n_rrh(self) -> int:
        return self.rho.shape[0]

    @property
    def n_ue(self) -> int:
        return self.rho.shape[1]

    @property
    def m_antennas(self) -> int:
        return self.q_corr.shape[1]


@dataclass(frozen=True)
class ChannelRealization:
    # (..., N_R, N_U, M); leading axes index independent draws
    h: np.ndarray

    def per_rrh(self, i: int) -> np.ndarray:
        """h_{R,i} = [h_{i,1}; ...; h_{i,N_U}] (UE-major)."""
        return stack_ue_major(self.h)[..., i, :]


@dataclass(frozen=True)
class RNGStreams:
    geometry: np.random.Generator
    design: np.random.Generator
    channels: np.random.Generator
    empirical: np.random.Generator


def make_streams(master_seed: int, draw_id: int = 0) -> RNGStreams:
    """Deterministically spawn independent generators for one Monte-Carlo draw."""
    root = np.random.SeedSequence([int(master_seed), int(draw_id)])
    ss_geometry, ss_design, ss_channels, ss_empirical = root.spawn(4)
    return RNGStreams(
        geometry=np.random.default_rng(ss_geometry),
        design=np.random.default_rng(ss_design),
        channels=np.random.default_rng(ss_channels),
        empirical=np.random.default_rng(ss_empirical),
    )


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """i.i.d. CN(0, variance) samples."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def stack_rrh_major(h: np.ndarray) -> np.ndarray:
    """(..., N_R, N_U, M) -> (..., N_U, M N_R) with h_k = [h_{1,k}; ...; h_{N_R,k}]."""
    moved = np.swapaxes(h, -3, -2)  # (..., N_U, N_R, M)
    return moved.reshape(moved.shape[:-2] + (-1,))


def stack_ue_major(h: np.ndarray) -> np.ndarray:
    """(..., N_R, N_U, M) -> (..., N_R, M N_U) with h_{R,i} = [h_{i,1}; ...; h_{i,N_U}]."""
    return h.reshape(h.shape[:-2] + (-1,))


def pathloss(distance):
    """
    Distance-dependent power attenuation rho = 1 / (1 + (D/10)^3).

    >>> round(float(pathloss(20.0)), 6)
    0.111111
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError(f"distance must be non-negative, got {distance}")
    return 1.0 / (1.0 + (d / PATHLOSS_REFERENCE_M) ** PATHLOSS_EXPONENT)


def correlation_matrix(m: int, d_over_lambda: float = DEFAULT_D_OVER_LAMBDA,
                       delta: float = DEFAULT_DELTA_SPREAD) -> np.ndarray:
    """Bessel receive correlation Q(a, b) = J0(2 pi |a - b| sin(d/lambda) / Delta)."""
    if m < 1:
        raise ValueError(f"number of antennas must be >= 1, got {m}")
    if delta <= 0:
        raise ValueError(f"angular spread delta must be > 0, got {delta}")
    lags = np.arange(m, dtype=float)
    first_column = special.j0(2.0 * np.pi * lags * math.sin(d_over_lambda) / delta)
    q = linalg.toeplitz(first_column)
    eigvals, eigvecs = linalg.eigh(q)
    if eigvals.min() < 0:
        # roundoff only; rebuild from the clamped spectrum and renormalize the diagonal
        q = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
        scale = 1.0 / np.sqrt(np.diag(q))
        q = q * np.outer(scale, scale)
        q = 0.5 * (q + q.T)
        np.fill_diagonal(q, 1.0)
    return q


def hermitian_sqrt(q: np.ndarray) -> np.ndarray:
    """PSD square root via eigendecomposition, negative eigenvalues clamped to 0."""
    eigvals, eigvecs = linalg.eigh(q)
    floor = EIGEN_CLAMP_TOL * max(1.0, float(np.abs(eigvals).max()))
    if eigvals.min() < -floor:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {eigvals.min():.3e}")
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.conj().T
    return 0.5 * (root + root.conj().T)


def sample_geometry(config: SystemConfig, rng: np.random.Generator) -> Geometry:
    """Drop UEs and RRHs uniformly in the square [0, side]^2."""
    side = config.area_side_m
    ue = rng.uniform(0.0, 1.0, size=(config.n_ue, 2)) * side
    rrh = rng.uniform(0.0, 1.0, size=(config.n_rrh, 2)) * side
    distances = np.linalg.norm(rrh[:, None, :] - ue[None, :, :], axis=-1)
    return Geometry(ue_positions=ue, rrh_positions=rrh, distances=distances)


def build_channel_stats(rho: np.ndarray, q_corr: np.ndarray) -> ChannelStats:
    """Assemble ChannelStats (square roots and Theta_k) from pathlosses and correlations."""
    rho = np.asarray(rho, dtype=float)
    q_corr = np.asarray(q_corr)
    if q_corr.ndim == 2:
        q_corr = np.broadcast_to(q_corr, (rho.shape[0],) + q_corr.shape).copy()
    if q_corr.shape[0] != rho.shape[0]:
        raise ValueError(
            f"got {q_corr.shape[0]} correlation matrices for {rho.shape[0]} RRHs"
        )
    q_sqrt = np.stack([hermitian_sqrt(q) for q in q_corr])
    n_rrh, n_ue = rho.shape
    theta = np.stack([
        linalg.block_diag(*[rho[i, k] * q_corr[i] for i in range(n_rrh)])
        for k in range(n_ue)
    ])
    return ChannelStats(rho=rho, q_corr=q_corr, q_sqrt=q_sqrt, theta=theta)


def channel_stats(config: SystemConfig, geometry: Geometry) -> ChannelStats:
    """Pathloss from the placement plus a per-RRH Bessel correlation matrix."""
    rho = pathloss(geometry.distances)
    q = correlation_matrix(config.m_antennas, config.d_over_lambda, config.delta_spread)
    return build_channel_stats(rho, np.stack([q] * config.n_rrh))


def sample_channels(stats: ChannelStats, rng: np.random.Generator,
                    n_draws: int | None = None) -> ChannelRealization:
    """h_{i,k} = sqrt(rho_{i,k}) Q_i^{1/2} h^w with h^w ~ CN(0, I_M)."""
    lead = () if n_draws is None else (int(n_draws),)
    white = complex_normal(rng, lead + (stats.n_rrh, stats.n_ue, stats.m_antennas))
    h = np.einsum("iab,...ikb->...ika", stats.q_sqrt, white)
    h = h * np.sqrt(stats.rho)[..., None]
    return ChannelRealization(h=h)
