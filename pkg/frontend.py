"""
Pilot transmission through the analog front end.

Vectorization is column-major throughout, so vec(W Z) = (I_tau kron W) vec(Z)
and B_{k,i} = s_k kron W_i line up with the stacked observation model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import DimensionMismatchError
from scenario import ChannelRealization, ChannelStats, complex_normal

# --- CONFIGURATION ---
POWER_TOL = 1e-9
MODULUS_TOL = 1e-9
COMBINER_MODES = ("strict", "relaxed")


@dataclass(frozen=True)
class PilotSet:
    s_matrix: np.ndarray      # (tau, N_U)
    power_budget: np.ndarray  # (N_U,)

    def __post_init__(self):
        s = np.asarray(self.s_matrix)
        budget = np.asarray(self.power_budget, dtype=float)
        if s.ndim != 2 or budget.shape != (s.shape[1],):
            raise DimensionMismatchError(
                f"pilot matrix {s.shape} does not match power budget {budget.shape}"
            )
        usage = column_power(s)
        if np.any(usage > budget + POWER_TOL):
            k = int(np.argmax(usage - budget))
            raise ValueError(
                f"pilot of UE {k} uses power {usage[k]:.6g} above its budget {budget[k]:.6g}"
            )

    @property
    def tau(self) -> int:
        return self.s_matrix.shape[0]

    @property
    def n_ue(self) -> int:
        return self.s_matrix.shape[1]


@dataclass(frozen=True)
class CombinerSet:
    w: np.ndarray  # (N_R, L, M)
    mode: str = "strict"

    def __post_init__(self):
        if self.mode not in COMBINER_MODES:
            raise ValueError(f"combiner mode must be one of {COMBINER_MODES}, got {self.mode!r}")
        if np.asarray(self.w).ndim != 3:
            raise DimensionMismatchError(f"combiners must be (N_R, L, M), got {np.shape(self.w)}")
        magnitude2 = np.abs(self.w) ** 2
        if self.mode == "strict" and np.any(np.abs(magnitude2 - 1.0) > MODULUS_TOL):
            raise ValueError("strict combiner entries must have unit modulus")
        if self.mode == "relaxed" and np.any(magnitude2 > 1.0 + MODULUS_TOL):
            raise ValueError("relaxed combiner entries must have modulus <= 1")

    @property
    def n_rrh(self) -> int:
        return self.w.shape[0]

    @property
    def l_chains(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True)
class FrontEndStats:
    b_blocks: np.ndarray  # (N_U, N_R, L tau, M)
    c_noise: np.ndarray   # (N_R, L tau, L tau)
    c_signal: np.ndarray  # (N_R, L tau, L tau), C_ytilde_i including noise


def column_power(s_matrix: np.ndarray) -> np.ndarray:
    """(1/tau) ||s_k||^2 for every column."""
    s = np.asarray(s_matrix)
    return np.sum(np.abs(s) ** 2, axis=0) / s.shape[0]


def hermitize(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c + np.swapaxes(c, -1, -2).conj())


def vec(x: np.ndarray) -> np.ndarray:
    """Column-major vectorization of the trailing two axes."""
    return np.swapaxes(x, -1, -2).reshape(x.shape[:-2] + (-1,))


def receive(channel: ChannelRealization, pilots: PilotSet, noise_var: float,
            rng: np.random.Generator) -> np.ndarray:
    """Y_i = sum_k h_{i,k} s_k^T + Z_i, returned as (..., N_R, M, tau)."""
    y = np.einsum("...ikm,tk->...imt", channel.h, pilots.s_matrix)
    if noise_var > 0:
        y = y + complex_normal(rng, y.shape, noise_var)
    return y


def combine_and_vectorize(w_i: np.ndarray, y_i: np.ndarray) -> np.ndarray:
    """ytilde_i = vec(W_i Y_i); broadcasts over leading axes."""
    return vec(w_i @ y_i)


def pilot_blocks(pilots: PilotSet, w_i: np.ndarray) -> np.ndarray:
    """B_{k,i} = s_k kron W_i for every UE, shape (N_U, L tau, M)."""
    return np.stack([np.kron(s_k[:, None], w_i) for s_k in pilots.s_matrix.T])


def noise_covariance(w_i: np.ndarray, noise_var: float, tau: int) -> np.ndarray:
    """C_ztilde_i = sigma^2 (I_tau kron W_i)(I_tau kron W_i)^H."""
    if noise_var < 0:
        raise ValueError(f"noise variance must be >= 0, got {noise_var}")
    return hermitize(noise_var * np.kron(np.eye(tau), w_i @ w_i.conj().T))


def signal_covariance(pilots: PilotSet, w_i: np.ndarray, stats: ChannelStats,
                      noise_var: float, rrh: int = 0) -> np.ndarray:
    """C_ytilde_i = sum_k rho_{i,k} B_{k,i} Q_i B_{k,i}^H + C_ztilde_i."""
    if w_i.shape[1] != stats.m_antennas:
        raise DimensionMismatchError(
            f"combiner has {w_i.shape[1]} columns but RRH has {stats.m_antennas} antennas"
        )
    blocks = pilot_blocks(pilots, w_i)
    q = stats.q_corr[rrh]
    signal = np.einsum("k,kab,bc,kdc->ad", stats.rho[rrh], blocks, q, blocks.conj())
    return hermitize(signal + noise_covariance(w_i, noise_var, pilots.tau))


def frontend_stats(pilots: PilotSet, combiners: CombinerSet, stats: ChannelStats,
                   noise_var: float) -> FrontEndStats:
    """Second-order statistics of the pre-ADC signal at every RRH."""
    if combiners.n_rrh != stats.n_rrh or pilots.n_ue != stats.n_ue:
        raise DimensionMismatchError(
            f"design has {combiners.n_rrh} RRHs / {pilots.n_ue} UEs, "
            f"statistics have {stats.n_rrh} / {stats.n_ue}"
        )
    b_blocks = np.stack([pilot_blocks(pilots, w_i) for w_i in combiners.w], axis=1)
    c_noise = np.stack([noise_covariance(w_i, noise_var, pilots.tau) for w_i in combiners.w])
    c_signal = np.stack([
        signal_covariance(pilots, w_i, stats, noise_var, rrh=i)
        for i, w_i in enumerate(combiners.w)
    ])
    return FrontEndStats(b_blocks=b_blocks, c_noise=c_noise, c_signal=c_signal)
