"""
Channel estimation at the central unit.

Stacked model: yhat = sum_k A B_k h_k + A ztilde + q with block-diagonal A, B_k,
C_ztilde and C_q (one block per RRH, RRH order). h_k is stacked RRH-major.
The noiseless high-resolution path stacks per RRH UE-major instead
(h_{R,i} = [h_{i,1}; ...; h_{i,N_U}]); see scenario.stack_ue_major.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg

from bussgang import BussgangState, bussgang_state, quantize_one_bit
from errors import DimensionMismatchError, SingularMatrixError
from frontend import CombinerSet, FrontEndStats, PilotSet, combine_and_vectorize, frontend_stats, receive
from scenario import ChannelStats, hermitian_sqrt, sample_channels, stack_rrh_major

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
JITTER_SCALE = 1e-12
MAX_CONDITION = 1e12
IMAG_RESIDUE_TOL = 1e-9
EMPIRICAL_BATCH = 5000
ADC_MODES = ("one-bit", "high-res-noiseless")


@dataclass(frozen=True)
class GlobalModel:
    a_global: np.ndarray        # (D, D), D = L tau N_R
    b_global: np.ndarray        # (N_U, D, M N_R)
    c_noise_global: np.ndarray  # (D, D)
    c_q_global: np.ndarray      # (D, D)
    theta: np.ndarray           # (N_U, M N_R, M N_R)
    n_rrh: int


@dataclass(frozen=True)
class FilterSet:
    f: np.ndarray  # (N_U, M N_R, L tau N_R)


@dataclass(frozen=True)
class MSEResult:
    per_ue: np.ndarray
    total: float


@dataclass(frozen=True)
class EmpiricalMSE:
    per_ue: np.ndarray
    stderr: np.ndarray
    n_trials: int

    @property
    def total(self) -> float:
        return float(self.per_ue.sum())

    @property
    def total_stderr(self) -> float:
        return float(np.sqrt(np.sum(self.stderr ** 2)))


@dataclass(frozen=True)
class HighResStats:
    r_i: np.ndarray    # (N_R, N_U M, N_U M)
    b_r_i: np.ndarray  # (N_R, L tau, N_U M)
    j_i: np.ndarray    # (N_R, L, L)
    k_i: np.ndarray    # (N_R, tau, tau)
    trace_j: np.ndarray  # (N_R,)
    trace_k: np.ndarray  # (N_R,)


def solve_hermitian(c: np.ndarray, rhs: np.ndarray, check_condition: bool = False) -> np.ndarray:
    """
    C^{-1} rhs for Hermitian PSD C via Cholesky. On factorization failure a
    diagonal jitter of 1e-12 * trace / dim is added once and reported.
    """
    c = 0.5 * (c + c.conj().T)
    jittered = False
    try:
        factor = linalg.cho_factor(c, lower=True, check_finite=False)
    except linalg.LinAlgError:
        jitter = JITTER_SCALE * max(float(np.real(np.trace(c))) / c.shape[0], np.finfo(float).tiny)
        logger.warning("Cholesky failed on a %dx%d matrix; retrying with jitter %.3e",
                       c.shape[0], c.shape[0], jitter)
        jittered = True
        try:
            factor = linalg.cho_factor(c + jitter * np.eye(c.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise SingularMatrixError("matrix is singular even after jitter", np.linalg.cond(c)) from None
    if check_condition or jittered:
        cond = np.linalg.cond(c)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularMatrixError(f"{c.shape[0]}x{c.shape[0]} matrix is numerically singular", cond)
    return linalg.cho_solve(factor, rhs, check_finite=False)


def assemble_global(front: FrontEndStats, states: list[BussgangState] | None,
                    stats: ChannelStats) -> GlobalModel:
    """
    Place per-RRH quantities on the block diagonal in RRH order. With
    states=None the ADCs are ideal (A = I, C_q = 0).
    """
    n_ue, n_rrh, block, m = front.b_blocks.shape
    if states is not None and len(states) != n_rrh:
        raise DimensionMismatchError(f"got {len(states)} Bussgang states for {n_rrh} RRHs")
    if front.c_noise.shape != (n_rrh, block, block):
        raise DimensionMismatchError(
            f"noise covariances {front.c_noise.shape} do not match blocks of size {block}"
        )
    if states is None:
        a_blocks = [np.eye(block)] * n_rrh
        q_blocks = [np.zeros((block, block))] * n_rrh
    else:
        for i, state in enumerate(states):
            if state.a_gain.shape != (block, block) or state.c_q.shape != (block, block):
                raise DimensionMismatchError(
                    f"RRH {i} Bussgang state has shape {state.a_gain.shape}, expected {(block, block)}"
                )
        a_blocks = [state.a_gain for state in states]
        q_blocks = [state.c_q for state in states]
    b_global = np.stack([linalg.block_diag(*front.b_blocks[k]) for k in range(n_ue)])
    return GlobalModel(
        a_global=linalg.block_diag(*a_blocks),
        b_global=b_global,
        c_noise_global=linalg.block_diag(*front.c_noise),
        c_q_global=linalg.block_diag(*q_blocks).astype(complex),
        theta=stats.theta,
        n_rrh=n_rrh,
    )


def bussgang_states(front: FrontEndStats, gain_rule: str = "sqrt_half") -> list[BussgangState]:
    return [bussgang_state(c, gain_rule) for c in front.c_signal]


def build_model(pilots: PilotSet, combiners: CombinerSet, stats: ChannelStats,
                noise_var: float, gain_rule: str = "sqrt_half",
                adc: str = "one-bit") -> GlobalModel:
    """Front end, Bussgang linearization and global assembly in one call."""
    front = frontend_stats(pilots, combiners, stats, noise_var)
    states = bussgang_states(front, gain_rule) if adc == "one-bit" else None
    return assemble_global(front, states, stats)


def observation_covariance(model: GlobalModel) -> np.ndarray:
    """sum_l A B_l Theta_l B_l^H A^H + A C_ztilde A^H + C_q."""
    g = model.a_global @ model.b_global
    c = np.einsum("lab,lbc,ldc->ad", g, model.theta, g.conj())
    c = c + model.a_global @ model.c_noise_global @ model.a_global.conj().T + model.c_q_global
    return 0.5 * (c + c.conj().T)


def mmse_filter(model: GlobalModel) -> FilterSet:
    """F_k = Theta_k B_k^H A^H C_yhat^{-1}."""
    g = model.a_global @ model.b_global
    c = observation_covariance(model)
    cross = np.einsum("kab,kbc->kac", g, model.theta)  # A B_k Theta_k, (N_U, D, M N_R)
    n_ue, d, n = cross.shape
    solved = solve_hermitian(c, cross.transpose(1, 0, 2).reshape(d, n_ue * n))
    f = solved.reshape(d, n_ue, n).transpose(1, 2, 0).conj()
    return FilterSet(f=f)


def _real_trace(values: np.ndarray, what: str) -> np.ndarray:
    residue = np.abs(np.imag(values))
    scale = np.maximum(1.0, np.abs(np.real(values)))
    if np.any(residue > IMAG_RESIDUE_TOL * scale):
        logger.debug("discarding imaginary residue %.3e in %s", residue.max(), what)
    return np.real(values)


def analytic_mse(filters: FilterSet, model: GlobalModel) -> MSEResult:
    """Per-UE MSE from the four-term closed form and their sum."""
    f = filters.f
    a = model.a_global
    g = a @ model.b_global  # (N_U, D, M N_R)
    n_ue, n = model.theta.shape[0], model.theta.shape[1]
    eye = np.eye(n)
    per_ue = np.empty(n_ue)
    noise = a @ model.c_noise_global @ a.conj().T
    for k in range(n_ue):
        bias = f[k] @ g[k] - eye
        total = np.trace(bias @ model.theta[k] @ bias.conj().T)
        for l in range(n_ue):
            if l != k:
                fg = f[k] @ g[l]
                total += np.trace(fg @ model.theta[l] @ fg.conj().T)
        total += np.trace(f[k] @ noise @ f[k].conj().T)
        total += np.trace(f[k] @ model.c_q_global @ f[k].conj().T)
        per_ue[k] = max(float(_real_trace(total, f"MSE of UE {k}")), 0.0)
    return MSEResult(per_ue=per_ue, total=float(per_ue.sum()))


def empirical_mse(pilots: PilotSet, combiners: CombinerSet, filters: FilterSet,
                  stats: ChannelStats, noise_var: float, n_trials: int,
                  rng: np.random.Generator, quantize: bool = True,
                  batch_size: int = EMPIRICAL_BATCH) -> EmpiricalMSE:
    """Average ||F_k yhat - h_k||^2 over full simulated pilot transmissions."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    n_ue = stats.n_ue
    sums = np.zeros(n_ue)
    squares = np.zeros(n_ue)
    done = 0
    while done < n_trials:
        n = min(batch_size, n_trials - done)
        channel = sample_channels(stats, rng, n)
        y = receive(channel, pilots, noise_var, rng)               # (n, N_R, M, tau)
        y_tilde = combine_and_vectorize(combiners.w, y)            # (n, N_R, L tau)
        y_hat = quantize_one_bit(y_tilde) if quantize else y_tilde
        y_hat = y_hat.reshape(n, -1)
        estimate = np.einsum("kad,nd->nka", filters.f, y_hat)
        err = np.sum(np.abs(estimate - stack_rrh_major(channel.h)) ** 2, axis=-1)
        sums += err.sum(axis=0)
        squares += (err ** 2).sum(axis=0)
        done += n
    mean = sums / n_trials
    var = np.maximum(squares / n_trials - mean ** 2, 0.0)
    return EmpiricalMSE(per_ue=mean, stderr=np.sqrt(var / n_trials), n_trials=n_trials)


def ratio_trace(x: np.ndarray, p: np.ndarray, check_condition: bool = True) -> float:
    """
    tr(X P^2 X^H (X P X^H)^{-1}), the common form of tr(J_i) and tr(K_i).

    Evaluated as tr(U^H P U) with G = P^{1/2} X^H = U R (thin QR), so the
    value stays within [0, tr(P)] and X P X^H = R^H R.
    """
    u, r = np.linalg.qr(hermitian_sqrt(p) @ x.conj().T)
    if check_condition:
        cond = np.linalg.cond(r) ** 2
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularMatrixError("ratio-trace denominator is numerically singular", cond)
    return float(np.real(np.trace(u.conj().T @ p @ u)))


def highres_stats(pilots: PilotSet, combiners: CombinerSet, stats: ChannelStats) -> HighResStats:
    """R_i, B_{R,i}, J_i and K_i for the noiseless high-resolution model."""
    s_bar = pilots.s_matrix
    r_i, b_r_i, j_i, k_i, trace_j, trace_k = [], [], [], [], [], []
    for i in range(stats.n_rrh):
        w = combiners.w[i]
        q = stats.q_corr[i]
        p = np.diag(stats.rho[i])
        r_i.append(np.kron(p, q))
        b_r_i.append(np.kron(s_bar, w))
        wqw = w @ q @ w.conj().T
        sps = s_bar @ p @ s_bar.conj().T
        j_i.append(solve_hermitian(wqw, w @ q @ q @ w.conj().T, check_condition=True).conj().T)
        k_i.append(solve_hermitian(sps, s_bar @ p @ p @ s_bar.conj().T, check_condition=True).conj().T)
        trace_j.append(ratio_trace(w, q, check_condition=False))
        trace_k.append(ratio_trace(s_bar, p, check_condition=False))
    return HighResStats(r_i=np.stack(r_i), b_r_i=np.stack(b_r_i), j_i=np.stack(j_i), k_i=np.stack(k_i),
                        trace_j=np.array(trace_j), trace_k=np.array(trace_k))


def highres_estimate(hr: HighResStats, observations: np.ndarray) -> np.ndarray:
    """
    Per-RRH MMSE estimate R_i B^H (B R B^H)^{-1} yhat_i from noiseless,
    unquantized observations (N_R, L tau) -> (N_R, N_U M), UE-major.
    """
    estimates = []
    for i in range(hr.r_i.shape[0]):
        r, b = hr.r_i[i], hr.b_r_i[i]
        cov = b @ r @ b.conj().T
        estimates.append(r @ b.conj().T @ solve_hermitian(cov, observations[i], check_condition=True))
    return np.stack(estimates)


def highres_summse(hr: HighResStats) -> float:
    """sum_i max(0, tr(R_i) - tr(J_i) tr(K_i)), using the QR-evaluated traces."""
    terms = [
        max(0.0, float(np.real(np.trace(hr.r_i[i]))) - hr.trace_j[i] * hr.trace_k[i])
        for i in range(hr.r_i.shape[0])
    ]
    return float(np.sum(terms))


def highres_summse_direct(hr: HighResStats) -> float:
    """sum_i [tr(R_i) - tr(R_i B^H (B R B^H)^{-1} B R_i)], without the Kronecker split."""
    total = 0.0
    for i in range(hr.r_i.shape[0]):
        r, b = hr.r_i[i], hr.b_r_i[i]
        cov = b @ r @ b.conj().T
        gain = r @ b.conj().T @ solve_hermitian(cov, b @ r, check_condition=True)
        total += float(np.real(np.trace(r) - np.trace(gain)))
    return total
