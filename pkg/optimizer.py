"""
Joint pilot / analog-combiner design.

One-bit path: alternating minimization of the sum-MSE over pilots S, relaxed
combiners W and MMSE filters F, with A and C_q frozen inside each block update
and refreshed from the new design afterwards. Block updates are interpolated
with a diminishing step gamma^{t+1} = gamma^t (1 - delta gamma^t).

High-resolution noiseless path: per-RRH ratio-trace ascent for the combiners,
then a greedy DFT-direction pilot search polished by projected gradient.

Gradients are returned in the real convention g = 2 df/dX^*, so that
df = Re <g, dX> and g = df/dRe(X) + j df/dIm(X).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Callable

import numpy as np
from scipy import linalg

from bussgang import BussgangState
from errors import ConfigError, SingularMatrixError
from estimation import (
    FilterSet, GlobalModel, analytic_mse, assemble_global, bussgang_states,
    mmse_filter, ratio_trace, solve_hermitian,
)
from frontend import CombinerSet, PilotSet, frontend_stats, noise_covariance
from scenario import ChannelStats, SystemConfig, complex_normal

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DEFAULT_MAX_OUTER_ITERS = 30
DEFAULT_GAMMA0 = 1.0
DEFAULT_GAMMA_DECAY = 0.05
DEFAULT_INNER_MAX_ITERS = 200
DEFAULT_INNER_TOL = 1e-6
DEFAULT_OUTER_TOL = 1e-4
MAX_BACKTRACKS = 60
HIGHRES_STARTS = 5
HIGHRES_JITTER_RETRIES = 3

# scheme name -> (optimize pilots, optimize combiners)
SCHEMES = {
    "fully-random": (False, False),
    "combiner-opt": (False, True),
    "pilot-opt": (True, False),
    "joint": (True, True),
}


@dataclass(frozen=True)
class OptimizerConfig:
    max_outer_iters: int = DEFAULT_MAX_OUTER_ITERS
    gamma0: float = DEFAULT_GAMMA0
    gamma_decay: float = DEFAULT_GAMMA_DECAY
    inner_max_iters: int = DEFAULT_INNER_MAX_ITERS
    inner_tol: float = DEFAULT_INNER_TOL
    outer_tol: float = DEFAULT_OUTER_TOL
    keep_best: bool = True

    def __post_init__(self):
        if self.max_outer_iters < 0:
            raise ConfigError(f"optimizer.max_outer_iters must be >= 0, got {self.max_outer_iters}")
        if not 0.0 < self.gamma0 <= 1.0:
            raise ConfigError(f"optimizer.gamma0 must lie in (0, 1], got {self.gamma0}")
        if not 0.0 < self.gamma_decay < 1.0:
            raise ConfigError(f"optimizer.gamma_decay must lie in (0, 1), got {self.gamma_decay}")
        if self.inner_max_iters < 1:
            raise ConfigError(f"optimizer.inner_max_iters must be >= 1, got {self.inner_max_iters}")
        for key in ("inner_tol", "outer_tol"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"optimizer.{key} must be > 0, got {getattr(self, key)}")


@dataclass(frozen=True)
class OptimizerTrace:
    sum_mse: list[float]
    per_ue_mse: list[np.ndarray] = field(repr=False)
    pilots: PilotSet
    combiners: CombinerSet
    filters: FilterSet
    iterations: int
    termination: str
    best_index: int

    @property
    def final_sum_mse(self) -> float:
        return self.sum_mse[self.best_index]

    @property
    def final_per_ue(self) -> np.ndarray:
        return self.per_ue_mse[self.best_index]


@dataclass(frozen=True)
class FrozenMatrices:
    """A, C_q and F held fixed during one block update."""
    a_diag: np.ndarray  # (N_R, L tau)
    c_q: np.ndarray     # (N_R, L tau, L tau)
    filters: FilterSet


def step_sizes(gamma0: float, decay: float):
    """gamma^1 = gamma0, gamma^{t+1} = gamma^t (1 - decay gamma^t)."""
    gamma = gamma0
    while True:
        yield gamma
        gamma = gamma * (1.0 - decay * gamma)


def projected_gradient(objective: Callable, gradient: Callable, project: Callable,
                       x0: np.ndarray, max_iters: int, tol: float,
                       step0: float = 1.0) -> tuple[np.ndarray, list[float]]:
    """
    Minimize objective over a set with a cheap projection. Steps are accepted
    only under the quadratic upper-bound test and only at finite objective
    values, so the recorded objective sequence never increases.
    """
    x = x0
    fx = objective(x)
    history = [fx]
    step = step0
    for _ in range(max_iters):
        g = gradient(x)
        if not np.any(g):
            break
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_new = project(x - step * g)
            delta = x_new - x
            dist2 = float(np.real(np.vdot(delta, delta)))
            if dist2 == 0.0:
                break
            f_new = objective(x_new)
            bound = fx + float(np.real(np.vdot(g, delta))) + dist2 / (2.0 * step)
            if np.isfinite(f_new) and f_new <= bound and f_new <= fx:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        change = fx - f_new
        x, fx = x_new, f_new
        history.append(fx)
        step *= 2.0
        if change <= tol * max(abs(fx), np.finfo(float).tiny):
            break
    return x, history


def project_power(s_matrix: np.ndarray, power_budget: np.ndarray) -> np.ndarray:
    """s_k <- s_k min(1, sqrt(tau P_k) / ||s_k||)."""
    tau = s_matrix.shape[0]
    norms = np.linalg.norm(s_matrix, axis=0)
    limit = np.sqrt(tau * np.asarray(power_budget, dtype=float))
    scale = np.minimum(1.0, limit / np.where(norms > 0, norms, 1.0))
    return s_matrix * scale


def project_relaxed(w: np.ndarray) -> np.ndarray:
    """w <- w / max(1, |w|) entrywise."""
    return w / np.maximum(1.0, np.abs(w))


def project_modulus(w: np.ndarray) -> np.ndarray:
    """
    w <- w / |w| entrywise; zero entries map to 1.

    >>> np.abs(project_modulus(np.array([2 - 2j, 0j, 0.5j])))
    array([1., 1., 1.])
    """
    magnitude = np.abs(w)
    safe = np.where(magnitude > 0, magnitude, 1.0)
    return np.where(magnitude > 0, w / safe, 1.0 + 0j)


def init_design(config: SystemConfig, rng: np.random.Generator) -> tuple[PilotSet, CombinerSet]:
    """Random full-power pilots and uniform-phase unit-modulus combiners."""
    s = complex_normal(rng, (config.tau, config.n_ue))
    norms = np.linalg.norm(s, axis=0)
    s = s * np.sqrt(config.tau * config.power_budget) / np.where(norms > 0, norms, 1.0)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(config.n_rrh, config.l_chains, config.m_antennas))
    return PilotSet(s, config.power_budget), CombinerSet(np.exp(1j * phases), "strict")


def refresh_bussgang(pilots: PilotSet, combiners: CombinerSet, stats: ChannelStats,
                     noise_var: float, gain_rule: str = "sqrt_half") -> list[BussgangState]:
    """Recompute C_ytilde_i and the Bussgang matrices for the current design."""
    return bussgang_states(frontend_stats(pilots, combiners, stats, noise_var), gain_rule)


def frozen_from_states(states: list[BussgangState], filters: FilterSet) -> FrozenMatrices:
    return FrozenMatrices(
        a_diag=np.stack([np.real(np.diag(state.a_gain)) for state in states]),
        c_q=np.stack([state.c_q for state in states]),
        filters=filters,
    )


def frozen_model(s_matrix: np.ndarray, w: np.ndarray, frozen: FrozenMatrices,
                 stats: ChannelStats, noise_var: float) -> GlobalModel:
    """Global model for arbitrary (S, W) with A and C_q held at frozen values."""
    n_rrh, tau = w.shape[0], s_matrix.shape[0]
    b_global = np.stack([
        linalg.block_diag(*[np.kron(s_matrix[:, k:k + 1], w[i]) for i in range(n_rrh)])
        for k in range(s_matrix.shape[1])
    ])
    return GlobalModel(
        a_global=np.diag(frozen.a_diag.ravel()),
        b_global=b_global,
        c_noise_global=linalg.block_diag(*[noise_covariance(w[i], noise_var, tau) for i in range(n_rrh)]),
        c_q_global=linalg.block_diag(*frozen.c_q),
        theta=stats.theta,
        n_rrh=n_rrh,
    )


def surrogate_sum_mse(s_matrix: np.ndarray, w: np.ndarray, frozen: FrozenMatrices,
                      stats: ChannelStats, noise_var: float) -> float:
    """Sum-MSE of (S, W) with A, C_q and F frozen."""
    return analytic_mse(frozen.filters, frozen_model(s_matrix, w, frozen, stats, noise_var)).total


def _filter_slabs(frozen: FrozenMatrices, n_rrh: int, m: int, tau: int, l_chains: int):
    """
    Phi[k, i, :, t, :] = (F_k A)[:, columns of RRH i, symbol t]  (M N_R x L)
    Psi[k, i, :, t, :] = the rows of Phi[k, i] belonging to RRH i (M x L)
    """
    f = frozen.filters.f
    n_ue, n = f.shape[0], f.shape[1]
    block = tau * l_chains
    phi = f.reshape(n_ue, n, n_rrh, block).transpose(0, 2, 1, 3)
    phi = phi * frozen.a_diag[None, :, None, :]
    phi = phi.reshape(n_ue, n_rrh, n, tau, l_chains)
    psi = np.stack([phi[:, i, i * m:(i + 1) * m] for i in range(n_rrh)], axis=1)
    return phi, psi


def pilot_terms(w: np.ndarray, frozen: FrozenMatrices, stats: ChannelStats, tau: int):
    """Quadratic form sum_k s_k^H H_k s_k - 2 Re(c_k^T s_k) of the pilot subproblem."""
    n_rrh, l_chains, m = w.shape
    phi, psi = _filter_slabs(frozen, n_rrh, m, tau, l_chains)
    v = np.einsum("kintl,ilm->kintm", phi, w)
    t_i = np.einsum("kinum,kintp,ipm->iut", v.conj(), v, stats.q_corr)
    h = np.einsum("ik,iut->kut", stats.rho, t_i)
    c = np.einsum("ik,kimtl,ilp,ipm->kt", stats.rho, psi, w, stats.q_corr)
    return h, c


def pilot_objective(s_matrix: np.ndarray, h: np.ndarray, c: np.ndarray) -> float:
    quad = np.einsum("uk,kut,tk->", s_matrix.conj(), h, s_matrix)
    lin = np.einsum("kt,tk->", c, s_matrix)
    return float(np.real(quad) - 2.0 * np.real(lin))


def pilot_gradient(s_matrix: np.ndarray, h: np.ndarray, c: np.ndarray) -> np.ndarray:
    return 2.0 * (np.einsum("kut,tk->uk", h, s_matrix) - c.T.conj())


def pilot_subproblem(pilots: PilotSet, w: np.ndarray, frozen: FrozenMatrices,
                     stats: ChannelStats, noise_var: float,
                     config: OptimizerConfig) -> tuple[PilotSet, list[float]]:
    """
    Minimize the frozen sum-MSE over S under the per-UE power constraint.
    The history holds full surrogate sum-MSE values.
    """
    s0 = pilots.s_matrix
    h, c = pilot_terms(w, frozen, stats, pilots.tau)
    offset = surrogate_sum_mse(s0, w, frozen, stats, noise_var) - pilot_objective(s0, h, c)
    s_new, history = projected_gradient(
        objective=lambda s: pilot_objective(s, h, c) + offset,
        gradient=lambda s: pilot_gradient(s, h, c),
        project=lambda s: project_power(s, pilots.power_budget),
        x0=s0,
        max_iters=config.inner_max_iters,
        tol=config.inner_tol,
    )
    return PilotSet(s_new, pilots.power_budget), history


def combiner_terms(s_matrix: np.ndarray, w: np.ndarray, frozen: FrozenMatrices,
                    stats: ChannelStats, noise_var: float):
    """Per-RRH quadratic Re tr(G1 W Q W^H) + Re tr(G2 W W^H) - 2 Re tr(Y W Q)."""
    n_rrh, l_chains, m = w.shape
    tau = s_matrix.shape[0]
    phi, psi = _filter_slabs(frozen, n_rrh, m, tau, l_chains)
    x = np.einsum("tl,kintL->klinL", s_matrix, phi)
    g1 = np.einsum("il,klina,klinb->iab", stats.rho, x.conj(), x)
    g2 = noise_var * np.einsum("kinta,kintb->iab", phi.conj(), phi)
    y = np.einsum("tk,kimtL->kimL", s_matrix, psi)
    y_sum = np.einsum("ik,kimL->imL", stats.rho, y)
    return g1, g2, y_sum


def combiner_objective(w_i: np.ndarray, g1: np.ndarray, g2: np.ndarray,
                       y_sum: np.ndarray, q: np.ndarray) -> float:
    value = (np.trace(g1 @ w_i @ q @ w_i.conj().T) + np.trace(g2 @ w_i @ w_i.conj().T)
             - 2.0 * np.trace(y_sum @ w_i @ q))
    return float(np.real(value))


def combiner_gradient(w_i: np.ndarray, g1: np.ndarray, g2: np.ndarray,
                      y_sum: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 2.0 * (g1 @ w_i @ q + g2 @ w_i - y_sum.conj().T @ q)


def combiner_subproblem(s_matrix: np.ndarray, combiners: CombinerSet, frozen: FrozenMatrices,
                        stats: ChannelStats, noise_var: float, config: OptimizerConfig,
                        rrhs: list[int] | None = None) -> tuple[CombinerSet, list[list[float]]]:
    """
    Minimize the frozen sum-MSE over W on the relaxed set |W(a, b)| <= 1.
    The objective separates across RRHs; each one is solved on its own.
    Histories hold the per-RRH parts of the objective (constants dropped).
    """
    w = np.array(combiners.w, dtype=complex)
    g1, g2, y_sum = combiner_terms(s_matrix, w, frozen, stats, noise_var)
    histories = []
    for i in (range(w.shape[0]) if rrhs is None else rrhs):
        q = stats.q_corr[i]
        w[i], history = projected_gradient(
            objective=lambda x, i=i, q=q: combiner_objective(x, g1[i], g2[i], y_sum[i], q),
            gradient=lambda x, i=i, q=q: combiner_gradient(x, g1[i], g2[i], y_sum[i], q),
            project=project_relaxed,
            x0=project_relaxed(w[i]),
            max_iters=config.inner_max_iters,
            tol=config.inner_tol,
        )
        histories.append(history)
    return CombinerSet(w, "relaxed"), histories


@dataclass(frozen=True)
class _Evaluation:
    states: list[BussgangState]
    filters: FilterSet
    per_ue: np.ndarray
    total: float


def _evaluate(pilots: PilotSet, combiners: CombinerSet, stats: ChannelStats,
              noise_var: float, gain_rule: str) -> _Evaluation:
    front = frontend_stats(pilots, combiners, stats, noise_var)
    states = bussgang_states(front, gain_rule)
    model = assemble_global(front, states, stats)
    filters = mmse_filter(model)
    mse = analytic_mse(filters, model)
    return _Evaluation(states=states, filters=filters, per_ue=mse.per_ue, total=mse.total)


def run_algorithm1(config: SystemConfig, optimizer: OptimizerConfig, scheme: str,
                   stats: ChannelStats, rng: np.random.Generator,
                   design: tuple[PilotSet, CombinerSet] | None = None) -> OptimizerTrace:
    """
    Alternating pilot / combiner / filter optimization for one-bit RRHs.
    Blocks frozen by the scheme are never touched.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}")
    opt_pilots, opt_combiners = SCHEMES[scheme]
    noise_var = config.noise_variance
    pilots, combiners = design if design is not None else init_design(config, rng)

    current = _evaluate(pilots, combiners, stats, noise_var, config.bussgang_gain)
    sum_mse, per_ue = [current.total], [current.per_ue]
    best = (0, pilots, combiners, current.filters)
    termination = "max_iters"
    iterations = 0

    if not (opt_pilots or opt_combiners):
        termination = "frozen"
    else:
        gammas = step_sizes(optimizer.gamma0, optimizer.gamma_decay)
        for t in range(1, optimizer.max_outer_iters + 1):
            gamma = next(gammas)
            frozen = frozen_from_states(current.states, current.filters)
            if opt_pilots:
                target, _ = pilot_subproblem(pilots, combiners.w, frozen, stats, noise_var, optimizer)
                s_new = pilots.s_matrix + gamma * (target.s_matrix - pilots.s_matrix)
                pilots = PilotSet(s_new, pilots.power_budget)
            if opt_combiners:
                target, _ = combiner_subproblem(pilots.s_matrix, combiners, frozen, stats,
                                                noise_var, optimizer)
                w_new = project_modulus(combiners.w + gamma * (target.w - combiners.w))
                combiners = CombinerSet(w_new, "strict")

            previous = current.total
            current = _evaluate(pilots, combiners, stats, noise_var, config.bussgang_gain)
            sum_mse.append(current.total)
            per_ue.append(current.per_ue)
            iterations = t
            logger.debug("iteration %d: gamma=%.4f sum-MSE=%.6g", t, gamma, current.total)
            if current.total < sum_mse[best[0]]:
                best = (t, pilots, combiners, current.filters)
            if abs(previous - current.total) <= optimizer.outer_tol * max(previous, np.finfo(float).tiny):
                termination = "converged"
                break

    if optimizer.keep_best:
        best_index, pilots, combiners, filters = best
    else:
        best_index, filters = len(sum_mse) - 1, current.filters
    return OptimizerTrace(
        sum_mse=sum_mse,
        per_ue_mse=per_ue,
        pilots=pilots,
        combiners=combiners,
        filters=filters,
        iterations=iterations,
        termination=termination,
        best_index=best_index,
    )


# --- High-resolution noiseless path ---

def conditioned_ratio(x: np.ndarray, p: np.ndarray) -> float:
    """ratio_trace, or -inf when X P X^H is too ill-conditioned to trust."""
    try:
        return ratio_trace(x, p, check_condition=True)
    except SingularMatrixError:
        return -np.inf


def ratio_trace_gradient(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Real-convention gradient of tr(X P^2 X^H (X P X^H)^{-1}) with respect to X."""
    xp = x @ p
    g = xp @ p @ x.conj().T
    h = xp @ x.conj().T
    inner = xp @ p - g @ solve_hermitian(h, xp)
    return 2.0 * solve_hermitian(h, inner)


def maximize_combiner_ratio(q: np.ndarray, w0: np.ndarray, max_iters: int = DEFAULT_INNER_MAX_ITERS,
                            tol: float = DEFAULT_INNER_TOL) -> tuple[np.ndarray, list[float]]:
    """
    Ascent of tr(J) = tr(W Q^2 W^H (W Q W^H)^{-1}) over unit-modulus W.
    Iterates whose W Q W^H condition number exceeds MAX_CONDITION score -inf
    and are never accepted.
    """
    w, history = projected_gradient(
        objective=lambda x: -conditioned_ratio(x, q),
        gradient=lambda x: -ratio_trace_gradient(x, q),
        project=project_modulus,
        x0=project_modulus(w0),
        max_iters=max_iters,
        tol=tol,
        step0=0.1,
    )
    return w, [-value for value in history]


def highres_combiner_opt(stats: ChannelStats, l_chains: int, rng: np.random.Generator,
                         n_starts: int = HIGHRES_STARTS, max_iters: int = DEFAULT_INNER_MAX_ITERS,
                         tol: float = DEFAULT_INNER_TOL) -> CombinerSet:
    """Per-RRH multi-start maximization of tr(J_i) under the constant-modulus constraint."""
    m = stats.m_antennas
    chosen = []
    for i in range(stats.n_rrh):
        best_w, best_value = None, -np.inf
        attempts = 0
        while attempts < n_starts + HIGHRES_JITTER_RETRIES and (attempts < n_starts or best_w is None):
            attempts += 1
            w0 = np.exp(1j * rng.uniform(0.0, 2.0 * math.pi, size=(l_chains, m)))
            try:
                w, history = maximize_combiner_ratio(stats.q_corr[i], w0, max_iters, tol)
            except SingularMatrixError as err:
                logger.warning("RRH %d: combiner start %d hit a singular iterate (%s); restarting",
                               i, attempts, err)
                continue
            if history[-1] > best_value:
                best_w, best_value = w, history[-1]
        if best_w is None:
            raise SingularMatrixError(f"no nonsingular combiner found for RRH {i}", math.inf)
        logger.debug("RRH %d: best tr(J) = %.6g", i, best_value)
        chosen.append(best_w)
    return CombinerSet(np.stack(chosen), "strict")


def weighted_ratio(s_matrix: np.ndarray, stats: ChannelStats, weights: np.ndarray,
                   check_condition: bool = False) -> float:
    """sum_i w_i tr(K_i(S))."""
    return float(sum(
        weights[i] * ratio_trace(s_matrix, np.diag(stats.rho[i]), check_condition=check_condition)
        for i in range(stats.n_rrh)
    ))


def weighted_ratio_gradient(s_matrix: np.ndarray, stats: ChannelStats, weights: np.ndarray) -> np.ndarray:
    return sum(
        weights[i] * ratio_trace_gradient(s_matrix, np.diag(stats.rho[i]))
        for i in range(stats.n_rrh)
    )


def greedy_dft_pilots(stats: ChannelStats, weights: np.ndarray, tau: int,
                      power_budget: np.ndarray) -> np.ndarray:
    """
    Pick tau distinct rows of the N_U-point DFT one at a time, each maximizing
    the weighted ratio-trace objective of the rows chosen so far.
    """
    n_ue = stats.n_ue
    if tau > n_ue:
        raise ConfigError(f"pilot length tau={tau} exceeds the number of UEs {n_ue} on the noiseless path")
    dictionary = np.exp(-2j * math.pi * np.outer(np.arange(n_ue), np.arange(n_ue)) / n_ue)
    chosen: list[int] = []
    for _ in range(tau):
        scores = {}
        for r in range(n_ue):
            if r in chosen:
                continue
            try:
                scores[r] = weighted_ratio(dictionary[chosen + [r]], stats, weights, check_condition=True)
            except SingularMatrixError:
                continue
        if not scores:
            raise SingularMatrixError("every remaining DFT direction gives a singular pilot Gram matrix", math.inf)
        chosen.append(max(scores, key=scores.get))
    return dictionary[chosen] * np.sqrt(np.asarray(power_budget, dtype=float))[None, :]


def highres_pilot_opt(stats: ChannelStats, weights: np.ndarray, tau: int, power_budget: np.ndarray,
                      max_iters: int = DEFAULT_INNER_MAX_ITERS,
                      tol: float = DEFAULT_INNER_TOL) -> PilotSet:
    """Greedy DFT pilots for sum_i w_i tr(K_i), polished by projected gradient ascent."""
    weights = np.asarray(weights, dtype=float)
    s0 = greedy_dft_pilots(stats, weights, tau, power_budget)
    s, history = projected_gradient(
        objective=lambda x: -weighted_ratio(x, stats, weights),
        gradient=lambda x: -weighted_ratio_gradient(x, stats, weights),
        project=lambda x: project_power(x, power_budget),
        x0=s0,
        max_iters=max_iters,
        tol=tol,
        step0=0.1,
    )
    logger.debug("pilot polish: weighted objective %.6g -> %.6g", -history[0], -history[-1])
    return PilotSet(s, power_budget)
