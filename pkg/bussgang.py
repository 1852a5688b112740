"""
One-bit ADC model: the exact sign quantizer and its Bussgang linearization.

The quantizer maps each I/Q rail to +-1/sqrt(2), so every output sample has unit
magnitude and E[yhat yhat^H] has a unit diagonal (arcsine law).

>>> quantize_one_bit(np.array([3 - 2j]))
array([0.70710678-0.70710678j])
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from errors import DegenerateSignalError, InvalidCovarianceError

# --- CONFIGURATION ---
ARCSIN_CLAMP_TOL = 1e-9
# Bussgang gain prefactor applied to Sigma^{-1/2}
GAIN_FACTORS = {
    "sqrt_half": math.sqrt(0.5),
    "sqrt_2_over_pi": math.sqrt(2.0 / math.pi),
}
OUTPUT_LEVEL = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class BussgangState:
    sigma_diag: np.ndarray  # diagonal of C_ytilde_i
    a_gain: np.ndarray      # A_i (diagonal matrix)
    c_out: np.ndarray       # C_yhat_i
    c_q: np.ndarray         # C_q_i


def quantize_one_bit(y: np.ndarray) -> np.ndarray:
    """(sign(Re y) + j sign(Im y)) / sqrt(2), with sign(0) = +1."""
    y = np.asarray(y)
    real = np.where(y.real >= 0, 1.0, -1.0)
    imag = np.where(y.imag >= 0, 1.0, -1.0)
    return OUTPUT_LEVEL * (real + 1j * imag)


def _input_power(c_in: np.ndarray) -> np.ndarray:
    power = np.real(np.diag(c_in))
    if np.any(power <= 0):
        dead = np.flatnonzero(power <= 0).tolist()
        raise DegenerateSignalError(f"received dimensions {dead} carry no power")
    return power


def bussgang_gain(c_in: np.ndarray, rule: str = "sqrt_half") -> np.ndarray:
    """A = g * diag(C)^{-1/2}; depends on c_in only through its diagonal."""
    factor = GAIN_FACTORS[rule]
    return np.diag(factor / np.sqrt(_input_power(c_in)))


def arcsine_covariance(c_in: np.ndarray) -> np.ndarray:
    """Output covariance of the one-bit quantizer for a zero-mean Gaussian input."""
    scale = 1.0 / np.sqrt(_input_power(c_in))
    normalized = c_in * np.outer(scale, scale)
    parts = []
    for part in (normalized.real, normalized.imag):
        if np.any(np.abs(part) > 1.0 + ARCSIN_CLAMP_TOL):
            raise InvalidCovarianceError(
                f"normalized correlation {np.abs(part).max():.12f} exceeds 1"
            )
        parts.append(np.arcsin(np.clip(part, -1.0, 1.0)))
    c_out = (2.0 / math.pi) * (parts[0] + 1j * parts[1])
    c_out = 0.5 * (c_out + c_out.conj().T)
    np.fill_diagonal(c_out, 1.0)
    return c_out


def quantization_noise_cov(c_in: np.ndarray, rule: str = "sqrt_half") -> np.ndarray:
    """C_q = C_yhat - A C_ytilde A^H."""
    return bussgang_state(c_in, rule).c_q


def bussgang_state(c_in: np.ndarray, rule: str = "sqrt_half") -> BussgangState:
    sigma = _input_power(c_in)
    a = bussgang_gain(c_in, rule)
    c_out = arcsine_covariance(c_in)
    c_q = c_out - a @ c_in @ a.conj().T
    c_q = 0.5 * (c_q + c_q.conj().T)
    # diag(A C A^H) is g^2 in exact arithmetic
    np.fill_diagonal(c_q, 1.0 - GAIN_FACTORS[rule] ** 2)
    return BussgangState(sigma_diag=sigma, a_gain=a, c_out=c_out, c_q=c_q)
