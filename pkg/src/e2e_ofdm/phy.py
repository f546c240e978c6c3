"""Bit generation, mapping, OFDM (de)modulation, PAPR, clipping and pilots.

All grids use the layout (..., N_s, N_c): OFDM symbol index, then subcarrier
index in natural DFT order (bin k, negative frequencies in the upper half).
Transforms are unitary, so average energy is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigurationError


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_bits(m: int, n_s: int, n_c: int, seed=None, batch: int | None = None) -> np.ndarray:
    """I.i.d. uniform bits of shape (M, N_s, N_c), or (batch, M, N_s, N_c)."""
    if m < 1:
        raise ValueError("generate_bits: M must be >= 1")
    shape = (m, n_s, n_c) if batch is None else (batch, m, n_s, n_c)
    return as_rng(seed).integers(0, 2, size=shape, dtype=np.int8)


def bits_to_indices(bits: np.ndarray, m_max: int) -> np.ndarray:
    """Interpret each M-bit group (axis -3, MSB first) zero-padded on the
    least-significant side to M_max bits as an integer index."""
    m = bits.shape[-3]
    if m > m_max:
        raise ValueError(f"bits_to_indices: M={m} exceeds M_max={m_max}")
    weights = (1 << np.arange(m_max - 1, m_max - m - 1, -1)).astype(np.int64)
    idx = np.tensordot(bits.astype(np.int64), weights, axes=([-3], [0]))
    step = 1 << (m_max - m)
    assert np.all(idx % step == 0) and np.all(idx < (1 << m_max)), "unmapped index"
    return idx


def indices_to_bits(idx: np.ndarray, m: int, m_max: int) -> np.ndarray:
    """Inverse of :func:`bits_to_indices`; bits are placed on axis -3."""
    shifts = np.arange(m_max - 1, m_max - m - 1, -1)
    bits = (np.asarray(idx)[..., None] >> shifts) & 1
    return np.moveaxis(bits.astype(np.int8), -1, -3)


def map_bits(bits: np.ndarray, points: np.ndarray, m_max: int | None = None) -> np.ndarray:
    """Map bit groups onto the normalized constellation ``points`` (length
    2^M_max). Returns a complex grid shaped like ``bits`` without axis -3."""
    if m_max is None:
        m_max = int(np.log2(len(points)))
    if len(points) != 1 << m_max:
        raise ValueError("map_bits: constellation size must be 2^M_max")
    return np.asarray(points)[bits_to_indices(bits, m_max)]


# --------------------------------------------------------------------------
# OFDM
# --------------------------------------------------------------------------

def _check_cp(cp_len: int, n_c: int):
    if cp_len < 0 or cp_len >= n_c:
        raise ConfigurationError(f"cp_len must satisfy 0 <= cp_len < N_c={n_c}, got {cp_len}")


def ofdm_modulate(grid: np.ndarray, cp_len: int = 0) -> np.ndarray:
    """Unitary IFFT per OFDM symbol with optional cyclic prefix.

    grid (..., N_s, N_c) -> time samples (..., N_s * (N_c + cp_len)).
    """
    n_c = grid.shape[-1]
    _check_cp(cp_len, n_c)
    x = np.fft.ifft(grid, axis=-1, norm="ortho")
    if cp_len:
        x = np.concatenate([x[..., -cp_len:], x], axis=-1)
    return x.reshape(grid.shape[:-2] + (-1,))


def ofdm_modulate_adjoint(signal: np.ndarray, n_s: int, n_c: int, cp_len: int = 0) -> np.ndarray:
    """Adjoint of :func:`ofdm_modulate` (CP samples folded back onto the tail)."""
    x = signal.reshape(signal.shape[:-1] + (n_s, n_c + cp_len))
    body = x[..., cp_len:].copy()
    if cp_len:
        body[..., -cp_len:] += x[..., :cp_len]
    return np.fft.fft(body, axis=-1, norm="ortho")


def ofdm_demodulate(signal: np.ndarray, n_s: int, n_c: int, cp_len: int = 0) -> np.ndarray:
    """Drop the CP of each symbol and apply the unitary FFT.

    signal (..., N_s * (N_c + cp_len)) -> grid (..., N_s, N_c).
    """
    _check_cp(cp_len, n_c)
    if signal.shape[-1] != n_s * (n_c + cp_len):
        raise ValueError(f"ofdm_demodulate: expected {n_s * (n_c + cp_len)} samples, got {signal.shape[-1]}")
    x = signal.reshape(signal.shape[:-1] + (n_s, n_c + cp_len))[..., cp_len:]
    return np.fft.fft(x, axis=-1, norm="ortho")


def ofdm_demodulate_adjoint(grid: np.ndarray, cp_len: int = 0) -> np.ndarray:
    n_c = grid.shape[-1]
    body = np.fft.ifft(grid, axis=-1, norm="ortho")
    if cp_len:
        body = np.concatenate([np.zeros(body.shape[:-1] + (cp_len,), complex), body], axis=-1)
    return body.reshape(grid.shape[:-2] + (-1,))


def _zero_pad_center(freq: np.ndarray, factor: int) -> np.ndarray:
    n = freq.shape[-1]
    lo = n - n // 2  # bins 0 .. lo-1 are the non-negative half
    out = np.zeros(freq.shape[:-1] + (factor * n,), dtype=complex)
    out[..., :lo] = freq[..., :lo]
    if n // 2:
        out[..., -(n // 2):] = freq[..., lo:]
    return out


def oversampled_ifft(row: np.ndarray, factor: int = 4) -> np.ndarray:
    """L·N_c-point IFFT of a spectrum zero-padded at its center, scaled by
    1/sqrt(L·N_c) so that factor=1 reproduces :func:`ofdm_modulate`."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("oversampled_ifft: L must be a positive integer")
    return np.fft.ifft(_zero_pad_center(np.asarray(row), int(factor)), axis=-1, norm="ortho")


def oversampled_ifft_adjoint(signal: np.ndarray, n_c: int, factor: int = 4) -> np.ndarray:
    full = np.fft.fft(signal, axis=-1, norm="ortho")
    lo = n_c - n_c // 2
    out = np.empty(signal.shape[:-1] + (n_c,), dtype=complex)
    out[..., :lo] = full[..., :lo]
    if n_c // 2:
        out[..., lo:] = full[..., -(n_c // 2):]
    return out


def papr(signal: np.ndarray, axis: int = -1) -> np.ndarray:
    """Peak-to-average power ratio in dB along ``axis``."""
    p = np.abs(signal) ** 2
    avg = p.mean(axis=axis)
    if np.any(avg <= 0):
        raise ValueError("papr: signal has zero average power")
    return 10.0 * np.log10(p.max(axis=axis) / avg)


def clip(signal: np.ndarray, clip_rate: float, axis: int = -1) -> np.ndarray:
    """Amplitude clipping at clip_rate x RMS along ``axis``; phase preserved."""
    if clip_rate <= 0:
        raise ValueError("clip: clip_rate must be positive")
    mag = np.abs(signal)
    thresh = clip_rate * np.sqrt(np.mean(mag ** 2, axis=axis, keepdims=True))
    scale = np.where(mag > thresh, thresh / np.where(mag > 0, mag, 1.0), 1.0)
    return signal * scale


# --------------------------------------------------------------------------
# pilots
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PilotPattern:
    """Full-band pilot OFDM symbols plus their unit-modulus sequence."""

    symbols: tuple[int, ...]
    sequence: np.ndarray  # (len(symbols), N_c) complex
    n_s: int
    n_c: int

    @property
    def mask(self) -> np.ndarray:
        """Boolean (N_s, N_c) grid, True on pilot REs."""
        m = np.zeros((self.n_s, self.n_c), dtype=bool)
        m[list(self.symbols), :] = True
        return m

    @property
    def data_mask(self) -> np.ndarray:
        return ~self.mask

    @property
    def data_symbols(self) -> tuple[int, ...]:
        return tuple(s for s in range(self.n_s) if s not in self.symbols)

    @property
    def data_fraction(self) -> float:
        return len(self.data_symbols) / self.n_s

    def grid(self) -> np.ndarray:
        g = np.zeros((self.n_s, self.n_c), dtype=complex)
        if self.symbols:
            g[list(self.symbols), :] = self.sequence
        return g


def make_pilot_pattern(layout: str, n_s: int = 14, n_c: int = 72, seed=0,
                       symbols: tuple[int, ...] | None = None) -> PilotPattern:
    """``layout`` is 'none' or '2sym' (symbols 2 and 11 by default)."""
    if layout == "none":
        return PilotPattern((), np.zeros((0, n_c), complex), n_s, n_c)
    if layout != "2sym":
        raise ConfigurationError(f"unknown pilot layout '{layout}'")
    if symbols is None:
        symbols = (2, 11) if n_s >= 12 else (0, n_s - 1)
    symbols = tuple(sorted(set(symbols)))
    if len(symbols) != 2 or min(symbols) < 0 or max(symbols) >= n_s:
        raise ConfigurationError(f"pilot symbols {symbols} invalid for N_s={n_s}")
    qpsk = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)
    seq = qpsk[as_rng(seed).integers(0, 4, size=(len(symbols), n_c))]
    return PilotPattern(symbols, seq, n_s, n_c)


def insert_pilots(grid: np.ndarray, pattern: PilotPattern) -> np.ndarray:
    """Write the pilot sequence into the pilot REs of ``grid`` (…, N_s, N_c).

    Pilot REs must be empty (zero) on entry; data found there is an error.
    """
    if grid.shape[-2:] != (pattern.n_s, pattern.n_c):
        raise ValueError(f"insert_pilots: grid {grid.shape[-2:]} vs pattern {(pattern.n_s, pattern.n_c)}")
    if not pattern.symbols:
        return grid.copy()
    if np.any(grid[..., list(pattern.symbols), :] != 0):
        raise ValueError("insert_pilots: data present on pilot REs would be overwritten")
    out = np.array(grid, dtype=complex, copy=True)
    out[..., list(pattern.symbols), :] = pattern.sequence
    return out
