"""Conventional pilot-aided receiver: LS estimation, time interpolation,
LMMSE equalization and exact Gaussian soft demapping.

LLR convention used package-wide: LLR = log P(b=1) / P(b=0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phy import PilotPattern

LLR_CLIP = 40.0


@dataclass
class ChannelEstimate:
    h: np.ndarray  # (..., N_r, N_s, N_c)
    source: str  # "ls-interp" or "perfect"


def ls_estimate(y: np.ndarray, pattern: PilotPattern) -> np.ndarray:
    """Per-antenna y / x on the pilot symbols; returns (..., N_r, P, N_c)."""
    if not pattern.symbols:
        raise ValueError("ls_estimate: pilot pattern is empty")
    x = pattern.sequence
    if np.any(x == 0):
        raise ZeroDivisionError("ls_estimate: zero pilot symbol")
    return y[..., list(pattern.symbols), :] / x


def interpolation_weights(pilot_symbols, n_s: int) -> np.ndarray:
    """(N_s, P) weights: linear between pilot symbols, nearest outside."""
    p = np.asarray(pilot_symbols, dtype=float)
    if p.size == 0:
        raise ValueError("interpolate: no pilot symbols")
    w = np.zeros((n_s, p.size))
    for s in range(n_s):
        if s <= p[0]:
            w[s, 0] = 1.0
        elif s >= p[-1]:
            w[s, -1] = 1.0
        else:
            i = int(np.searchsorted(p, s, side="right")) - 1
            frac = (s - p[i]) / (p[i + 1] - p[i])
            w[s, i] = 1.0 - frac
            w[s, i + 1] = frac
    return w


def interpolate(h_pilots: np.ndarray, pattern: PilotPattern) -> ChannelEstimate:
    """Expand (..., N_r, P, N_c) pilot estimates to the full slot."""
    w = interpolation_weights(pattern.symbols, pattern.n_s)
    h = np.einsum("sp,...pk->...sk", w, h_pilots)
    return ChannelEstimate(h, "ls-interp")


def lmmse_equalize(y: np.ndarray, h: np.ndarray, n0, es: float = 1.0):
    """Per-RE SIMO LMMSE.

    y, h: (..., N_r, N_s, N_c). Returns (x_hat, gain, nu) over (..., N_s, N_c)
    where x_hat ≈ gain·x + e with e of variance nu (assuming h is exact).
    """
    if es <= 0:
        raise ValueError("lmmse_equalize: Es must be positive")
    n0 = np.asarray(n0, dtype=float)
    reg = n0 / es
    if reg.ndim:
        reg = reg.reshape(reg.shape + (1, 1))
    a = np.sum(np.abs(h) ** 2, axis=-3)
    denom = a + reg
    x_hat = np.sum(np.conj(h) * y, axis=-3) / denom
    gain = a / denom
    n0b = n0.reshape(n0.shape + (1, 1)) if n0.ndim else n0
    nu = a * n0b / denom ** 2
    return x_hat, gain, nu


def gaussian_llr(x_hat: np.ndarray, nu, points: np.ndarray, labels: np.ndarray,
                 gain=1.0, clip: float = LLR_CLIP) -> np.ndarray:
    """Exact max-free bit LLRs under x_hat ~ CN(gain·c, nu).

    points: (2^M,), labels: (2^M, M) bits MSB first. Output (..., M, N_s, N_c)
    with bits on axis -3 to match the bit grid layout; inputs with fewer than
    two axes get the bit axis first.
    """
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise ValueError("gaussian_llr: variance must be positive")
    labels = np.asarray(labels)
    d = np.abs(x_hat[..., None] - np.asarray(gain)[..., None] * points) ** 2
    metric = -d / nu[..., None]  # (..., S, C)
    out = []
    for m in range(labels.shape[1]):
        one = labels[:, m] == 1
        if one.all() or not one.any():
            raise ValueError("gaussian_llr: empty bit class")
        out.append(_logsumexp(metric[..., one]) - _logsumexp(metric[..., ~one]))
    llr = np.stack(out, axis=max(np.ndim(x_hat) - 2, 0))
    return np.clip(llr, -clip, clip)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=-1, keepdims=True)
    return mx[..., 0] + np.log(np.exp(a - mx).sum(axis=-1))


def symbol_posteriors(x_hat, nu, points, gain=1.0) -> np.ndarray:
    """Posterior P(c | x_hat) for equiprobable points; sums to one."""
    nu = np.asarray(nu, dtype=float)
    metric = -np.abs(x_hat[..., None] - np.asarray(gain)[..., None] * points) ** 2 / nu[..., None]
    metric -= metric.max(axis=-1, keepdims=True)
    e = np.exp(metric)
    return e / e.sum(axis=-1, keepdims=True)
