"""Time-varying tapped-delay-line SIMO channel with Jakes Doppler and AWGN.

The channel is applied by time-domain linear convolution, so a missing or
short cyclic prefix produces genuine ISI/ICI. :func:`freq_response` gives
the per-RE view that holds exactly only when the CP covers the delay spread
and the channel is static over a symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .phy import as_rng

SPEED_OF_LIGHT = 3.0e8

# (normalized delay, power dB) clusters, loosely shaped after the 3GPP TDL
# families; they are rescaled to the requested RMS delay spread.
_TDL_CLUSTERS = {
    "tdl-a": [(0.0, -13.4), (0.38, 0.0), (0.40, -2.2), (0.59, -4.0), (0.46, -6.0),
              (0.54, -8.2), (0.67, -9.9), (0.58, -10.5), (0.76, -7.5), (1.54, -15.9),
              (1.90, -6.6), (2.22, -16.7), (2.17, -12.4), (2.49, -15.2), (2.51, -10.8),
              (3.06, -11.3), (4.08, -12.7), (4.46, -16.2), (4.57, -18.3), (4.80, -18.9),
              (5.01, -16.6), (5.30, -19.9), (9.66, -29.7)],
    "tdl-b": [(0.0, 0.0), (0.11, -2.2), (0.28, -4.0), (0.30, -3.2), (0.46, -9.8),
              (0.58, -1.2), (0.74, -3.4), (0.86, -5.2), (1.09, -2.8), (1.20, -2.8),
              (1.46, -4.8), (1.75, -4.0), (2.11, -4.0), (2.40, -9.8), (2.70, -7.3),
              (3.20, -8.0), (4.05, -14.0), (4.92, -18.2)],
    "tdl-c": [(0.0, -4.4), (0.21, -1.2), (0.42, -3.5), (0.65, -5.2), (0.86, -2.5),
              (0.89, 0.0), (1.10, -2.2), (1.16, -3.9), (1.47, -7.4), (1.67, -7.1),
              (2.00, -10.7), (2.35, -11.1), (2.79, -5.1), (3.11, -6.8), (3.76, -8.7),
              (4.19, -13.2), (4.48, -13.9), (5.27, -13.9), (6.13, -15.8), (6.48, -17.1),
              (7.47, -16.0), (8.65, -22.9)],
    "tdl-d": [(0.0, -0.2), (0.035, -18.8), (0.61, -21.0), (1.36, -22.8), (1.43, -17.9),
              (1.54, -20.1), (1.75, -21.9), (1.86, -22.9), (1.88, -27.8), (2.86, -23.6),
              (3.15, -24.8), (4.70, -30.0)],
    "tdl-e": [(0.0, -0.03), (0.5, -15.8), (0.52, -18.1), (1.13, -19.8), (1.74, -22.9),
              (2.68, -22.4), (3.49, -18.6), (5.46, -20.8), (6.40, -22.6), (13.2, -29.0)],
}
# LOS families carry a Rician first tap (K-factor in dB)
_TDL_K_DB = {"tdl-d": 13.3, "tdl-e": 22.0}
_ALIASES = {f"cdl-{c}": f"tdl-{c}" for c in "abcde"} | {f"cdl{c}-like": f"tdl-{c}" for c in "abcde"}


@dataclass(frozen=True)
class ChannelProfile:
    delays: tuple[int, ...]  # in samples
    powers: tuple[float, ...]  # linear, sum to 1
    name: str = "custom"
    speed_kmh: float = 0.0
    carrier_hz: float = 3.5e9
    sample_rate_hz: float = 72 * 30e3
    k_factor_db: float | None = None
    n_sinusoids: int = 32
    antenna_correlated: bool = False

    def __post_init__(self):
        if len(self.delays) != len(self.powers) or not self.delays:
            raise ValueError("ChannelProfile: delays and powers must be non-empty and equal length")
        p = np.asarray(self.powers, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("ChannelProfile: powers must be nonnegative and sum to 1")
        if min(self.delays) < 0:
            raise ValueError("ChannelProfile: delays must be nonnegative")

    @property
    def doppler_hz(self) -> float:
        return doppler_hz(self.speed_kmh, self.carrier_hz)

    @property
    def max_delay(self) -> int:
        return max(self.delays)

    def with_speed(self, speed_kmh: float) -> "ChannelProfile":
        return replace(self, speed_kmh=float(speed_kmh))


def doppler_hz(speed_kmh: float, carrier_hz: float) -> float:
    return speed_kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT


def profile_names() -> list[str]:
    return ["flat"] + sorted(_TDL_CLUSTERS)


def make_profile(name: str, speed_kmh: float = 0.0, delay_spread_s: float = 100e-9,
                 carrier_hz: float = 3.5e9, subcarrier_spacing_hz: float = 30e3,
                 n_c: int = 72, **kwargs) -> ChannelProfile:
    """Build a named preset: clusters scaled to an RMS delay spread, then
    quantized to the sample grid with coincident taps merged."""
    key = _ALIASES.get(name.lower(), name.lower())
    fs = n_c * subcarrier_spacing_hz
    common = dict(speed_kmh=float(speed_kmh), carrier_hz=carrier_hz, sample_rate_hz=fs, **kwargs)
    if key == "flat":
        return ChannelProfile((0,), (1.0,), name="flat", **common)
    if key not in _TDL_CLUSTERS:
        raise KeyError(f"unknown channel profile '{name}'; known: {profile_names()}")
    tau, pdb = np.array(_TDL_CLUSTERS[key]).T
    p = 10 ** (pdb / 10)
    p /= p.sum()
    mean = np.sum(p * tau)
    rms = np.sqrt(np.sum(p * (tau - mean) ** 2))
    samples = np.rint(tau / rms * delay_spread_s * fs).astype(int)
    if samples.max() >= n_c:
        raise ValueError(f"profile '{name}': max delay {samples.max()} >= N_c={n_c}")
    delays = np.unique(samples)
    powers = np.array([p[samples == d].sum() for d in delays])
    powers /= powers.sum()
    common.setdefault("k_factor_db", _TDL_K_DB.get(key))
    return ChannelProfile(tuple(int(d) for d in delays), tuple(float(x) for x in powers),
                          name=key, **common)


@dataclass
class ChannelRealization:
    """taps: complex (..., N_r, T, n_taps), one coefficient set per sample."""

    taps: np.ndarray
    delays: np.ndarray
    sample_rate_hz: float = 72 * 30e3
    meta: dict = field(default_factory=dict)

    @property
    def n_r(self) -> int:
        return self.taps.shape[-3]

    @property
    def num_samples(self) -> int:
        return self.taps.shape[-2]


def gen_channel(profile: ChannelProfile, num_samples: int, n_r: int, seed=None,
                batch: int | None = None) -> ChannelRealization:
    """Sum-of-sinusoids Jakes fading per tap and antenna.

    Each tap is sqrt(P/N) * sum_n exp(j(2π f_D cos θ_n t + φ_n)) with θ, φ
    uniform, giving E|h|^2 = P and autocorrelation P·J0(2π f_D τ).
    """
    rng = as_rng(seed)
    lead = () if batch is None else (batch,)
    n_taps, n_sin = len(profile.delays), profile.n_sinusoids
    ant = 1 if profile.antenna_correlated else n_r
    shape = lead + (ant, n_taps, n_sin)
    theta = rng.uniform(0, 2 * np.pi, size=shape)
    phi = rng.uniform(0, 2 * np.pi, size=shape)
    amp = np.sqrt(np.asarray(profile.powers) / n_sin)[:, None]
    fd = profile.doppler_hz
    if fd == 0.0:
        h = (amp * np.exp(1j * phi)).sum(-1)[..., None, :]  # (..., ant, 1, taps)
        h = np.broadcast_to(h, lead + (ant, num_samples, n_taps))
    else:
        t = np.arange(num_samples) / profile.sample_rate_hz
        w = 2 * np.pi * fd * np.cos(theta)
        # (..., ant, taps, T)
        h = np.einsum("...ln,...lnt->...lt", amp * np.exp(1j * phi),
                      np.exp(1j * w[..., None] * t))
        h = np.swapaxes(h, -1, -2)
    h = np.array(h, dtype=complex)
    if profile.k_factor_db is not None:
        k = 10 ** (profile.k_factor_db / 10)
        los_shape = lead + (ant,)
        aoa = rng.uniform(0, 2 * np.pi, size=los_shape)
        ph0 = rng.uniform(0, 2 * np.pi, size=los_shape)
        t = np.arange(num_samples) / profile.sample_rate_hz
        los = np.exp(1j * (2 * np.pi * fd * np.cos(aoa)[..., None] * t + ph0[..., None]))
        p0 = profile.powers[0]
        h[..., 0] = np.sqrt(p0 * k / (k + 1)) * los + np.sqrt(1 / (k + 1)) * h[..., 0]
    if profile.antenna_correlated:
        h = np.broadcast_to(h, lead + (n_r, num_samples, n_taps)).copy()
    return ChannelRealization(h, np.asarray(profile.delays, dtype=int), profile.sample_rate_hz,
                              {"profile": profile.name, "doppler_hz": fd})


def static_channel(tap_values, delays, n_r: int, num_samples: int) -> ChannelRealization:
    """Deterministic time-invariant channel; tap_values is (n_taps,) or (N_r, n_taps)."""
    tv = np.asarray(tap_values, dtype=complex)
    if tv.ndim == 1:
        tv = np.broadcast_to(tv, (n_r, tv.size))
    taps = np.broadcast_to(tv[:, None, :], (n_r, num_samples, tv.shape[-1])).copy()
    return ChannelRealization(taps, np.asarray(delays, dtype=int))


def apply_channel(x: np.ndarray, ch: ChannelRealization) -> np.ndarray:
    """Time-varying linear convolution; x (..., T) -> (..., N_r, T).

    Samples before the start of ``x`` are taken as zero; symbol boundaries
    are not protected.
    """
    n = x.shape[-1]
    if ch.num_samples != n:
        raise ValueError(f"apply_channel: channel spans {ch.num_samples} samples, signal has {n}")
    xe = x[..., None, :]
    y = np.zeros(np.broadcast_shapes(xe.shape, ch.taps.shape[:-1]), dtype=complex)
    for l, d in enumerate(ch.delays):
        if d >= n:
            continue
        if d == 0:
            y += ch.taps[..., l] * xe
        else:
            y[..., d:] += ch.taps[..., d:, l] * xe[..., :-d]
    return y


def apply_channel_adjoint(y: np.ndarray, ch: ChannelRealization) -> np.ndarray:
    """Adjoint of :func:`apply_channel`: (..., N_r, T) -> (..., T)."""
    n = y.shape[-1]
    out = np.zeros(y.shape[:-2] + (n,), dtype=complex)
    for l, d in enumerate(ch.delays):
        if d >= n:
            continue
        contrib = (np.conj(ch.taps[..., l]) * y).sum(axis=-2)
        if d == 0:
            out += contrib
        else:
            out[..., :-d] += contrib[..., d:]
    return out


def freq_response(ch: ChannelRealization, n_s: int, n_c: int, cp_len: int = 0) -> np.ndarray:
    """Per-RE channel (..., N_r, N_s, N_c): tap DFT sampled at each symbol's
    useful-part midpoint."""
    sym_len = n_c + cp_len
    t_mid = np.arange(n_s) * sym_len + cp_len + n_c // 2
    if t_mid[-1] >= ch.num_samples:
        raise ValueError("freq_response: channel shorter than the slot")
    h = ch.taps[..., t_mid, :]  # (..., N_r, N_s, taps)
    k = np.arange(n_c)
    steer = np.exp(-2j * np.pi * np.outer(ch.delays, k) / n_c)  # (taps, N_c)
    return h @ steer


def ebno_to_n0(ebno_db, rate: float, m: int, subset_power: float = 1.0):
    """Noise variance per complex sample for unit-energy symbols:
    N0 = P0 / (r · M · 10^(EbN0/10))."""
    if not 0 < rate <= 1:
        raise ValueError("ebno_to_n0: code rate must lie in (0, 1]")
    if m < 1 or subset_power <= 0:
        raise ValueError("ebno_to_n0: M and subset power must be positive")
    return subset_power / (rate * m * 10 ** (np.asarray(ebno_db, dtype=float) / 10))


def awgn(signal: np.ndarray, n0, seed=None) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise of variance ``n0``
    (scalar, or broadcastable against ``signal``)."""
    n0 = np.asarray(n0, dtype=float)
    if np.any(n0 < 0):
        raise ValueError("awgn: N0 must be nonnegative")
    if not np.any(n0):
        return np.array(signal, dtype=complex, copy=True)
    rng = as_rng(seed)
    noise = rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)
    return signal + np.sqrt(n0 / 2) * noise
