"""Slot-level link: transmitter, channel and receivers wired together.

Two routes share the same building blocks:

* a differentiable route (:meth:`System.loss_graph`) used for training, in
  which the constellation, the OFDM/channel chain and the neural receiver sit
  on one autodiff graph;
* a numpy route (:meth:`System.run_slot`) used for evaluation, which also
  serves the LS/LMMSE and perfect-CSI baselines.

Noise is added after the FFT. The FFT is unitary and the CP samples it drops
carry independent noise, so this is equal in distribution to adding white
noise to the time samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import baseline as bl
from .autodiff import ConfigurationError
from .channel import ChannelRealization, apply_channel, apply_channel_adjoint, ebno_to_n0, \
    freq_response, gen_channel, make_profile
from .constellation import Constellation, subset
from .phy import PilotPattern, bits_to_indices, make_pilot_pattern, ofdm_demodulate, \
    ofdm_demodulate_adjoint, ofdm_modulate, ofdm_modulate_adjoint, oversampled_ifft, \
    oversampled_ifft_adjoint, clip
from .receiver import NeuralReceiver, ReceiverConfig, assemble_input


@dataclass
class LinkConfig:
    n_s: int = 14
    n_c: int = 72
    n_r: int = 2
    cp_len: int = 0
    pilot_layout: str = "none"
    profile: str = "flat"
    speed_kmh: float = 0.0
    delay_spread_s: float = 100e-9
    carrier_hz: float = 3.5e9
    subcarrier_spacing_hz: float = 30e3
    rate: float = 0.5
    pilot_seed: int = 0

    def pattern(self) -> PilotPattern:
        return make_pilot_pattern(self.pilot_layout, self.n_s, self.n_c, self.pilot_seed)

    def channel_profile(self, profile: str | None = None, speed_kmh: float | None = None):
        return make_profile(profile or self.profile,
                            self.speed_kmh if speed_kmh is None else speed_kmh,
                            self.delay_spread_s, self.carrier_hz, self.subcarrier_spacing_hz, self.n_c)

    @property
    def num_samples(self) -> int:
        return self.n_s * (self.n_c + self.cp_len)

    @property
    def rho(self) -> float:
        """Data resource utilization: data-RE share times CP efficiency."""
        return self.pattern().data_fraction * self.n_c / (self.n_c + self.cp_len)


def channel_operator(ch: ChannelRealization, n_s: int, n_c: int, cp_len: int):
    """(forward, adjoint) of grid -> OFDM -> channel -> FFT grid."""

    def fwd(z):
        return ofdm_demodulate(apply_channel(ofdm_modulate(z, cp_len), ch), n_s, n_c, cp_len)

    def adj(g):
        return ofdm_modulate_adjoint(apply_channel_adjoint(ofdm_demodulate_adjoint(g, cp_len), ch),
                                     n_s, n_c, cp_len)

    return fwd, adj


@dataclass
class Batch:
    bits: np.ndarray  # (B, M, N_s, N_c) int8
    m: int
    ebno_db: np.ndarray  # (B,)
    n0: np.ndarray  # (B,) actual noise variance
    channel: ChannelRealization
    noise: np.ndarray  # (B, N_r, N_s, N_c) unit-variance complex noise


@dataclass
class System:
    """Constellation + neural receiver + link parameters."""

    link: LinkConfig
    constellation: Constellation
    receiver: NeuralReceiver
    use_adapters: bool = True
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, link: LinkConfig, rx_config: ReceiverConfig, seed=0, use_adapters=True) -> "System":
        if rx_config.n_r != link.n_r or rx_config.n_s != link.n_s or rx_config.n_c != link.n_c:
            raise ConfigurationError("receiver and link grid dimensions disagree")
        return cls(link, Constellation(rx_config.m_max), NeuralReceiver.init(rx_config, seed), use_adapters)

    @property
    def m_max(self) -> int:
        return self.constellation.m_max

    def parameters(self):
        return self.constellation.parameters + list(self.receiver.params.values())

    # ------------------------------------------------------------------
    def sample_batch(self, batch: int, m: int, ebno_db, seed, profile=None, speed_kmh=None) -> Batch:
        rng = np.random.default_rng(seed)
        lk = self.link
        bits = rng.integers(0, 2, size=(batch, m, lk.n_s, lk.n_c), dtype=np.int8)
        ebno = np.broadcast_to(np.asarray(ebno_db, dtype=float), (batch,)).copy()
        p0 = self.constellation.subset_power(m)
        n0 = ebno_to_n0(ebno, lk.rate, m, p0)
        ch = gen_channel(lk.channel_profile(profile, speed_kmh), lk.num_samples, lk.n_r, rng, batch)
        noise = (rng.standard_normal((batch, lk.n_r, lk.n_s, lk.n_c))
                 + 1j * rng.standard_normal((batch, lk.n_r, lk.n_s, lk.n_c))) / np.sqrt(2)
        return Batch(bits, m, ebno, n0, ch, noise)

    def indices(self, bits: np.ndarray) -> np.ndarray:
        return bits_to_indices(bits, self.m_max)

    # ------------------------------------------------------------------
    # differentiable route
    # ------------------------------------------------------------------
    def tx_graph(self, graph: ad.Graph, bits: np.ndarray) -> ad.Node:
        """Transmit grid (B, N_s, N_c, 2) as a function of the constellation."""
        pts = self.constellation.node(graph)
        x = ad.take(pts, self.indices(bits))
        pat = self.link.pattern()
        if pat.symbols:
            keep = graph.constant(pat.data_mask[..., None].astype(float))
            x = x * keep + graph.constant(ad.from_complex(pat.grid()))
        return x

    def rx_graph(self, graph: ad.Graph, x: ad.Node, b: Batch, n0_fed=None) -> ad.Node:
        lk = self.link
        fwd, adj = channel_operator(b.channel, lk.n_s, lk.n_c, lk.cp_len)
        y = ad.complex_linear(x, fwd, adj, "channel")
        scale = np.sqrt(b.n0).reshape(-1, 1, 1, 1)
        y = y + graph.constant(ad.from_complex(scale * b.noise))
        n0_fed = b.n0 if n0_fed is None else n0_fed
        return self.receiver.forward(graph, assemble_input(y, n0_fed), n0_fed, b.m, self.use_adapters)

    def loss_graph(self, graph: ad.Graph, b: Batch):
        """Returns (llr node, tx grid node)."""
        x = self.tx_graph(graph, b.bits)
        return self.rx_graph(graph, x, b), x

    # ------------------------------------------------------------------
    # numpy route
    # ------------------------------------------------------------------
    def tx_grid(self, bits: np.ndarray, points: np.ndarray | None = None) -> np.ndarray:
        pts = self.constellation.normalized() if points is None else points
        x = pts[self.indices(bits)]
        pat = self.link.pattern()
        if pat.symbols:
            x = np.where(pat.data_mask, x, pat.grid())
        return x

    def received(self, x: np.ndarray, b: Batch) -> np.ndarray:
        lk = self.link
        fwd, _ = channel_operator(b.channel, lk.n_s, lk.n_c, lk.cp_len)
        return fwd(x) + np.sqrt(b.n0).reshape(-1, 1, 1, 1) * b.noise

    def detect(self, y: np.ndarray, b: Batch, mode: str = "neural", noise_mismatch: float = 1.0,
               points: np.ndarray | None = None) -> np.ndarray:
        """Bit LLRs (B, M, N_s, N_c) for mode neural | baseline | perfect-csi."""
        n0_fed = b.n0 * noise_mismatch
        if mode == "neural":
            return self.receiver.forward_array(y, n0_fed, b.m, self.use_adapters)
        pts = self.constellation.normalized() if points is None else points
        view = subset(pts, b.m)
        pat = self.link.pattern()
        if mode == "baseline":
            if not pat.symbols:
                raise ConfigurationError("baseline receiver needs a pilot layout")
            h = bl.interpolate(bl.ls_estimate(y, pat), pat).h
        elif mode == "perfect-csi":
            h = freq_response(b.channel, self.link.n_s, self.link.n_c, self.link.cp_len)
        else:
            raise ConfigurationError(f"unknown receiver mode '{mode}'")
        x_hat, gain, nu = bl.lmmse_equalize(y, h, n0_fed)
        return bl.gaussian_llr(x_hat, np.maximum(nu, 1e-300), view.points, view.labels(), gain)

    def run_slot(self, b: Batch, mode: str = "neural", noise_mismatch: float = 1.0,
                 clip_rate: float | None = None) -> np.ndarray:
        x = self.tx_grid(b.bits)
        if clip_rate is not None:
            x = clip_grid(x, clip_rate, self.link.cp_len)
        return self.detect(self.received(x, b), b, mode, noise_mismatch)

    def config_dict(self) -> dict:
        return {"link": asdict(self.link), "receiver": asdict(self.receiver.config),
                "use_adapters": self.use_adapters}


def clip_grid(x: np.ndarray, clip_rate: float, cp_len: int = 0) -> np.ndarray:
    """Clip each OFDM symbol in time and return to the frequency grid."""
    t = np.fft.ifft(x, axis=-1, norm="ortho")
    return np.fft.fft(clip(t, clip_rate, axis=-1), axis=-1, norm="ortho")


def oversampled_power_graph(x: ad.Node, factor: int) -> ad.Node:
    """|x̃_n|^2 of the oversampled time signal of each OFDM symbol,
    shape (..., N_s, L·N_c)."""
    n_c = x.shape[-2]
    t = ad.complex_linear(x, lambda z: oversampled_ifft(z, factor),
                          lambda g: oversampled_ifft_adjoint(g, n_c, factor), "oversampled_ifft")
    return ad.sum(ad.square(t), axis=-1)
