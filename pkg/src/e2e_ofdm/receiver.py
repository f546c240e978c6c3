"""Residual CNN receiver with channel adapters and a multi-order LLR mask.

Feature maps are (batch, channels, N_s, N_c). Block kernel sizes and
dilations are given as (time, frequency) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Parameter

# (kernel, dilation) per residual block, (time, frequency) order
DEFAULT_BLOCKS: tuple[tuple[tuple[int, int], tuple[int, int]], ...] = (
    ((7, 7), (2, 7)),
    ((5, 7), (1, 7)),
    ((3, 5), (2, 1)),
    ((3, 3), (1, 1)),
    ((3, 3), (1, 1)),
)

PARTITIONS = ("backbone", "adapter", "mask", "constellation")
MODES = ("full", "adapter-only")


@dataclass
class ReceiverConfig:
    n_r: int = 2
    n_s: int = 14
    n_c: int = 72
    m_max: int = 2
    n_blocks: int = 2
    channels: int = 32
    gamma: int = 4
    af_hidden: int = 16
    adapter_kernel: int = 3
    input_kernel: tuple[int, int] = (3, 3)
    blocks: tuple | None = None  # overrides DEFAULT_BLOCKS when given
    mask_init: float = 4.0

    def block_spec(self, i: int):
        table = self.blocks if self.blocks is not None else DEFAULT_BLOCKS
        (k, d) = table[min(i, len(table) - 1)]
        return tuple(k), tuple(d)

    def validate(self):
        if self.channels % self.gamma:
            raise ConfigurationError(f"channels={self.channels} not divisible by gamma={self.gamma}")
        if self.n_r < 1 or self.n_blocks < 1 or self.m_max < 1:
            raise ConfigurationError("n_r, n_blocks and m_max must be >= 1")


def full_scale_config(**kw) -> ReceiverConfig:
    base = dict(n_r=32, n_s=14, n_c=72, m_max=8, n_blocks=5, channels=128)
    base.update(kw)
    return ReceiverConfig(**base)


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def assemble_input_array(y: np.ndarray, n0) -> np.ndarray:
    """Stack Re/Im of y (B, N_r, N_s, N_c) plus a log-N0 plane ->
    (B, 2 N_r + 1, N_s, N_c); channel order re0, im0, re1, im1, ..., log N0."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    n0 = np.broadcast_to(np.asarray(n0, dtype=float), (y.shape[0],))
    if np.any(n0 <= 0):
        raise ValueError("assemble_input: N0 must be positive")
    b, n_r, n_s, n_c = y.shape
    planes = np.stack([y.real, y.imag], axis=2).reshape(b, 2 * n_r, n_s, n_c)
    noise = np.broadcast_to(np.log(n0)[:, None, None, None], (b, 1, n_s, n_c))
    return np.concatenate([planes, noise], axis=1)


def assemble_input(y: ad.Node, n0: np.ndarray) -> ad.Node:
    """Graph version; y is a (B, N_r, N_s, N_c, 2) real-pair node."""
    n0 = np.asarray(n0, dtype=float)
    if np.any(n0 <= 0):
        raise ValueError("assemble_input: N0 must be positive")
    b, n_r, n_s, n_c, _ = y.shape
    planes = ad.reshape(ad.transpose(y, (0, 1, 4, 2, 3)), (b, 2 * n_r, n_s, n_c))
    noise = y.graph.constant(np.broadcast_to(np.log(n0).reshape(-1, 1, 1, 1), (b, 1, n_s, n_c)))
    return ad.concat([planes, noise], axis=1)


@dataclass
class NeuralReceiver:
    config: ReceiverConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ReceiverConfig, seed=0) -> "NeuralReceiver":
        config.validate()
        rx = cls(config)
        rng = np.random.default_rng(seed)
        c, cin = config.channels, 2 * config.n_r + 1
        kh, kw = config.input_kernel
        rx._add("rx.input.w", _glorot(rng, (c, cin, kh, kw), cin * kh * kw, c * kh * kw))
        rx._add("rx.input.b", np.zeros(c))
        for i in range(config.n_blocks):
            (kh, kw), _ = config.block_spec(i)
            for j in (1, 2):
                p = f"rx.block{i}."
                rx._add(p + f"ln{j}.scale", np.ones(c))
                rx._add(p + f"ln{j}.offset", np.zeros(c))
                rx._add(p + f"conv{j}.w", _glorot(rng, (c, c, kh, kw), c * kh * kw, c * kh * kw))
                rx._add(p + f"conv{j}.b", np.zeros(c))
        m = config.m_max
        rx._add("rx.output.w", _glorot(rng, (m, c, 1, 1), c, m))
        rx._add("rx.output.b", np.zeros(m))
        rx._add("rx.mask.logits", np.full((m, config.n_s, config.n_c), config.mask_init), "mask")
        rx.reset_adapters(rng)
        return rx

    def _add(self, name, value, partition="backbone"):
        self.params[name] = Parameter(name, value, True, partition)

    def reset_adapters(self, seed=None):
        """(Re)insert adapters: random W_down and AF weights, zero W_up."""
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        cfg = self.config
        c, g, k, hid = cfg.channels, cfg.gamma, cfg.adapter_kernel, cfg.af_hidden
        for i in range(cfg.n_blocks):
            p = f"rx.adapter{i}."
            self._add(p + "down", _glorot(rng, (c // g, g, k, k), g * k * k, k * k), "adapter")
            self._add(p + "up", np.zeros((c, c // g, 1, 1)), "adapter")
            self._add(p + "af1.w", _glorot(rng, (hid, c + 1), c + 1, hid), "adapter")
            self._add(p + "af1.b", np.zeros(hid), "adapter")
            self._add(p + "af2.w", _glorot(rng, (c, hid), hid, c), "adapter")
            self._add(p + "af2.b", np.zeros(c), "adapter")

    # ------------------------------------------------------------------
    def by_partition(self, partition: str) -> list[Parameter]:
        return [p for p in self.params.values() if p.partition == partition]

    def count(self, partition: str | None = None, trainable_only=False) -> int:
        return sum(p.value.size for p in self.params.values()
                   if (partition is None or p.partition == partition)
                   and (p.trainable or not trainable_only))

    def set_mode(self, mode: str):
        partition(self.params.values(), mode)

    # ------------------------------------------------------------------
    def bind(self, graph: ad.Graph) -> dict[str, ad.Node]:
        return {k: graph.param(p) for k, p in self.params.items()}

    def forward(self, graph: ad.Graph, x: ad.Node, n0, m: int, use_adapters=True,
                nodes: dict[str, ad.Node] | None = None) -> ad.Node:
        """x: assembled input (B, 2N_r+1, N_s, N_c). Returns masked LLRs (B, M, N_s, N_c)."""
        cfg = self.config
        if not 1 <= m <= cfg.m_max:
            raise ValueError(f"forward: M={m} outside [1, {cfg.m_max}]")
        p = nodes if nodes is not None else self.bind(graph)
        log_n0 = np.log(np.asarray(n0, dtype=float)).reshape(-1)
        z = conv_bias(ad.conv2d(x, p["rx.input.w"]), p["rx.input.b"])
        for i in range(cfg.n_blocks):
            z = residual_block(z, p, i, cfg.block_spec(i)[1])
            if use_adapters:
                z = channel_adapter(z, log_n0, p, i)
        raw = conv_bias(ad.pointwise_conv2d(z, p["rx.output.w"]), p["rx.output.b"])
        return apply_mask(raw, p["rx.mask.logits"], m)

    def forward_array(self, y: np.ndarray, n0, m: int, use_adapters=True) -> np.ndarray:
        """Inference on a complex grid (B, N_r, N_s, N_c); no gradients recorded."""
        frozen = {k: Parameter(k, v.value, False, v.partition) for k, v in self.params.items()}
        g = ad.Graph()
        x = g.constant(assemble_input_array(y, n0))
        nodes = {k: g.param(p) for k, p in frozen.items()}
        return self.forward(g, x, n0, m, use_adapters, nodes).value


def conv_bias(z: ad.Node, b: ad.Node) -> ad.Node:
    return z + ad.reshape(b, (-1, 1, 1))


def residual_block(z: ad.Node, p: dict[str, ad.Node], i: int, dilation) -> ad.Node:
    pre = f"rx.block{i}."
    h = z
    for j in (1, 2):
        h = ad.relu(ad.layer_norm(h, p[pre + f"ln{j}.scale"], p[pre + f"ln{j}.offset"]))
        h = conv_bias(ad.conv2d(h, p[pre + f"conv{j}.w"], dilation), p[pre + f"conv{j}.b"])
    return z + h


def attention_factor(feat: ad.Node, log_n0: np.ndarray, p: dict[str, ad.Node], i: int) -> ad.Node:
    """Noise-aware channel gate in (0, 1)^C from pooled features and log N0."""
    pre = f"rx.adapter{i}."
    pooled = ad.mean(feat, axis=(2, 3))  # (B, C)
    noise = feat.graph.constant(np.broadcast_to(log_n0.reshape(-1, 1), (pooled.shape[0], 1)))
    h = ad.relu(ad.dense(ad.concat([pooled, noise], axis=1), p[pre + "af1.w"], p[pre + "af1.b"]))
    return ad.sigmoid(ad.dense(h, p[pre + "af2.w"], p[pre + "af2.b"]))


def channel_adapter(z: ad.Node, log_n0: np.ndarray, p: dict[str, ad.Node], i: int) -> ad.Node:
    pre = f"rx.adapter{i}."
    squeezed = ad.relu(ad.depthwise_conv2d(z, p[pre + "down"]))
    expanded = ad.pointwise_conv2d(squeezed, p[pre + "up"])
    alpha = attention_factor(expanded, log_n0, p, i)
    return ad.reshape(alpha, alpha.shape + (1, 1)) * expanded + z


def apply_mask(raw: ad.Node, logits: ad.Node, m: int) -> ad.Node:
    """First M rows of raw ∘ sigmoid(logits)."""
    return raw[:, :m] * ad.sigmoid(logits[:m])


def partition(params, mode: str):
    """Set trainable flags for a fine-tuning mode; returns (trainable, frozen) names."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode '{mode}', expected one of {MODES}")
    train, frozen = [], []
    for p in params:
        p.trainable = mode == "full" or p.partition != "backbone"
        (train if p.trainable else frozen).append(p.name)
    return train, frozen
