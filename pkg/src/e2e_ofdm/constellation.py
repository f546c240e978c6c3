"""Trainable geometric constellation with nested multi-order subsets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


def gray_code(n: int) -> np.ndarray:
    i = np.arange(1 << n)
    return i ^ (i >> 1)


def _rail(bits: np.ndarray) -> np.ndarray:
    """Gray PAM amplitude for one rail; bits (n, k), first column is the sign."""
    k = bits.shape[1]
    if k == 0:
        return np.zeros(bits.shape[0])
    amp = np.ones(bits.shape[0])
    for j in range(k - 1, 0, -1):
        amp = 2.0 ** (k - j) - (1 - 2 * bits[:, j]) * amp
    return (1 - 2 * bits[:, 0]) * amp


def qam_points(m: int) -> np.ndarray:
    """Unit-power Gray-labelled QAM; entry ``i`` is the point with label ``i``.

    Label bits (MSB first) alternate between the in-phase and quadrature
    rails, with the rail signs in the two MSBs. Points whose trailing bits are
    zero therefore form a smaller QAM of the same kind, so the subsets used
    for lower orders are nested and the order-2 subset is QPSK. Odd ``m``
    yields a rectangular grid with the extra bit on the in-phase rail.
    """
    if not 1 <= m <= 16:
        raise ValueError(f"unsupported modulation order M={m}")
    labels = np.arange(1 << m)
    bits = (labels[:, None] >> np.arange(m - 1, -1, -1)) & 1
    pts = _rail(bits[:, 0::2]) + 1j * _rail(bits[:, 1::2])
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def normalize_points(c: np.ndarray) -> np.ndarray:
    """Center and scale a complex point cloud to zero mean and unit power."""
    c = np.asarray(c, dtype=complex)
    centered = c - c.mean()
    var = np.mean(np.abs(centered) ** 2)
    if var <= 0:
        raise ValueError("normalize: all constellation points coincide")
    return centered / np.sqrt(var)


def normalize_node(c_re: ad.Node, c_im: ad.Node) -> ad.Node:
    """Differentiable normalization; returns a (2^M_max, 2) real-pair node."""
    mr = ad.mean(c_re)
    mi = ad.mean(c_im)
    dr = c_re - mr
    di = c_im - mi
    var = ad.mean(ad.square(dr) + ad.square(di))
    if var.value <= 0:
        raise ValueError("normalize: all constellation points coincide")
    inv = 1.0 / ad.sqrt(var)
    n = c_re.shape[0]
    return ad.concat([ad.reshape(dr * inv, (n, 1)), ad.reshape(di * inv, (n, 1))], axis=1)


def subset_indices(m: int, m_max: int) -> np.ndarray:
    if not 1 <= m <= m_max:
        raise ValueError(f"subset: M={m} outside [1, {m_max}]")
    step = 1 << (m_max - m)
    return np.arange(1 << m) * step


@dataclass(frozen=True)
class SubsetView:
    order: int
    indices: np.ndarray
    points: np.ndarray

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))

    def labels(self) -> np.ndarray:
        """Bit labels (2^M, M), MSB first; label i belongs to points[i]."""
        i = np.arange(len(self.points))
        return ((i[:, None] >> np.arange(self.order - 1, -1, -1)) & 1).astype(np.int8)


def subset(points: np.ndarray, m: int) -> SubsetView:
    m_max = int(np.log2(len(points)))
    idx = subset_indices(m, m_max)
    return SubsetView(m, idx, np.asarray(points)[idx])


class Constellation:
    """Unnormalized trainable points; normalization runs inside every
    forward graph so gradients flow through it."""

    def __init__(self, m_max: int, c_re: np.ndarray | None = None, c_im: np.ndarray | None = None,
                 trainable: bool = True):
        self.m_max = m_max
        if c_re is None:
            init = qam_points(m_max)
            c_re, c_im = init.real, init.imag
        if len(c_re) != 1 << m_max or len(c_im) != 1 << m_max:
            raise ValueError("Constellation: need 2^M_max points")
        self.c_re = ad.Parameter("const.c_re", np.array(c_re), trainable, "constellation")
        self.c_im = ad.Parameter("const.c_im", np.array(c_im), trainable, "constellation")

    @classmethod
    def init_qam(cls, m_max: int) -> "Constellation":
        return cls(m_max)

    @property
    def parameters(self) -> list[ad.Parameter]:
        return [self.c_re, self.c_im]

    @property
    def raw(self) -> np.ndarray:
        return self.c_re.value + 1j * self.c_im.value

    def normalized(self) -> np.ndarray:
        return normalize_points(self.raw)

    def node(self, graph: ad.Graph) -> ad.Node:
        return normalize_node(graph.param(self.c_re), graph.param(self.c_im))

    def subset(self, m: int) -> SubsetView:
        return subset(self.normalized(), m)

    def subset_power(self, m: int) -> float:
        return self.subset(m).power


def export_table(points: np.ndarray, m: int, path: str | Path | None = None) -> str:
    """Plain-text (index, label, re, im) table of the order-``m`` subset.

    Floats are written with ``repr`` so re-import is bit exact.
    """
    view = subset(points, m)
    lines = [f"# order={m} m_max={int(np.log2(len(points)))}", "index\tlabel\tre\tim"]
    for idx, lab, p in zip(view.indices, view.labels(), view.points):
        lines.append(f"{idx}\t{''.join(map(str, lab))}\t{float(p.real)!r}\t{float(p.imag)!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def import_table(text_or_path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse :func:`export_table` output into (indices, points, labels)."""
    text = text_or_path
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path):
        text = Path(text_or_path).read_text()
    idx, pts, labels = [], [], []
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("index"):
            continue
        i, lab, re, im = line.split("\t")
        idx.append(int(i))
        labels.append(lab)
        pts.append(complex(float(re), float(im)))
    return np.array(idx), np.array(pts), labels
