"""Monte-Carlo evaluation: coded BER/BLER sweeps, throughput, PAPR CCDF,
constellation export and link adaptation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constellation import export_table, qam_points, subset
from .ldpc import LdpcCode, make_code
from .link import System, clip_grid
from .phy import clip, oversampled_ifft, papr

N_SLOT = 2000
N_RE = 1008

SWEEP_COLUMNS = ("ebno_db", "mode", "m", "ber", "ber_ci95", "bler", "bler_ci95", "uncoded_ber",
                 "throughput_bps", "rho", "n_bits", "n_bit_errors", "n_blocks", "n_block_errors", "n_slots")


def data_rate_factor(pilot_layout: str, cp_len: int, n_s: int = 14, n_c: int = 72) -> float:
    """ρ: share of REs carrying data times the CP efficiency."""
    data = n_s - (2 if pilot_layout == "2sym" else 0)
    return data / n_s * n_c / (n_c + cp_len)


def throughput(bler, m: int, rate: float, rho: float, n_slot: int = N_SLOT, n_re: int = N_RE):
    """Bits per second: N_slot · N_RE · r · ρ · M · (1 − BLER)."""
    bler = np.asarray(bler, dtype=float)
    if np.any((bler < 0) | (bler > 1)):
        raise ValueError("throughput: BLER must lie in [0, 1]")
    return n_slot * n_re * rate * rho * m * (1.0 - bler)


def ci95(p: float, n: int) -> float:
    return 1.96 * math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan


class SlotCoder:
    """Places an integer number of codewords on a slot's data bits.

    Remaining bit positions carry zero padding, which is transmitted but
    excluded from every error count. Codeword bits are spread over the slot
    by a seeded interleaver.
    """

    def __init__(self, code: LdpcCode, data_mask: np.ndarray, m: int, seed: int = 0):
        self.code, self.m = code, m
        self.data_mask = data_mask
        n_bits = int(data_mask.sum()) * m
        self.n_cw = n_bits // code.n
        if self.n_cw == 0:
            raise ValueError(f"slot carries {n_bits} data bits, fewer than one codeword (n={code.n})")
        self.n_bits = n_bits
        self.perm = np.random.default_rng(seed).permutation(n_bits)[: self.n_cw * code.n]

    @property
    def info_bits(self) -> int:
        return self.n_cw * self.code.k

    def to_grid(self, cw: np.ndarray) -> np.ndarray:
        """cw (B, n_cw, n) -> bit grid (B, M, N_s, N_c)."""
        b = cw.shape[0]
        vec = np.zeros((b, self.n_bits), dtype=np.int8)
        vec[:, self.perm] = cw.reshape(b, -1)
        grid = np.zeros((b,) + self.data_mask.shape + (self.m,), dtype=np.int8)
        grid[:, self.data_mask] = vec.reshape(b, -1, self.m)
        return np.moveaxis(grid, -1, 1)

    def from_grid(self, llr: np.ndarray) -> np.ndarray:
        """LLR grid (B, M, N_s, N_c) -> codeword LLRs (B, n_cw, n)."""
        b = llr.shape[0]
        vec = np.moveaxis(llr, 1, -1)[:, self.data_mask].reshape(b, -1)
        return vec[:, self.perm].reshape(b, self.n_cw, self.code.n)


@dataclass
class SweepSpec:
    ebno_db: list
    mode: str = "neural"
    m: int | None = None
    batch: int = 4
    max_slots: int = 50
    min_errors: int = 100
    max_bits: int = 1_000_000
    noise_mismatch: float = 1.0
    clip_rate: float | None = None
    profile: str | None = None
    speed_kmh: float | None = None
    ldpc_n: int = 1008
    ldpc_seed: int = 0
    max_iters: int = 20
    n_slot: int = N_SLOT
    seed: int = 0


def sweep(system: System, spec: SweepSpec, code: LdpcCode | None = None) -> list[dict]:
    m = spec.m or system.m_max
    lk = system.link
    pat = lk.pattern()
    code = code or make_code(spec.ldpc_n, seed=spec.ldpc_seed)
    coder = SlotCoder(code, pat.data_mask, m, spec.ldpc_seed)
    rho = lk.rho
    rows = []
    for i, ebno in enumerate(spec.ebno_db):
        n_bits = n_err = n_blk = n_blk_err = n_slots = 0
        unc_err = unc_bits = 0
        j = 0
        while n_slots < spec.max_slots and n_err < spec.min_errors and n_bits < spec.max_bits:
            bs = min(spec.batch, spec.max_slots - n_slots)
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i, j]))
            b = system.sample_batch(bs, m, ebno, rng, spec.profile, spec.speed_kmh)
            info = rng.integers(0, 2, size=(bs, coder.n_cw, code.k), dtype=np.int8)
            cw = code.encode(info)
            b.bits = coder.to_grid(cw)
            llr = system.run_slot(b, spec.mode, spec.noise_mismatch, spec.clip_rate)
            cllr = coder.from_grid(llr)
            unc_err += int(np.sum((cllr > 0) != (cw == 1)))
            unc_bits += cw.size
            dec, _, _, _ = code.decode(cllr, spec.max_iters)
            errs = dec != info
            n_err += int(errs.sum())
            n_bits += info.size
            n_blk += info.shape[0] * info.shape[1]
            n_blk_err += int(errs.any(axis=-1).sum())
            n_slots += bs
            j += 1
        ber = n_err / n_bits
        bler = n_blk_err / n_blk
        rows.append({"ebno_db": float(ebno), "mode": spec.mode, "m": m, "ber": ber,
                     "ber_ci95": ci95(ber, n_bits), "bler": bler, "bler_ci95": ci95(bler, n_blk),
                     "uncoded_ber": unc_err / unc_bits,
                     "throughput_bps": float(throughput(bler, m, lk.rate, rho, spec.n_slot)),
                     "rho": rho, "n_bits": n_bits, "n_bit_errors": n_err, "n_blocks": n_blk,
                     "n_block_errors": n_blk_err, "n_slots": n_slots})
    return rows


# --------------------------------------------------------------------------
# PAPR
# --------------------------------------------------------------------------

def symbol_paprs(points: np.ndarray, m: int, n_slots: int, n_s: int = 14, n_c: int = 72,
                 factor: int = 4, clip_rate: float | None = None, seed=0) -> np.ndarray:
    """Per-OFDM-symbol PAPR (dB) of random slots mapped onto the order-m subset."""
    view = subset(np.asarray(points), m)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(view.points), size=(n_slots, n_s, n_c))
    grid = view.points[idx]
    if clip_rate is not None:
        grid = clip_grid(grid, clip_rate)
    return papr(oversampled_ifft(grid, factor), axis=-1).reshape(-1)


def ccdf(values: np.ndarray, thresholds) -> np.ndarray:
    v = np.asarray(values)[:, None]
    return (v > np.asarray(thresholds)[None, :]).mean(axis=0)


def clipped_time_paprs(grid: np.ndarray, clip_rate: float, factor: int = 4) -> np.ndarray:
    """PAPR after clipping the oversampled waveform itself."""
    return papr(clip(oversampled_ifft(grid, factor), clip_rate, axis=-1), axis=-1)


# --------------------------------------------------------------------------
# constellation export and link adaptation
# --------------------------------------------------------------------------

def export_constellation(points: np.ndarray, orders, out_dir) -> dict[int, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for m in orders:
        p = out / f"constellation_m{m}.tsv"
        export_table(points, m, p)
        paths[m] = p
    full = int(np.log2(len(points)))
    export_table(points, full, out / "constellation.tsv")
    return paths


def select_order(bler_by_order: dict[int, float], target: float) -> tuple[int, bool]:
    """Highest order meeting the BLER target; otherwise the lowest-BLER order
    and a flag."""
    ok = [m for m, b in bler_by_order.items() if b <= target]
    if ok:
        return max(ok), True
    best = min(bler_by_order, key=lambda m: (bler_by_order[m], m))
    return best, False


def link_adapt(system: System, spec: SweepSpec, orders, target: float = 0.1) -> list[dict]:
    rows = []
    lk = system.link
    per_order = {m: sweep(system, SweepSpec(**{**spec.__dict__, "m": m})) for m in orders}
    for i, ebno in enumerate(spec.ebno_db):
        blers = {m: per_order[m][i]["bler"] for m in orders}
        m_sel, met = select_order(blers, target)
        row = {"ebno_db": float(ebno), "selected_m": m_sel, "target_met": met,
               "bler": blers[m_sel],
               "throughput_bps": float(throughput(blers[m_sel], m_sel, lk.rate, lk.rho, spec.n_slot))}
        row.update({f"bler_m{m}": blers[m] for m in orders})
        rows.append(row)
    return rows


def qam_reference(m: int) -> np.ndarray:
    return qam_points(m)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def write_outputs(rows: list[dict], out_dir, stem: str, config: dict, columns=None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(columns or (rows[0].keys() if rows else []))
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in cols})
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps({"config": config, "rows": rows}, indent=2, sort_keys=True,
                                    default=str) + "\n")
    return csv_path, json_path
