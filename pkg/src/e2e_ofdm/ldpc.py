"""Regular LDPC codes: seeded progressive-edge-growth construction, GF(2)
systematic encoder and a batched sum-product decoder.

LLRs follow the package convention log P(b=1)/P(b=0).
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def default_cache_dir() -> Path:
    return Path(os.environ.get("E2E_OFDM_CACHE", Path.home() / ".cache" / "e2e_ofdm"))


def peg_edges(n: int, dv: int, dc: int, seed: int = 0) -> np.ndarray:
    """Edge list (E, 2) of (check, variable) for a (dv, dc)-regular graph.

    Each new edge of a variable goes to a check outside the variable's
    current BFS neighbourhood when possible (largest local girth), ties broken
    by lowest check degree and then by the seeded RNG.
    """
    if (n * dv) % dc:
        raise ValueError(f"peg: n*dv={n * dv} not divisible by dc={dc}")
    m = n * dv // dc
    rng = np.random.default_rng(seed)
    chk_adj: list[list[int]] = [[] for _ in range(m)]
    var_adj: list[list[int]] = [[] for _ in range(n)]
    deg = np.zeros(m, dtype=int)
    for v in range(n):
        for _ in range(dv):
            open_ = deg < dc
            open_[var_adj[v]] = False
            if var_adj[v]:
                reach = _reachable_checks(v, var_adj, chk_adj, m)
                far = open_ & ~reach
                cand = far if far.any() else open_
            else:
                cand = open_
            idx = np.flatnonzero(cand)
            low = idx[deg[idx] == deg[idx].min()]
            c = int(rng.choice(low))
            chk_adj[c].append(v)
            var_adj[v].append(c)
            deg[c] += 1
    return np.array([(c, v) for c in range(m) for v in chk_adj[c]], dtype=np.int64)


def _reachable_checks(v0, var_adj, chk_adj, m) -> np.ndarray:
    """Checks reachable from v0, expanded until the set stops growing or
    would cover every check; returns the last set that leaves a check free."""
    seen = np.zeros(m, dtype=bool)
    seen_v = {v0}
    frontier = deque([v0])
    last = seen.copy()
    while frontier:
        nxt = deque()
        for v in frontier:
            for c in var_adj[v]:
                if not seen[c]:
                    seen[c] = True
                    for u in chk_adj[c]:
                        if u not in seen_v:
                            seen_v.add(u)
                            nxt.append(u)
        if seen.all():
            return last
        last = seen.copy()
        frontier = nxt
    return seen


def gf2_rref(h: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2) and the pivot columns."""
    r = (np.asarray(h) % 2).astype(np.uint8).copy()
    rows, cols = r.shape
    pivots: list[int] = []
    row = 0
    for col in range(cols):
        if row >= rows:
            break
        hit = np.flatnonzero(r[row:, col]) + row
        if hit.size == 0:
            continue
        p = hit[0]
        if p != row:
            r[[row, p]] = r[[p, row]]
        others = np.flatnonzero(r[:, col])
        others = others[others != row]
        r[others] ^= r[row]
        pivots.append(col)
        row += 1
    return r[:row], pivots


@dataclass
class LdpcCode:
    h: np.ndarray  # (n-k', n) uint8 parity-check matrix
    seed: int | None = None

    def __post_init__(self):
        self.h = (np.asarray(self.h) % 2).astype(np.uint8)
        rref, piv = gf2_rref(self.h)
        self.parity_pos = np.array(piv, dtype=np.int64)
        self.info_pos = np.setdiff1d(np.arange(self.n), self.parity_pos)
        self._p = rref[:, self.info_pos].astype(np.int64)  # parity = P @ info
        rows, cols = np.nonzero(self.h)
        order = np.lexsort((cols, rows))
        self._edge_chk, self._edge_var = rows[order], cols[order]

    @property
    def n(self) -> int:
        return self.h.shape[1]

    @property
    def k(self) -> int:
        return self.n - len(self.parity_pos)

    @property
    def rate(self) -> float:
        return self.k / self.n

    def generator(self) -> np.ndarray:
        """(k, n) systematic generator; G @ H^T = 0 over GF(2)."""
        return self.encode(np.eye(self.k, dtype=np.int8))

    def encode(self, info: np.ndarray) -> np.ndarray:
        info = np.asarray(info)
        if info.shape[-1] != self.k:
            raise ValueError(f"encode: expected {self.k} info bits, got {info.shape[-1]}")
        cw = np.zeros(info.shape[:-1] + (self.n,), dtype=np.int8)
        cw[..., self.info_pos] = info
        cw[..., self.parity_pos] = (info.astype(np.int64) @ self._p.T) % 2
        return cw

    def syndrome(self, cw: np.ndarray) -> np.ndarray:
        return (np.asarray(cw, dtype=np.int64) @ self.h.T.astype(np.int64)) % 2

    def extract(self, cw: np.ndarray) -> np.ndarray:
        return np.asarray(cw)[..., self.info_pos]

    def decode(self, llr: np.ndarray, max_iters: int = 20):
        """Sum-product decoding of (..., n) LLRs.

        Returns (info bits (..., k), converged (...), codeword (..., n), iterations (...)).
        """
        llr = np.asarray(llr, dtype=float)
        if llr.shape[-1] != self.n:
            raise ValueError(f"decode: expected {self.n} LLRs, got {llr.shape[-1]}")
        if not np.all(np.isfinite(llr)):
            raise ValueError("decode: LLRs must be finite")
        lead = llr.shape[:-1]
        l0 = -llr.reshape(-1, self.n)  # log P(0)/P(1)
        b = l0.shape[0]
        chk, var = self._edge_chk, self._edge_var
        m = self.h.shape[0]
        c2v = np.zeros((b, chk.size))
        hard = (l0 < 0).astype(np.int8)
        done = np.zeros(b, dtype=bool)
        iters = np.zeros(b, dtype=np.int64)
        for it in range(1, max_iters + 1):
            act = ~done
            if not act.any():
                break
            la, ca = l0[act], c2v[act]
            total = la + _segment_sum(ca, var, self.n)
            v2c = total[:, var] - ca
            # check update in the sign/magnitude domain
            mag = _phi(np.abs(v2c))
            sgn = np.where(v2c < 0, 1, 0)
            mag_sum = _segment_sum(mag, chk, m)
            sgn_sum = _segment_sum(sgn.astype(float), chk, m).astype(np.int64)
            ext_mag = _phi(mag_sum[:, chk] - mag)
            ext_sgn = (sgn_sum[:, chk] - sgn) % 2
            ca = np.where(ext_sgn == 1, -ext_mag, ext_mag)
            c2v[act] = ca
            total = la + _segment_sum(ca, var, self.n)
            h_act = (total < 0).astype(np.int8)
            hard[act] = h_act
            ok = ~self.syndrome(h_act).any(axis=1)
            iters[act] = it
            idx = np.flatnonzero(act)
            done[idx[ok]] = True
        cw = hard.reshape(lead + (self.n,))
        return self.extract(cw), done.reshape(lead), cw, iters.reshape(lead)


def _phi(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 1e-12, 60.0)
    return -np.log(np.tanh(x / 2.0))


def _segment_sum(vals: np.ndarray, seg: np.ndarray, size: int) -> np.ndarray:
    """Row-wise sum of vals (B, E) into ``size`` bins given by seg (E,)."""
    b = vals.shape[0]
    flat = (np.arange(b)[:, None] * size + seg[None, :]).ravel()
    return np.bincount(flat, weights=vals.ravel(), minlength=b * size).reshape(b, size)


def make_code(n: int = 1008, dv: int = 3, dc: int = 6, seed: int = 0,
              cache_dir: str | Path | None = None) -> LdpcCode:
    """Seeded regular code, cached to ``ldpc_n{n}_dv{dv}_dc{dc}_s{seed}.npz``."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = cache / f"ldpc_n{n}_dv{dv}_dc{dc}_s{seed}.npz"
    edges = None
    if path.exists():
        try:
            with np.load(path) as f:
                edges = f["edges"]
        except (OSError, KeyError, ValueError):
            edges = None
    if edges is None:
        edges = peg_edges(n, dv, dc, seed)
        try:
            cache.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, edges=edges)
            os.replace(tmp, path)
        except OSError:
            pass  # read-only cache dir: construction is deterministic anyway
    h = np.zeros((n * dv // dc, n), dtype=np.uint8)
    h[edges[:, 0], edges[:, 1]] = 1
    return LdpcCode(h, seed)


def toy_code(seed: int = 0) -> LdpcCode:
    """Small n=16 (3,6)-regular code used for exhaustive checks."""
    h = np.zeros((8, 16), dtype=np.uint8)
    e = peg_edges(16, 3, 6, seed)
    h[e[:, 0], e[:, 1]] = 1
    return LdpcCode(h, seed)
