"""Losses, Adam, and the augmented-Lagrangian training loop.

One outer iteration runs ``T`` optimizer steps on
``ce + λ·lp + μ/2·lp²``; afterwards the PAPR penalty is re-measured on a fresh
batch, ``λ ← λ + μ·lp`` and ``μ ← τ·μ``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .link import Batch, System, oversampled_power_graph
from .phy import oversampled_ifft
from .receiver import partition

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def ce_loss(llr: ad.Node, bits: np.ndarray, weight: np.ndarray | None = None) -> ad.Node:
    """Mean binary cross-entropy with P(b=1) = sigmoid(LLR), in logits form:
    softplus(L) - b·L."""
    if llr.shape != bits.shape:
        raise ad.ShapeError("ce_loss", "bits", f"LLR {llr.shape} vs bits {bits.shape}")
    b = llr.graph.constant(bits.astype(float))
    per = ad.softplus(llr) - llr * b
    if weight is None:
        return ad.mean(per)
    w = np.broadcast_to(weight, bits.shape).astype(float)
    return ad.sum(per * llr.graph.constant(w)) / float(w.sum())


def ce_loss_array(llr: np.ndarray, bits: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, llr) - llr * bits))


def db_to_lin(db) -> float:
    return math.inf if db is None or db == math.inf else 10.0 ** (float(db) / 10.0)


def papr_penalty(x: ad.Node, eps_lin: float, factor: int = 4) -> ad.Node:
    """Mean over symbols and oversampled samples of
    max(|x̃_n|² / mean_n |x̃_n|² − ε, 0). x: (..., N_s, N_c, 2) grid node."""
    p = oversampled_power_graph(x, factor)
    if math.isinf(eps_lin):
        return p.graph.constant(0.0) * ad.mean(p)
    ratio = p / ad.mean(p, axis=-1, keepdims=True)
    return ad.mean(ad.maximum0(ratio - eps_lin))


def papr_penalty_array(grid: np.ndarray, eps_lin: float, factor: int = 4) -> float:
    if math.isinf(eps_lin):
        return 0.0
    p = np.abs(oversampled_ifft(grid, factor)) ** 2
    ratio = p / p.mean(axis=-1, keepdims=True)
    return float(np.mean(np.maximum(ratio - eps_lin, 0.0)))


def aug_lagrangian(ce, lp, lam: float, mu: float):
    if mu <= 0:
        raise ValueError("aug_lagrangian: μ must be positive")
    return ce + lp * lam + lp * lp * (mu / 2.0)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Parameter], grads: dict[str, np.ndarray], lr,
              state: AdamState, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of every parameter that has a gradient.
    ``lr`` is a float or a per-partition dict."""
    for name, g in grads.items():
        p = params[name]
        if not p.trainable:
            continue
        rate = lr[p.partition] if isinstance(lr, dict) else lr
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        t = state.t.get(name, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.value -= rate * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name], state.t[name] = m, v, t


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


# --------------------------------------------------------------------------
# configuration and state
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    outer_iters: int = 2500  # K
    inner_steps: int = 12  # T
    papr_target_db: float | None = None  # None: unconstrained
    lr: float = 1e-3
    lr_constellation: float | None = None  # defaults to lr
    ebno_db_range: tuple[float, float] = (-10.0, 5.0)
    orders: tuple[int, ...] = (2,)
    mode: str = "full"
    profiles: tuple[str, ...] = ("flat",)
    speed_kmh: float = 0.0
    seed: int = 0
    lambda0: float = 0.0
    mu0: float = 0.1
    tau: float = 1.004
    grad_clip: float = 10.0
    oversampling: int = 4
    penalty_batch: int | None = None  # fresh-batch size for the λ update

    @property
    def eps_lin(self) -> float:
        return db_to_lin(self.papr_target_db)

    def lr_map(self) -> dict[str, float]:
        lc = self.lr if self.lr_constellation is None else self.lr_constellation
        return {"backbone": self.lr, "adapter": self.lr, "mask": self.lr, "constellation": lc}


@dataclass
class TrainState:
    lam: float = 0.0
    mu: float = 0.1
    k: int = 0
    tau: float = 1.004
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)

    def scalars(self) -> dict:
        return {"lam": self.lam, "mu": self.mu, "k": self.k, "tau": self.tau, "step": self.step}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


def _step_seed(seed: int, *parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *parts])


def sample_training_batch(system: System, cfg: TrainConfig, step: int, batch: int | None = None) -> Batch:
    rng = np.random.default_rng(_step_seed(cfg.seed, 1, step))
    m = int(rng.choice(cfg.orders))
    lo, hi = cfg.ebno_db_range
    bs = batch or cfg.batch_size
    ebno = rng.uniform(lo, hi, size=bs)
    profile = cfg.profiles[int(rng.integers(len(cfg.profiles)))]
    return system.sample_batch(bs, m, ebno, rng, profile=profile, speed_kmh=cfg.speed_kmh)


def loss_and_grads(system: System, b: Batch, lam: float, mu: float, eps_lin: float, factor: int = 4):
    g = ad.Graph()
    llr, x = system.loss_graph(g, b)
    ce = ce_loss(llr, b.bits)
    lp = papr_penalty(x, eps_lin, factor)
    total = aug_lagrangian(ce, lp, lam, mu)
    grads = ad.backward(g, total)
    return float(ce.value), float(lp.value), float(total.value), grads


def measure_penalty(system: System, cfg: TrainConfig, key: int, n_slots: int | None = None) -> float:
    """Monte-Carlo L_P on fresh random slots (no channel needed)."""
    rng = np.random.default_rng(_step_seed(cfg.seed, 2, key))
    n = n_slots or cfg.penalty_batch or cfg.batch_size
    m = int(rng.choice(cfg.orders))
    lk = system.link
    bits = rng.integers(0, 2, size=(n, m, lk.n_s, lk.n_c), dtype=np.int8)
    return papr_penalty_array(system.tx_grid(bits), cfg.eps_lin, cfg.oversampling)


def train(system: System, cfg: TrainConfig, state: TrainState | None = None,
          log_path: str | Path | None = None, callback=None) -> TrainState:
    """Run ``cfg.outer_iters`` outer iterations of ``cfg.inner_steps`` steps.
    Parameters of ``system`` are updated in place."""
    if state is None:
        state = TrainState(lam=cfg.lambda0, mu=cfg.mu0, tau=cfg.tau)
    partition(system.parameters(), cfg.mode)
    params = {p.name: p for p in system.parameters()}
    lrs = cfg.lr_map()
    eps = cfg.eps_lin
    fh = open(log_path, "a") if log_path else None
    try:
        for _ in range(cfg.outer_iters):
            for _ in range(cfg.inner_steps):
                b = sample_training_batch(system, cfg, state.step)
                ce, lp, total, grads = loss_and_grads(system, b, state.lam, state.mu, eps, cfg.oversampling)
                if not all(math.isfinite(v) for v in (ce, lp, total)):
                    raise DivergenceError(f"non-finite loss at step {state.step}")
                grads, gnorm = clip_by_global_norm(grads, cfg.grad_clip)
                adam_step(params, grads, lrs, state.adam)
                rec = {"step": state.step, "k": state.k, "ce": ce, "lp": lp, "lam": state.lam,
                       "mu": state.mu, "grad_norm": gnorm, "m": b.m}
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if callback:
                    callback(rec)
                state.step += 1
            lp_fresh = measure_penalty(system, cfg, state.k) if not math.isinf(eps) else 0.0
            state.lam += state.mu * lp_fresh
            state.k += 1
            state.mu = cfg.mu0 * cfg.tau ** state.k
            if fh:
                fh.write(json.dumps({"outer": state.k, "lp_fresh": lp_fresh, "lam": state.lam,
                                     "mu": state.mu}) + "\n")
    finally:
        if fh:
            fh.close()
    return state


def mu_schedule(mu0: float, tau: float, k: int) -> float:
    return mu0 * tau ** k


def finetune(system: System, cfg: TrainConfig, mode: str = "adapter-only", budget: int | None = None,
             pretrain_updates: int | None = None, reinsert_adapters: bool = True,
             log_path=None, callback=None) -> TrainState:
    """Adapt a pretrained system to ``cfg.profiles``.

    ``budget`` is the number of updates; by default a quarter of
    ``pretrain_updates`` (or of the config's K·T). Adapters are (re)inserted
    with zero W_up so fine-tuning starts from the pretrained function.
    """
    if mode not in ("full", "adapter-only"):
        raise ad.ConfigurationError(f"unknown fine-tuning mode '{mode}'")
    total = pretrain_updates if pretrain_updates is not None else cfg.outer_iters * cfg.inner_steps
    budget = budget if budget is not None else max(1, total // 4)
    if reinsert_adapters and not system.use_adapters:
        system.receiver.reset_adapters(np.random.default_rng(_step_seed(cfg.seed, 3)))
    system.use_adapters = True
    inner = max(1, min(cfg.inner_steps, budget))
    outer = max(1, budget // inner)
    ft = TrainConfig(**{**asdict(cfg), "mode": mode, "outer_iters": outer, "inner_steps": inner})
    return train(system, ft, log_path=log_path, callback=callback)
