"""Layered run configuration (built-in defaults -> file -> overrides) and
conversion between :class:`System` objects and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .autodiff import ConfigurationError, Parameter
from .checkpoint import Checkpoint, TensorEntry
from .constellation import Constellation
from .link import LinkConfig, System
from .receiver import NeuralReceiver, ReceiverConfig
from .training import AdamState, TrainConfig, TrainState, config_hash

log = logging.getLogger(__name__)

_RX_KEYS = ("m_max", "n_blocks", "channels", "gamma", "af_hidden", "adapter_kernel",
            "input_kernel", "blocks", "mask_init")

DEFAULTS: dict = {
    "seed": 0,
    "link": asdict(LinkConfig()),
    "receiver": {k: v for k, v in asdict(ReceiverConfig()).items() if k in _RX_KEYS},
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "finetune": {"mode": "adapter-only", "budget": None, "profile": "tdl-c", "speed_kmh": 30.0,
                 "lr": 5e-4, "outer_iters": None},
    "eval": {"ebno_db": [-5.0, 0.0, 5.0], "mode": "neural", "m": None, "batch": 4,
             "max_slots": 50, "min_errors": 100, "max_bits": 1_000_000, "noise_mismatch": 1.0,
             "clip_rate": None, "orders": [2], "bler_target": 0.1, "ldpc_n": 1008,
             "ldpc_seed": 0, "max_iters": 20, "n_slot": 2000,
             "papr_slots": 1000, "papr_oversampling": 4,
             "papr_thresholds_db": [float(x) for x in np.arange(0.0, 12.25, 0.25)],
             "export_orders": None},
    "use_adapters": False,
}
DEFAULTS["train"]["papr_target_db"] = None
DEFAULTS["train"]["ebno_db_range"] = [-10.0, 5.0]
DEFAULTS["train"]["orders"] = [2]
DEFAULTS["train"]["profiles"] = ["flat"]

_TUPLE_KEYS = {("train", "ebno_db_range"), ("train", "orders"), ("train", "profiles"),
               ("receiver", "input_kernel")}


def read_file(path) -> dict:
    """JSON or YAML (key: value) file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def _check_type(where: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) \
                and not value.is_integer():
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return type(default)(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)) and not isinstance(value, (list, tuple)):
        raise ConfigurationError(f"{where}: expected a list, got {value!r}")
    return value


def merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in out:
            raise ConfigurationError(f"{key}: unknown configuration key")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"{key}: expected a section")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = _check_type(key, out[k], v)
    return out


def set_path(cfg: dict, dotted: str, value):
    """Apply one override ``a.b=value``."""
    parts = dotted.split(".")
    node = {}
    cur = node
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return merge(cfg, node)


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    raw = read_file(path) if path else {}
    if path and "papr_target_db" not in raw.get("train", {}):
        log.info("train.papr_target_db not set: training is unconstrained (target = inf)")
    cfg = merge(cfg, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg = set_path(cfg, k, v)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    lk = cfg["link"]
    if lk["cp_len"] < 0 or lk["cp_len"] >= lk["n_c"]:
        raise ConfigurationError(f"link.cp_len: must lie in [0, {lk['n_c']})")
    if lk["pilot_layout"] not in ("none", "2sym"):
        raise ConfigurationError("link.pilot_layout: expected 'none' or '2sym'")
    if not 0 < lk["rate"] <= 1:
        raise ConfigurationError("link.rate: must lie in (0, 1]")
    rx = cfg["receiver"]
    if rx["channels"] % rx["gamma"]:
        raise ConfigurationError("receiver.channels: must be divisible by receiver.gamma")
    tr = cfg["train"]
    if any(not 1 <= m <= rx["m_max"] for m in tr["orders"]):
        raise ConfigurationError("train.orders: every order must lie in [1, receiver.m_max]")
    if tr["mode"] not in ("full", "adapter-only"):
        raise ConfigurationError("train.mode: expected 'full' or 'adapter-only'")
    if tr["batch_size"] < 1 or tr["outer_iters"] < 0 or tr["inner_steps"] < 0:
        raise ConfigurationError("train.batch_size/outer_iters/inner_steps: must be nonnegative")
    if cfg["eval"]["mode"] not in ("neural", "baseline", "perfect-csi"):
        raise ConfigurationError("eval.mode: expected neural, baseline or perfect-csi")


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def link_config(cfg: dict) -> LinkConfig:
    return LinkConfig(**cfg["link"])


def receiver_config(cfg: dict) -> ReceiverConfig:
    lk = cfg["link"]
    rx = dict(cfg["receiver"])
    rx["input_kernel"] = tuple(rx["input_kernel"])
    if rx.get("blocks") is not None:
        rx["blocks"] = tuple((tuple(k), tuple(d)) for k, d in rx["blocks"])
    return ReceiverConfig(n_r=lk["n_r"], n_s=lk["n_s"], n_c=lk["n_c"], **rx)


def train_config(cfg: dict) -> TrainConfig:
    tr = dict(cfg["train"])
    for sec, key in _TUPLE_KEYS:
        if sec == "train":
            tr[key] = tuple(tr[key])
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(seed=cfg["seed"], **{k: v for k, v in tr.items() if k in names})


def build_system(cfg: dict) -> System:
    return System.init(link_config(cfg), receiver_config(cfg), cfg["seed"], cfg["use_adapters"])


# --------------------------------------------------------------------------
# checkpoint bridge
# --------------------------------------------------------------------------

def _jsonable(cfg):
    return json.loads(json.dumps(cfg, default=lambda o: None if o is math.inf else str(o)))


def system_to_checkpoint(system: System, state: TrainState | None, cfg: dict) -> Checkpoint:
    ck = Checkpoint()
    for p in system.parameters():
        ck.tensors[p.name] = TensorEntry(p.value.copy(), p.partition, p.trainable)
    st = state or TrainState()
    for name in sorted(st.adam.m):
        ck.tensors[f"opt.m/{name}"] = TensorEntry(st.adam.m[name], "optimizer", False)
        ck.tensors[f"opt.v/{name}"] = TensorEntry(st.adam.v[name], "optimizer", False)
    ck.state = {**st.scalars(), "adam_t": dict(sorted(st.adam.t.items()))}
    ck.config = _jsonable({**cfg, "use_adapters": system.use_adapters})
    ck.config_hash = config_hash(ck.config)
    ck.meta = {"format": "e2e-ofdm checkpoint", "package_version": __version__}
    return ck


def checkpoint_to_system(ck: Checkpoint) -> tuple[System, TrainState, dict]:
    cfg = merge(copy.deepcopy(DEFAULTS), ck.config)
    rc = receiver_config(cfg)
    system = System(link_config(cfg), Constellation(rc.m_max), NeuralReceiver(rc), cfg["use_adapters"])
    for name, e in ck.tensors.items():
        if e.partition == "optimizer":
            continue
        if name.startswith("const."):
            p = system.constellation.c_re if name == "const.c_re" else system.constellation.c_im
            p.value = e.value.copy()
            p.trainable = e.trainable
        else:
            system.receiver.params[name] = Parameter(name, e.value.copy(), e.trainable, e.partition)
    expected = list(NeuralReceiver.init(rc, 0).params)
    if set(system.receiver.params) != set(expected):
        missing = sorted(set(expected) - set(system.receiver.params))
        raise ConfigurationError(f"checkpoint does not match its receiver config (missing {missing[:3]})")
    # keep the construction order so parameter iteration matches a fresh system
    system.receiver.params = {k: system.receiver.params[k] for k in expected}
    s = ck.state
    adam = AdamState()
    for name, t in s.get("adam_t", {}).items():
        adam.t[name] = int(t)
        adam.m[name] = ck.tensors[f"opt.m/{name}"].value.copy()
        adam.v[name] = ck.tensors[f"opt.v/{name}"].value.copy()
    state = TrainState(s.get("lam", 0.0), s.get("mu", 0.1), s.get("k", 0), s.get("tau", 1.004),
                       s.get("step", 0), adam)
    return system, state, cfg
