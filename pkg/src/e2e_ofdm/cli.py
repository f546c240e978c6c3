"""Command-line front end.

Verbs: train, finetune, evaluate, papr, export-constellation, link-adapt.
Every verb writes ``<verb>.csv`` and ``<verb>.json`` (rows plus the
effective configuration) into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .autodiff import ConfigurationError
from .checkpoint import Checkpoint, CheckpointError
from .config import build_system, checkpoint_to_system, link_config, load_config, merge, read_file, \
    set_path, system_to_checkpoint, train_config, validate
from .constellation import qam_points
from .evaluate import SWEEP_COLUMNS, SweepSpec, ccdf, export_constellation, link_adapt, sweep, \
    symbol_paprs, write_outputs
from .training import TrainState, finetune, train

log = logging.getLogger("e2e_ofdm")

CHECKPOINT_NAME = "checkpoint.e2e"


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="e2e-ofdm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--checkpoint")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.lr=0.002 (value parsed as YAML)")
    chan = argparse.ArgumentParser(add_help=False)
    chan.add_argument("--ebno", type=_floats, help="comma-separated Eb/N0 list in dB")
    chan.add_argument("--speed", type=float, help="UE speed in km/h")
    chan.add_argument("--profile", help="channel profile: flat, tdl-a .. tdl-e")
    chan.add_argument("--pilot-layout", choices=("none", "2sym"))
    chan.add_argument("--cp", type=int, choices=(0, 6))
    chan.add_argument("--noise-mismatch", type=float)
    chan.add_argument("--clip-rate", type=float)
    sub = ap.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train from scratch")
    ft = sub.add_parser("finetune", parents=[common], help="adapt a checkpoint to a new channel")
    ft.add_argument("--mode", choices=("full", "adapter-only"))
    ft.add_argument("--profile")
    ft.add_argument("--speed", type=float)
    ft.add_argument("--budget", type=int, help="number of updates (default: 25%% of pretraining)")
    ev = sub.add_parser("evaluate", parents=[common, chan], help="BER/BLER/throughput sweep")
    ev.add_argument("--mode", choices=("neural", "baseline", "perfect-csi"))
    ev.add_argument("--m", type=int, help="modulation order (default: M_max)")
    pa = sub.add_parser("papr", parents=[common], help="CCDF of per-symbol PAPR")
    pa.add_argument("--m", type=int)
    pa.add_argument("--slots", type=int)
    pa.add_argument("--clip-rate", type=float)
    ex = sub.add_parser("export-constellation", parents=[common], help="write constellation tables")
    ex.add_argument("--orders", type=_ints)
    la = sub.add_parser("link-adapt", parents=[common, chan], help="pick the highest order meeting a BLER target")
    la.add_argument("--orders", type=_ints)
    la.add_argument("--bler-target", type=float)
    return ap


def _overrides(args) -> dict:
    ov = {"seed": args.seed}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set {item!r}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        ov[k.strip()] = yaml.safe_load(v)
    g = getattr
    ov.update({
        "eval.ebno_db": g(args, "ebno", None),
        "link.pilot_layout": g(args, "pilot_layout", None),
        "link.cp_len": g(args, "cp", None),
        "eval.noise_mismatch": g(args, "noise_mismatch", None),
        "eval.clip_rate": g(args, "clip_rate", None),
    })
    return ov


def _load_run(args, needs_checkpoint: bool):
    """Returns (system, state, cfg). With a checkpoint its stored config is the
    base layer; the file and flags override it."""
    ov = _overrides(args)
    if args.checkpoint:
        system, state, cfg = checkpoint_to_system(Checkpoint.load(args.checkpoint))
        if args.config:
            cfg = merge(cfg, read_file(args.config))
        for k, v in ov.items():
            if v is not None:
                cfg = set_path(cfg, k, v)
        validate(cfg)
        system.link = link_config(cfg)
        return system, state, cfg
    if needs_checkpoint:
        raise ConfigurationError("this command needs --checkpoint")
    cfg = load_config(args.config, ov)
    return build_system(cfg), TrainState(), cfg


def _sweep_spec(cfg: dict, args, mode: str | None = None, m: int | None = None) -> SweepSpec:
    ev = cfg["eval"]
    return SweepSpec(ebno_db=list(ev["ebno_db"]), mode=mode or ev["mode"], m=m or ev["m"],
                     batch=ev["batch"], max_slots=ev["max_slots"], min_errors=ev["min_errors"],
                     max_bits=ev["max_bits"], noise_mismatch=ev["noise_mismatch"],
                     clip_rate=ev["clip_rate"], profile=getattr(args, "profile", None),
                     speed_kmh=getattr(args, "speed", None), ldpc_n=ev["ldpc_n"],
                     ldpc_seed=ev["ldpc_seed"], max_iters=ev["max_iters"], n_slot=ev["n_slot"],
                     seed=cfg["seed"])


def cmd_train(args) -> int:
    system, _, cfg = _load_run(args, needs_checkpoint=False)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    tc = train_config(cfg)
    state = train(system, tc, log_path=log_path)
    ck = system_to_checkpoint(system, state, cfg)
    ck_path = ck.save(out / CHECKPOINT_NAME)
    rows = [{"checkpoint": str(ck_path.name), "config_hash": ck.config_hash, **state.scalars()}]
    write_outputs(rows, out, "train", ck.config)
    print(ck_path)
    return 0


def cmd_finetune(args) -> int:
    system, _, cfg = _load_run(args, needs_checkpoint=True)
    ftc = cfg["finetune"]
    mode = args.mode or ftc["mode"]
    profile = args.profile or ftc["profile"]
    speed = ftc["speed_kmh"] if args.speed is None else args.speed
    tc = train_config(cfg)
    tc = replace(tc, profiles=(profile,), speed_kmh=speed, lr=ftc["lr"], lr_constellation=None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "finetune_log.jsonl"
    log_path.write_text("")
    budget = args.budget if args.budget is not None else ftc["budget"]
    state = finetune(system, tc, mode, budget, log_path=log_path)
    cfg = {**cfg, "finetune": {**ftc, "mode": mode, "profile": profile, "speed_kmh": speed}}
    ck = system_to_checkpoint(system, state, cfg)
    ck_path = ck.save(out / CHECKPOINT_NAME)
    write_outputs([{"checkpoint": ck_path.name, "mode": mode, "profile": profile,
                    "config_hash": ck.config_hash, **state.scalars()}], out, "finetune", ck.config)
    print(ck_path)
    return 0


def cmd_evaluate(args) -> int:
    mode = args.mode or "neural"
    system, _, cfg = _load_run(args, needs_checkpoint=(mode == "neural"))
    if mode == "baseline" and system.link.pilot_layout == "none":
        raise ConfigurationError("baseline mode needs --pilot-layout 2sym")
    if mode == "neural" and system.link.pilot_layout != "none":
        log.info("neural receiver evaluated with pilots present (pilot REs excluded from data)")
    spec = _sweep_spec(cfg, args, mode, args.m)
    rows = sweep(system, spec)
    write_outputs(rows, args.out_dir, "evaluate", {**cfg, "sweep": spec.__dict__}, SWEEP_COLUMNS)
    for r in rows:
        print(f"{r['ebno_db']:6.2f} dB  BER={r['ber']:.3e}  BLER={r['bler']:.3e}  "
              f"T={r['throughput_bps'] / 1e6:.4f} Mb/s")
    return 0


def cmd_papr(args) -> int:
    system, _, cfg = _load_run(args, needs_checkpoint=False)
    ev = cfg["eval"]
    points = system.constellation.normalized() if args.checkpoint else qam_points(system.m_max)
    m = args.m or ev["m"] or system.m_max
    slots = args.slots or ev["papr_slots"]
    clip_rate = args.clip_rate if args.clip_rate is not None else ev["clip_rate"]
    vals = symbol_paprs(points, m, slots, system.link.n_s, system.link.n_c, ev["papr_oversampling"],
                        clip_rate, cfg["seed"])
    thr = ev["papr_thresholds_db"]
    rows = [{"papr_db": t, "ccdf": float(c)} for t, c in zip(thr, ccdf(vals, thr))]
    write_outputs(rows, args.out_dir, "papr",
                  {**cfg, "papr": {"m": m, "slots": slots, "clip_rate": clip_rate,
                                   "source": "checkpoint" if args.checkpoint else "qam"}})
    q = np.quantile(vals, 1 - 1e-3) if vals.size >= 1000 else float("nan")
    print(f"symbols={vals.size}  mean={vals.mean():.3f} dB  PAPR@1e-3={q:.3f} dB")
    return 0


def cmd_export(args) -> int:
    system, _, cfg = _load_run(args, needs_checkpoint=True)
    pts = system.constellation.normalized()
    orders = args.orders or cfg["eval"]["export_orders"] or list(range(2, system.m_max + 1, 2)) or [1]
    paths = export_constellation(pts, orders, args.out_dir)
    rows = []
    for m in orders:
        for line in paths[m].read_text().splitlines()[2:]:
            i, lab, re, im = line.split("\t")
            rows.append({"m": m, "index": int(i), "label": lab, "re": float(re), "im": float(im)})
    write_outputs(rows, args.out_dir, "export-constellation", cfg)
    for m, p in paths.items():
        print(p)
    return 0


def cmd_link_adapt(args) -> int:
    system, _, cfg = _load_run(args, needs_checkpoint=True)
    ev = cfg["eval"]
    orders = args.orders or ev["orders"]
    target = ev["bler_target"] if args.bler_target is None else args.bler_target
    spec = _sweep_spec(cfg, args, "neural")
    rows = link_adapt(system, spec, orders, target)
    write_outputs(rows, args.out_dir, "link-adapt", {**cfg, "orders": orders, "bler_target": target})
    for r in rows:
        flag = "" if r["target_met"] else "  (target not met)"
        print(f"{r['ebno_db']:6.2f} dB  M={r['selected_m']}  BLER={r['bler']:.3e}{flag}")
    return 0


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "evaluate": cmd_evaluate, "papr": cmd_papr,
            "export-constellation": cmd_export, "link-adapt": cmd_link_adapt}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigurationError, CheckpointError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
