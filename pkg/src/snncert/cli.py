"""Command-line entry point.

Subcommands: train, robust-train, certify, attack, eval, synth-data. Options
resolve in three layers: built-in defaults, then an INI-style config file
(section per subcommand, key=value with the same names as the long flags),
then explicit command-line flags. Every artifact-producing run writes a
manifest with the fully resolved configuration so it can be reproduced
exactly.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

import argparse
import configparser
import csv
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from .attack import AttackConfig, evaluate
from .data import (load_event_dir, load_idx, save_idx, synth_bars,
                   synth_blobs, synth_spike_bars)
from .input_box import RNG_NAME, derive_seed
from .kernels import DTYPE
from .linear_bounds import is_certified, margin_lower_bounds
from .network import LifParams, init_network, load_checkpoint
from .training import TrainConfig, accuracy, train_natural, train_robust


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_kv(spec: str) -> dict:
    out = {}
    if not spec:
        return out
    for part in spec.split(","):
        key, _, val = part.partition("=")
        if not val:
            raise UsageError(f"bad dataset option {part!r} (want key=value)")
        out[key.strip()] = val.strip()
    return out


def load_dataset(spec: str, seed: int, tsteps: int):
    """Dataset specs: bars[:k=v,...], blobs[:...], spike-bars[:...],
    idx:IMAGES,LABELS, events:DIR."""
    kind, _, rest = spec.partition(":")
    if kind == "bars":
        kv = _parse_kv(rest)
        return synth_bars(int(kv.get("n", 2000)), seed, int(kv.get("classes", 10)),
                          int(kv.get("height", 10)),
                          int(kv["width"]) if "width" in kv else None)
    if kind == "blobs":
        kv = _parse_kv(rest)
        return synth_blobs(int(kv.get("n", 2000)), seed, int(kv.get("classes", 2)),
                           int(kv.get("dim", 16)))
    if kind == "spike-bars":
        kv = _parse_kv(rest)
        return synth_spike_bars(int(kv.get("n", 2000)), seed, tsteps,
                                int(kv.get("classes", 10)), int(kv.get("height", 10)),
                                int(kv["width"]) if "width" in kv else None)
    if kind == "idx":
        paths = rest.split(",")
        if len(paths) != 2:
            raise UsageError("idx dataset needs idx:IMAGES_PATH,LABELS_PATH")
        for p in paths:
            if not os.path.exists(p):
                raise UsageError(f"dataset file not found: {p}")
        return load_idx(paths[0], paths[1])
    if kind == "events":
        if not rest:
            raise UsageError("events dataset needs events:DIR")
        if not os.path.isdir(rest):
            raise UsageError(f"dataset directory not found: {rest}")
        return load_event_dir(rest, tsteps)
    raise UsageError(f"unknown dataset spec {spec!r}")


COMMON_DEFAULTS = {
    "seed": 0, "workers": 1, "arch": "X-FC128-FC10", "time_steps": 10,
    "threshold": 0.25, "decay": 0.25, "dataset": "bars", "test_dataset": "",
    "out": "",
}

COMMAND_DEFAULTS = {
    "train": {"epochs": 80, "batch_size": 64, "lr": 0.01, "lr_after": 0.001,
              "lr_drop_epoch": 55, "optimizer": "sgd", "eval_examples": 256,
              "checkpoint_every": 0},
    "robust-train": {"eps": 0.12, "tprime": 3, "epochs_total": 300,
                     "ramp_epochs": 250, "kappa": 0.5, "lr": 0.001,
                     "batch_size": 64, "optimizer": "sgd", "eval_examples": 256,
                     "checkpoint_every": 0, "init": ""},
    "certify": {"checkpoint": "", "eps": 0.12, "tprime": 0, "examples": 300},
    "attack": {"checkpoint": "", "eps_attack": "0.1", "examples": 300,
               "max_iters": 20, "divisor": 0},
    "eval": {"checkpoint": "", "examples": 1000},
    "synth-data": {"kind": "bars", "n": 2000, "classes": 10},
}


def _add_flags(parser, defaults):
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            parser.add_argument(flag, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
        elif isinstance(val, int):
            parser.add_argument(flag, default=None, type=int)
        elif isinstance(val, float):
            parser.add_argument(flag, default=None, type=float)
        else:
            parser.add_argument(flag, default=None, type=str)


def build_parser() -> _Parser:
    parser = _Parser(prog="snncert", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="INI config file")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_DEFAULTS:
        p = sub.add_parser(name)
        _add_flags(p, COMMON_DEFAULTS)
        _add_flags(p, COMMAND_DEFAULTS[name])
    return parser


def resolve_config(args) -> dict:
    """defaults < config file ([common] then [<command>]) < explicit flags."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[args.command])
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        ini = configparser.ConfigParser()
        ini.read(args.config)
        for section in ("common", args.command):
            if section not in ini:
                continue
            for key, val in ini[section].items():
                key = key.replace("-", "_")
                if key not in cfg:
                    raise UsageError(f"unknown config key {key!r} in [{section}]")
                cfg[key] = type(cfg[key])(val) if not isinstance(cfg[key], bool) \
                    else val.lower() in ("1", "true", "yes")
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    return cfg


def write_manifest(cfg: dict, out_dir: str):
    manifest = {
        "command": cfg["command"],
        "config": {k: v for k, v in cfg.items() if k != "command"},
        "seed": cfg["seed"],
        "rng": RNG_NAME,
        "versions": {"snncert": __version__, "torch": torch.__version__,
                     "numpy": np.__version__,
                     "python": ".".join(map(str, sys.version_info[:3]))},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _require_out(cfg) -> str:
    if not cfg["out"]:
        raise UsageError(f"{cfg['command']} requires --out")
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _datasets(cfg):
    train = load_dataset(cfg["dataset"], cfg["seed"], cfg["time_steps"])
    test_spec = cfg["test_dataset"] or cfg["dataset"]
    test_seed = cfg["seed"] if cfg["test_dataset"] else cfg["seed"] + 1
    test = load_dataset(test_spec, test_seed, cfg["time_steps"])
    return train, test


def _test_set(cfg):
    spec = cfg["test_dataset"] or cfg["dataset"]
    seed = cfg["seed"] + 1 if not cfg["test_dataset"] else cfg["seed"]
    return load_dataset(spec, seed, cfg["time_steps"])


def _fresh_network(cfg, input_shape):
    lif = LifParams(cfg["threshold"], cfg["decay"])
    return init_network(cfg["arch"], input_shape, cfg["seed"], lif, cfg["time_steps"])


def _load_net(cfg):
    if not cfg["checkpoint"]:
        raise UsageError(f"{cfg['command']} requires --checkpoint")
    if not os.path.exists(cfg["checkpoint"]):
        raise UsageError(f"checkpoint not found: {cfg['checkpoint']}")
    return load_checkpoint(cfg["checkpoint"])


def cmd_train(cfg) -> int:
    out = _require_out(cfg)
    write_manifest(cfg, out)
    train_set, test_set = _datasets(cfg)
    net = _fresh_network(cfg, train_set.input_shape)
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                     lr=cfg["lr"], lr_after=cfg["lr_after"],
                     lr_drop_epoch=cfg["lr_drop_epoch"], optimizer=cfg["optimizer"],
                     seed=cfg["seed"], eval_examples=cfg["eval_examples"],
                     checkpoint_every=cfg["checkpoint_every"])
    train_natural(net, train_set, test_set, tc, out)
    return 0


def cmd_robust_train(cfg) -> int:
    out = _require_out(cfg)
    write_manifest(cfg, out)
    train_set, test_set = _datasets(cfg)
    if cfg["init"]:
        net = load_checkpoint(cfg["init"])
    else:
        net = _fresh_network(cfg, train_set.input_shape)
    tc = TrainConfig(batch_size=cfg["batch_size"], seed=cfg["seed"],
                     optimizer=cfg["optimizer"], eval_examples=cfg["eval_examples"],
                     checkpoint_every=cfg["checkpoint_every"],
                     epochs_total=cfg["epochs_total"], ramp_epochs=cfg["ramp_epochs"],
                     eps_final=cfg["eps"], tprime=cfg["tprime"],
                     robust_lr=cfg["lr"], kappa=cfg["kappa"])
    train_robust(net, train_set, test_set, tc, out)
    return 0


def cmd_certify(cfg) -> int:
    out = _require_out(cfg)
    write_manifest(cfg, out)
    net = _load_net(cfg)
    test = _test_set(cfg)
    if test.input_shape != net.input_shape:
        raise RuntimeError(f"checkpoint input shape {net.input_shape} does not "
                           f"match dataset {test.input_shape}")
    tprime = cfg["tprime"] or net.time_steps
    n = min(cfg["examples"], len(test))
    from .training import _build_box
    from .input_box import sample_through_maps
    from .network import run_network
    rows = []
    bad = 0
    for i in range(n):
        if test.kind == "digital":
            x = test.images[i:i + 1]
        else:
            x = test.spikes[i:i + 1]
        y = int(test.labels[i])
        box = _build_box(net, x, test.kind, cfg["eps"], tprime,
                         derive_seed(cfg["seed"], 5, i))
        center = sample_through_maps(x, box.rand_maps) if test.kind == "digital" \
            else x.movedim(1, 0)[:tprime].to(DTYPE)
        with torch.no_grad():
            trace = run_network(net, center)
            margins = margin_lower_bounds(net, box, tprime, [y])
        pred = int(np.argmax(trace.output_counts.numpy(), axis=-1)[0])
        cert = bool(is_certified(margins, [y])[0]) and pred == y
        bad += 0 if cert else 1
        worst = float(margins[0][torch.arange(net.num_classes) != y].min())
        rows.append({"example": i, "label": y, "prediction": pred,
                     "certified": int(cert), "worst_margin": worst})
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    summary = {"eps": cfg["eps"], "tprime": tprime, "examples": n,
               "verified_error": bad / n}
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(f"verified error at eps={cfg['eps']}: {bad / n:.4f} ({n} examples)")
    return 0


def cmd_attack(cfg) -> int:
    out = _require_out(cfg)
    write_manifest(cfg, out)
    net = _load_net(cfg)
    test = _test_set(cfg)
    eps_list = [float(e) for e in str(cfg["eps_attack"]).split(",") if e]
    rows = []
    for eps in eps_list:
        ac = AttackConfig(eps=eps, max_iters=cfg["max_iters"], divisor=cfg["divisor"],
                          examples=cfg["examples"], seed=cfg["seed"])
        result = evaluate(net, test, ac, workers=cfg["workers"])
        rows.append({"attack_eps": eps, "org_err": result.org_err,
                     "attack_err": result.attack_err,
                     "delta": result.attack_err - result.org_err})
        print(f"eps={eps}: org_err={result.org_err:.4f} "
              f"attack_err={result.attack_err:.4f}")
    with open(os.path.join(out, "attack.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["attack_eps", "org_err", "attack_err", "delta"])
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump({"results": rows}, f, indent=2)
    return 0


def cmd_eval(cfg) -> int:
    net = _load_net(cfg)
    test = _test_set(cfg)
    acc = accuracy(net, test, cfg["seed"], cfg["examples"])
    print(f"accuracy: {acc:.4f} ({min(cfg['examples'], len(test))} examples)")
    if cfg["out"]:
        out = _require_out(cfg)
        write_manifest(cfg, out)
        with open(os.path.join(out, "report.json"), "w") as f:
            json.dump({"accuracy": acc}, f, indent=2)
    return 0


def cmd_synth_data(cfg) -> int:
    out = _require_out(cfg)
    write_manifest(cfg, out)
    for split, seed in (("train", cfg["seed"]), ("test", cfg["seed"] + 1)):
        if cfg["kind"] == "bars":
            ds = synth_bars(cfg["n"], seed, cfg["classes"])
        elif cfg["kind"] == "blobs":
            ds = synth_blobs(cfg["n"], seed, cfg["classes"])
        else:
            raise UsageError(f"unknown synthetic kind {cfg['kind']!r}")
        images = (ds.images.squeeze(1).numpy() * 255).round().astype(np.uint8)
        save_idx(images, ds.labels.numpy(),
                 os.path.join(out, f"{split}-images.idx"),
                 os.path.join(out, f"{split}-labels.idx"))
    print(f"wrote {cfg['kind']} IDX files to {out}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "robust-train": cmd_robust_train,
    "certify": cmd_certify,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return HANDLERS[cfg["command"]](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
