"""Command-line front end: ``vtm synth|train|eval|merge|bench|sweep``.

Every command reads one JSON run config (``--config``; defaults fill the
rest). Any key can be overridden with a flag named after its JSON path, e.g.
``--merge.gamma 4`` or ``--data.grid '[8, 4, 4]'``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from .cost import baseline_config, measure_throughput, schedule_cost
from .data import Split, SynthConfig, generate
from .merging import apply_plan, merge_step_plan
from .motion import attach_motion, load_motion
from .network import NetworkConfig, NetworkParams, init_params
from .partition import select_targets
from .tensorfile import FormatError, read_sections, read_tensor, write_sections, write_tensor
from .tokens import MergeConfig, TokenError, TokenTensor
from .training import DivergenceError, TrainHyper, evaluate, hyper_dict, train

log = logging.getLogger("vtm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SWEEP_AXES = ("gamma", "r_fraction", "chunks", "strategy")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "n_classes": 4, "samples_per_class": 32, "grid": [16, 8, 8], "channels": 64, "k_sig": 6,
        "sigma": 0.5, "object_scale": 1.5, "class_scale": 1.5, "motion": "none", "motion_high": 5.0,
        "val_fraction": 0.25,
    },
    "network": {"chunk_lengths": [4, 8, 16], "heads": 2, "head_type": "classify", "aux_loss_weight": 1.0,
                "dropout": 0.1},
    "merge": {"gamma": 6, "r_fraction": 0.8, "pooling": "average", "strategy": "learnable"},
    "train": {"lr": 1e-3, "epochs": 10, "batch": 8, "weight_decay": 0.01, "warmup_fraction": 1.0 / 7.0},
    "bench": {"grid": [60, 16, 16], "channels": 32, "heads": 4, "chunk_lengths": [6, 30, 60], "trials": 5,
              "warmup": 3},
    "sweep": {"axis": "gamma", "values": [2, 6, 10], "train": False},
    "paths": {"data_dir": "data", "out_dir": "runs", "checkpoint": None},
}

_int = {"type": "integer"}
_num = {"type": "number"}
_pos = {"type": "integer", "minimum": 1}
_triple = {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({
        "n_classes": {"type": "integer", "minimum": 2}, "samples_per_class": _pos, "grid": _triple,
        "channels": _pos, "k_sig": _pos, "sigma": {"type": "number", "minimum": 0},
        "object_scale": _num, "class_scale": _num,
        "motion": {"enum": ["none", "aligned", "adversarial"]}, "motion_high": {"type": "number", "minimum": 0},
        "val_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "network": _obj({
        "chunk_lengths": _triple, "heads": _pos, "head_type": {"enum": ["classify", "regress"]},
        "aux_loss_weight": {"type": "number", "minimum": 0}, "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    }),
    "merge": _obj({
        "gamma": {"type": "integer", "minimum": 2}, "r_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "pooling": {"enum": ["average", "size_weighted", "motion_weighted"]},
        "strategy": {"enum": ["naive", "center", "boundary", "motion", "learnable"]},
    }),
    "train": _obj({
        "lr": {"type": "number", "exclusiveMinimum": 0}, "epochs": _pos, "batch": _pos,
        "weight_decay": {"type": "number", "minimum": 0}, "warmup_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "bench": _obj({"grid": _triple, "channels": _pos, "heads": _pos, "chunk_lengths": _triple, "trials": _pos,
                   "warmup": {"type": "integer", "minimum": 3}}),
    "sweep": _obj({"axis": {"enum": list(SWEEP_AXES)}, "values": {"type": "array", "minItems": 1},
                   "train": {"type": "boolean"}}),
    "paths": _obj({"data_dir": {"type": "string"}, "out_dir": {"type": "string"},
                   "checkpoint": {"type": ["string", "null"]}}),
})


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _deep_update(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``['--merge.gamma', '4', '--seed=3']`` -> ``{'merge': {'gamma': 4}, 'seed': 3}``."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            raw = tokens[i + 1]
            i += 2
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        _check(user)
        _deep_update(cfg, user)
    if overrides:
        _check(overrides)
        _deep_update(cfg, overrides)
    _check(cfg)
    return cfg


def _check(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from e


def config_hash(cfg: dict) -> str:
    """Hash of everything except paths, so relocated runs share a hash."""
    doc = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def synth_config(cfg: dict) -> SynthConfig:
    d = dict(cfg["data"])
    d["grid"] = tuple(d["grid"])
    return SynthConfig(seed=cfg["seed"], **d)


def network_config(cfg: dict) -> NetworkConfig:
    n = dict(cfg["network"])
    return NetworkConfig(
        chunk_lengths=tuple(n.pop("chunk_lengths")),
        merge=MergeConfig(**cfg["merge"]),
        channels=cfg["data"]["channels"],
        n_classes=cfg["data"]["n_classes"],
        **n,
    )


def train_hyper(cfg: dict) -> TrainHyper:
    return TrainHyper(seed=cfg["seed"], **cfg["train"])


def _build(fn, *args):
    try:
        return fn(*args)
    except (TokenError, TypeError) as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def save_split(path: Path, split: Split) -> None:
    arrays = {
        "features": split.features,
        "labels": split.labels.astype(np.float32),
        "masks": split.masks.astype(np.float32),
    }
    if split.motion is not None:
        arrays["motion"] = split.motion
    write_sections(path, arrays)


def load_split(path: Path) -> Split:
    try:
        s = read_sections(path)
    except FileNotFoundError as e:
        raise DataError(f"missing dataset file {path}; run `vtm synth` first") from e
    except (FormatError, KeyError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: {e}") from e
    for key in ("features", "labels", "masks"):
        if key not in s:
            raise DataError(f"{path}: missing section {key!r}")
    return Split(s["features"], s["labels"].astype(np.int64), s["masks"] > 0.5, s.get("motion"))


def _data_dir(cfg: dict) -> Path:
    return Path(cfg["paths"]["data_dir"])


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return json.dumps(v)
    return "" if v is None else v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path, params: NetworkParams, cfg: dict) -> None:
    write_sections(path, params.state())
    sidecar = {"config": cfg, "config_hash": config_hash(cfg)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: Path, cfg: dict) -> NetworkParams:
    ncfg = network_config(cfg)
    params = init_params(ncfg, cfg["seed"])
    try:
        state = read_sections(path)
        params.load_state(state)
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint {path}") from e
    except (FormatError, KeyError) as e:
        raise DataError(f"{path}: {e}") from e
    except ad.ShapeError as e:
        raise ConfigError(f"checkpoint does not fit the config: {e}") from e
    return params


def _checkpoint_path(cfg: dict, explicit: str | None = None) -> Path:
    p = explicit or cfg["paths"]["checkpoint"]
    return Path(p) if p else Path(cfg["paths"]["out_dir"]) / "checkpoint.vtm"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict, args) -> int:
    scfg = _build(synth_config, cfg)
    ds = generate(scfg)
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_split(out / "train.vtm", ds.train)
    save_split(out / "val.vtm", ds.val)
    manifest = {"config_hash": config_hash(cfg), "n_train": len(ds.train), "n_val": len(ds.val),
                "n_classes": ds.n_classes, "grid": list(scfg.grid), "channels": scfg.channels}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(ds.train)} train / {len(ds.val)} val samples to {out}")
    return EXIT_OK


def _check_data(split: Split, ncfg: NetworkConfig) -> None:
    if split.features.ndim != 5 or split.features.shape[-1] != ncfg.channels:
        raise DataError(f"dataset features have shape {split.features.shape}, expected (S, L, H, W, {ncfg.channels})")
    if len(split) == 0:
        raise DataError("dataset split is empty")


def cmd_train(cfg: dict, args) -> int:
    ncfg = _build(network_config, cfg)
    hyper = _build(train_hyper, cfg)
    tr = load_split(_data_dir(cfg) / "train.vtm")
    va = load_split(_data_dir(cfg) / "val.vtm")
    _check_data(tr, ncfg)
    params, history = train(tr, ncfg, hyper, val=va)
    out = _out_dir(cfg)
    ckpt = _checkpoint_path(cfg, getattr(args, "checkpoint", None))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, params, cfg)
    h = config_hash(cfg)
    rows = [{"config_hash": h, **r} for r in history]
    columns = ["config_hash"] + [k for k in rows[0] if k != "config_hash"]
    _write_csv(out / "train_metrics.csv", rows, columns)
    last = history[-1]
    print(f"trained {hyper.epochs} epochs; final " + ", ".join(f"{k}={v:.4g}" for k, v in last.items() if k != "epoch"))
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    ncfg = _build(network_config, cfg)
    params = load_checkpoint(_checkpoint_path(cfg, args.checkpoint), cfg)
    split_name = args.split
    split = load_split(_data_dir(cfg) / f"{split_name}.vtm")
    _check_data(split, ncfg)
    metrics = evaluate(split, params, ncfg, seed=cfg["seed"], batch=cfg["train"]["batch"])
    trace = metrics.pop("token_trace")
    row = {"config_hash": config_hash(cfg), "split": split_name, **metrics, "token_trace": trace}
    _write_csv(_out_dir(cfg) / "eval_metrics.csv", [row])
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def _load_tokens(path: str, motion_path: str | None) -> TokenTensor:
    try:
        feats = read_tensor(path)
    except FileNotFoundError as e:
        raise DataError(f"missing tensor file {path}") from e
    except FormatError as e:
        raise DataError(str(e)) from e
    if feats.ndim != 4:
        raise DataError(f"{path}: expected an L x H x W x C tensor, got shape {feats.shape}")
    motion = None
    if motion_path:
        try:
            motion = load_motion(motion_path)
        except FileNotFoundError as e:
            raise DataError(f"missing motion file {motion_path}") from e
        except FormatError as e:
            raise DataError(str(e)) from e
    t = TokenTensor.from_grid(feats)
    if motion is not None:
        try:
            t = attach_motion(t, motion)
        except TokenError as e:
            raise DataError(str(e)) from e
    return t


def cmd_merge(cfg: dict, args) -> int:
    """One merge step over a whole clip; keys are the raw features, or the
    first block's key projection when a checkpoint is supplied."""
    mcfg = _build(lambda c: MergeConfig(**c["merge"]), cfg)
    t = _load_tokens(args.input, args.motion)
    keys = t.features.astype(np.float64)
    saliency = None
    if mcfg.strategy == "learnable" or args.checkpoint:
        if not args.checkpoint:
            raise ConfigError("the learnable strategy needs --checkpoint for saliency scores")
        params = load_checkpoint(Path(args.checkpoint), cfg)
        attn = params.blocks[0].attn
        if attn.U_k.shape[0] != t.channels:
            raise DataError(f"tensor has {t.channels} channels, checkpoint expects {attn.U_k.shape[0]}")
        K = keys @ attn.U_k.value
        saliency = np.tanh(K @ attn.U_s.value)[:, 0]
        keys = K.reshape(t.n, attn.heads, -1).mean(axis=1)
    if t.n < mcfg.gamma:
        raise DataError(f"too few tokens: {t.n} < gamma={mcfg.gamma}")
    rng = np.random.default_rng(cfg["seed"])
    try:
        targets = select_targets(mcfg.strategy, t, mcfg.gamma, rng, saliency)
        plan = merge_step_plan(keys, mcfg, targets, t.n)
    except ad.DomainError as e:
        raise DataError(str(e)) from e
    merged = apply_plan(t, plan, mcfg.pooling)
    out = _out_dir(cfg)
    out_path = Path(args.output) if args.output else out / "merged.vtm"
    write_tensor(out_path, merged.features.astype(np.float32))
    h = config_hash(cfg)
    rows = []
    for k, members in enumerate(plan.constituents()):
        l, hh, w = (int(v) for v in merged.coords[k])
        rows.append({"config_hash": h, "out_index": k, "frame": l, "row": hh, "col": w,
                     "size": int(merged.sizes[k]), "motion": float(merged.motion[k]),
                     "constituents": " ".join(str(i) for i in members)})
    trace_path = out_path.with_name(out_path.stem + "_trace.csv")
    _write_csv(trace_path, rows)
    print(f"merged {t.n} -> {merged.n} tokens; wrote {out_path} and {trace_path}")
    return EXIT_OK


def _bench_network(cfg: dict) -> NetworkConfig:
    b = cfg["bench"]
    return NetworkConfig(
        chunk_lengths=tuple(b["chunk_lengths"]), merge=MergeConfig(**cfg["merge"]),
        channels=b["channels"], heads=b["heads"], n_classes=cfg["data"]["n_classes"], dropout=0.0,
    )


def cmd_bench(cfg: dict, args) -> int:
    ncfg = _build(_bench_network, cfg)
    L, H, W = cfg["bench"]["grid"]
    out = _out_dir(cfg)
    try:
        merged = schedule_cost(ncfg, L, H, W)
        base = schedule_cost(baseline_config(ncfg), L, H, W)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    merged.to_csv(out / "cost_merged.csv")
    base.to_csv(out / "cost_baseline.csv")
    row = {
        "config_hash": config_hash(cfg),
        "tokens": L * H * W,
        "flops_merged": merged.flops,
        "flops_baseline": base.flops,
        "flop_reduction": base.flops / merged.flops,
        "peak_floats_merged": merged.peak_floats,
        "peak_floats_baseline": base.peak_floats,
        "memory_reduction": 1.0 - merged.peak_floats / base.peak_floats,
    }
    if not args.no_timing:
        params = init_params(ncfg, cfg["seed"])
        trials, warm = cfg["bench"]["trials"], cfg["bench"]["warmup"]
        m_rate, m_std = measure_throughput(ncfg, params, trials, cfg["seed"], (L, H, W), warm)
        b_rate, b_std = measure_throughput(baseline_config(ncfg), params, trials, cfg["seed"], (L, H, W), warm)
        row.update({"throughput_merged": m_rate, "throughput_merged_std": m_std,
                    "throughput_baseline": b_rate, "throughput_baseline_std": b_std,
                    "speedup": m_rate / b_rate})
    _write_csv(out / "bench.csv", [row])
    print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    c = copy.deepcopy(cfg)
    if axis == "chunks":
        c["network"]["chunk_lengths"] = list(value)
        c["bench"]["chunk_lengths"] = list(value)
    else:
        c["merge"][axis] = value
    _check(c)
    return c


def _sweep_one(job) -> dict:
    """Runs in a worker process; writes its own CSV and returns the row."""
    cfg, axis, value, do_train, out_file = job
    ncfg = _bench_network(cfg)
    L, H, W = cfg["bench"]["grid"]
    cost = schedule_cost(ncfg, L, H, W)
    base = schedule_cost(baseline_config(ncfg), L, H, W)
    row = {
        "config_hash": config_hash(cfg), "axis": axis, "value": value,
        "flops": cost.flops, "flop_reduction": base.flops / cost.flops,
        "peak_floats": cost.peak_floats, "tokens_out": cost.blocks[-1].n_out,
    }
    if do_train:
        tr = load_split(_data_dir(cfg) / "train.vtm")
        va = load_split(_data_dir(cfg) / "val.vtm")
        tcfg = network_config(cfg)
        params, _ = train(tr, tcfg, train_hyper(cfg), val=None)
        metrics = evaluate(va, params, tcfg, seed=cfg["seed"])
        row["val_accuracy" if tcfg.head_type == "classify" else "val_mse"] = metrics.get("accuracy", metrics.get("mse"))
    _write_csv(Path(out_file), [row])
    return row


def cmd_sweep(cfg: dict, args) -> int:
    axis = cfg["sweep"]["axis"]
    values = cfg["sweep"]["values"]
    do_train = cfg["sweep"]["train"]
    out = _out_dir(cfg)
    jobs = []
    for i, v in enumerate(values):
        try:
            c = _apply_axis(cfg, axis, v)
            _build(_bench_network, c)
            if do_train:
                _build(network_config, c)
        except ConfigError as e:
            raise ConfigError(f"sweep value {v!r}: {e}") from e
        jobs.append((c, axis, v, do_train, str(out / f"sweep_{axis}_{i}.csv")))
    workers = max(1, int(os.environ.get("VTM_THREADS", "1")))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    _write_csv(out / f"sweep_{axis}.csv", rows)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "merge": cmd_merge,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vtm", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        if name in ("train", "eval", "merge"):
            p.add_argument("--checkpoint", help="checkpoint path (default: <out_dir>/checkpoint.vtm)")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val"), default="val")
        if name == "merge":
            p.add_argument("input", help="L x H x W x C feature tensor file")
            p.add_argument("--motion", help="motion magnitude file")
            p.add_argument("--output", help="merged tensor path (default: <out_dir>/merged.vtm)")
        if name == "bench":
            p.add_argument("--no-timing", action="store_true", help="analytic cost only")
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(rest))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
