"""Command-line entry point.

Subcommands: partition, synth, train, eval, bench, dump-attention. Configs
are strict JSON (see config.py); flags only override scalar fields. Exit
codes: 0 success, 2 user/input error, 3 internal contract violation. All
artifacts are written deterministically, so re-runs are byte-identical
(wall-clock timings live in separate files).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import load_config, write_effective_config
from .data import Dataset, Normalizer, chrono_split, make_windows, save_series, synth_diffusion, window_arrays
from .data import load_series as load_series_file
from .errors import ContractError, InputError, NumericError, SbaError
from .graph import (
    build_epsilon_graph,
    build_gaussian_graph,
    laplacian_pe,
    load_coords,
    load_graph,
    save_coords,
    save_graph,
    save_pe,
)
from .model import (
    ModelConfig,
    SbaTransformer,
    attention_peak_bytes,
    flops_estimate,
    load_checkpoint,
    save_checkpoint,
)
from .partition import build_scale_series, uniform_plan, save_series as save_plan_series, ScaleSeries
from .training import TrainConfig, evaluate, train


def _positive_int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="sbaformer",
        description="Partition-structured attention forecasting toolkit",
    )
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="multilevel k-way partition + scale series")
    p.add_argument("--graph", required=True, help="edge-list file (src,dst,weight)")
    p.add_argument("--parts", required=True, type=int, help="initial subgraph count")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--balance", type=float, default=1.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="scale-series JSON path")

    p = sub.add_parser("synth", help="generate the synthetic diffusion dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--nodes", type=int, default=64)
    p.add_argument("--steps", type=int, default=2048)
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--season-amp", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--period", type=float, default=64.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("bin", "csv"), default="bin")

    p = sub.add_parser("train", help="train per a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--max-epochs", type=int, default=None, help="override train.max_epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("bench", help="attention cost scaling, instrumented")
    p.add_argument("--n-list", type=_positive_int_list, default=[256, 512, 1024])
    p.add_argument("--m", type=int, default=32, help="subgraph size in sba mode")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mode", choices=("sba", "dense", "both"), default="both")
    p.add_argument("--out", required=True, help="CSV output path")

    p = sub.add_parser("dump-attention", help="write per-block attention matrices")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out-dir", required=True)
    return top


# ---------------------------------------------------------------------------
# shared run assembly


def _build_graph(cfg, n: int):
    gc, dc = cfg["graph"], cfg["data"]
    if gc["builder"] == "file":
        if dc["graph"] is None:
            raise InputError("graph.builder=file requires data.graph")
        graph = load_graph(dc["graph"], n=n)
        if dc["coords"] is not None:
            graph.coords = load_coords(dc["coords"])
        return graph
    if dc["coords"] is None:
        raise InputError(f"graph.builder={gc['builder']} requires data.coords")
    coords = load_coords(dc["coords"])
    if gc["builder"] == "epsilon":
        if gc["epsilon"] is None:
            raise InputError("graph.builder=epsilon requires graph.epsilon")
        return build_epsilon_graph(coords, gc["epsilon"])
    if gc["builder"] == "gaussian":
        if gc["sigma"] is None:
            raise InputError("graph.builder=gaussian requires graph.sigma")
        return build_gaussian_graph(coords, gc["sigma"], gc["threshold"])
    raise InputError(f"unknown graph.builder {gc['builder']!r}")


def _assemble(cfg):
    """Dataset, scale series, and positional encoding for a validated config."""
    dc = cfg["data"]
    series, meta = load_series_file(dc["series"], dc["format"])
    graph = _build_graph(cfg, series.shape[0])
    dataset = Dataset(
        series=series,
        graph=graph,
        freq_minutes=meta["freq_minutes"] if meta else dc["freq_minutes"],
        name=meta["name"] if meta else dc["name"],
    )
    pc = cfg["partition"]
    series_plans = build_scale_series(
        graph, pc["p0"], cfg["model"]["l"], pc["balance_factor"], pc["seed"]
    )
    pe = laplacian_pe(graph, cfg["pe"]["k"], cfg["pe"]["block_limit"])
    mc = ModelConfig(
        n=dataset.n,
        t=cfg["model"]["t"],
        c=dataset.c,
        f=cfg["model"]["f"],
        d_model=cfg["model"]["d_model"],
        l=cfg["model"]["l"],
        heads=cfg["model"]["heads"],
        p0=pc["p0"],
        k_pe=cfg["pe"]["k"],
        ffn_mult=cfg["model"]["ffn_mult"],
    )
    return dataset, series_plans, pe, mc


def _train_config(cfg) -> TrainConfig:
    tc = cfg["train"]
    return TrainConfig(
        lr=tc["lr"],
        betas=tuple(tc["betas"]),
        eps=tc["eps"],
        batch_size=tc["batch_size"],
        max_epochs=tc["max_epochs"],
        patience=tc["patience"],
        grad_clip=tc["grad_clip"],
        seed=tc["seed"],
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_partition(args) -> int:
    graph = load_graph(args.graph)
    series = build_scale_series(graph, args.parts, args.levels, args.balance, args.seed)
    save_plan_series(args.out, series)
    for level, plan in enumerate(series.plans):
        print(
            f"level {level}: p={plan.p} m={plan.m} edge_cut={plan.edge_cut:g} "
            f"balance={plan.achieved_factor:.3f}"
            + (" OVER" if plan.over_balance else "")
        )
    return 0


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    dataset = synth_diffusion(
        n=args.nodes,
        steps=args.steps,
        gamma=args.gamma,
        season_amp=args.season_amp,
        noise_std=args.noise_std,
        period=args.period,
        seed=args.seed,
    )
    ext = "bin" if args.format == "bin" else "csv"
    series_path = os.path.join(args.out, f"series.{ext}")
    save_series(series_path, dataset.series, args.format, dataset.freq_minutes, dataset.name)
    save_graph(os.path.join(args.out, "graph.csv"), dataset.graph)
    save_coords(os.path.join(args.out, "coords.csv"), dataset.graph.coords)
    print(f"wrote {series_path} ({args.nodes} nodes, {args.steps} steps)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.max_epochs is not None:
        cfg["train"]["max_epochs"] = args.max_epochs
    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_effective_config(cfg, os.path.join(out_dir, "effective_config.json"))

    dataset, plans, pe, mc = _assemble(cfg)
    save_pe(os.path.join(out_dir, "pe.bin"), pe, dataset.graph, cfg["pe"]["block_limit"])
    save_plan_series(os.path.join(out_dir, "scale_series.json"), plans)
    model = SbaTransformer(mc, plans, pe.vectors, seed=cfg["train"]["seed"])
    best, history, timings = train(model, dataset, _train_config(cfg))
    save_checkpoint(os.path.join(out_dir, "checkpoint"), best, mc, cfg["train"]["seed"])
    with open(os.path.join(out_dir, "history.jsonl"), "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "timing.jsonl"), "w") as fh:
        for seconds in timings:
            fh.write(json.dumps({"seconds": seconds}) + "\n")
    done = [h for h in history if "val_mae" in h]
    if done:
        best_epoch = min(done, key=lambda h: h["val_mae"])
        print(
            f"trained {len(history)} epochs; best val MAE {best_epoch['val_mae']:.6f} "
            f"at epoch {best_epoch['epoch']}"
        )
    return 0


def _horizon_table(report: dict) -> str:
    rows = []
    breakdown = report["horizon_breakdown"]
    picks = [h for h in (3, 6, 12) if h <= len(breakdown)]
    for h in picks:
        entry = breakdown[h - 1]
        mape = f"{entry['mape_pct']:.2f}" if entry["mape_pct"] is not None else "-"
        rows.append(f"  Horizon {h:<3d} MAE {entry['mae']:.4f}  RMSE {entry['rmse']:.4f}  MAPE% {mape}")
    mape = f"{report['mape_pct']:.2f}" if report["mape_pct"] is not None else "-"
    rows.append(f"  Average     MAE {report['mae']:.4f}  RMSE {report['rmse']:.4f}  MAPE% {mape}")
    return "\n".join(rows)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    dataset, plans, pe, mc = _assemble(cfg)
    params, ck_config, seed = load_checkpoint(args.checkpoint)
    if ck_config != mc:
        raise ContractError("checkpoint config does not match the run config")
    model = SbaTransformer(mc, plans, pe.vectors, params=params, seed=seed)
    report = evaluate(model, dataset, args.split)
    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"metrics_{args.split}.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"{dataset.name} [{args.split}] model:")
    print(_horizon_table(report["model"]))
    print("persistence baseline:")
    print(_horizon_table(report["persistence"]))
    return 0


def _bench_one(mode: str, n: int, m: int, d: int, heads: int) -> dict:
    plan = uniform_plan(n, 1 if mode == "dense" else n // m)
    series = ScaleSeries(plans=[plan])
    mc = ModelConfig(n=n, t=1, c=1, f=1, d_model=d, l=1, heads=heads, p0=plan.p, k_pe=1)
    was_debug = ad.set_debug_checks(False)
    try:
        tic = time.perf_counter()
        est = flops_estimate(mc, series)
        wall_ms = (time.perf_counter() - tic) * 1e3
    finally:
        ad.set_debug_checks(was_debug)
    if abs(est["ratio"] - 1.0) > 0.01:
        raise ContractError(
            f"measured/closed-form flops disagree beyond 1%: ratio {est['ratio']}"
        )
    return {
        "mode": mode,
        "n": n,
        "p": plan.p,
        "m": plan.m,
        "d": d,
        "flops_measured": est["measured_total"],
        "flops_closed_form": est["closed_total"],
        "wall_ms": wall_ms,
        "peak_bytes_estimate": attention_peak_bytes(mc, series),
    }


def cmd_bench(args) -> int:
    modes = ("sba", "dense") if args.mode == "both" else (args.mode,)
    for n in args.n_list:
        if "sba" in modes and n % args.m != 0:
            raise InputError(f"n={n} must be a multiple of m={args.m} in sba mode")
    fields = [
        "mode", "n", "p", "m", "d",
        "flops_measured", "flops_closed_form", "wall_ms", "peak_bytes_estimate",
    ]
    rows = [
        _bench_one(mode, n, args.m, args.d, args.heads)
        for mode in modes
        for n in args.n_list
    ]
    with open(args.out, "w") as fh:
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row[k]) for k in fields) + "\n")
    for row in rows:
        print(
            f"{row['mode']:>5} n={row['n']:<5d} p={row['p']:<4d} m={row['m']:<4d} "
            f"flops={row['flops_measured']:.3e} wall={row['wall_ms']:.2f}ms"
        )
    return 0


def _csv_cell(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def cmd_dump_attention(args) -> int:
    cfg = load_config(args.config)
    dataset, plans, pe, mc = _assemble(cfg)
    params, ck_config, seed = load_checkpoint(args.checkpoint)
    if ck_config != mc:
        raise ContractError("checkpoint config does not match the run config")
    model = SbaTransformer(mc, plans, pe.vectors, params=params, seed=seed)

    splits = chrono_split(dataset.steps, min_len=mc.t + mc.f)
    index = {"train": 0, "val": 1, "test": 2}[args.split]
    normalizer = Normalizer.fit(dataset.series[:, splits[0][0] : splits[0][1]])
    windows = make_windows(splits[index], mc.t, mc.f, split=args.split)
    if not 0 <= args.window < len(windows):
        raise InputError(
            f"window {args.window} out of range; {args.split} has {len(windows)} windows"
        )
    xs, _ = window_arrays(normalizer.apply(dataset.series), windows, at=[args.window])
    capture = []
    with ad.no_grad():
        model.forward(Tensor(xs[0]), capture=capture)

    os.makedirs(args.out_dir, exist_ok=True)
    for b, block in enumerate(capture):
        for name, payload in (("intra", block["intra"]), ("inter", [block["inter"]])):
            mats = payload
            offsets, blob = [], b""
            for mat in mats:
                rowsum = mat.sum(axis=-1)
                if np.abs(rowsum - 1.0).max() > 1e-9:
                    raise ContractError(
                        f"block {b} {name} attention rows are not stochastic"
                    )
                offsets.append(len(blob) // 8)
                blob += np.ascontiguousarray(mat, dtype="<f8").tobytes()
            stem = os.path.join(args.out_dir, f"block{b}_{name}")
            with open(stem + ".bin", "wb") as fh:
                fh.write(blob)
            sidecar = {
                "block": b,
                "kind": name,
                "sizes": [list(m.shape) for m in mats],
                "offsets": offsets,
                "heads_averaged": True,
                "window": args.window,
                "split": args.split,
                "dtype": "<f8",
            }
            with open(stem + ".json", "w") as fh:
                json.dump(sidecar, fh, sort_keys=True, indent=2)
                fh.write("\n")
    print(f"wrote attention maps for {len(capture)} blocks to {args.out_dir}")
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericError, SbaError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
