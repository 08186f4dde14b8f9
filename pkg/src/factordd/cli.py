"""Command-line entry points.

Subcommands::

    expert         record an expert trajectory on real data
    distill        run the factorization training loop
    eval           train downstream classifiers from a saved factorization
    export-images  render bases and per-hallucinator grids as PNGs
    inspect        print a checkpoint manifest (and budget, for factorizations)

Every run writes its resolved configuration as JSON next to its outputs so a
run directory is sufficient to replay the run.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import distill as distill_mod
from . import evalharness, store
from .dataio import KNOWN_DATASETS
from .ddmatch import MatchConfig, record_expert
from .errors import DataLoadError, FormatError, NumericsError, UsageError
from .factor import FactorizedDataset, count_parameters
from .nets import ARCHS, ModelSpec
from .objectives import LossWeights


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, choices=KNOWN_DATASETS)
    p.add_argument("--data-root", default="data", help="directory holding the raw files")
    p.add_argument("--cache-dir", default="cache", help="whitened-dataset cache directory")
    p.add_argument("--zca-epsilon", type=float, default=0.1)


def _write_resolved(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _distill_config(args) -> distill_mod.DistillConfig:
    overrides = _load_config_file(args.config)
    weights = LossWeights(**overrides.pop("weights", {}))
    match_fields = overrides.pop("match", {})
    match_fields.setdefault("objective", args.objective)
    match_fields.setdefault("syn_steps", args.syn_steps)
    match_fields.setdefault("expert_span", args.expert_span)
    match_fields.setdefault("max_start", args.max_start)
    match = MatchConfig(**match_fields)
    cfg = distill_mod.DistillConfig(
        dataset_id=args.dataset, bpc=args.bpc, iterations=args.iterations, seed=args.seed,
        num_hallucinators=args.halls, halls_per_iter=args.halls_per_iter,
        basis_batch=args.basis_batch, class_independent_halls=args.class_independent,
        basis_channels=args.basis_channels, basis_height=args.basis_side,
        basis_width=args.basis_side, hall_depth=args.hall_depth,
        hall_channels=args.hall_channels, weights=weights, match=match,
        eta_h=args.eta_h, eta_b=args.eta_b, eta_f=args.eta_f,
        synth_lr_init=args.synth_lr_init, net_depth=args.net_depth,
        net_width=args.net_width, use_dsa=not args.no_dsa,
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _cmd_expert(args) -> int:
    train, _test, stats = store.cached_whitened(args.dataset, args.data_root,
                                                args.cache_dir, args.zca_epsilon)
    spec = ModelSpec("convnet", train.image_shape, train.class_count,
                     depth=args.net_depth, width=args.net_width)
    traj = record_expert(spec, train, args.epochs, args.beta, args.seed,
                         batch_size=args.batch_size)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"expert_{args.dataset}_seed{args.seed}.haba")
    store.save_checkpoint(traj, path)
    _write_resolved(args.out, {
        "command": "expert", "dataset": args.dataset, "epochs": args.epochs,
        "beta": args.beta, "seed": args.seed, "batch_size": args.batch_size,
        "spec": dataclasses.asdict(spec), "zca_fingerprint": store.zca_fingerprint(stats),
        "trajectory": path,
    })
    print(f"wrote {path} ({len(traj.checkpoints)} checkpoints)")
    return 0


def _cmd_distill(args) -> int:
    train, _test, stats = store.cached_whitened(args.dataset, args.data_root,
                                                args.cache_dir, args.zca_epsilon)
    cfg = _distill_config(args)
    traj = store.load_checkpoint(args.trajectory) if args.trajectory else None
    os.makedirs(args.out, exist_ok=True)
    fd_path = os.path.join(args.out, "fd.haba")
    log_path = os.path.join(args.out, "metrics.jsonl")
    state = distill_mod.run_distillation(cfg, train, traj, log_path=log_path,
                                         checkpoint_path=fd_path,
                                         checkpoint_every=args.checkpoint_every)
    state.fd.meta["zca_fingerprint"] = store.zca_fingerprint(stats)
    store.save_checkpoint(state.fd, fd_path)
    _write_resolved(args.out, {
        "command": "distill", "config": dataclasses.asdict(cfg),
        "trajectory": args.trajectory, "zca_fingerprint": store.zca_fingerprint(stats),
        "artifact": fd_path, "metrics": log_path,
    })
    for line in count_parameters(state.fd).lines():
        print(line)
    print(f"wrote {fd_path}")
    return 0


def _cmd_eval(args) -> int:
    archs = args.arch or ["convnet"]
    _train, test, stats = store.cached_whitened(args.dataset, args.data_root,
                                                args.cache_dir, args.zca_epsilon)
    fd = store.load_checkpoint(args.fd)
    if not isinstance(fd, FactorizedDataset):
        raise UsageError(f"{args.fd} does not hold a factorized dataset")
    saved = fd.meta.get("zca_fingerprint")
    if saved and saved != store.zca_fingerprint(stats):
        raise UsageError("artifact was distilled under different whitening statistics")
    spec = ModelSpec(archs[0], test.image_shape, test.class_count,
                     depth=args.net_depth, width=args.net_width)
    cfg = evalharness.EvalConfig(
        arch=spec, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        online_composition=not args.no_online_composition, use_dsa=not args.no_dsa,
        use_con_downstream=args.con_downstream, repeats=args.repeats, seed=args.seed)
    results = evalharness.cross_architecture_eval(fd, archs, cfg, test)
    budget = count_parameters(fd)
    ratio = evalharness.parameter_ratio_percent(budget, len(_train))
    rows = [
        evalharness.format_result_row("factorized", args.dataset,
                                      f"bpc={budget.basis_count // budget.class_count}",
                                      ratio, res)
        for res in results
    ]
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "results.tsv")
    evalharness.write_results_table(rows, table_path)
    _write_resolved(args.out, {
        "command": "eval", "fd": args.fd, "archs": archs,
        "epochs": args.epochs, "lr": args.lr, "repeats": args.repeats, "seed": args.seed,
        "fd_fingerprint": store.fd_fingerprint(fd), "results": table_path,
    })
    print(evalharness.RESULT_HEADER)
    for row in rows:
        print(row)
    return 0


def _cmd_export_images(args) -> int:
    fd = store.load_checkpoint(args.fd)
    if not isinstance(fd, FactorizedDataset):
        raise UsageError(f"{args.fd} does not hold a factorized dataset")
    stats = None
    if args.zca_stats:
        stats = store.load_checkpoint(args.zca_stats)
    written = store.export_images(fd, args.out, stats)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        data = fh.read()
    header, payload_start = store._parse_header(data)
    print(f"kind: {header['kind']}")
    print(f"tensors: {len(header['tensors'])}, payload bytes: {len(data) - payload_start}")
    for entry in header["tensors"][: args.limit]:
        print(f"  {entry['name']}: shape={entry['shape']} offset={entry['offset']}")
    if len(header["tensors"]) > args.limit:
        print(f"  ... {len(header['tensors']) - args.limit} more")
    obj = store.loads_bytes(data)
    if isinstance(obj, FactorizedDataset):
        for line in count_parameters(obj).lines():
            print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factordd",
                                     description="Factorized dataset distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expert", help="record an expert trajectory on real data")
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--net-depth", type=int, default=3)
    p.add_argument("--net-width", type=int, default=128)
    p.add_argument("--out", default="runs/expert")
    p.set_defaults(func=_cmd_expert)

    p = sub.add_parser("distill", help="train a factorized dataset")
    _add_data_args(p)
    p.add_argument("--config", help="JSON file with DistillConfig field overrides")
    p.add_argument("--bpc", type=int, default=1)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--halls", type=int, default=5)
    p.add_argument("--halls-per-iter", type=int, default=2)
    p.add_argument("--basis-batch", type=int, default=None)
    p.add_argument("--class-independent", action="store_true")
    p.add_argument("--basis-channels", type=int, default=None)
    p.add_argument("--basis-side", type=int, default=None)
    p.add_argument("--hall-depth", type=int, default=1)
    p.add_argument("--hall-channels", type=int, default=None)
    p.add_argument("--objective", choices=("trajectory", "gradient", "distribution"),
                   default="distribution")
    p.add_argument("--trajectory", help="expert trajectory file (trajectory objective)")
    p.add_argument("--syn-steps", type=int, default=5)
    p.add_argument("--expert-span", type=int, default=1)
    p.add_argument("--max-start", type=int, default=5)
    p.add_argument("--eta-h", type=float, default=1.0)
    p.add_argument("--eta-b", type=float, default=1.0)
    p.add_argument("--eta-f", type=float, default=0.001)
    p.add_argument("--synth-lr-init", type=float, default=0.01)
    p.add_argument("--net-depth", type=int, default=3)
    p.add_argument("--net-width", type=int, default=128)
    p.add_argument("--no-dsa", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--out", default="runs/distill")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("eval", help="train downstream classifiers from a saved artifact")
    _add_data_args(p)
    p.add_argument("--fd", required=True)
    p.add_argument("--arch", action="append", choices=ARCHS, default=None)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--net-depth", type=int, default=3)
    p.add_argument("--net-width", type=int, default=128)
    p.add_argument("--no-dsa", action="store_true")
    p.add_argument("--no-online-composition", action="store_true")
    p.add_argument("--con-downstream", action="store_true")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-images", help="render bases and composed grids as PNGs")
    p.add_argument("--fd", required=True)
    p.add_argument("--zca-stats", help="whitening statistics file for inverse transform")
    p.add_argument("--out", default="runs/images")
    p.set_defaults(func=_cmd_export_images)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("--path", required=True)
    p.add_argument("--limit", type=int, default=12)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataLoadError, FormatError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
