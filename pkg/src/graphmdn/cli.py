"""Command-line interface: ``graphmdn <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error. Every run prints its fully resolved configuration as one
``config: {...}`` JSON line before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audit import AuditSpec, audit_gradients
from .checkpoint import load_checkpoint
from .data import Dataset, SynthSpec, load_dataset, save_dataset, synthesize
from .errors import ConfigError, DataError, GraphMDNError, IncompatibleError, JoinError, ParseError
from .evaluation import evaluate, predict
from .graph import SkeletonGraph, human_skeleton, load_graph, path_graph
from .mdn import PoseMixture, read_predictions, write_predictions
from .plotting import write_sample_svg
from .training import WIDE_PRESET, TrainConfig, fit, network_from_checkpoint, write_log

THREADS_ENV = "GRAPHMDN_THREADS"

log = logging.getLogger("graphmdn")


class UsageError(GraphMDNError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo(args, extra: dict | None = None):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        resolved.update(extra)
    print("config: " + json.dumps(resolved, sort_keys=True, default=str), flush=True)


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except ValueError:
            out[key] = raw
    return out


def resolve_skeleton(dataset: Dataset, graph_path=None) -> SkeletonGraph:
    """Skeleton whose hash matches the dataset manifest."""
    want = dataset.manifest.skeleton_hash
    candidates = [load_graph(graph_path)] if graph_path else []
    candidates += [human_skeleton(), path_graph(dataset.manifest.node_count)]
    for g in candidates:
        if g.hash == want:
            return g
    raise IncompatibleError(f"no known skeleton matches dataset hash {want}; pass --graph")


def _select(dataset: Dataset, split: str) -> Dataset:
    if split == "all":
        return dataset
    part = dataset.split(split)
    if len(part) == 0:
        raise DataError(f"split {split!r} selects no records")
    return part


def _mixture_rows(mix: PoseMixture):
    return [PoseMixture(mix.mu[i], mix.sigma[i], mix.pi[i]) for i in range(mix.pi.shape[0])]


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec)
    _echo(args, {"generator": spec.to_dict()})
    ds = synthesize(spec)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    if args.preset == "wide":
        base.update(WIDE_PRESET)
    base.update(_parse_overrides(args.set))
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _echo(args, {"train_config": cfg.to_dict()})
    ds = load_dataset(args.data)
    skeleton = resolve_skeleton(ds, args.graph)
    train = _select(ds, args.split)
    resume = load_checkpoint(args.resume, skeleton.hash) if args.resume else None
    ckpt_dir = args.checkpoint_dir or str(Path(args.out).with_suffix("")) + "_epochs"

    def report(epoch, loss):
        print(f"epoch {epoch}: mean loss {loss:.6f}", flush=True)

    result = fit(cfg, train, skeleton, resume=resume, checkpoint_dir=ckpt_dir, on_epoch=report)
    final = result.checkpoints[-1] if result.checkpoints else resume
    final.save(args.out)
    if args.log:
        write_log(args.log, result.log)
    print(f"saved checkpoint to {args.out}")
    return 0


def _load_model(args, ds):
    skeleton = resolve_skeleton(ds, args.graph)
    ckpt = load_checkpoint(args.checkpoint, skeleton.hash)
    return network_from_checkpoint(ckpt, skeleton), skeleton


def cmd_predict(args) -> int:
    _echo(args)
    ds = _select(load_dataset(args.data), args.split)
    net, _ = _load_model(args, ds)
    mix = predict(net, ds.inputs)
    write_predictions(args.out, ds.ids, mix)
    print(f"wrote {len(ds)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    _echo(args)
    if not args.checkpoint and not args.predictions:
        raise UsageError("eval needs --checkpoint or --predictions")
    ds = load_dataset(args.data)
    if args.predictions:
        preds = read_predictions(args.predictions)
    else:
        part = _select(ds, args.split)
        net, _ = _load_model(args, ds)
        preds = dict(zip(part.ids, _mixture_rows(predict(net, part.inputs))))
    report = evaluate(preds, ds, rigid=args.rigid)
    report.write(args.out)
    for (strategy, protocol), row in report.table.items():
        print(f"{strategy:8s} {protocol:8s} Avg {row['Avg']:.3f} mm")
    print(f"wrote {args.out}.csv and {args.out}.json")
    return 0


def _audit_spec(path) -> AuditSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    known = {f.name for f in dataclasses.fields(AuditSpec)}
    if not isinstance(raw, dict) or set(raw) - known:
        extra = sorted(set(raw) - known) if isinstance(raw, dict) else raw
        raise ConfigError(f"{path}: unknown audit keys {extra}")
    return AuditSpec(**raw)


def cmd_gradcheck(args) -> int:
    spec = _audit_spec(args.config) if args.config else AuditSpec()
    _echo(args, {"audit": dataclasses.asdict(spec)})
    modes = ("pose", "node") if args.mode == "both" else (args.mode,)
    worst = None
    for seed in range(args.seeds):
        for mode in modes:
            rep = audit_gradients(seed, mode, spec, corrupt=args.corrupt_backward)
            print(f"seed {seed} {mode}: max rel error {rep.max_rel_error:.3e} at {rep.worst_name}")
            if worst is None or rep.max_rel_error > worst[0]:
                worst = (rep.max_rel_error, rep.worst_name, seed, mode)
    print(f"worst: {worst[0]:.3e} at {worst[1]} (seed {worst[2]}, {worst[3]})")
    if worst[0] >= args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:g}")
        return 3
    print("PASS")
    return 0


def cmd_plot(args) -> int:
    _echo(args)
    ds = load_dataset(args.data)
    net, skeleton = _load_model(args, ds)
    by_id = ds.by_id()
    ids = [s for s in args.ids.split(",") if s]
    unknown = [s for s in ids if s not in by_id]
    if unknown:
        raise JoinError(f"unknown sample id(s): {', '.join(unknown)}", unknown)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = [by_id[s] for s in ids]
    mixes = _mixture_rows(predict(net, np.array([r.input2d for r in recs])))
    for rec, mix in zip(recs, mixes):
        path = out / f"{rec.id}.svg"
        write_sample_svg(path, skeleton, rec.input2d, mix, rec.target3d, f"{rec.id} {rec.action}")
        print(f"wrote {path}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphmdn", description="Graph mixture density networks for 2D-to-3D pose lifting.")
    p.add_argument("--threads", type=int, default=None, help=f"BLAS threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus from a generator spec")
    s.add_argument("--spec", required=True, help="generator spec (JSON)")
    s.add_argument("--out", required=True, help="output dataset (JSON lines)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="final checkpoint path")
    s.add_argument("--config", help="training config (JSON, keys as in TrainConfig)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
    s.add_argument("--preset", choices=["default", "wide"], default="default", help="wide: 3 blocks, hidden 512")
    s.add_argument("--resume", help="continue from an epoch checkpoint")
    s.add_argument("--checkpoint-dir", help="where epoch checkpoints go (default: <out>_epochs)")
    s.add_argument("--log", help="training log CSV (step, epoch, lr, loss)")
    s.add_argument("--split", choices=["train", "test", "all"], default="train")
    s.add_argument("--graph", help="skeleton override file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MPJPE / P-MPJPE report per action and strategy")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path stem (.csv and .json are written)")
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="prediction dump to score instead of running a checkpoint")
    s.add_argument("--split", choices=["train", "test", "all"], default="test")
    s.add_argument("--rigid", action="store_true", help="P-MPJPE without scale")
    s.add_argument("--graph")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference audit of the full network")
    s.add_argument("--config", help="audit spec (JSON: nodes, num_blocks, hidden_dim, kernels, batch, dropout, epsilon)")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--mode", choices=["pose", "node", "both"], default="both")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--corrupt-backward", action="store_true", help="test hook: skew one analytic gradient by 1%%")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("predict", help="write the prediction dump for a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "test", "all"], default="test")
    s.add_argument("--graph")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="SVG hypothesis figures for selected samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ids", required=True, help="comma-separated sample ids")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--graph")
    s.set_defaults(func=cmd_plot)
    return p


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be an integer") from None
    if n is None:
        return None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit(args)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except GraphMDNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
