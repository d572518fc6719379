"""Command-line entry point: ``anembed <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 bad input file or arguments,
3 incompatible artifacts. Every command writes a JSON run manifest, also on
failure. Option precedence is command line > ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import (
    ArtifactFormatError,
    ArtifactVersionError,
    GraphFormatError,
    ShapeMismatchError,
    SplitError,
)
from .evaluation import (
    EvalReport,
    classification_eval,
    link_prediction_eval,
    nearest_neighbors,
)
from .graph_io import (
    AttributeMatrix,
    load_attributes,
    load_edge_list,
    load_labels,
    load_split,
    sample_negative_edges,
    save_attributes,
    save_edge_list,
    save_labels,
    save_split,
    split_links,
)
from .model import (
    ModelConfig,
    check_attributes,
    final_representations,
    load_model,
    save_embeddings,
    save_model,
)
from .synth import SynthConfig, make_sbm
from .trainer import TrainConfig, format_log, save_checkpoint, train
from .walks import WalkConfig

logger = logging.getLogger("anembed")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_INCOMPATIBLE = 0, 1, 2, 3
THREADS_ENV = "ANEMBED_THREADS"


class UsageError(Exception):
    """Invalid combination of arguments detected after parsing."""


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace, argv: Sequence[str]):
        self.data: dict[str, Any] = {
            "command": command,
            "argv": list(argv),
            "config": {k: v for k, v in vars(args).items() if k not in ("func", "config")},
            "config_file": getattr(args, "config", None),
            "seed": getattr(args, "seed", None),
            "tool_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "inputs": {},
            "outputs": [],
            "status": "running",
        }
        self._t0 = time.perf_counter()

    def add_input(self, path: str | os.PathLike | None) -> None:
        if path is not None and Path(path).is_file():
            self.data["inputs"][str(path)] = file_digest(path)

    def add_output(self, path: str | os.PathLike) -> None:
        self.data["outputs"].append(str(path))

    def finish(self, path: Path, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        self.data["error"] = error
        self.data["duration_seconds"] = round(time.perf_counter() - self._t0, 6)
        self.data["finished_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text.lower() in ("", "none", "0"):
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _require_file(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")


def _load_attrs(path: str | None, num_nodes: int, num_features: int | None = None) -> AttributeMatrix:
    if path is None:
        return AttributeMatrix.empty(num_nodes, num_features or 1)
    _require_file(path, "attribute")
    return load_attributes(path, num_nodes)


def _load_model_and_attrs(args, manifest: RunManifest):
    _require_file(args.model, "model")
    manifest.add_input(args.model)
    params, config = load_model(args.model)
    manifest.add_input(args.attrs)
    attrs = _load_attrs(args.attrs, params.num_nodes, params.num_features)
    check_attributes(params, attrs)
    return params, config, attrs


def _write_report(reports: list[EvalReport], out: str | None, manifest: RunManifest) -> None:
    text = "\n".join(r.to_text() for r in reports)
    sys.stdout.write(text)
    if out:
        if out.endswith(".json"):
            payload = [r.to_dict() for r in reports]
            Path(out).write_text(json.dumps(payload if len(payload) > 1 else payload[0],
                                            indent=2, sort_keys=True) + "\n")
        else:
            Path(out).write_text(text)
        manifest.add_output(out)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args, manifest: RunManifest) -> int:
    cfg = SynthConfig(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.alpha, args.seed)
    ds = make_sbm(cfg)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"edges": f"{prefix}.edges", "attrs": f"{prefix}.attrs", "labels": f"{prefix}.labels"}
    save_edge_list(paths["edges"], ds.graph)
    save_attributes(paths["attrs"], ds.attrs)
    save_labels(paths["labels"], ds.labels)
    for p in paths.values():
        manifest.add_output(p)
    manifest.data["synth"] = {"num_nodes": ds.graph.num_nodes, "num_edges": ds.graph.num_edges,
                              "added_edges": ds.added_edges}
    print(f"nodes={ds.graph.num_nodes} edges={ds.graph.num_edges} "
          f"added_edges={ds.added_edges} -> {', '.join(paths.values())}")
    return EXIT_OK


def cmd_split(args, manifest: RunManifest) -> int:
    _require_file(args.edges, "edge list")
    manifest.add_input(args.edges)
    graph = load_edge_list(args.edges)
    split = split_links(graph, args.test, args.val, args.seed)
    save_split(args.out, split)
    manifest.add_output(args.out)
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} "
          f"train={split.train_graph.num_edges} test_pos={len(split.test_pos)} "
          f"val_pos={len(split.val_pos)} test_neg={len(split.test_neg)} "
          f"val_neg={len(split.val_neg)} -> {args.out}")
    return EXIT_OK


def _configs_from_args(args) -> tuple[ModelConfig, WalkConfig, TrainConfig]:
    model_cfg = ModelConfig(d_id=args.dim, d_att=args.att_dim if args.att_dim is not None else args.dim,
                            hidden_sizes=args.layers, lam=args.lam, activation=args.activation,
                            dropout=args.dropout)
    walk_cfg = WalkConfig(p=args.p, q=args.q, num_walks_per_node=args.num_walks,
                          walk_length=args.walk_length, window=args.window, seed=args.seed,
                          on_the_fly=args.on_the_fly)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.bs, learning_rate=args.lr,
                            num_negatives=args.negatives, neg_distribution=args.neg_dist,
                            beta1=args.beta1, beta2=args.beta2, epsilon=args.eps,
                            early_stop_patience=args.patience, seed=args.seed,
                            freeze_walks=args.freeze_walks)
    return model_cfg, walk_cfg, train_cfg


def cmd_train(args, manifest: RunManifest) -> int:
    if (args.edges is None) == (args.split is None):
        raise UsageError("give exactly one of --edges or --split")
    try:
        model_cfg, walk_cfg, train_cfg = _configs_from_args(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = None
    if args.split is not None:
        _require_file(args.split, "split")
        manifest.add_input(args.split)
        split = load_split(args.split)
        graph = split.train_graph
    else:
        _require_file(args.edges, "edge list")
        manifest.add_input(args.edges)
        graph = load_edge_list(args.edges)
    if args.attrs is None and model_cfg.lam != 0:
        logger.warning("no attribute file given; attribute embeddings stay unused")
    manifest.add_input(args.attrs)
    attrs = _load_attrs(args.attrs, graph.num_nodes)
    manifest.data["resolved"] = {"model": model_cfg.to_dict(), "walks": asdict(walk_cfg),
                                 "train": asdict(train_cfg)}

    log_path = Path(args.log) if args.log else Path(f"{args.out}.log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", encoding="utf-8") as log_fh:
        def on_epoch(rec):
            log_fh.write(format_log([rec], args.deterministic))
            log_fh.flush()
            if not args.quiet:
                val = "nan" if rec.val_auroc is None else f"{rec.val_auroc:.4f}"
                print(f"epoch {rec.epoch} loss {rec.loss:.6f} val_auroc {val}", file=sys.stderr)

        result = train(graph, attrs, model_cfg, walk_cfg, train_cfg, validation=split,
                       on_epoch=on_epoch)
    manifest.add_output(log_path)

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(args.out, result.params, model_cfg)
    manifest.add_output(args.out)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.params, model_cfg, result.adam)
        manifest.add_output(args.checkpoint)
    if args.embeddings:
        save_embeddings(args.embeddings, final_representations(result.params, model_cfg, attrs))
        manifest.add_output(args.embeddings)
    manifest.data["best_epoch"] = result.best_epoch
    manifest.data["epochs_run"] = len(result.history)
    print(f"trained {len(result.history)} epoch(s); best_epoch={result.best_epoch} -> {args.out}")
    return EXIT_OK


def cmd_eval_lp(args, manifest: RunManifest) -> int:
    params, config, attrs = _load_model_and_attrs(args, manifest)
    _require_file(args.split, "split")
    manifest.add_input(args.split)
    split = load_split(args.split)
    if split.num_nodes != params.num_nodes:
        raise ShapeMismatchError(f"model has {params.num_nodes} nodes, split has {split.num_nodes}")
    meta = {"split_seed": split.seed, "on": args.on}
    if args.on == "test":
        pos, neg = split.test_pos, split.test_neg
    elif args.on == "val":
        pos, neg = split.val_pos, split.val_neg
    else:
        # sanity mode: scores edges the model was trained on
        pos = split.train_graph.edges()
        held = np.concatenate([split.test_pos, split.val_pos, split.test_neg, split.val_neg])
        neg = sample_negative_edges(split.train_graph, len(pos), args.seed, exclude=held)
        meta["leakage"] = "evaluated on training edges"
    if len(pos) == 0 or len(neg) == 0:
        raise UsageError(f"split has no {args.on} edges to evaluate")
    report = link_prediction_eval(params, config, attrs, pos, neg, args.score, meta)
    _write_report([report], args.out, manifest)
    return EXIT_OK


def cmd_eval_nc(args, manifest: RunManifest) -> int:
    params, config, attrs = _load_model_and_attrs(args, manifest)
    _require_file(args.labels, "label")
    manifest.add_input(args.labels)
    labels = load_labels(args.labels, params.num_nodes)
    reports = [classification_eval(params, config, attrs, labels, rho, args.repeats,
                                   args.seed, args.l2) for rho in args.rho]
    _write_report(reports, args.out, manifest)
    return EXIT_OK


def _load_names(path: str) -> dict[int, str]:
    names = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            node, _, title = line.rstrip("\n").partition("\t")
            try:
                names[int(node)] = title
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: expected 'node<TAB>title'") from None
    return names


def cmd_query(args, manifest: RunManifest) -> int:
    params, config, attrs = _load_model_and_attrs(args, manifest)
    if not 0 <= args.node < params.num_nodes:
        raise UsageError(f"unknown node id {args.node} (model has {params.num_nodes} nodes)")
    if args.k >= params.num_nodes:
        raise UsageError(f"--k {args.k} must be smaller than the node count {params.num_nodes}")
    names = {}
    if args.names:
        _require_file(args.names, "name mapping")
        manifest.add_input(args.names)
        names = _load_names(args.names)
    hits = nearest_neighbors(params, config, attrs, args.node, args.k) if args.k > 0 else []
    label = lambda n: names.get(n, str(n))
    print(f"query: {label(args.node)}")
    print("rank\tnode\tcosine")
    for rank, (node, sim) in enumerate(hits, start=1):
        print(f"{rank}\t{label(node)}\t{sim:.6f}")
    manifest.data["results"] = [[n, s] for n, s in hits]
    return EXIT_OK


def cmd_export(args, manifest: RunManifest) -> int:
    params, config, attrs = _load_model_and_attrs(args, manifest)
    save_embeddings(args.out, final_representations(params, config, attrs))
    manifest.add_output(args.out)
    print(f"wrote {params.num_nodes} x {config.output_dim} embeddings -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_model_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model file written by 'train'")
    p.add_argument("--attrs", help="attribute file (omit for structure-only models)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anembed", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON/YAML file of option defaults for this command")
    common.add_argument("--manifest", help="manifest path (default: next to the main output)")
    common.add_argument("--threads", type=int, default=int(os.environ.get(THREADS_ENV, "1")),
                        help=f"BLAS thread limit (default: ${THREADS_ENV} or 1)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt,
                       help="generate an SBM graph with block-correlated attributes")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--nodes-per-block", type=int, default=50)
    p.add_argument("--p-in", type=float, default=0.15, help="within-block edge probability")
    p.add_argument("--p-out", type=float, default=0.01, help="between-block edge probability")
    p.add_argument("--alpha", type=float, default=0.9,
                   help="probability that a node's attribute names its own block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix for .edges/.attrs/.labels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], formatter_class=fmt,
                       help="hold out test/validation links with matched negatives")
    p.add_argument("--edges", required=True)
    p.add_argument("--test", type=float, default=0.1, help="test fraction of edges")
    p.add_argument("--val", type=float, default=0.1, help="validation fraction of edges")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="split file to write")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a model")
    src = p.add_argument_group("data")
    src.add_argument("--edges", help="train on this full edge list (no validation)")
    src.add_argument("--split", help="train on a split's training graph, validate on its val set")
    src.add_argument("--attrs", help="attribute file (optional when --lambda 0)")
    src.add_argument("--out", required=True, help="model file to write")
    src.add_argument("--log", help="training log (default: <out>.log)")
    src.add_argument("--checkpoint", help="also write a checkpoint with optimizer state")
    src.add_argument("--embeddings", help="also export final representations as text")
    mg = p.add_argument_group("model")
    mg.add_argument("--dim", type=int, default=128, help="width of the node id embedding")
    mg.add_argument("--att-dim", type=int, default=None,
                    help="width of the attribute embedding (default: --dim)")
    mg.add_argument("--layers", type=_int_list, default=(256, 128),
                    help="hidden tower widths, comma-separated; 'none' for no hidden layer")
    mg.add_argument("--lambda", dest="lam", type=float, default=0.8, help="attribute weight")
    mg.add_argument("--activation", choices=["softsign", "tanh", "relu", "identity"],
                    default="softsign")
    mg.add_argument("--dropout", type=float, default=0.2)
    wg = p.add_argument_group("walks")
    wg.add_argument("--p", type=float, default=2.0, help="return parameter")
    wg.add_argument("--q", type=float, default=0.25, help="in-out parameter")
    wg.add_argument("--num-walks", type=int, default=10)
    wg.add_argument("--walk-length", type=int, default=80)
    wg.add_argument("--window", type=int, default=10)
    wg.add_argument("--freeze-walks", action="store_true",
                    help="generate one walk corpus and reuse it every epoch")
    wg.add_argument("--on-the-fly", action="store_true",
                    help="compute second-order weights per step instead of alias tables")
    tg = p.add_argument_group("optimization")
    tg.add_argument("--epochs", type=int, default=20)
    tg.add_argument("--bs", type=int, default=128, help="batch size")
    tg.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    tg.add_argument("--negatives", type=int, default=5, help="negatives per positive pair")
    tg.add_argument("--neg-dist", choices=["unigram75", "uniform"], default="unigram75")
    tg.add_argument("--beta1", type=float, default=0.9)
    tg.add_argument("--beta2", type=float, default=0.999)
    tg.add_argument("--eps", type=float, default=1e-8)
    tg.add_argument("--patience", type=int, default=0, help="early-stopping patience (0 = off)")
    tg.add_argument("--seed", type=int, default=0)
    tg.add_argument("--deterministic", action="store_true",
                    help="write a reproducible log (wall-clock column zeroed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-lp", parents=[common], formatter_class=fmt,
                       help="link-prediction AUROC on a split")
    _add_model_io(p)
    p.add_argument("--split", required=True)
    p.add_argument("--on", choices=["test", "val", "train"], default="test",
                   help="edge set to score; 'train' is a leakage sanity check")
    p.add_argument("--score", choices=["inner", "cosine"], default="inner")
    p.add_argument("--seed", type=int, default=0, help="negative sampling seed for --on train")
    p.add_argument("--out", help="report file (.json for structured output)")
    p.set_defaults(func=cmd_eval_lp)

    p = sub.add_parser("eval-nc", parents=[common], formatter_class=fmt,
                       help="node-classification macro/micro F1")
    _add_model_io(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--rho", type=_float_list, default=(0.1, 0.3, 0.5),
                   help="labeled training ratios, comma-separated")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--l2", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report file (.json for structured output)")
    p.set_defaults(func=cmd_eval_nc)

    p = sub.add_parser("query", parents=[common], formatter_class=fmt,
                       help="nearest neighbors by cosine similarity")
    _add_model_io(p)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--names", help="'node<TAB>title' mapping used for display")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("export", parents=[common], formatter_class=fmt,
                       help="write final representations as text")
    _add_model_io(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    path = Path(known.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise GraphFormatError(f"{path}: config must be a mapping")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = subparsers.choices.get(known.command)
    if subparser is None:
        return
    dests = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in data.items():
        dest = "lam" if key in ("lambda", "lam") else key.replace("-", "_")
        if dest not in dests:
            raise GraphFormatError(f"{path}: unknown option {key!r} for '{known.command}'")
        action = dests[dest]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif dest in ("layers", "rho") and isinstance(value, list):
            value = tuple(value)
        defaults[dest] = value
        action.required = False
    subparser.set_defaults(**defaults)


def _validate(args) -> None:
    if args.command == "split":
        if args.test < 0 or args.val < 0 or args.test + args.val >= 1:
            raise UsageError(f"--test + --val must lie in [0, 1), got {args.test} + {args.val}")
    if args.command == "query" and args.k < 0:
        raise UsageError("--k must be >= 0")
    if args.command == "eval-nc" and any(not 0 < r < 1 for r in args.rho):
        raise UsageError("every --rho value must lie in (0, 1)")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out:
        return Path(f"{out}.manifest.json")
    return Path(f"anembed-{args.command}.manifest.json")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ShapeMismatchError, ArtifactVersionError)):
        return EXIT_INCOMPATIBLE
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError, GraphFormatError,
                        ArtifactFormatError, UsageError, UnicodeDecodeError)):
        return EXIT_INPUT
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except (FileNotFoundError, GraphFormatError, yaml.YAMLError,
            argparse.ArgumentTypeError) as exc:
        print(f"anembed: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    manifest = RunManifest(args.command, args, argv)
    manifest_path = _manifest_path(args)
    func: Callable[[argparse.Namespace, RunManifest], int] = args.func
    try:
        _validate(args)
        with threadpool_limits(limits=args.threads):
            code = func(args, manifest)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code and recorded
        code = _exit_code(exc)
        print(f"anembed: error: {exc}", file=sys.stderr)
        if code == EXIT_RUNTIME:
            logger.debug("%s", traceback.format_exc())
        manifest.finish(manifest_path, "error", f"{type(exc).__name__}: {exc}")
        return code
    manifest.finish(manifest_path, "ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
