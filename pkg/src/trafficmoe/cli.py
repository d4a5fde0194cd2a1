"""Command-line pipeline: ingest, build-vocab, tokenize, pretrain,
finetune, eval, bench, ood, route-trace, selftest.

Exit codes: 0 success, 1 usage error, 2 data error. Config precedence is
flags > config file > built-in defaults, and the effective configuration
is echoed on every run. TRAFFICMOE_SEED overrides the default seed.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import tensor as T
from .evaluation import (
    RoutingAccumulator,
    build_dense_variant,
    compose_shift_split,
    efficiency_bench,
    evaluate_classifier,
    metrics_to_tsv,
    proportion_shift_split,
    time_shift_split,
    trace_dump_tsv,
)
from .flows import CaptureError, filter_micro_flows, parse_capture, read_flows, relabel, reassemble_sessions, write_flows
from .model import ModelConfig, TrafficModel
from .tokenization import (
    SerializerConfig,
    Vocabulary,
    build_vocabulary,
    read_corpus,
    serialize_flow,
    temporal_slice,
    tokenize,
    write_corpus,
)
from .training import DivergenceError, TrainConfig, split_dataset, train


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageExit(message)


def _default_seed() -> int:
    return int(os.environ.get("TRAFFICMOE_SEED", "0"))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: list[Path], t0: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"seed={seed}",
        f"wall_seconds={time.time() - t0:.3f}",
    ]
    lines += [f"config.{k}={v}" for k, v in sorted(config.items())]
    lines += [f"input.{p.name}={_sha256(p)}" for p in inputs if p.exists()]
    with open(out_dir / "manifest.log", "a") as fh:  # append-only run log
        fh.write("\n".join(lines) + "\n---\n")


def _echo_config(config: dict) -> None:
    for key in sorted(config):
        print(f"{key}={config[key]}")


def _read_kv_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """flags > config file > defaults; values coerced to the default's type."""
    merged = dict(defaults)
    for key, raw in file_values.items():
        if key in merged:
            merged[key] = _coerce(raw, merged[key])
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


# -- subcommand implementations ---------------------------------------------


def _cmd_ingest(args) -> int:
    t0 = time.time()
    pcap = Path(args.pcap)
    records = parse_capture(pcap.read_bytes())
    flows = reassemble_sessions(records)
    flows = filter_micro_flows(flows, args.min_packets, keep_all=args.keep_all)
    if args.label is not None:
        flows = [relabel(f, args.label) for f in flows]
    out = Path(args.out)
    write_flows(flows, out)
    config = {
        "pcap": str(pcap),
        "min_packets": args.min_packets,
        "keep_all": args.keep_all,
        "label": args.label,
    }
    _echo_config(config)
    print(f"packets={len(records)} flows={len(flows)}")
    _write_manifest(out, "ingest", config, _default_seed(), [pcap], t0)
    return 0


def _serializer_from_args(args, file_values: dict) -> tuple[SerializerConfig, dict]:
    defaults = {"k": 10, "j": 40, "stride": 2, "max_tokens": 512}
    flags = {"k": args.k, "j": args.j, "stride": args.stride, "max_tokens": args.max_tokens}
    merged = _resolve(defaults, file_values, flags)
    cfg = SerializerConfig(
        packets_per_flow=merged["k"],
        payload_bytes=merged["j"],
        bigram_stride=merged["stride"],
        max_tokens=merged["max_tokens"],
    )
    return cfg, merged


def _cmd_build_vocab(args) -> int:
    t0 = time.time()
    file_values = _read_kv_config(args.config)
    serializer, config = _serializer_from_args(args, file_values)
    config.update({"vocab_mode": args.vocab_mode, "min_freq": args.min_freq})
    if args.vocab_mode == "full_bigram":
        vocab = build_vocabulary(mode="full_bigram")
    else:
        flow_dirs = [Path(d) for d in args.flows]
        corpus = (serialize_flow(f, serializer) for d in flow_dirs for f in read_flows(d))
        vocab = build_vocabulary(corpus, mode="wordpiece", min_freq=args.min_freq)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _echo_config(config)
    print(f"vocab_size={len(vocab)}")
    inputs = [Path(d) / "packets.bin" for d in (args.flows or [])]
    _write_manifest(out.parent, "build-vocab", config, _default_seed(), inputs, t0)
    return 0


def _cmd_tokenize(args) -> int:
    t0 = time.time()
    file_values = _read_kv_config(args.config)
    serializer, config = _serializer_from_args(args, file_values)
    config["slice_window"] = args.slice_window
    vocab = Vocabulary.load(args.vocab)
    sequences = []
    for flow_dir in args.flows:
        for flow in read_flows(flow_dir):
            parts = (
                temporal_slice(flow, args.slice_window) if args.slice_window > 0 else [flow]
            )
            for part in parts:
                serialized = serialize_flow(part, serializer)
                sequences.append(tokenize(serialized, vocab, serializer.max_tokens, label=part.label))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(sequences, out)
    _echo_config(config)
    print(f"sequences={len(sequences)}")
    inputs = [Path(args.vocab)] + [Path(d) / "packets.bin" for d in args.flows]
    _write_manifest(out.parent, "tokenize", config, _default_seed(), inputs, t0)
    return 0


def _model_defaults() -> dict:
    return {
        "n_layers": 4,
        "d_model": 256,
        "n_heads": 8,
        "n_experts": 8,
        "top_k": 2,
        "ffn_hidden": 1024,
        "num_classes": 0,
    }


def _train_defaults(mode: str) -> dict:
    return {
        "batch_size": 32,
        "epochs": 8 if mode == "pretrain" else 40,
        "base_lr": 3e-4 if mode == "pretrain" else 5e-5,
        "aux_weight": 0.02,
        "llrd_decay": 0.9,
        "patience": 5,
        "weight_decay": 0.01,
    }


def _collect_train_flags(args) -> dict:
    keys = (
        "n_layers", "d_model", "n_heads", "n_experts", "top_k", "ffn_hidden",
        "num_classes", "batch_size", "epochs", "base_lr", "aux_weight",
        "llrd_decay", "patience", "weight_decay",
    )
    return {k: getattr(args, k) for k in keys}


def _run_training(args, mode: str) -> int:
    t0 = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    file_values = _read_kv_config(args.config)
    defaults = {**_model_defaults(), **_train_defaults(mode)}
    merged = _resolve(defaults, file_values, _collect_train_flags(args))
    sequences = read_corpus(args.corpus)
    if not sequences:
        raise ValueError(f"corpus {args.corpus} is empty")
    vocab = Vocabulary.load(args.vocab)
    max_tokens = len(sequences[0].ids)

    labels = {s.label for s in sequences if s.label is not None}
    num_classes = merged["num_classes"] or (max(labels) + 1 if labels else 0)

    train_config = TrainConfig(
        mode=mode,
        batch_size=merged["batch_size"],
        epochs=merged["epochs"],
        base_lr=merged["base_lr"],
        aux_weight=merged["aux_weight"],
        llrd_decay=merged["llrd_decay"],
        patience=merged["patience"],
        weight_decay=merged["weight_decay"],
        seed=seed,
    )

    if args.init:
        model = TrafficModel.load(args.init)
        if mode == "finetune" and not model.config.num_classes:
            raise ValueError("checkpoint lacks a classification head; set num_classes at pretrain")
    else:
        model_config = ModelConfig(
            n_layers=merged["n_layers"],
            d_model=merged["d_model"],
            n_heads=merged["n_heads"],
            n_experts=merged["n_experts"],
            top_k=merged["top_k"],
            ffn_hidden=merged["ffn_hidden"],
            vocab_size=len(vocab),
            max_tokens=max_tokens,
            aux_loss_weight=merged["aux_weight"],
            num_classes=num_classes or None,
        )
        model = TrafficModel(model_config, seed=seed)

    out = Path(args.out)
    if mode == "pretrain":
        history, _ = train(model, sequences, train_config, run_dir=out)
    else:
        train_seqs, val_seqs, test_seqs = split_dataset(
            sequences, train_config.split_ratios, seed=seed, stratified=True
        )
        if not val_seqs:
            val_seqs = train_seqs
        history, _ = train(model, train_seqs, train_config, val_seqs=val_seqs, run_dir=out)
        if test_seqs:
            _, metrics = evaluate_classifier(model, test_seqs, train_config.batch_size)
            metrics_to_tsv(metrics, out / "test_metrics.tsv")

    effective = dict(merged)
    effective.update({"seed": seed, "mode": mode, "corpus": args.corpus, "vocab": args.vocab})
    _echo_config(effective)
    final = history.rows[-1] if history.rows else (0, "-", "-", float("nan"))
    print(f"epochs_run={final[0]} last_{final[2]}={final[3]:.6g}")
    _write_manifest(out, mode, effective, seed, [Path(args.corpus), Path(args.vocab)], t0)
    return 0


def _cmd_eval(args) -> int:
    t0 = time.time()
    model = TrafficModel.load(args.ckpt)
    sequences = read_corpus(args.data)
    if any(s.label is None for s in sequences):
        raise ValueError("eval needs labeled sequences")
    _, metrics = evaluate_classifier(model, sequences, args.batch_size)
    out = Path(args.metrics_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_to_tsv(metrics, out)
    config = {"ckpt": args.ckpt, "data": args.data, "batch_size": args.batch_size}
    _echo_config(config)
    print(f"accuracy={metrics['accuracy']:.6g} macro_f1={metrics['macro_f1']:.6g}")
    _write_manifest(out.parent, "eval", config, _default_seed(), [Path(args.ckpt), Path(args.data)], t0)
    return 0


def _cmd_bench(args) -> int:
    t0 = time.time()
    model = TrafficModel.load(args.ckpt)
    if args.dense_ckpt:
        dense = TrafficModel.load(args.dense_ckpt)
    else:
        dense = build_dense_variant(model, seed=_default_seed())
    batch_sizes = [int(b) for b in args.batch_sizes.split(",")]
    moe_report, dense_report = efficiency_bench(
        model,
        dense,
        batch_sizes=batch_sizes,
        seq_len=args.seq_len,
        n_batches=args.batches,
        warmup=args.warmup,
        seed=_default_seed(),
    )
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    moe_report.to_tsv(out)
    dense_report.to_tsv(out, append=True)
    config = {
        "ckpt": args.ckpt,
        "dense_ckpt": args.dense_ckpt,
        "batch_sizes": args.batch_sizes,
        "seq_len": args.seq_len,
        "batches": args.batches,
    }
    _echo_config(config)
    for report in (moe_report, dense_report):
        for row in report.rows:
            print(
                f"{report.model_kind} batch={row.batch_size}"
                f" throughput={row.throughput_seq_per_s:.1f}/s"
                f" latency={row.mean_latency_ms:.1f}ms"
            )
    _write_manifest(out.parent, "bench", config, _default_seed(), [Path(args.ckpt)], t0)
    return 0


def _cmd_ood(args) -> int:
    t0 = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    flows = [f for d in args.flows for f in read_flows(d)]
    if any(f.label is None for f in flows):
        raise ValueError("ood splits need labeled flows")
    labels = np.array([f.label for f in flows])
    if args.mode == "time":
        times = np.array([f.start_time for f in flows])
        train_split, test_split = time_shift_split(flows, times, labels)
    else:
        coarse_map = {}
        for line in Path(args.coarse_map).read_text().splitlines():
            if line.strip():
                fine_txt, coarse_txt = line.split()
                coarse_map[int(fine_txt)] = int(coarse_txt)
        coarse = np.array([coarse_map[f.label] for f in flows])
        if args.mode == "proportion":
            train_split, test_split = proportion_shift_split(flows, coarse, labels)
        else:
            train_split, test_split = compose_shift_split(flows, coarse, labels, seed=seed)
        # coarse-level task: relabel both sides with the coarse class
        train_split = [relabel(f, coarse_map[f.label]) for f in train_split]
        test_split = [relabel(f, coarse_map[f.label]) for f in test_split]
    out = Path(args.out)
    write_flows(train_split, out / "train")
    write_flows(test_split, out / "test")
    config = {"mode": args.mode, "seed": seed, "coarse_map": args.coarse_map}
    _echo_config(config)
    print(f"train_flows={len(train_split)} test_flows={len(test_split)}")
    _write_manifest(out, "ood", config, seed, [Path(d) / "packets.bin" for d in args.flows], t0)
    return 0


def _cmd_route_trace(args) -> int:
    t0 = time.time()
    model = TrafficModel.load(args.ckpt)
    sequences = read_corpus(args.data)[: args.limit]
    if not sequences:
        raise ValueError("no sequences to trace")
    from .training import batch_arrays

    acc = RoutingAccumulator()
    mode = "classify" if model.config.num_classes and sequences[0].label is not None else "lm"
    with T.no_grad():
        ids, valid, _ = batch_arrays(sequences)
        _, trace = model.forward(ids, valid, mode=mode)
    acc.add(trace)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_dump_tsv(trace, out)
    stats_out = Path(args.stats_out) if args.stats_out else Path(str(out) + ".stats.tsv")
    acc.to_tsv(stats_out)
    config = {"ckpt": args.ckpt, "data": args.data, "limit": args.limit, "mode": mode}
    _echo_config(config)
    print(f"traced_sequences={len(sequences)} layers={len(trace.layers)}")
    _write_manifest(out.parent, "route-trace", config, _default_seed(), [Path(args.ckpt)], t0)
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=True) else 2


# -- parser wiring --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficmoe", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="parse a capture into session flows")
    p.add_argument("--pcap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", type=int, default=None, help="class label stamped on every flow")
    p.add_argument("--min-packets", type=int, default=3, dest="min_packets")
    p.add_argument("--keep-all", action="store_true", dest="keep_all",
                   help="bypass the micro-flow filter (scarce classes)")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("build-vocab", help="build a bigram vocabulary file")
    p.add_argument("--flows", nargs="*", default=[], help="flow directories (wordpiece mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-mode", choices=("full_bigram", "wordpiece"), default="full_bigram",
                   dest="vocab_mode")
    p.add_argument("--min-freq", type=int, default=1, dest="min_freq")
    _add_serializer_flags(p)
    p.set_defaults(func=_cmd_build_vocab)

    p = sub.add_parser("tokenize", help="serialize flows into a token-ID corpus")
    p.add_argument("--flows", nargs="+", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-window", type=float, default=0.0, dest="slice_window",
                   help="temporal slicing window in seconds (0 disables)")
    _add_serializer_flags(p)
    p.set_defaults(func=_cmd_tokenize)

    for mode in ("pretrain", "finetune"):
        p = sub.add_parser(mode, help=f"{mode} a model on a token corpus")
        p.add_argument("--corpus", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--init", default=None, help="checkpoint to start from")
        for flag, kind in (
            ("n-layers", int), ("d-model", int), ("n-heads", int), ("n-experts", int),
            ("top-k", int), ("ffn-hidden", int), ("num-classes", int), ("batch-size", int),
            ("epochs", int), ("base-lr", float), ("aux-weight", float),
            ("llrd-decay", float), ("patience", int), ("weight-decay", float),
        ):
            p.add_argument(f"--{flag}", type=kind, default=None, dest=flag.replace("-", "_"))
        p.set_defaults(func=lambda a, m=mode: _run_training(a, m))

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled sequences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics-out", required=True, dest="metrics_out")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="sparse-vs-dense inference benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dense-ckpt", default=None, dest="dense_ckpt")
    p.add_argument("--batch-sizes", default="8,16,32,64", dest="batch_sizes")
    p.add_argument("--report", required=True)
    p.add_argument("--seq-len", type=int, default=None, dest="seq_len")
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ood", help="build a distribution-shift train/test split")
    p.add_argument("--mode", choices=("time", "proportion", "compose"), required=True)
    p.add_argument("--flows", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coarse-map", default=None, dest="coarse_map",
                   help="file of `fine coarse` label pairs (proportion/compose)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_ood)

    p = sub.add_parser("route-trace", help="export expert routing for a data sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out", default=None, dest="stats_out")
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=_cmd_route_trace)

    p = sub.add_parser("selftest", help="run the built-in invariant battery")
    p.set_defaults(func=_cmd_selftest)

    return parser


def _add_serializer_flags(p) -> None:
    p.add_argument("--k", type=int, default=None, help="packets per flow")
    p.add_argument("--j", type=int, default=None, help="payload bytes per packet")
    p.add_argument("--stride", type=int, default=None, help="bigram stride (1 or 2)")
    p.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")
    p.add_argument("--config", default=None, help="key=value config file")


def main(argv: Optional[list[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (CaptureError, DivergenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
