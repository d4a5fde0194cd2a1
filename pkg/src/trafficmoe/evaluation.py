"""Classification metrics, distribution-shift splits, routing statistics,
and the sparse-vs-dense inference benchmark."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, RoutingTrace, TrafficModel
from .tokenization import TokenSequence

# -- confusion matrix and derived metrics -------------------------------------


@dataclass
class ConfusionMatrix:
    """Counts[true, predicted] over a fixed class set."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def compute_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class precision/recall/F1/FNR/FPR plus macro averages and accuracy.

    Zero-denominator conventions: precision and recall fall back to 0,
    F1 is 0 when precision + recall is 0, and FNR is defined as
    1 - recall so the identity holds exactly.
    """
    counts = cm.counts
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(float)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = cm.total - tp - fp - fn

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        fpr = np.where(fp + tn > 0, fp / (fp + tn), 0.0)
    fnr = 1.0 - recall

    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fnr": fnr,
        "fpr": fpr,
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "accuracy": float(tp.sum() / cm.total),
    }


def metrics_to_tsv(metrics: dict, path: str | Path) -> None:
    """Write scalar metrics then per-class rows, deterministically."""
    with open(path, "w") as fh:
        fh.write("metric\tclass\tvalue\n")
        for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
            fh.write(f"{key}\t-\t{metrics[key]:.10g}\n")
        for key in ("precision", "recall", "f1", "fnr", "fpr"):
            for cls, value in enumerate(metrics[key]):
                fh.write(f"{key}\t{cls}\t{value:.10g}\n")


def predict_classes(
    model: TrafficModel, sequences: Sequence[TokenSequence], batch_size: int = 32
) -> np.ndarray:
    """Argmax class predictions, computed without building graphs."""
    from .training import batch_arrays

    preds = []
    with T.no_grad():
        for start in range(0, len(sequences), batch_size):
            ids, valid, _ = batch_arrays(sequences[start : start + batch_size])
            logits, _ = model.forward(ids, valid, mode="classify")
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_classifier(
    model: TrafficModel, sequences: Sequence[TokenSequence], batch_size: int = 32
) -> tuple[ConfusionMatrix, dict]:
    labels = np.array([s.label for s in sequences], dtype=np.int64)
    preds = predict_classes(model, sequences, batch_size)
    cm = ConfusionMatrix.from_labels(labels, preds, model.config.num_classes)
    return cm, compute_metrics(cm)


# -- distribution-shift split constructors --------------------------------------


def time_shift_split(
    items: Sequence,
    times: Sequence[float],
    labels: Sequence[int],
    train_span: float = 0.4,
    test_span: float = 0.4,
) -> tuple[list, list]:
    """Past-predicts-future split on each class's time span.

    Per class, the earliest ``train_span`` fraction of the span goes to
    train, the latest ``test_span`` fraction to test; the buffer between
    them is discarded. A class whose samples share one timestamp goes
    entirely to train, with a warning.
    """
    times = np.asarray(times, dtype=float)
    labels = np.asarray(labels)
    train_items: list = []
    test_items: list = []
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        t = times[members]
        span = float(t.max() - t.min())
        if span == 0.0:
            warnings.warn(f"class {cls} spans zero time; all samples assigned to train")
            train_items += [items[i] for i in members]
            continue
        lo = t.min() + train_span * span
        hi = t.max() - test_span * span
        train_items += [items[i] for i in members[t < lo]]
        test_items += [items[i] for i in members[t > hi]]
    return train_items, test_items


def proportion_shift_split(
    items: Sequence,
    coarse: Sequence[int],
    fine: Sequence[int],
    dominant: Optional[dict[int, int]] = None,
    budget: Optional[int] = None,
) -> tuple[list, list]:
    """Invert dominant/minor composition between train and test.

    Within each coarse class the dominant sub-class outnumbers the
    aggregated minor pool 4:1 in train and 1:4 in test, sampled
    disjointly in stable order. ``dominant`` maps coarse class to the
    dominant fine sub-class (default: the most frequent one);
    ``budget``, when given, fixes each side's per-class size.
    """
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    train_items: list = []
    test_items: list = []
    for cls in np.unique(coarse):
        members = np.nonzero(coarse == cls)[0]
        sub = fine[members]
        sub_ids, counts = np.unique(sub, return_counts=True)
        if sub_ids.size < 2:
            raise ValueError(f"coarse class {cls} needs >= 2 fine sub-classes")
        dom = dominant[cls] if dominant else int(sub_ids[np.argmax(counts)])
        dom_pool = members[sub == dom]
        min_pool = members[sub != dom]
        unit = min(len(dom_pool), len(min_pool)) // 5 if budget is None else budget // 5
        if budget is not None and budget % 5 != 0:
            raise ValueError(f"budget {budget} for class {cls} must be divisible by 5")
        if unit < 1 or len(dom_pool) < 5 * unit or len(min_pool) < 5 * unit:
            raise ValueError(
                f"coarse class {cls} has too few samples to realize the 4:1 ratios "
                f"(dominant {len(dom_pool)}, minor {len(min_pool)})"
            )
        train_items += [items[i] for i in dom_pool[: 4 * unit]]
        test_items += [items[i] for i in dom_pool[4 * unit : 5 * unit]]
        train_items += [items[i] for i in min_pool[:unit]]
        test_items += [items[i] for i in min_pool[unit : 5 * unit]]
    return train_items, test_items


def compose_shift_split(
    items: Sequence,
    coarse: Sequence[int],
    fine: Sequence[int],
    seed: int = 0,
    holdout_fraction: float = 0.2,
) -> tuple[list, list]:
    """Hide half of each coarse class's sub-classes from training.

    Per coarse class, a seeded random ceil(s/2) of its s sub-classes go
    only to test; each remaining sub-class holds out a fraction of its
    samples (at least one) so test covers every sub-class.
    """
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    rng = np.random.default_rng(seed)
    train_items: list = []
    test_items: list = []
    for cls in np.unique(coarse):
        members = np.nonzero(coarse == cls)[0]
        sub_ids = np.unique(fine[members])
        if sub_ids.size < 2:
            raise ValueError(f"coarse class {cls} needs >= 2 fine sub-classes")
        n_masked = -(-sub_ids.size // 2)  # ceil(s/2)
        masked = set(rng.permutation(sub_ids)[:n_masked].tolist())
        for sub in sub_ids:
            pool = members[fine[members] == sub]
            if sub in masked:
                test_items += [items[i] for i in pool]
            else:
                n_test = max(1, int(len(pool) * holdout_fraction))
                picked = set(rng.choice(pool, size=n_test, replace=False).tolist())
                test_items += [items[i] for i in pool if i in picked]
                train_items += [items[i] for i in pool if i not in picked]
    return train_items, test_items


def masked_subclasses(train_fine: Sequence[int], all_fine: Sequence[int]) -> set:
    """Sub-classes present overall but absent from the training side."""
    return set(np.unique(all_fine)) - set(np.unique(train_fine))


# -- routing statistics -----------------------------------------------------------


class RoutingAccumulator:
    """Aggregates routing traces into per-layer load and probability tables."""

    def __init__(self):
        self._prob_sums: list[np.ndarray] = []
        self._counts: list[np.ndarray] = []
        self._tokens: list[int] = []
        self.top_k = None

    def add(self, trace: RoutingTrace) -> None:
        if not trace.layers:
            return
        self.top_k = trace.top_k
        if not self._prob_sums:
            n = trace.n_experts
            self._prob_sums = [np.zeros(n) for _ in trace.layers]
            self._counts = [np.zeros(n) for _ in trace.layers]
            self._tokens = [0 for _ in trace.layers]
        for i, rec in enumerate(trace.layers):
            self._prob_sums[i] += rec.probs.data.sum(axis=0)
            self._counts[i] += np.bincount(rec.selected.ravel(), minlength=len(self._counts[i]))
            self._tokens[i] += rec.n_tokens

    @property
    def n_layers(self) -> int:
        return len(self._prob_sums)

    def mean_probs(self, layer: int) -> np.ndarray:
        return self._prob_sums[layer] / max(self._tokens[layer], 1)

    def load_fractions(self, layer: int) -> np.ndarray:
        denom = max(self._tokens[layer] * (self.top_k or 1), 1)
        return self._counts[layer] / denom

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("layer\texpert\tload\tprob\n")
            for layer in range(self.n_layers):
                load = self.load_fractions(layer)
                prob = self.mean_probs(layer)
                for e in range(len(load)):
                    fh.write(f"{layer}\t{e}\t{load[e]:.10g}\t{prob[e]:.10g}\n")


def routing_stats(traces: Sequence[RoutingTrace]) -> RoutingAccumulator:
    """Fold many traces into one table of per-layer Load/Prob statistics."""
    acc = RoutingAccumulator()
    for trace in traces:
        acc.add(trace)
    if acc.n_layers == 0:
        raise ValueError("routing_stats needs at least one non-empty trace")
    return acc


def trace_dump_tsv(trace: RoutingTrace, path: str | Path) -> None:
    """Dump one trace at full resolution: layer, token, expert, probability."""
    with open(path, "w") as fh:
        fh.write("layer\ttoken\texpert\tprob\n")
        for layer, rec in enumerate(trace.layers):
            probs = rec.probs.data
            for tok in range(rec.n_tokens):
                for e in range(probs.shape[1]):
                    fh.write(f"{layer}\t{tok}\t{e}\t{probs[tok, e]:.10g}\n")


# -- analytic FLOP accounting -------------------------------------------------------


def ffn_flops_per_token(
    d_model: int,
    shared_hidden: int,
    expert_hidden: int,
    n_experts: int,
    top_k: int,
) -> int:
    """Matmul FLOPs one token spends in a routed FFN sublayer."""
    router = 2 * d_model * n_experts + 2 * d_model
    shared = 6 * d_model * shared_hidden
    routed = 6 * d_model * expert_hidden * top_k
    return router + shared + routed


def dense_ffn_flops_per_token(d_model: int, hidden: int) -> int:
    return 6 * d_model * hidden


def analytic_flops_per_sequence(config: ModelConfig, seq_len: int, mode: str = "classify") -> int:
    """Matmul FLOPs to run one sequence forward, matching the implementation."""
    d = config.d_model
    attn = 8 * seq_len * d * d + 4 * seq_len * seq_len * d
    if config.ffn_kind == "moe":
        ffn = seq_len * ffn_flops_per_token(
            d, config.ffn_hidden, config.expert_hidden, config.n_experts, config.top_k
        )
    else:
        ffn = seq_len * dense_ffn_flops_per_token(d, config.dense_hidden)
    total = config.n_layers * (attn + ffn)
    if mode == "lm":
        total += 2 * seq_len * d * config.vocab_size
    else:
        total += 2 * seq_len * d + 2 * d * d + 2 * d * config.num_classes
    return total


# -- sparse-vs-dense benchmark -----------------------------------------------------


@dataclass
class BenchRow:
    batch_size: int
    throughput_seq_per_s: float
    mean_latency_ms: float
    flops_per_seq: int
    active_param_ratio: float
    activation_bytes: int


@dataclass
class BenchReport:
    model_kind: str
    rows: list[BenchRow] = field(default_factory=list)

    def to_tsv(self, path: str | Path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode) as fh:
            if not append:
                fh.write(
                    "model\tbatch_size\tthroughput_seq_per_s\tmean_latency_ms"
                    "\tflops_per_seq\tactive_param_ratio\tactivation_bytes\n"
                )
            for r in self.rows:
                fh.write(
                    f"{self.model_kind}\t{r.batch_size}\t{r.throughput_seq_per_s:.6g}"
                    f"\t{r.mean_latency_ms:.6g}\t{r.flops_per_seq}"
                    f"\t{r.active_param_ratio:.6g}\t{r.activation_bytes}\n"
                )


def build_dense_variant(model: TrafficModel, seed: int = 0) -> TrafficModel:
    """Parameter-matched dense twin: each expert sublayer becomes one FFN.

    The dense intermediate width is chosen so total parameter counts
    match within 1%; a larger mismatch is an error.
    """
    cfg = model.config
    if cfg.ffn_kind != "moe":
        raise ValueError("model is already dense")
    per_layer = (
        cfg.d_model * cfg.n_experts  # router
        + cfg.d_model  # shared-expert gate vector
        + 3 * cfg.d_model * cfg.ffn_hidden
        + cfg.n_experts * 3 * cfg.d_model * cfg.expert_hidden
    )
    hidden = int(round(per_layer / (3 * cfg.d_model)))
    dense_cfg = ModelConfig(
        n_layers=cfg.n_layers,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_experts=cfg.n_experts,
        top_k=cfg.top_k,
        ffn_hidden=cfg.ffn_hidden,
        vocab_size=cfg.vocab_size,
        max_tokens=cfg.max_tokens,
        aux_loss_weight=cfg.aux_loss_weight,
        num_classes=cfg.num_classes,
        ffn_kind="dense",
        dense_hidden=hidden,
    )
    dense = TrafficModel(dense_cfg, seed=seed)
    check_parameter_match(model, dense)
    return dense


def check_parameter_match(a: TrafficModel, b: TrafficModel, tolerance: float = 0.01) -> None:
    n_a, n_b = a.n_parameters(), b.n_parameters()
    if abs(n_a - n_b) / max(n_a, n_b) > tolerance:
        raise ValueError(
            f"parameter counts differ by more than {tolerance:.0%}: {n_a} vs {n_b}"
        )


def efficiency_bench(
    moe_model: TrafficModel,
    dense_model: TrafficModel,
    batch_sizes: Sequence[int] = (8, 16, 32, 64),
    seq_len: Optional[int] = None,
    n_batches: int = 50,
    warmup: int = 5,
    seed: int = 0,
) -> tuple[BenchReport, BenchReport]:
    """Wall-clock throughput/latency of the routed model vs its dense twin.

    Both models see identical random batches; timing uses a monotonic
    clock over ``n_batches`` measured batches after ``warmup`` unmeasured
    ones. FLOPs are analytic; activation bytes are the forward
    allocations of one batch.
    """
    check_parameter_match(moe_model, dense_model)
    seq_len = seq_len or moe_model.config.max_tokens
    mode = "classify" if moe_model.config.num_classes else "lm"
    reports = []
    for model, kind in ((moe_model, "moe"), (dense_model, "dense")):
        report = BenchReport(model_kind=kind)
        active, total = model.ffn_parameter_counts()
        for batch_size in batch_sizes:
            rng = np.random.default_rng(seed)
            ids = rng.integers(0, model.config.vocab_size, size=(batch_size, seq_len))
            valid = np.ones((batch_size, seq_len), dtype=bool)
            with T.no_grad():
                for _ in range(warmup):
                    model.forward(ids, valid, mode=mode)
                T.reset_alloc_bytes()
                model.forward(ids, valid, mode=mode)
                batch_bytes = T.alloc_bytes()
                times = []
                for _ in range(n_batches):
                    t0 = time.perf_counter()
                    model.forward(ids, valid, mode=mode)
                    times.append(time.perf_counter() - t0)
            mean_t = float(np.mean(times))
            report.rows.append(
                BenchRow(
                    batch_size=batch_size,
                    throughput_seq_per_s=batch_size / mean_t,
                    mean_latency_ms=mean_t * 1e3,
                    flops_per_seq=analytic_flops_per_sequence(model.config, seq_len, mode),
                    active_param_ratio=active / total,
                    activation_bytes=batch_bytes,
                )
            )
        reports.append(report)
    return reports[0], reports[1]
