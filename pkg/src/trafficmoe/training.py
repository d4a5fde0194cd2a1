"""Training loops: autoregressive pretraining and classification fine-tuning.

Both modes minimize a task loss plus a weighted expert load-balance
term. Fine-tuning adds layer-wise learning-rate decay and early stopping
on validation macro-F1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, TrafficModel, load_balance_loss
from .tensor import AdamW, Tensor
from .tokenization import TokenSequence


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``epochs`` and ``base_lr`` default per mode: 8 epochs at 3e-4 for
    pretraining, up to 40 epochs at 5e-5 for fine-tuning.
    """

    mode: str = "pretrain"  # "pretrain" or "finetune"
    batch_size: int = 32
    epochs: Optional[int] = None
    base_lr: Optional[float] = None
    aux_weight: float = 0.02
    llrd_decay: float = 0.9
    patience: int = 5
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs is None:
            self.epochs = 8 if self.mode == "pretrain" else 40
        if self.base_lr is None:
            self.base_lr = 3e-4 if self.mode == "pretrain" else 5e-5
        if not (0.0 < self.llrd_decay <= 1.0):
            raise ValueError("llrd_decay must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        total = sum(self.split_ratios)
        if total <= 0 or any(r < 0 for r in self.split_ratios):
            raise ValueError("split ratios must be non-negative with positive sum")
        self.split_ratios = tuple(r / total for r in self.split_ratios)


# -- losses -----------------------------------------------------------------


def ntp_loss(lm_logits: Tensor, ids: np.ndarray, valid_mask: np.ndarray) -> Tensor:
    """Next-token negative log-likelihood, averaged over valid targets.

    The hidden state at position t-1 predicts the token at t; padded
    targets carry zero weight.
    """
    ids = np.atleast_2d(ids)
    valid_mask = np.atleast_2d(valid_mask)
    n_seqs, seq_len = ids.shape
    if np.any(valid_mask.sum(axis=1) < 2):
        raise ValueError("every sequence needs at least 2 valid tokens for next-token loss")
    flat = T.reshape(lm_logits, (n_seqs * seq_len, lm_logits.shape[-1]))
    # row b*T+t predicts ids[b, t+1]; the final position predicts nothing
    targets = np.zeros(n_seqs * seq_len, dtype=np.int64)
    weights = np.zeros(n_seqs * seq_len)
    shifted = ids[:, 1:].reshape(-1)
    rows = (np.arange(n_seqs)[:, None] * seq_len + np.arange(seq_len - 1)[None, :]).reshape(-1)
    targets[rows] = shifted
    weights[rows] = valid_mask[:, 1:].reshape(-1).astype(float)
    return T.cross_entropy_logits(flat, targets, weights)


def classification_loss(class_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-averaged cross-entropy over class logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = class_logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return T.cross_entropy_logits(class_logits, labels)


def composite_loss(task_loss: Tensor, aux_loss, aux_weight: float) -> Tensor:
    """task + aux_weight * aux."""
    if aux_weight < 0:
        raise ValueError("aux_weight must be >= 0")
    if aux_loss is None or (np.isscalar(aux_loss) and aux_loss == 0):
        return task_loss
    return T.add(task_loss, T.mul(aux_loss, aux_weight))


# -- schedules and parameter grouping -------------------------------------------


def llrd_schedule(n_layers: int, base_lr: float, decay: float) -> np.ndarray:
    """Per-layer learning rates decay ** (L - l) * base_lr for l = 1..L."""
    return np.array([decay ** (n_layers - l) * base_lr for l in range(1, n_layers + 1)])


def _no_decay(name: str) -> bool:
    # norms, the shared-expert gate vector, and biases skip weight decay
    return "norm_gain" in name or "shared_gate" in name or name.endswith((".b1", ".b2"))


def _layer_rank(name: str, n_layers: int) -> int:
    """LLRD depth: embedding = layer 1, block i = layer i+1 capped, heads = layer L."""
    if name.startswith("embed."):
        return 1
    if name.startswith("layers."):
        idx = int(name.split(".")[1])
        return min(idx + 1, n_layers)
    return n_layers  # heads and the final norm adapt fastest


def build_param_groups(
    model: TrafficModel,
    base_lr: float,
    llrd_decay: float = 1.0,
    weight_decay: float = 0.0,
) -> list[dict]:
    """Optimizer groups keyed by (LLRD depth, decay eligibility)."""
    n_layers = model.config.n_layers
    rates = llrd_schedule(n_layers, base_lr, llrd_decay)
    buckets: dict[tuple[int, bool], list[Tensor]] = {}
    for name, param in model.named_parameters().items():
        key = (_layer_rank(name, n_layers), not _no_decay(name))
        buckets.setdefault(key, []).append(param)
    groups = []
    for (rank, decayed), params in sorted(buckets.items(), key=lambda kv: kv[0]):
        groups.append(
            {
                "params": params,
                "lr": float(rates[rank - 1]),
                "weight_decay": weight_decay if decayed else 0.0,
            }
        )
    return groups


# -- dataset handling ------------------------------------------------------------


def split_dataset(
    sequences: Sequence,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    stratified: bool = False,
) -> tuple[list, list, list]:
    """Shuffle and split into train/val/test by the given ratios.

    Stratified mode applies the ratios inside every class (labels read
    from ``.label``), keeping per-class proportions within one sample.
    """
    total = sum(ratios)
    if total <= 0 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative with positive sum")
    r_train, r_val = ratios[0] / total, ratios[1] / total
    rng = np.random.default_rng(seed)
    n = len(sequences)

    def cut(indices: np.ndarray) -> tuple[list[int], list[int], list[int]]:
        m = len(indices)
        n_train = int(round(m * r_train))
        n_val = int(round(m * (r_train + r_val))) - n_train
        return (
            list(indices[:n_train]),
            list(indices[n_train : n_train + n_val]),
            list(indices[n_train + n_val :]),
        )

    if not stratified:
        train_idx, val_idx, test_idx = cut(rng.permutation(n))
    else:
        labels = np.array([-1 if s.label is None else s.label for s in sequences])
        train_idx, val_idx, test_idx = [], [], []
        for cls in np.unique(labels):
            members = np.nonzero(labels == cls)[0]
            if members.size == 0:
                warnings.warn(f"class {cls} has no samples; skipped in stratified split")
                continue
            tr, va, te = cut(members[rng.permutation(members.size)])
            train_idx += tr
            val_idx += va
            test_idx += te
    return (
        [sequences[i] for i in sorted(train_idx)],
        [sequences[i] for i in sorted(val_idx)],
        [sequences[i] for i in sorted(test_idx)],
    )


def few_shot_subsample(train_set: Sequence, fraction: float, seed: int = 0) -> list:
    """Per-class subsample keeping floor(n * fraction), never below 1."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return list(train_set)
    rng = np.random.default_rng(seed)
    labels = np.array([-1 if s.label is None else s.label for s in train_set])
    chosen: list[int] = []
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        n_keep = max(1, int(len(members) * fraction))
        chosen += list(rng.choice(members, size=n_keep, replace=False))
    return [train_set[i] for i in sorted(chosen)]


def batch_arrays(sequences: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Stack a list of token sequences into (ids, valid_mask, labels)."""
    ids = np.stack([s.ids for s in sequences])
    valid = np.stack([s.valid_mask for s in sequences])
    if all(s.label is not None for s in sequences):
        labels = np.array([s.label for s in sequences], dtype=np.int64)
    else:
        labels = None
    return ids, valid, labels


# -- the training loop --------------------------------------------------------------


@dataclass
class History:
    """Flat (epoch, split, metric, value) records for a run."""

    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((epoch, split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for e, s, m, v in self.rows if s == split and m == metric]

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch\tsplit\tmetric\tvalue\n")
            for epoch, split, metric, value in self.rows:
                fh.write(f"{epoch}\t{split}\t{metric}\t{value:.10g}\n")


def train(
    model: TrafficModel,
    train_seqs: Sequence[TokenSequence],
    config: TrainConfig,
    val_seqs: Optional[Sequence[TokenSequence]] = None,
    run_dir: Optional[str | Path] = None,
) -> tuple[History, dict[str, np.ndarray]]:
    """Run one training job and return (history, best parameter state).

    Pretraining runs a fixed number of epochs on the next-token
    objective. Fine-tuning trains the classifier with layer-wise decayed
    learning rates, evaluates macro-F1 on ``val_seqs`` each epoch, and
    stops once ``patience`` epochs pass without improvement; the best
    epoch's parameters are restored into the model and returned.
    """
    from .evaluation import RoutingAccumulator, evaluate_classifier  # local: avoids cycle

    if len(train_seqs) == 0:
        raise ValueError("empty training set")
    if config.mode == "finetune":
        if not model.config.num_classes:
            raise ValueError("finetune requires a model with num_classes")
        if any(s.label is None for s in train_seqs):
            raise ValueError("finetune requires labeled sequences")

    rng = np.random.default_rng(config.seed)
    if config.mode == "pretrain":
        groups = build_param_groups(model, config.base_lr, 1.0, config.weight_decay)
    else:
        groups = build_param_groups(model, config.base_lr, config.llrd_decay, config.weight_decay)
    optimizer = AdamW(groups, lr=config.base_lr, weight_decay=config.weight_decay)

    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "routing").mkdir(exist_ok=True)
        (out / "config.txt").write_text(
            "".join(f"{k}={v}\n" for k, v in sorted(vars(config).items()))
            + model.config.to_text()
        )

    history = History()
    best_metric = -np.inf
    best_epoch = 0
    best_state = model.state_copy()
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_seqs))
        task_sum = aux_sum = 0.0
        n_batches = 0
        routing = RoutingAccumulator()
        for start in range(0, len(order), config.batch_size):
            batch = [train_seqs[i] for i in order[start : start + config.batch_size]]
            ids, valid, labels = batch_arrays(batch)
            step += 1
            if config.mode == "pretrain":
                logits, trace = model.forward(ids, valid, mode="lm")
                task = ntp_loss(logits, ids, valid)
            else:
                logits, trace = model.forward(ids, valid, mode="classify")
                task = classification_loss(logits, labels)
            aux = load_balance_loss(trace) if trace.layers else 0.0
            loss = composite_loss(task, aux, config.aux_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            model.zero_grad()
            loss.backward()
            optimizer.step()
            task_sum += task.item()
            aux_sum += aux.item() if isinstance(aux, Tensor) else float(aux)
            n_batches += 1
            routing.add(trace)

        task_name = "ntp_loss" if config.mode == "pretrain" else "cls_loss"
        history.add(epoch, "train", task_name, task_sum / n_batches)
        history.add(epoch, "train", "aux_loss", aux_sum / n_batches)
        if out is not None:
            routing.to_tsv(out / "routing" / f"epoch{epoch}.tsv")

        if config.mode == "finetune" and val_seqs:
            _, metrics = evaluate_classifier(model, val_seqs, config.batch_size)
            history.add(epoch, "val", "macro_f1", metrics["macro_f1"])
            history.add(epoch, "val", "accuracy", metrics["accuracy"])
            if metrics["macro_f1"] > best_metric:  # ties keep the earlier epoch
                best_metric = metrics["macro_f1"]
                best_epoch = epoch
                best_state = model.state_copy()
            elif epoch - best_epoch >= config.patience:
                break
        else:
            best_state = model.state_copy()
            best_epoch = epoch

    if out is not None:
        T.save_checkpoint(model.params, out / "last.ckpt")
        Path(str(out / "last.ckpt") + ".config").write_text(model.config.to_text())
    if config.mode == "finetune" and val_seqs:
        model.load_state(best_state)
    if out is not None:
        T.save_checkpoint(best_state, out / "best.ckpt")
        Path(str(out / "best.ckpt") + ".config").write_text(model.config.to_text())
        history.to_tsv(out / "history.tsv")
    return history, best_state
