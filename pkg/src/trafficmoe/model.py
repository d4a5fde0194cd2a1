"""Causal transformer backbone with a shared-plus-routed expert FFN.

Each block runs (RMSNorm -> rotary Q/K -> causal multi-head attention ->
residual) then (RMSNorm -> always-on shared expert + top-k routed
specialized experts -> residual). A dense-FFN variant of the same
backbone (single wide SwiGLU per block) exists for efficiency
comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 8
    n_experts: int = 8
    top_k: int = 2
    ffn_hidden: int = 1024
    vocab_size: int = 65541
    max_tokens: int = 512
    aux_loss_weight: float = 0.02
    num_classes: Optional[int] = None
    ffn_kind: str = "moe"  # "moe" or "dense"
    dense_hidden: Optional[int] = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_kind == "moe":
            if not (1 <= self.top_k <= self.n_experts):
                raise ValueError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
            if self.ffn_hidden % self.top_k != 0:
                raise ValueError(
                    f"ffn_hidden={self.ffn_hidden} not divisible by top_k={self.top_k}"
                )
        elif self.ffn_kind == "dense":
            if not self.dense_hidden:
                raise ValueError("dense variant needs dense_hidden")
        else:
            raise ValueError(f"unknown ffn_kind {self.ffn_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def expert_hidden(self) -> int:
        return self.ffn_hidden // self.top_k

    def to_text(self) -> str:
        fields = vars(self)
        return "".join(f"{k}={fields[k]}\n" for k in sorted(fields))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = line.split("=", 1)
            if value == "None":
                kwargs[key] = None
            elif key in ("aux_loss_weight",):
                kwargs[key] = float(value)
            elif key in ("ffn_kind",):
                kwargs[key] = value
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class LayerRouting:
    """Routing record for one layer: full probabilities plus selections."""

    probs: Tensor
    selected: np.ndarray  # [n_tokens, k] expert indices

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]


@dataclass
class RoutingTrace:
    """Per-layer routing records for one forward pass."""

    n_experts: int
    top_k: int
    layers: list[LayerRouting] = field(default_factory=list)

    def load_fractions(self, layer: int) -> np.ndarray:
        """Fraction of expert slots assigned to each expert; sums to 1."""
        rec = self.layers[layer]
        counts = np.bincount(rec.selected.ravel(), minlength=self.n_experts)
        return counts / (rec.n_tokens * self.top_k)

    def mean_probs(self, layer: int) -> np.ndarray:
        """Mean routing probability per expert; sums to 1."""
        return self.layers[layer].probs.data.mean(axis=0)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square, then apply the gain."""
    return T.mul(T.mul(x, T.rsqrt_mean_square(x, eps)), gain)


def rope_tables(seq_len: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [seq_len, head_dim] for pairwise rotary embedding."""
    if head_dim % 2 != 0:
        raise T.ShapeError(f"rotary embedding needs an even head dim, got {head_dim}")
    pair = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * pair / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1).astype(T.default_dtype())
    sin = np.repeat(np.sin(angles), 2, axis=1).astype(T.default_dtype())
    return cos, sin


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs (x_{2i}, x_{2i+1}) by position-dependent angles."""
    head_dim = x.shape[-1]
    cos, sin = rope_tables(int(np.max(positions)) + 1, head_dim, base)
    return _rope_apply(x, cos[positions], sin[positions])


def _rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return T.add(T.mul(x, cos), T.mul(T.rotate_pairs(x), sin))


def route_tokens(z: Tensor, router_weight: Tensor, top_k: int) -> tuple[Tensor, Tensor, np.ndarray]:
    """Softmax routing scores plus their sparse top-k restriction.

    Kept entries retain their softmax values (no renormalization); ties
    are broken toward the lowest expert index. Returns (dense scores,
    sparse scores, selected indices [n, k]).
    """
    n_experts = router_weight.shape[-1]
    if not (1 <= top_k <= n_experts):
        raise ValueError(f"top_k={top_k} outside [1, {n_experts}]")
    scores = T.softmax_lastdim(T.matmul(z, router_weight))
    # stable argsort of -p keeps the lowest index first among ties
    order = np.argsort(-scores.data, axis=-1, kind="stable")
    selected = order[:, :top_k]
    keep = np.zeros(scores.shape, dtype=scores.data.dtype)
    np.put_along_axis(keep, selected, 1.0, axis=-1)
    sparse = T.mul(scores, keep)
    return scores, sparse, selected


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """Gated feed-forward: (SiLU(x W_gate) * (x W_up)) W_down."""
    return T.matmul(T.mul(T.silu(T.matmul(x, w_gate)), T.matmul(x, w_up)), w_down)


class TrafficModel:
    """Backbone network over token-ID sequences.

    Parameters are held in a flat name -> Tensor map; the layout is the
    checkpoint contract (see ``named_parameters``).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rope_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        scale = 0.02

        def normal(*shape):
            return rng.normal(0.0, scale, size=shape)

        self._add("embed.tok", normal(cfg.vocab_size, cfg.d_model))
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            self._add(f"{p}.attn.norm_gain", np.ones(cfg.d_model))
            for j in range(cfg.n_heads):
                self._add(f"{p}.attn.head{j}.wq", normal(cfg.d_model, cfg.head_dim))
                self._add(f"{p}.attn.head{j}.wk", normal(cfg.d_model, cfg.head_dim))
                self._add(f"{p}.attn.head{j}.wv", normal(cfg.d_model, cfg.head_dim))
            self._add(f"{p}.attn.wo", normal(cfg.d_model, cfg.d_model))
            self._add(f"{p}.ffn.norm_gain", np.ones(cfg.d_model))
            if cfg.ffn_kind == "moe":
                self._add(f"{p}.moe.router", normal(cfg.d_model, cfg.n_experts))
                self._add(f"{p}.moe.shared_gate", normal(cfg.d_model))
                self._add(f"{p}.moe.shared.w_gate", normal(cfg.d_model, cfg.ffn_hidden))
                self._add(f"{p}.moe.shared.w_up", normal(cfg.d_model, cfg.ffn_hidden))
                self._add(f"{p}.moe.shared.w_down", normal(cfg.ffn_hidden, cfg.d_model))
                for e in range(cfg.n_experts):
                    q = f"{p}.moe.expert{e}"
                    self._add(f"{q}.w_gate", normal(cfg.d_model, cfg.expert_hidden))
                    self._add(f"{q}.w_up", normal(cfg.d_model, cfg.expert_hidden))
                    self._add(f"{q}.w_down", normal(cfg.expert_hidden, cfg.d_model))
            else:
                self._add(f"{p}.ffn.w_gate", normal(cfg.d_model, cfg.dense_hidden))
                self._add(f"{p}.ffn.w_up", normal(cfg.d_model, cfg.dense_hidden))
                self._add(f"{p}.ffn.w_down", normal(cfg.dense_hidden, cfg.d_model))
        self._add("final_norm_gain", np.ones(cfg.d_model))
        self._add("head.vocab", normal(cfg.d_model, cfg.vocab_size))
        if cfg.num_classes:
            self._add("head.cls.w1", normal(cfg.d_model, cfg.d_model))
            self._add("head.cls.b1", np.zeros(cfg.d_model))
            self._add("head.cls.w2", normal(cfg.d_model, cfg.num_classes))
            self._add("head.cls.b2", np.zeros(cfg.num_classes))

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def ffn_parameter_counts(self) -> tuple[int, int]:
        """(per-token active, total) FFN expert parameter counts.

        Covers expert matrices only (router and gates excluded): the
        shared expert is always active, plus top_k specialized experts.
        """
        cfg = self.config
        if cfg.ffn_kind == "dense":
            per_layer = 3 * cfg.d_model * cfg.dense_hidden
            return per_layer * cfg.n_layers, per_layer * cfg.n_layers
        shared = 3 * cfg.d_model * cfg.ffn_hidden
        one_expert = 3 * cfg.d_model * cfg.expert_hidden
        active = (shared + cfg.top_k * one_expert) * cfg.n_layers
        total = (shared + cfg.n_experts * one_expert) * cfg.n_layers
        return active, total

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write weights (binary checkpoint) plus a `.config` text sidecar."""
        T.save_checkpoint(self.params, path)
        Path(str(path) + ".config").write_text(self.config.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "TrafficModel":
        config = ModelConfig.from_text(Path(str(path) + ".config").read_text())
        model = cls(config, seed=0)
        arrays = T.load_checkpoint(path)
        if set(arrays) != set(model.params):
            missing = set(model.params) - set(arrays)
            extra = set(arrays) - set(model.params)
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            model.params[name].data = arr.astype(T.default_dtype())
        return model

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name].data = arr.copy()

    # -- forward ----------------------------------------------------------------

    def _rope_tables(self, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        key = (seq_len, self.config.head_dim, T.default_dtype())
        if key not in self._rope_cache:
            self._rope_cache[key] = rope_tables(seq_len, self.config.head_dim)
        return self._rope_cache[key]

    def _attention_block(self, h_seq: Tensor, layer: int, causal: np.ndarray) -> Tensor:
        """One sequence's attention sublayer: pre-norm, rotary Q/K, residual."""
        cfg = self.config
        p = self.params
        seq_len = h_seq.shape[0]
        cos, sin = self._rope_tables(seq_len)
        z = rmsnorm(h_seq, p[f"layers.{layer}.attn.norm_gain"])
        scale = 1.0 / math.sqrt(cfg.head_dim)
        heads = []
        for j in range(cfg.n_heads):
            base = f"layers.{layer}.attn.head{j}"
            q = _rope_apply(T.matmul(z, p[f"{base}.wq"]), cos, sin)
            k = _rope_apply(T.matmul(z, p[f"{base}.wk"]), cos, sin)
            v = T.matmul(z, p[f"{base}.wv"])
            scores = T.mul(T.matmul(q, T.transpose(k)), scale)
            probs = T.softmax_lastdim(scores, allowed=causal)
            heads.append(T.matmul(probs, v))
        return T.add(h_seq, T.matmul(T.concat_cols(heads), p[f"layers.{layer}.attn.wo"]))

    def _moe_block(self, h: Tensor, layer: int, trace: RoutingTrace) -> Tensor:
        """Shared-plus-routed expert sublayer over flattened tokens."""
        cfg = self.config
        p = self.params
        n_tokens = h.shape[0]
        z = rmsnorm(h, p[f"layers.{layer}.ffn.norm_gain"])
        scores, sparse, selected = route_tokens(z, p[f"layers.{layer}.moe.router"], cfg.top_k)
        trace.layers.append(LayerRouting(probs=scores, selected=selected))

        gate_vec = T.reshape(p[f"layers.{layer}.moe.shared_gate"], (cfg.d_model, 1))
        gate = T.sigmoid(T.matmul(z, gate_vec))
        shared = f"layers.{layer}.moe.shared"
        out = T.add(h, T.mul(gate, swiglu(z, p[f"{shared}.w_gate"], p[f"{shared}.w_up"], p[f"{shared}.w_down"])))

        # Gather-compute-scatter: each expert runs only on its tokens.
        for e in range(cfg.n_experts):
            idx = np.nonzero((selected == e).any(axis=1))[0]
            if idx.size == 0:
                continue
            base = f"layers.{layer}.moe.expert{e}"
            x_e = T.gather_rows(z, idx)
            weight = T.take_elems(sparse, idx, np.full(idx.size, e))
            y_e = T.mul(swiglu(x_e, p[f"{base}.w_gate"], p[f"{base}.w_up"], p[f"{base}.w_down"]), weight)
            out = T.add(out, T.scatter_rows(y_e, idx, n_tokens))
        return out

    def _dense_block(self, h: Tensor, layer: int) -> Tensor:
        p = self.params
        z = rmsnorm(h, p[f"layers.{layer}.ffn.norm_gain"])
        base = f"layers.{layer}.ffn"
        return T.add(h, swiglu(z, p[f"{base}.w_gate"], p[f"{base}.w_up"], p[f"{base}.w_down"]))

    def _backbone(self, ids: np.ndarray) -> tuple[Tensor, RoutingTrace]:
        """All blocks plus the final norm over flattened [batch*seq, d]."""
        cfg = self.config
        n_seqs, seq_len = ids.shape
        causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
        h = T.gather_rows(self.params["embed.tok"], ids.reshape(-1))
        trace = RoutingTrace(n_experts=cfg.n_experts, top_k=cfg.top_k)
        row_range = np.arange(n_seqs * seq_len).reshape(n_seqs, seq_len)
        for layer in range(cfg.n_layers):
            if n_seqs == 1:
                h = self._attention_block(h, layer, causal)
            else:
                h = T.concat_rows(
                    [
                        self._attention_block(T.gather_rows(h, row_range[b]), layer, causal)
                        for b in range(n_seqs)
                    ]
                )
            if cfg.ffn_kind == "moe":
                h = self._moe_block(h, layer, trace)
            else:
                h = self._dense_block(h, layer)
        return rmsnorm(h, self.params["final_norm_gain"]), trace

    def encode(self, ids: np.ndarray) -> np.ndarray:
        """Final-layer hidden states [batch, seq, d], without a graph."""
        ids = np.atleast_2d(np.asarray(ids))
        with T.no_grad():
            h, _ = self._backbone(ids)
        return h.data.reshape(ids.shape[0], ids.shape[1], self.config.d_model)

    def forward(
        self,
        ids: np.ndarray,
        valid_mask: Optional[np.ndarray] = None,
        mode: str = "lm",
    ) -> tuple[Tensor, RoutingTrace]:
        """Run a [batch, seq] ID matrix through the backbone.

        ``lm`` returns next-token logits [batch, seq, vocab]; ``classify``
        mean-pools valid positions and returns class logits [batch,
        num_classes]. The routing trace covers every processed token.
        """
        cfg = self.config
        ids = np.atleast_2d(np.asarray(ids))
        n_seqs, seq_len = ids.shape
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(
                f"token id out of range [0, {cfg.vocab_size}): found {int(ids.min())}..{int(ids.max())}"
            )
        if mode not in ("lm", "classify"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "classify":
            if not cfg.num_classes:
                raise ValueError("classify mode requires num_classes in the config")
            if valid_mask is None:
                raise ValueError("classify mode requires a valid_mask")
        if valid_mask is not None:
            valid_mask = np.atleast_2d(np.asarray(valid_mask, dtype=bool))

        h, trace = self._backbone(ids)
        row_range = np.arange(n_seqs * seq_len).reshape(n_seqs, seq_len)

        if mode == "lm":
            logits = T.matmul(h, self.params["head.vocab"])
            return T.reshape(logits, (n_seqs, seq_len, cfg.vocab_size)), trace

        pooled_rows = []
        for b in range(n_seqs):
            n_valid = int(valid_mask[b].sum())
            if n_valid == 0:
                raise ValueError(f"sequence {b} has no valid tokens to pool")
            weights = (valid_mask[b] / n_valid).astype(T.default_dtype())[None, :]
            pooled_rows.append(T.matmul(Tensor(weights), T.gather_rows(h, row_range[b])))
        pooled = T.concat_rows(pooled_rows) if len(pooled_rows) > 1 else pooled_rows[0]
        p = self.params
        hidden = T.silu(T.add(T.matmul(pooled, p["head.cls.w1"]), p["head.cls.b1"]))
        logits = T.add(T.matmul(hidden, p["head.cls.w2"]), p["head.cls.b2"])
        return logits, trace


def load_balance_loss(trace: RoutingTrace) -> Tensor:
    """Mean over layers of n_experts * sum_e load_e * mean_prob_e.

    Equals 1 at perfectly uniform routing; n_experts at full collapse
    with top_k = 1. Counts are treated as constants; gradients flow
    through the routing probabilities only.
    """
    if not trace.layers or trace.layers[0].n_tokens == 0:
        raise ValueError("load balance loss needs at least one routed token")
    total: Optional[Tensor] = None
    for layer_idx, rec in enumerate(trace.layers):
        load = trace.load_fractions(layer_idx).astype(rec.probs.data.dtype)
        prob = T.tmean(rec.probs, axis=0)
        term = T.mul(T.tsum(T.mul(prob, load)), float(trace.n_experts))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(trace.layers))


def causal_attention(h_seq: Tensor, model: TrafficModel, layer: int = 0) -> Tensor:
    """Single-sequence attention sublayer (exposed for direct checks)."""
    seq_len = h_seq.shape[0]
    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    return model._attention_block(h_seq, layer, causal)


def moe_layer(h_seq: Tensor, model: TrafficModel, layer: int = 0) -> tuple[Tensor, RoutingTrace]:
    """Single-sequence expert sublayer (exposed for direct checks)."""
    trace = RoutingTrace(n_experts=model.config.n_experts, top_k=model.config.top_k)
    out = model._moe_block(h_seq, layer, trace)
    return out, trace


def expert_forward(z: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """Alias for the gated feed-forward an individual expert computes."""
    return swiglu(z, w_gate, w_up, w_down)
