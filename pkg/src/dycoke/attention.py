"""Deterministic toy multi-head decoder.

Just enough transformer to exercise the compression pipeline: per-layer QKV
projections, cached multi-head attention, an output projection, and a ReLU
FFN so decode-step wall clock has the same shape as the cost model. No
residual streams, no normalization, no training. Everything is derived from
(seed, layer), so a (seed, config) pair fully determines all outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokens import TokenId


class DimensionMismatch(ValueError):
    pass


class EmptyKeySet(RuntimeError):
    """Attention was asked to run over zero keys: the cache was over-pruned."""


@dataclass(frozen=True)
class ModelDims:
    """Transformer shape: layer count, hidden size, FFN inner size, heads."""

    layers: int
    hidden: int
    ffn_inner: int
    heads: int

    def __post_init__(self) -> None:
        if min(self.layers, self.hidden, self.ffn_inner, self.heads) < 1:
            raise ValueError(f"all dims must be >= 1, got {self}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


# Published LLaVA-OneVision model shapes; head counts chosen to divide evenly.
MODEL_PRESETS: dict[str, ModelDims] = {
    "0.5b": ModelDims(layers=24, hidden=896, ffn_inner=4864, heads=14),
    "7b": ModelDims(layers=28, hidden=3584, ffn_inner=18944, heads=28),
    "72b": ModelDims(layers=80, hidden=8192, ffn_inner=29568, heads=64),
}


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray = field(repr=False)
    w_k: np.ndarray = field(repr=False)
    w_v: np.ndarray = field(repr=False)
    w_o: np.ndarray = field(repr=False)
    ffn_in: np.ndarray = field(repr=False)
    ffn_out: np.ndarray = field(repr=False)


def layer_weights(dims: ModelDims, seed: int, layer: int, dtype=np.float64) -> LayerWeights:
    """Seeded weights for one layer; scales keep hidden magnitudes O(1)."""
    d, m = dims.hidden, dims.ffn_inner
    rng = np.random.default_rng([seed % 2**32, 100, layer])
    scale_d = 1.0 / np.sqrt(d)
    return LayerWeights(
        w_q=(rng.standard_normal((d, d)) * scale_d).astype(dtype),
        w_k=(rng.standard_normal((d, d)) * scale_d).astype(dtype),
        w_v=(rng.standard_normal((d, d)) * scale_d).astype(dtype),
        w_o=(rng.standard_normal((d, d)) * scale_d).astype(dtype),
        ffn_in=(rng.standard_normal((d, m)) * np.sqrt(2.0 / d)).astype(dtype),
        ffn_out=(rng.standard_normal((m, d)) * (1.0 / np.sqrt(m))).astype(dtype),
    )


def project_qkv(
    hidden_states: np.ndarray, weights: LayerWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear Q/K/V projections of a token matrix."""
    h = np.atleast_2d(hidden_states)
    if h.shape[1] != weights.w_q.shape[0]:
        raise DimensionMismatch(
            f"hidden width {h.shape[1]} != projection width {weights.w_q.shape[0]}"
        )
    return h @ weights.w_q, h @ weights.w_k, h @ weights.w_v


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    # float64 softmax keeps row sums within 1e-6 even for float32 inputs
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def attention_segments(
    query: np.ndarray,
    segments: list[tuple[np.ndarray, np.ndarray]],
    heads: int,
    scale: str = "head",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-query multi-head attention over concatenated key/value segments.

    Segments avoid materializing one big K matrix when the cache is stored
    in pieces (visual survivors + appended text/generated rows). Returns the
    output vector, per-head score rows (heads, n), and the head-averaged row.
    """
    q = np.asarray(query).reshape(-1)
    d = q.shape[0]
    if d % heads != 0:
        raise DimensionMismatch(f"width {d} not divisible by heads {heads}")
    hd = d // heads
    total = sum(k.shape[0] for k, _ in segments)
    if total == 0:
        raise EmptyKeySet("attention over an empty key set")

    denom = np.sqrt(hd if scale == "head" else d)
    qh = q.reshape(heads, hd).astype(np.float64)

    logits = np.empty((heads, total), dtype=np.float64)
    pos = 0
    for k_seg, v_seg in segments:
        n = k_seg.shape[0]
        if n == 0:
            continue
        if k_seg.shape != v_seg.shape or k_seg.shape[1] != d:
            raise DimensionMismatch(
                f"segment shapes {k_seg.shape}/{v_seg.shape} incompatible with width {d}"
            )
        kh = k_seg.reshape(n, heads, hd)
        logits[:, pos : pos + n] = np.einsum("nhd,hd->hn", kh, qh) / denom
        pos += n

    scores = _softmax_rows(logits)  # (heads, total)

    out = np.zeros(d, dtype=np.float64)
    pos = 0
    for _, v_seg in segments:
        n = v_seg.shape[0]
        if n == 0:
            continue
        vh = v_seg.reshape(n, heads, hd)
        out += np.einsum("hn,nhd->hd", scores[:, pos : pos + n], vh).reshape(d)
        pos += n

    dtype = segments[0][1].dtype
    return out.astype(dtype), scores, scores.mean(axis=0)


def attention_row(
    query: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    heads: int,
    scale: str = "head",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-query attention over one contiguous key/value matrix."""
    keys = np.atleast_2d(keys)
    values = np.atleast_2d(values)
    if keys.shape[0] == 0:
        raise EmptyKeySet("attention over an empty key set")
    if keys.shape != values.shape:
        raise DimensionMismatch(f"keys {keys.shape} != values {values.shape}")
    return attention_segments(query, [(keys, values)], heads, scale)


@dataclass(frozen=True)
class AttentionSnapshot:
    """Head-averaged attention of the current query over scoreable visual tokens.

    ``scores`` are the visual columns of one softmax row; ``row_total`` is the
    full row sum (visual + text + generated), 1.0 up to float error when the
    snapshot comes from a live decode. Replayed snapshots carry row_total None.
    """

    step: int
    layer: int
    scores: np.ndarray = field(repr=False)
    token_ids: tuple[TokenId, ...] = field(repr=False)
    row_total: float | None = None


class ToyDecoder:
    """Multi-layer decoder with per-layer KV caching and greedy token selection.

    ``scale`` selects the softmax normalizer: 'head' divides by
    sqrt(head_dim) (standard multi-head practice, the default), 'full'
    divides by sqrt(hidden).
    """

    def __init__(
        self,
        dims: ModelDims,
        seed: int = 0,
        scale: str = "head",
        dtype=np.float64,
        vocab_size: int = 128,
    ):
        if scale not in ("head", "full"):
            raise ValueError(f"scale must be 'head' or 'full', got {scale!r}")
        self.dims = dims
        self.seed = seed
        self.scale = scale
        self.dtype = np.dtype(dtype)
        self.layers = [layer_weights(dims, seed, l, self.dtype) for l in range(dims.layers)]
        rng = np.random.default_rng([seed % 2**32, 200])
        self.embedding = rng.standard_normal((vocab_size, dims.hidden)).astype(self.dtype)
        self.unembed = (
            rng.standard_normal((dims.hidden, vocab_size)) / np.sqrt(dims.hidden)
        ).astype(self.dtype)

    # -- full-sequence pass -------------------------------------------------

    def forward_full(self, rows: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Causal pass over a whole sequence.

        Returns per-layer (K, V) matrices for caching plus the final-layer
        hidden state of every position. Used for prefill and as the
        no-cache reference path.
        """
        h = np.ascontiguousarray(rows, dtype=self.dtype)
        n = h.shape[0]
        heads, hd = self.dims.heads, self.dims.head_dim
        denom = np.sqrt(hd if self.scale == "head" else self.dims.hidden)
        causal = np.tril(np.ones((n, n), dtype=bool))
        kvs = []
        for weights in self.layers:
            q, k, v = project_qkv(h, weights)
            kvs.append((k, v))
            ctx = np.empty_like(h)
            for head in range(heads):
                sl = slice(head * hd, (head + 1) * hd)
                logits = (q[:, sl] @ k[:, sl].T) / denom
                logits = np.where(causal, logits, -np.inf)
                scores = _softmax_rows(logits)
                ctx[:, sl] = (scores @ v[:, sl].astype(np.float64)).astype(self.dtype)
            h = np.maximum(ctx @ weights.w_o @ weights.ffn_in, 0.0) @ weights.ffn_out
        return kvs, h

    def prefill(self, rows: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Process the prompt; returns per-layer KV plus the last position's output."""
        kvs, hidden = self.forward_full(rows)
        return kvs, hidden[-1]

    # -- incremental decode ---------------------------------------------------

    def decode_step(self, embedding: np.ndarray, cache, step: int, on_snapshot=None):
        """One cached decode step.

        Appends the new token's K/V to every layer, attends over the cache
        (full survivor view at layers <= eval_layer, active view above), and
        emits exactly one AttentionSnapshot at the eval layer. ``on_snapshot``
        runs right after the snapshot, so a pruning decision it applies is
        already visible to the layers above the eval layer in this same step.
        Returns (hidden_out, snapshot).
        """
        h = np.asarray(embedding, dtype=self.dtype).reshape(-1)
        if h.shape[0] != self.dims.hidden:
            raise DimensionMismatch(f"embedding width {h.shape[0]} != {self.dims.hidden}")
        snapshot = None
        for layer_idx, weights in enumerate(self.layers):
            q = h @ weights.w_q
            k = h @ weights.w_k
            v = h @ weights.w_v
            cache.append_generated(layer_idx, k, v)
            segments, n_visual = cache.segments_for(layer_idx)
            out, _, avg_row = attention_segments(q, segments, self.dims.heads, self.scale)
            if layer_idx == cache.eval_layer:
                snapshot = AttentionSnapshot(
                    step=step,
                    layer=layer_idx,
                    scores=avg_row[:n_visual].copy(),
                    token_ids=cache.scoreable_ids(layer_idx),
                    row_total=float(avg_row.sum()),
                )
                if on_snapshot is not None:
                    on_snapshot(snapshot)
            h = np.maximum((out @ weights.w_o) @ weights.ffn_in, 0.0) @ weights.ffn_out
        return h, snapshot

    def select_token(self, hidden: np.ndarray) -> tuple[int, np.ndarray]:
        """Greedy next token: argmax over the seeded output projection."""
        logits = np.asarray(hidden, dtype=self.dtype) @ self.unembed
        token = int(np.argmax(logits))
        return token, self.embedding[token]
