"""Stage-1 temporal token merging.

Frames are split into consecutive sliding windows. Inside each window the
frames alternate between group O (1st, 3rd, ... — even offsets) and group E
(2nd, 4th, ... — odd offsets). Each E frame is scored against the O frame
directly before it; each later O frame is scored against the window's first
frame, which is always fully retained. Per prunable frame, the
floor(k_rate * tokens_per_frame) highest-similarity tokens are merged away.

Merging drops the redundant token and lets the kept counterpart stand for
both (merge_mode='drop', the default) or folds it into the counterpart by
averaging (merge_mode='mean').
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tokens import CompressionConfig, TokenId, VisualTokenGrid

ZERO_NORM_EPS = 1e-12


class ZeroNorm(ValueError):
    """A token row has (near-)zero norm; cosine similarity is undefined."""


class MergeRecord(NamedTuple):
    removed: TokenId
    kept_as: TokenId
    similarity: float


@dataclass(frozen=True)
class Window:
    """One sliding window: its frame indices and the O/E split."""

    frames: tuple[int, ...]

    @property
    def group_o(self) -> tuple[int, ...]:
        return self.frames[0::2]

    @property
    def group_e(self) -> tuple[int, ...]:
        return self.frames[1::2]


@dataclass(frozen=True)
class WindowPartition:
    windows: tuple[Window, ...]


@dataclass
class TtmResult:
    """Stage-1 output: surviving tokens with provenance, plus the audit trail."""

    token_ids: list[TokenId]
    data: np.ndarray
    records: list[MergeRecord]
    retained_ratio: float

    @property
    def retained_count(self) -> int:
        return len(self.token_ids)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two token rows, clamped to [-1, 1].

    Raises ZeroNorm when either row's norm is below 1e-12; callers inside
    the merge pass treat that as similarity 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroNorm(f"row norm below {ZERO_NORM_EPS} (|a|={na:.3e}, |b|={nb:.3e})")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def partition_windows(frames: int, window_len: int) -> WindowPartition:
    """Split frame indices into consecutive non-overlapping windows.

    The last window may be shorter; it keeps the same O/E offset rule over
    whatever frames exist, so every frame is covered exactly once.
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if window_len < 2 or window_len % 2 != 0:
        raise ValueError(f"window_len must be even and >= 2, got {window_len}")
    windows = [
        Window(tuple(range(start, min(start + window_len, frames))))
        for start in range(0, frames, window_len)
    ]
    return WindowPartition(tuple(windows))


def _frame_similarities(grid: VisualTokenGrid, frame: int, ref_frame: int) -> np.ndarray:
    """Per-position cosine similarity between two frames, zero-norm rows -> 0."""
    a = grid.frame_rows(frame).astype(np.float64)
    b = grid.frame_rows(ref_frame).astype(np.float64)
    dots = np.einsum("ij,ij->i", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    ok = (na >= ZERO_NORM_EPS) & (nb >= ZERO_NORM_EPS)
    sims = np.zeros(a.shape[0], dtype=np.float64)
    np.divide(dots, denom, out=sims, where=ok)
    return np.clip(sims, -1.0, 1.0)


def per_frame_quota(k_rate: float, tokens_per_frame: int) -> int:
    """How many tokens each prunable frame loses: floor(k_rate * N_v)."""
    return math.floor(k_rate * tokens_per_frame + 1e-9)


def stage1_survivor_count(
    frames: int, tokens_per_frame: int, k_rate: float, window_len: int = 4
) -> int:
    """Exact survivor count after stage 1, including floor rounding."""
    quota = per_frame_quota(k_rate, tokens_per_frame)
    prunable = sum(len(w.frames) - 1 for w in partition_windows(frames, window_len).windows)
    return frames * tokens_per_frame - prunable * quota


def apply_ttm(grid: VisualTokenGrid, config: CompressionConfig) -> TtmResult:
    """Run the stage-1 merge pass over the full grid.

    Decisions are deterministic: within a frame, similarity ties break by
    TokenId order (lower position removed first). Output token order
    preserves the original (frame, position) order. When the direct
    counterpart of a removed token is itself removed (a later O frame merged
    into the window's first frame), the record is redirected to the final
    survivor so every kept_as survives in the output.
    """
    config.validate()
    n_v = grid.tokens_per_frame
    quota = per_frame_quota(config.k_rate, n_v)
    removed_to_kept: dict[TokenId, TokenId] = {}
    raw_records: list[MergeRecord] = []

    for window in partition_windows(grid.frames, config.window_len).windows:
        first = window.frames[0]
        for offset in range(1, len(window.frames)):
            frame = window.frames[offset]
            # Odd offsets (group E) score against the preceding O frame;
            # even offsets (later O frames) score against the window's first.
            ref = window.frames[offset - 1] if offset % 2 == 1 else first
            if quota == 0:
                continue
            sims = _frame_similarities(grid, frame, ref)
            # Sort by similarity descending, position ascending on ties.
            order = np.lexsort((np.arange(n_v), -sims))
            for pos in order[:quota]:
                removed = TokenId(frame, int(pos))
                kept = TokenId(ref, int(pos))
                removed_to_kept[removed] = kept
                raw_records.append(MergeRecord(removed, kept, float(sims[pos])))

    # Redirect chains: kept targets that were removed themselves resolve to
    # the same position in the window's first frame.
    records: list[MergeRecord] = []
    for rec in raw_records:
        kept = rec.kept_as
        while kept in removed_to_kept:
            kept = removed_to_kept[kept]
        records.append(MergeRecord(rec.removed, kept, rec.similarity))

    retained_ids = [
        tid for tid in grid.all_token_ids() if tid not in removed_to_kept
    ]
    rows = np.array([grid.row_index(tid) for tid in retained_ids], dtype=np.intp)
    data = grid.data[rows].copy() if len(rows) else np.zeros((0, grid.hidden_dim), np.float32)

    if config.merge_mode == "mean" and records:
        data = _fold_means(grid, retained_ids, records, data)

    ratio = len(retained_ids) / grid.total_tokens
    return TtmResult(token_ids=retained_ids, data=data, records=records, retained_ratio=ratio)


def _fold_means(
    grid: VisualTokenGrid,
    retained_ids: list[TokenId],
    records: list[MergeRecord],
    data: np.ndarray,
) -> np.ndarray:
    """Replace each kept row by the mean of itself and everything merged into it."""
    index = {tid: i for i, tid in enumerate(retained_ids)}
    acc = data.astype(np.float64)
    counts = np.ones(len(retained_ids), dtype=np.float64)
    for rec in records:
        i = index[rec.kept_as]
        acc[i] += grid.row(rec.removed).astype(np.float64)
        counts[i] += 1.0
    return (acc / counts[:, None]).astype(np.float32)
