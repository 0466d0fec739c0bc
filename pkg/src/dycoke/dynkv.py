"""Stage-2 dynamic KV-cache retention.

After stage 1, every layer's cache holds the surviving visual rows plus the
text rows. Each decode step re-ranks the survivors by the eval layer's
head-averaged attention and keeps the top ``ceil((1 - p_rate) * survivors)``
active; the rest sit in a parked side store (the DP cache) from which they
can be readmitted whenever their score climbs back into the top set. Layers
at or below the eval layer always see the full survivor set (they have to
score parked tokens); the active/parked split applies to layers above it.
Text and generated rows are always active and never parked.

Rows never change once written: parking and readmission only move
membership, so a readmitted token carries bit-identical K/V.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionSnapshot
from .tokens import CompressionConfig, TokenId


class QuotaExceedsPopulation(ValueError):
    pass


class MissingParkedRow(RuntimeError):
    """A decision readmits a token that is not in the parked set."""


class InvariantViolation(RuntimeError):
    """Partition or quota invariant broke; carries the offending state."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def retention_quota(survivors: int, p_rate: float) -> int:
    """ceil((1 - p_rate) * survivors); at least one token whenever p < 1."""
    return max(0, math.ceil((1.0 - p_rate) * survivors - 1e-9))


@dataclass(frozen=True)
class RetentionDecision:
    step: int
    retained_ids: tuple[TokenId, ...]
    threshold: float | None
    readmitted: tuple[TokenId, ...]
    evicted: tuple[TokenId, ...]

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "threshold": self.threshold,
            "retained_count": len(self.retained_ids),
            "readmitted_count": len(self.readmitted),
            "evicted_count": len(self.evicted),
            "readmitted_ids": [list(t) for t in self.readmitted],
            "evicted_ids": [list(t) for t in self.evicted],
        }


class _LayerStore:
    """One layer's rows: immutable visual storage + growing text/generated rows."""

    __slots__ = ("vis_k", "vis_v", "extra_k", "extra_v", "extra_len", "active_k", "active_v")

    def __init__(self, vis_k, vis_v, text_k, text_v, capacity: int, dtype):
        d = vis_k.shape[1]
        self.vis_k = np.ascontiguousarray(vis_k, dtype=dtype)
        self.vis_v = np.ascontiguousarray(vis_v, dtype=dtype)
        self.vis_k.setflags(write=False)
        self.vis_v.setflags(write=False)
        self.extra_k = np.zeros((capacity, d), dtype=dtype)
        self.extra_v = np.zeros((capacity, d), dtype=dtype)
        n_text = text_k.shape[0]
        self.extra_k[:n_text] = text_k
        self.extra_v[:n_text] = text_v
        self.extra_len = n_text
        # Contiguous view of the active visual rows; starts as full storage.
        self.active_k = self.vis_k
        self.active_v = self.vis_v

    def append(self, k_row, v_row) -> None:
        if self.extra_len >= self.extra_k.shape[0]:
            grown = max(16, self.extra_k.shape[0] * 2)
            for name in ("extra_k", "extra_v"):
                old = getattr(self, name)
                new = np.zeros((grown, old.shape[1]), dtype=old.dtype)
                new[: self.extra_len] = old[: self.extra_len]
                setattr(self, name, new)
        self.extra_k[self.extra_len] = k_row
        self.extra_v[self.extra_len] = v_row
        self.extra_len += 1

    def rebuild_active(self, rows: np.ndarray) -> None:
        if rows.shape[0] == self.vis_k.shape[0]:
            self.active_k = self.vis_k
            self.active_v = self.vis_v
        else:
            self.active_k = self.vis_k[rows]
            self.active_v = self.vis_v[rows]


class DualCache:
    """Per-layer active/parked KV store with a shared membership index.

    The retained index set computed at the eval layer applies uniformly to
    every layer above it, so membership is stored once and each layer keeps
    a contiguous copy of its active visual rows for fast attention.
    """

    def __init__(
        self,
        layer_kvs: list[tuple[np.ndarray, np.ndarray]],
        token_ids: list[TokenId],
        n_text: int,
        quota: int,
        eval_layer: int,
        reserve_steps: int = 64,
    ):
        n_surv = len(token_ids)
        if any(k.shape[0] != n_surv + n_text for k, _ in layer_kvs):
            raise ValueError("prefill KV row count != survivors + text tokens")
        if eval_layer >= len(layer_kvs):
            raise ValueError(
                f"eval_layer {eval_layer} out of range for {len(layer_kvs)} layers"
            )
        if list(token_ids) != sorted(token_ids):
            raise ValueError("survivor token ids must be sorted")
        dtype = layer_kvs[0][0].dtype
        capacity = n_text + reserve_steps
        self.token_ids: tuple[TokenId, ...] = tuple(token_ids)
        self.n_text = n_text
        self.quota = quota
        self.eval_layer = eval_layer
        self.layers = [
            _LayerStore(k[:n_surv], v[:n_surv], k[n_surv:], v[n_surv:], capacity, dtype)
            for k, v in layer_kvs
        ]
        self.active_rows = np.arange(n_surv)
        self.partitioned = False
        self.frozen = False

    # -- shape & membership -------------------------------------------------

    @property
    def survivor_count(self) -> int:
        return len(self.token_ids)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def prefill_length(self) -> int:
        return self.survivor_count + self.n_text

    def generated_count(self) -> int:
        return self.layers[0].extra_len - self.n_text

    def active_ids(self) -> tuple[TokenId, ...]:
        return tuple(self.token_ids[i] for i in self.active_rows)

    def parked_ids(self) -> tuple[TokenId, ...]:
        if self.frozen:
            return ()
        mask = np.ones(self.survivor_count, dtype=bool)
        mask[self.active_rows] = False
        return tuple(self.token_ids[i] for i in np.flatnonzero(mask))

    def _parked_rows(self) -> np.ndarray:
        mask = np.ones(self.survivor_count, dtype=bool)
        mask[self.active_rows] = False
        return np.flatnonzero(mask)

    # -- per-layer views ------------------------------------------------------

    def _pruned(self, layer: int) -> bool:
        return layer > self.eval_layer

    def segments_for(self, layer: int) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
        """(K, V) segments for attention at ``layer`` plus the visual column count."""
        store = self.layers[layer]
        if self._pruned(layer):
            vis = (store.active_k, store.active_v)
        else:
            vis = (store.vis_k, store.vis_v)
        extras = (store.extra_k[: store.extra_len], store.extra_v[: store.extra_len])
        return [vis, extras], vis[0].shape[0]

    def scoreable_ids(self, layer: int) -> tuple[TokenId, ...]:
        return self.active_ids() if self._pruned(layer) else self.token_ids

    def append_generated(self, layer: int, k_row, v_row) -> None:
        self.layers[layer].append(k_row, v_row)

    def active_keys(self, layer: int) -> np.ndarray:
        return self.layers[layer].active_k if self._pruned(layer) else self.layers[layer].vis_k

    def active_values(self, layer: int) -> np.ndarray:
        return self.layers[layer].active_v if self._pruned(layer) else self.layers[layer].vis_v

    def parked_keys(self, layer: int) -> np.ndarray:
        store = self.layers[layer]
        if not self._pruned(layer) or self.frozen:
            return store.vis_k[:0]
        return store.vis_k[self._parked_rows()]

    def parked_values(self, layer: int) -> np.ndarray:
        store = self.layers[layer]
        if not self._pruned(layer) or self.frozen:
            return store.vis_v[:0]
        return store.vis_v[self._parked_rows()]

    # -- decisions -----------------------------------------------------------

    def apply(self, decision: RetentionDecision) -> None:
        if self.frozen and (decision.readmitted or decision.evicted):
            raise MissingParkedRow("cache is frozen; parked rows were discarded")
        index = {tid: i for i, tid in enumerate(self.token_ids)}
        try:
            rows = np.array(sorted(index[t] for t in decision.retained_ids), dtype=np.intp)
        except KeyError as exc:
            raise MissingParkedRow(f"decision names unknown token {exc.args[0]}") from exc
        prev_active = set(self.active_rows.tolist())
        for tid in decision.readmitted:
            row = index.get(tid)
            if row is None:
                raise MissingParkedRow(f"{tid} readmitted but it is not a survivor")
            if row in prev_active:
                raise MissingParkedRow(f"{tid} readmitted but it was already active")
        changed = not np.array_equal(rows, self.active_rows)
        self.active_rows = rows
        self.partitioned = True
        if changed:
            for layer in range(self.layer_count):
                if self._pruned(layer):
                    self.layers[layer].rebuild_active(rows)

    def freeze(self) -> None:
        """One-shot semantics: the parked side store is discarded for good."""
        self.frozen = True

    def check_invariants(self, step: int) -> None:
        state = {
            "step": step,
            "survivors": self.survivor_count,
            "active": len(self.active_rows),
            "parked": 0 if self.frozen else self.survivor_count - len(self.active_rows),
            "quota": self.quota,
            "frozen": self.frozen,
        }
        if len(set(self.active_rows.tolist())) != len(self.active_rows):
            raise InvariantViolation("active set contains duplicate rows", state)
        if not self.frozen:
            if state["active"] + state["parked"] != self.survivor_count:
                raise InvariantViolation("active/parked do not partition survivors", state)
        if self.partitioned and state["active"] != self.quota:
            raise InvariantViolation(
                f"active visual count {state['active']} != retention quota {self.quota}",
                state,
            )


def _top_quota(
    scores: np.ndarray, ids: tuple[TokenId, ...], quota: int
) -> tuple[tuple[TokenId, ...], float | None]:
    """Top-``quota`` ids by score, ties broken by TokenId order (ids are sorted)."""
    if quota > len(ids):
        raise QuotaExceedsPopulation(f"quota {quota} > population {len(ids)}")
    if quota == 0:
        return (), None
    order = np.lexsort((np.arange(len(ids)), -np.asarray(scores, dtype=np.float64)))
    take = order[:quota]
    threshold = float(scores[take[-1]])
    return tuple(sorted(ids[i] for i in take)), threshold


def _check_snapshot(snapshot: AttentionSnapshot, cache: DualCache) -> None:
    if snapshot.token_ids != cache.token_ids:
        raise ValueError("snapshot does not cover the survivor token set")
    if len(snapshot.scores) != cache.survivor_count:
        raise ValueError("snapshot score count != survivor count")


def initial_prune(
    snapshot: AttentionSnapshot, cache: DualCache, config: CompressionConfig
) -> RetentionDecision:
    """First-step pruning: keep the quota highest-scoring survivors active."""
    _check_snapshot(snapshot, cache)
    quota = retention_quota(cache.survivor_count, config.p_rate)
    cache.quota = quota
    retained, threshold = _top_quota(snapshot.scores, snapshot.token_ids, quota)
    retained_set = set(retained)
    evicted = tuple(t for t in cache.active_ids() if t not in retained_set)
    decision = RetentionDecision(
        step=snapshot.step,
        retained_ids=retained,
        threshold=threshold,
        readmitted=(),
        evicted=evicted,
    )
    cache.apply(decision)
    return decision


def dynamic_swap(
    snapshot: AttentionSnapshot, cache: DualCache, config: CompressionConfig
) -> RetentionDecision:
    """Re-rank every survivor and swap cache membership to the new top set.

    Readmitted rows come back from the parked store byte-for-byte; evicted
    rows move there. On a frozen (one-shot) cache this is a no-op.
    """
    if cache.frozen:
        return RetentionDecision(
            step=snapshot.step,
            retained_ids=cache.active_ids(),
            threshold=None,
            readmitted=(),
            evicted=(),
        )
    _check_snapshot(snapshot, cache)
    quota = retention_quota(cache.survivor_count, config.p_rate)
    cache.quota = quota
    retained, threshold = _top_quota(snapshot.scores, snapshot.token_ids, quota)
    retained_set = set(retained)
    prev_active = set(cache.active_ids())
    decision = RetentionDecision(
        step=snapshot.step,
        retained_ids=retained,
        threshold=threshold,
        readmitted=tuple(sorted(retained_set - prev_active)),
        evicted=tuple(sorted(prev_active - retained_set)),
    )
    cache.apply(decision)
    return decision


def one_shot_prune(
    snapshot: AttentionSnapshot, cache: DualCache, config: CompressionConfig
) -> RetentionDecision:
    """Ablation baseline: prune once, discard the parked rows permanently."""
    decision = initial_prune(snapshot, cache, config)
    cache.freeze()
    return decision


def random_prune(
    cache: DualCache, config: CompressionConfig, seed: int | None = None
) -> RetentionDecision:
    """Ablation baseline: keep a seeded uniform random quota-size subset."""
    quota = retention_quota(cache.survivor_count, config.p_rate)
    if quota > cache.survivor_count:
        raise QuotaExceedsPopulation(f"quota {quota} > population {cache.survivor_count}")
    cache.quota = quota
    rng = np.random.default_rng([(config.seed if seed is None else seed) % 2**32, 300])
    rows = rng.choice(cache.survivor_count, size=quota, replace=False)
    retained = tuple(sorted(cache.token_ids[i] for i in rows))
    retained_set = set(retained)
    evicted = tuple(t for t in cache.active_ids() if t not in retained_set)
    decision = RetentionDecision(
        step=0, retained_ids=retained, threshold=None, readmitted=(), evicted=evicted
    )
    cache.apply(decision)
    cache.freeze()
    return decision
