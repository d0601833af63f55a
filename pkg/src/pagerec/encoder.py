"""User-state encoding.

Two chained recurrences build the user state: a GRU over the last N
clicked/purchased items yields the initial preference vector, and a second
GRU over per-page summaries (embedded item/category/feedback grids passed
through a small convolution stack) tracks the preference within the running
session, pooled by location-based attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .autodiff import ParameterSet, ShapeError, Tensor, concat, reshape, slice_
from .config import RunConfig
from .autodiff import mul, reduce_sum
from .layers import (
    AttentionParams,
    EmbeddingLayer,
    GruParams,
    PageConv,
    attention_over_sequence,
    attention_pool,
    gather_last,
    gru_cell,
    gru_sequence,
    pack_rows,
)

__all__ = [
    "Feedback",
    "REWARD_VALUES",
    "Item",
    "PageObservation",
    "StateSnapshot",
    "EncoderState",
    "StateEncoder",
]


class Feedback(IntEnum):
    """Per-slot user response; codes double as log-file values."""

    SKIP = 0
    CLICK = 1
    PURCHASE = 2

    @property
    def one_hot(self) -> np.ndarray:
        vec = np.zeros(3)
        vec[int(self)] = 1.0
        return vec


# Immediate reward per feedback kind, indexed by code.
REWARD_VALUES = (0.0, 1.0, 5.0)


@dataclass(frozen=True)
class Item:
    """A catalog entry: identifier, embedding vector, category index."""

    id: int
    embedding: np.ndarray
    category: int

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        if emb.ndim != 1:
            raise ValueError(f"item {self.id}: embedding must be a vector, got shape {emb.shape}")
        if not np.all(np.abs(emb) < 1.0):
            raise ValueError(f"item {self.id}: embedding components must lie strictly in (-1, 1)")
        if self.category < 0:
            raise ValueError(f"item {self.id}: negative category index")

    def __hash__(self):
        return hash(self.id)

    def __eq__(self, other):
        return isinstance(other, Item) and other.id == self.id


@dataclass(frozen=True)
class PageObservation:
    """A fully populated page of items with the user's per-slot feedback.

    Slots run row-major; cached arrays back the batched encoder path.
    """

    items: tuple[Item, ...]
    feedback: tuple[int, ...]
    rows: int
    cols: int
    embedding_matrix: np.ndarray = field(init=False, repr=False, compare=False)
    categories: np.ndarray = field(init=False, repr=False, compare=False)
    feedback_codes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        size = self.rows * self.cols
        if len(self.items) != size:
            raise ValueError(f"page needs {size} items, got {len(self.items)}")
        if len(self.feedback) != size:
            raise ValueError(f"page needs {size} feedback entries, got {len(self.feedback)}")
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate item ids within one page: {sorted(ids)}")
        if any(code not in (0, 1, 2) for code in self.feedback):
            raise ValueError(f"feedback codes must be 0/1/2, got {self.feedback}")
        object.__setattr__(
            self, "embedding_matrix", np.stack([item.embedding for item in self.items])
        )
        object.__setattr__(self, "categories", np.array([i.category for i in self.items]))
        object.__setattr__(self, "feedback_codes", np.array(self.feedback, dtype=np.int64))

    @property
    def reward(self) -> float:
        return float(sum(REWARD_VALUES[code] for code in self.feedback))


@dataclass(frozen=True)
class StateSnapshot:
    """Replayable observation history: pre-session items plus pages seen."""

    history: tuple[Item, ...]
    pages: tuple[PageObservation, ...]
    history_matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.history:
            raise ValueError("state snapshot requires a non-empty history")
        object.__setattr__(
            self, "history_matrix", np.stack([item.embedding for item in self.history])
        )

    def advanced(self, page: PageObservation) -> "StateSnapshot":
        return StateSnapshot(self.history, self.pages + (page,))


@dataclass(frozen=True)
class EncoderState:
    """Value-typed encoder output; ``advance`` returns a new state."""

    s_ini: Tensor
    hiddens: tuple[Tensor, ...]
    page_vectors: tuple[Tensor, ...]
    s_cur: Tensor

    @property
    def n_pages(self) -> int:
        return len(self.page_vectors)


class StateEncoder:
    """All encoder parameters plus single-session and batched encode paths."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.config = config
        cfg = config
        self.item_embedding = None
        self.category_embedding = None
        self.feedback_embedding = None
        if not cfg.no_embeddings:
            self.item_embedding = EmbeddingLayer(cfg.item_dim, cfg.item_embed_dim, rng)
            if not cfg.no_category_feedback:
                self.category_embedding = EmbeddingLayer(cfg.category_count, cfg.category_embed_dim, rng)
                self.feedback_embedding = EmbeddingLayer(3, cfg.feedback_embed_dim, rng)
        self.initial_gru = None
        if not cfg.no_initial_gru:
            gru_in = cfg.item_dim if cfg.no_embeddings else cfg.item_embed_dim
            self.initial_gru = GruParams(gru_in, cfg.hidden_dim, rng)
        self.page_conv = None
        if not cfg.no_cnn:
            self.page_conv = PageConv(
                cfg.page_rows, cfg.page_cols, cfg.slot_dim, rng, out_dim=cfg.hidden_dim
            )
        self.session_gru = None
        if not cfg.no_session_gru:
            self.session_gru = GruParams(cfg.page_vector_dim, cfg.hidden_dim, rng)
        self.attention = None
        if not (cfg.no_session_gru or cfg.no_attention):
            self.attention = AttentionParams(cfg.hidden_dim, rng)
        self._category_rows = np.eye(cfg.category_count)
        self._feedback_rows = np.eye(3)

    # -- parameters ---------------------------------------------------------

    def params(self) -> ParameterSet:
        pairs = []
        if self.item_embedding is not None:
            pairs += self.item_embedding.params("encoder/item_emb")
        if self.category_embedding is not None:
            pairs += self.category_embedding.params("encoder/category_emb")
        if self.feedback_embedding is not None:
            pairs += self.feedback_embedding.params("encoder/feedback_emb")
        if self.initial_gru is not None:
            pairs += self.initial_gru.params("encoder/initial_gru")
        if self.page_conv is not None:
            pairs += self.page_conv.params("encoder/page_conv")
        if self.session_gru is not None:
            pairs += self.session_gru.params("encoder/session_gru")
        if self.attention is not None:
            pairs += self.attention.params("encoder/attention")
        return ParameterSet(pairs)

    # -- shared pieces ------------------------------------------------------

    def _embed_history_rows(self, matrix: np.ndarray) -> Tensor:
        rows = Tensor(matrix)
        if self.item_embedding is not None:
            rows = self.item_embedding.embed(rows)
        return rows

    def _slot_inputs(self, pages: Sequence[PageObservation]) -> Tensor:
        """Stack all slots of all pages into one (n_slots, slot_dim) tensor."""
        cfg = self.config
        emb = Tensor(np.concatenate([p.embedding_matrix for p in pages], axis=0))
        if self.item_embedding is not None:
            emb = self.item_embedding.embed(emb)
        if cfg.no_category_feedback:
            return emb
        categories = np.concatenate([p.categories for p in pages])
        codes = np.concatenate([p.feedback_codes for p in pages])
        cat_hot = self._category_rows[categories]
        fb_hot = self._feedback_rows[codes]
        if cfg.no_embeddings:
            return concat([emb, Tensor(cat_hot), Tensor(fb_hot)], axis=1)
        cat = self.category_embedding.embed(Tensor(cat_hot))
        fb = self.feedback_embedding.embed(Tensor(fb_hot))
        return concat([emb, cat, fb], axis=1)

    def _page_vectors(self, pages: Sequence[PageObservation]) -> Tensor:
        """Encode pages into (n_pages, page_vector_dim)."""
        cfg = self.config
        slots = self._slot_inputs(pages)
        n = len(pages)
        if self.page_conv is None:
            return reshape(slots, (n, cfg.page_size * cfg.slot_dim))
        grids = reshape(slots, (n, cfg.page_rows, cfg.page_cols, cfg.slot_dim))
        return self.page_conv(grids)

    def _pool(self, hiddens: Sequence[Tensor], page_vectors: Sequence[Tensor], s_ini: Tensor) -> Tensor:
        """Combine per-page states into s_cur according to the active variant."""
        if self.session_gru is None:
            if not page_vectors:
                return s_ini
            total = page_vectors[0]
            for vec in page_vectors[1:]:
                total = total + vec
            return total * Tensor(1.0 / len(page_vectors))
        if not hiddens:
            return s_ini
        if self.attention is None:
            return hiddens[-1]
        return attention_pool(self.attention, hiddens)

    # -- single-session path -------------------------------------------------

    def encode_initial(self, history: Sequence[Item]) -> EncoderState:
        """Run the initial-preference GRU over the pre-session history."""
        if len(history) == 0:
            raise ShapeError("encode_initial: history must contain at least one item")
        cfg = self.config
        if self.initial_gru is None:
            s_ini = Tensor(np.zeros(cfg.hidden_dim))
        else:
            rows = self._embed_history_rows(np.stack([item.embedding for item in history]))
            seq = reshape(rows, (1, len(history), rows.shape[1]))
            hs = gru_sequence(self.initial_gru, seq, Tensor(np.zeros((1, cfg.hidden_dim))))
            s_ini = reshape(slice_(hs, (slice(None), len(history) - 1)), (cfg.hidden_dim,))
        return EncoderState(s_ini=s_ini, hiddens=(), page_vectors=(), s_cur=s_ini)

    def encode_page(self, page: PageObservation) -> Tensor:
        """Summarize one observed page into its input vector."""
        cfg = self.config
        if (page.rows, page.cols) != (cfg.page_rows, cfg.page_cols):
            raise ShapeError(
                f"encode_page: page is {page.rows}x{page.cols}, configured {cfg.page_rows}x{cfg.page_cols}"
            )
        vecs = self._page_vectors([page])
        return reshape(vecs, (vecs.shape[1],))

    def advance(self, state: EncoderState, page: PageObservation) -> EncoderState:
        """Append one page observation and recompute the current preference."""
        page_vec = self.encode_page(page)
        page_vectors = state.page_vectors + (page_vec,)
        if self.session_gru is None:
            hiddens = state.hiddens
        else:
            h_prev = state.hiddens[-1] if state.hiddens else state.s_ini
            hiddens = state.hiddens + (gru_cell(self.session_gru, page_vec, h_prev),)
        s_cur = self._pool(hiddens, page_vectors, state.s_ini)
        return EncoderState(state.s_ini, hiddens, page_vectors, s_cur)

    def encode_snapshot(self, snapshot: StateSnapshot) -> EncoderState:
        state = self.encode_initial(snapshot.history)
        for page in snapshot.pages:
            state = self.advance(state, page)
        return state

    # -- batched path ---------------------------------------------------------

    def encode_states(self, snapshots: Sequence[StateSnapshot]) -> tuple[Tensor, list[int]]:
        """Encode many snapshots at once.

        Snapshots are sorted by descending session length and run as one
        zero-padded packed sequence, so the whole batch shares a single
        recurrence and a single attention call. Returns the (batch, hidden)
        state matrix and the snapshot order its rows follow.
        """
        cfg = self.config
        if not snapshots:
            raise ShapeError("encode_states: empty snapshot batch")
        order = sorted(range(len(snapshots)), key=lambda i: (-len(snapshots[i].pages), i))
        ordered = [snapshots[i] for i in order]

        if self.initial_gru is None:
            s_ini = Tensor(np.zeros((len(ordered), cfg.hidden_dim)))
        else:
            lengths = {len(s.history) for s in ordered}
            if len(lengths) != 1:
                raise ShapeError(f"encode_states: mixed history lengths {sorted(lengths)}")
            n_hist = lengths.pop()
            stacked = np.concatenate([s.history_matrix for s in ordered], axis=0)
            rows = self._embed_history_rows(stacked)
            batch = len(ordered)
            seq = reshape(rows, (batch, n_hist, rows.shape[1]))
            hs = gru_sequence(self.initial_gru, seq, Tensor(np.zeros((batch, cfg.hidden_dim))))
            s_ini = slice_(hs, (slice(None), n_hist - 1))

        lengths = [len(s.pages) for s in ordered]
        n_active = sum(1 for n in lengths if n > 0)
        if n_active == 0:
            return s_ini, order

        active_lengths = lengths[:n_active]
        pages_flat = [page for snap in ordered[:n_active] for page in snap.pages]
        vecs = self._page_vectors(pages_flat)
        packed = pack_rows(vecs, active_lengths)
        ini_active = slice_(s_ini, (slice(0, n_active),)) if n_active < len(ordered) else s_ini
        if self.session_gru is None:
            inverse = Tensor(1.0 / np.array(active_lengths, dtype=np.float64)[:, None])
            s_active = mul(reduce_sum(packed, axis=1), inverse)
        else:
            hs = gru_sequence(self.session_gru, packed, ini_active, lengths=active_lengths)
            if self.attention is None:
                s_active = gather_last(hs, active_lengths)
            else:
                s_active = attention_over_sequence(self.attention, hs, lengths=active_lengths)
        if n_active == len(ordered):
            return s_active, order
        rest = slice_(s_ini, (slice(n_active, len(ordered)),))
        return concat([s_active, rest], axis=0), order
