"""Policy head: decode the user state into a proto page of item embeddings,
then map it onto real catalog items.

The decoder emits a continuous page grid; each slot is matched to the most
cosine-similar item in the candidate pool, removing chosen items so a page
never repeats an item. Candidate pools are recalled as neighborhoods of the
user's recent items and grow as the session produces clicks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor
from .config import RunConfig
from .encoder import EncoderState, Item
from .layers import DensePageDecoder, PageDeconv

__all__ = [
    "CandidatePool",
    "ValidPage",
    "Decoder",
    "nearest_item",
    "map_to_valid",
    "greedy_fill",
    "recall_pool",
    "top_neighbors",
    "act",
]


@dataclass(frozen=True)
class ValidPage:
    """A page of real catalog items, slots in row-major order."""

    items: tuple[Item, ...]
    rows: int
    cols: int

    def __post_init__(self):
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"valid page contains duplicate item ids: {sorted(ids)}")

    def embedding_grid(self) -> np.ndarray:
        dim = self.items[0].embedding.shape[0]
        return np.stack([i.embedding for i in self.items]).reshape(self.rows, self.cols, dim)


class CandidatePool:
    """Items eligible for recommendation, with precomputed unit embeddings."""

    def __init__(self, items: Iterable[Item]):
        self._items: list[Item] = []
        self._seen: set[int] = set()
        self.extend(items)

    def extend(self, items: Iterable[Item]) -> None:
        for item in items:
            if item.id in self._seen:
                continue
            norm = np.linalg.norm(item.embedding)
            if norm <= 0.0:
                raise ValueError(f"item {item.id} has zero-norm embedding; pool requires directions")
            self._seen.add(item.id)
            self._items.append(item)
        self._refresh()

    def _refresh(self) -> None:
        self.ids = np.array([i.id for i in self._items], dtype=np.int64)
        if self._items:
            emb = np.stack([i.embedding for i in self._items])
            self.unit_embeddings = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        else:
            self.unit_embeddings = np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item: Item) -> bool:
        return item.id in self._seen

    @property
    def items(self) -> tuple[Item, ...]:
        return tuple(self._items)


def _argmax_min_id(scores: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> int:
    """Index of the best score among unmasked entries; ties take smallest id."""
    live = np.flatnonzero(mask)
    best = scores[live].max()
    tied = live[scores[live] == best]
    if tied.size == 1:
        return int(tied[0])
    return int(tied[np.argmin(ids[tied])])


def nearest_item(proto_embedding: np.ndarray, pool: CandidatePool) -> Item:
    """Pool item with maximal cosine alignment to the proto embedding."""
    if len(pool) == 0:
        raise ValueError("nearest_item: empty candidate pool")
    scores = pool.unit_embeddings @ np.asarray(proto_embedding, dtype=np.float64)
    idx = _argmax_min_id(scores, pool.ids, np.ones(len(pool), dtype=bool))
    return pool.items[idx]


def _proto_array(proto, rows: int, cols: int) -> np.ndarray:
    grid = proto.data if isinstance(proto, Tensor) else np.asarray(proto, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[:2] != (rows, cols):
        raise ShapeError(f"proto page must be ({rows}, {cols}, dim), got {grid.shape}")
    return grid


def greedy_fill(proto, pool: CandidatePool, n_slots: int, rows: int, cols: int) -> list[Item]:
    """Fill the first n_slots row-major slots, removing each chosen item.

    The per-slot choice is the exhaustive cosine argmax over the remaining
    pool, so the page is duplicate-free by construction.
    """
    grid = _proto_array(proto, rows, cols)
    flat = grid.reshape(rows * cols, -1)
    if n_slots > len(pool):
        raise ValueError(f"cannot fill {n_slots} slots from a pool of {len(pool)} items")
    scores = flat @ pool.unit_embeddings.T  # (slots, pool)
    mask = np.ones(len(pool), dtype=bool)
    chosen: list[Item] = []
    for slot in range(n_slots):
        idx = _argmax_min_id(scores[slot], pool.ids, mask)
        chosen.append(pool.items[idx])
        mask[idx] = False
    return chosen


def map_to_valid(proto, pool: CandidatePool, rows: int, cols: int) -> ValidPage:
    """Map a proto page onto real items, slot by slot in row-major order."""
    n_slots = rows * cols
    if len(pool) < n_slots:
        raise ValueError(
            f"candidate pool has {len(pool)} items but a page needs {n_slots}"
        )
    items = greedy_fill(proto, pool, n_slots, rows, cols)
    return ValidPage(items=tuple(items), rows=rows, cols=cols)


def top_neighbors(query: Item, space: Sequence[Item], k: int) -> list[Item]:
    """The k most cosine-similar items to the query within the space."""
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = np.stack([i.embedding for i in space])
    units = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    q = query.embedding / np.linalg.norm(query.embedding)
    scores = units @ q
    ids = np.array([i.id for i in space])
    order = np.lexsort((ids, -scores))
    return [space[i] for i in order[:k]]


def recall_pool(
    history: Sequence[Item],
    clicked_in_session: Sequence[Item],
    full_space: Sequence[Item],
    k: int,
) -> CandidatePool:
    """Union of each reference item's k nearest neighbors in the full space."""
    if not full_space:
        raise ValueError("recall_pool: empty item space")
    pool = CandidatePool([])
    for query in list(history) + list(clicked_in_session):
        pool.extend(top_neighbors(query, full_space, min(k, len(full_space))))
    return pool


class Decoder:
    """State-to-proto-page decoder; transposed convolutions by default."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.config = config
        if config.dense_decoder:
            self.net = DensePageDecoder(
                config.page_rows, config.page_cols, config.item_dim, config.hidden_dim, rng
            )
        else:
            self.net = PageDeconv(
                config.page_rows, config.page_cols, config.item_dim, config.hidden_dim, rng
            )

    def decode(self, s_cur: Tensor) -> Tensor:
        """Proto page grid for one state vector or a batch of them."""
        return self.net(s_cur)

    def params(self):
        return self.net.params("decoder")


def act(
    state: EncoderState,
    decoder: Decoder,
    pool: CandidatePool,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, ValidPage]:
    """Decode the current state and map it to a valid page.

    Training needs the proto page (for the policy gradient) and the valid
    page (for execution and replay), so both are returned. Exploration
    noise, when given, perturbs the proto page before mapping only.
    """
    cfg = decoder.config
    proto = decoder.decode(state.s_cur)
    mapped_from = proto.data if noise is None else proto.data + noise
    page = map_to_valid(mapped_from, pool, cfg.page_rows, cfg.page_cols)
    return proto, page
