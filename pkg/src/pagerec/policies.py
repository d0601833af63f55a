"""Session policies: the trained network policy and two baselines.

All policies speak the same protocol: ``start_session(history, rng)``, then
alternating ``act() -> ValidPage`` and ``observe(page_observation)``.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

from .actor import CandidatePool, Decoder, ValidPage, act, map_to_valid, recall_pool, top_neighbors
from .autodiff import no_grad
from .encoder import EncoderState, Feedback, Item, PageObservation, StateEncoder

if TYPE_CHECKING:
    from .environment import Catalog

__all__ = ["RandomPolicy", "GreedySimilarityPolicy", "NetworkPolicy"]


class RandomPolicy:
    """Uniformly samples a page of distinct catalog items each step."""

    def __init__(self, catalog: "Catalog", rows: int = 5, cols: int = 2):
        self.catalog = catalog
        self.rows, self.cols = rows, cols
        self.rng: np.random.Generator | None = None

    def start_session(self, history: Sequence[Item], rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self) -> ValidPage:
        idx = self.rng.choice(len(self.catalog), size=self.rows * self.cols, replace=False)
        return ValidPage(
            items=tuple(self.catalog.items[i] for i in idx), rows=self.rows, cols=self.cols
        )

    def observe(self, page: PageObservation) -> None:
        pass


class GreedySimilarityPolicy:
    """Always recommends the catalog items most similar to the running
    preference vector (mean of history plus in-session clicks)."""

    def __init__(self, catalog: "Catalog", rows: int = 5, cols: int = 2):
        self.catalog = catalog
        self.rows, self.cols = rows, cols
        emb = np.stack([i.embedding for i in catalog.items])
        self._units = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        self._ids = np.array([i.id for i in catalog.items])

    def start_session(self, history: Sequence[Item], rng: np.random.Generator) -> None:
        self._sum = np.sum([i.embedding for i in history], axis=0)
        self._count = len(history)

    def _preference(self) -> np.ndarray:
        return self._sum / max(self._count, 1)

    def act(self) -> ValidPage:
        pref = self._preference()
        norm = np.linalg.norm(pref)
        scores = self._units @ (pref / norm if norm > 0 else pref)
        order = np.lexsort((self._ids, -scores))
        chosen = tuple(self.catalog.items[i] for i in order[: self.rows * self.cols])
        return ValidPage(items=chosen, rows=self.rows, cols=self.cols)

    def observe(self, page: PageObservation) -> None:
        for item, code in zip(page.items, page.feedback):
            if code != Feedback.SKIP:
                self._sum += item.embedding
                self._count += 1


class NetworkPolicy:
    """Encoder/decoder policy with item recalling and optional proto noise."""

    def __init__(
        self,
        encoder: StateEncoder,
        decoder: Decoder,
        catalog: "Catalog",
        recall_k: int = 25,
        noise_sigma: float = 0.0,
    ):
        self.encoder = encoder
        self.decoder = decoder
        self.catalog = catalog
        self.recall_k = recall_k
        self.noise_sigma = noise_sigma
        self.state: EncoderState | None = None
        self.pool: CandidatePool | None = None
        self.rng: np.random.Generator | None = None

    def start_session(self, history: Sequence[Item], rng: np.random.Generator) -> None:
        self.rng = rng
        with no_grad():
            self.state = self.encoder.encode_initial(history)
        self.pool = recall_pool(history, [], self.catalog.items, self.recall_k)

    def act(self) -> ValidPage:
        cfg = self.decoder.config
        noise = None
        if self.noise_sigma > 0.0:
            noise = self.rng.normal(
                scale=self.noise_sigma, size=(cfg.page_rows, cfg.page_cols, cfg.item_dim)
            )
        with no_grad():
            _, page = act(self.state, self.decoder, self.pool, noise=noise)
        return page

    def observe(self, page: PageObservation) -> None:
        with no_grad():
            self.state = self.encoder.advance(self.state, page)
        for item, code in zip(page.items, page.feedback):
            if code != Feedback.SKIP:
                self.pool.extend(top_neighbors(item, self.catalog.items, self.recall_k))

    # -- rerank hooks ---------------------------------------------------------

    def initial_state(self, history: Sequence[Item]) -> EncoderState:
        with no_grad():
            return self.encoder.encode_initial(history)

    def propose(self, state: EncoderState) -> np.ndarray:
        with no_grad():
            return self.decoder.decode(state.s_cur).data

    def advance_state(self, state: EncoderState, page: PageObservation) -> EncoderState:
        with no_grad():
            return self.encoder.advance(state, page)
