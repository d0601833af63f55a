"""Synthetic world: item catalog, simulated user, session rollouts, and the
line-delimited session-log format.

The user model is deliberately small but exhibits the three phenomena the
recommender is built to exploit: preferences drift toward clicked items
within a session, attention depends on the slot position inside the page,
and repeated exposure of the same item wears its click probability down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .actor import ValidPage
from .config import SHORT_SESSION, RunConfig
from .encoder import Feedback, Item, PageObservation

__all__ = [
    "Catalog",
    "SimUser",
    "SessionStep",
    "SessionRecord",
    "SessionLogError",
    "generate_catalog",
    "user_feedback",
    "sample_history",
    "run_session",
    "generate_logs",
    "split_sessions",
    "write_session_log",
    "read_session_log",
    "save_catalog",
    "load_catalog",
]

LOG_FORMAT_NAME = "pagerec-session-log"
LOG_FORMAT_VERSION = 1

# Click model constants. Cosine match and category affinity feed a logistic
# click probability, scaled by position bias and exposure satiation.
CLICK_SCALE = 3.0
CLICK_BIAS = -1.2
PURCHASE_SCALE = 4.0
PURCHASE_SHIFT = 2.2
PURCHASE_MAX = 0.5
DRIFT_CLICK = 0.03
DRIFT_PURCHASE = 0.06
SATIATION_DECAY = 0.8
POSITION_TOP = 0.95
POSITION_ROW_DECAY = 0.8
POSITION_COL_DECAY = 0.9

CENTER_SCALE = 0.9
NOISE_SCALE = 0.5


class SessionLogError(ValueError):
    """Raised for malformed session-log files, with the offending line."""


@dataclass(frozen=True)
class Catalog:
    items: tuple[Item, ...]
    n_categories: int
    seed: int
    centers: np.ndarray

    def __post_init__(self):
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("catalog item ids must be unique")
        object.__setattr__(self, "_by_id", {item.id: item for item in self.items})

    def __len__(self) -> int:
        return len(self.items)

    def item(self, item_id: int) -> Item:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise KeyError(f"unknown item id {item_id}") from None

    @property
    def embedding_dim(self) -> int:
        return self.items[0].embedding.shape[0]


def generate_catalog(n_items: int, n_categories: int, seed: int, dim: int = 50) -> Catalog:
    """Clustered catalog: one center per category, items are noisy copies.

    Embeddings are squashed through tanh so components stay strictly inside
    (-1, 1); items cycle through categories, so counts differ by at most one.
    """
    if n_categories < 1:
        raise ValueError("n_categories must be >= 1")
    if n_items < 1:
        raise ValueError(f"catalog needs at least one item, got {n_items}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    centers = rng.normal(size=(n_categories, dim))
    items = []
    for i in range(n_items):
        category = i % n_categories
        raw = CENTER_SCALE * centers[category] + NOISE_SCALE * rng.normal(size=dim)
        items.append(Item(id=i, embedding=np.tanh(raw), category=category))
    return Catalog(items=tuple(items), n_categories=n_categories, seed=seed, centers=centers)


def _default_position_bias(rows: int, cols: int) -> np.ndarray:
    r = POSITION_ROW_DECAY ** np.arange(rows)[:, None]
    c = POSITION_COL_DECAY ** np.arange(cols)[None, :]
    return POSITION_TOP * r * c


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class SimUser:
    """A simulated shopper with drifting preferences and page-position bias."""

    def __init__(
        self,
        latent: np.ndarray,
        affinity: np.ndarray,
        position_bias: np.ndarray,
        rng: np.random.Generator,
        satiation_decay: float = SATIATION_DECAY,
        drift_click: float = DRIFT_CLICK,
        drift_purchase: float = DRIFT_PURCHASE,
    ):
        if not (0.0 < satiation_decay <= 1.0):
            raise ValueError("satiation_decay must lie in (0, 1]")
        # sampled users get strictly positive bias; zero is allowed so tests
        # can model slots nobody looks at
        if np.any(position_bias < 0.0) or np.any(position_bias > 1.0):
            raise ValueError("position bias entries must lie in [0, 1]")
        self.latent = np.asarray(latent, dtype=np.float64)
        self.affinity = np.asarray(affinity, dtype=np.float64)
        self.position_bias = np.asarray(position_bias, dtype=np.float64)
        self.satiation_decay = satiation_decay
        self.drift_click = drift_click
        self.drift_purchase = drift_purchase
        self.rng = rng
        self.exposures: dict[int, int] = {}

    @classmethod
    def sample(cls, catalog: Catalog, rng: np.random.Generator, rows: int = 5, cols: int = 2) -> "SimUser":
        preferred = int(rng.integers(catalog.n_categories))
        raw = CENTER_SCALE * catalog.centers[preferred] + NOISE_SCALE * rng.normal(
            size=catalog.embedding_dim
        )
        affinity = rng.normal(scale=0.25, size=catalog.n_categories)
        affinity[preferred] += 0.75
        return cls(
            latent=np.tanh(raw),
            affinity=affinity,
            position_bias=_default_position_bias(rows, cols),
            rng=rng,
        )

    def reset_session(self) -> None:
        self.exposures = {}

    def match(self, item: Item) -> float:
        denom = np.linalg.norm(self.latent) * np.linalg.norm(item.embedding)
        if denom == 0.0:
            return 0.0
        return float(np.dot(self.latent, item.embedding) / denom)

    def click_probability(self, item: Item, row: int, col: int) -> float:
        """Click probability at the item's current exposure count."""
        base = _sigmoid(CLICK_SCALE * self.match(item) + self.affinity[item.category] + CLICK_BIAS)
        satiation = self.satiation_decay ** self.exposures.get(item.id, 0)
        return float(self.position_bias[row, col] * base * satiation)

    def purchase_probability(self, item: Item) -> float:
        return PURCHASE_MAX * _sigmoid(PURCHASE_SCALE * self.match(item) - PURCHASE_SHIFT)

    def respond(self, page: ValidPage) -> tuple[int, ...]:
        """Feedback codes for each slot; mutates exposure counts and latent."""
        codes = []
        for slot, item in enumerate(page.items):
            row, col = divmod(slot, page.cols)
            p_click = self.click_probability(item, row, col)
            self.exposures[item.id] = self.exposures.get(item.id, 0) + 1
            if self.rng.random() < p_click:
                if self.rng.random() < self.purchase_probability(item):
                    codes.append(int(Feedback.PURCHASE))
                    drift = self.drift_purchase
                else:
                    codes.append(int(Feedback.CLICK))
                    drift = self.drift_click
                self.latent = (1.0 - drift) * self.latent + drift * item.embedding
            else:
                codes.append(int(Feedback.SKIP))
        return tuple(codes)


def user_feedback(user: SimUser, page: ValidPage) -> tuple[int, ...]:
    """Observe the user's per-slot feedback for a recommended page."""
    return user.respond(page)


def sample_history(
    user: SimUser, catalog: Catalog, n: int, rng: np.random.Generator
) -> list[Item]:
    """Items the user plausibly clicked before the session, propensity-weighted."""
    if n > len(catalog):
        raise ValueError(f"cannot sample {n} history items from {len(catalog)}")
    weights = np.array(
        [
            _sigmoid(CLICK_SCALE * user.match(item) + user.affinity[item.category] + CLICK_BIAS)
            for item in catalog.items
        ]
    )
    weights /= weights.sum()
    chosen = rng.choice(len(catalog), size=n, replace=False, p=weights)
    return [catalog.items[i] for i in chosen]


@dataclass(frozen=True)
class SessionStep:
    page: PageObservation
    reward: float

    def __post_init__(self):
        if abs(self.reward - self.page.reward) > 1e-9:
            raise ValueError(
                f"step reward {self.reward} inconsistent with feedback (expected {self.page.reward})"
            )


@dataclass(frozen=True)
class SessionRecord:
    history: tuple[Item, ...]
    steps: tuple[SessionStep, ...]

    @property
    def total_reward(self) -> float:
        return float(sum(step.reward for step in self.steps))

    def item_set(self) -> list[Item]:
        seen = {}
        for step in self.steps:
            for item in step.page.items:
                seen.setdefault(item.id, item)
        return list(seen.values())


def run_session(
    policy,
    user: SimUser,
    catalog: Catalog,
    n_pages: int,
    rng: np.random.Generator,
    history: Sequence[Item] | None = None,
    history_length: int = 10,
) -> SessionRecord:
    """Roll one recommendation session: act, observe feedback, advance."""
    user.reset_session()
    if history is None:
        history = sample_history(user, catalog, history_length, rng)
    history = tuple(history)
    policy.start_session(history, rng)
    steps = []
    for _ in range(n_pages):
        page = policy.act()
        codes = user_feedback(user, page)
        observation = PageObservation(
            items=page.items, feedback=codes, rows=page.rows, cols=page.cols
        )
        policy.observe(observation)
        steps.append(SessionStep(page=observation, reward=observation.reward))
    return SessionRecord(history=history, steps=tuple(steps))


def _make_policy(name: str, catalog: Catalog, config: RunConfig):
    from .policies import GreedySimilarityPolicy, RandomPolicy

    if name == "random":
        return RandomPolicy(catalog, config.page_rows, config.page_cols)
    if name == "greedy":
        return GreedySimilarityPolicy(catalog, config.page_rows, config.page_cols)
    raise ValueError(f"unknown logging policy {name!r}; expected 'random' or 'greedy'")


def generate_logs(
    catalog: Catalog,
    n_sessions: int,
    logging_policy: str,
    seed: int,
    config: RunConfig | None = None,
    session_length: int = SHORT_SESSION,
) -> list[SessionRecord]:
    """Roll sessions under a logging policy; deterministic per seed."""
    config = config or RunConfig()
    records = []
    for i in range(n_sessions):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        user = SimUser.sample(catalog, rng, config.page_rows, config.page_cols)
        policy = _make_policy(logging_policy, catalog, config)
        records.append(
            run_session(
                policy,
                user,
                catalog,
                session_length,
                rng,
                history_length=config.history_length,
            )
        )
    return records


def split_sessions(records: Sequence[SessionRecord], fraction: float = 0.7):
    """Temporal split: the first fraction trains, the remainder tests."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("split fraction must lie in (0, 1)")
    cut = int(len(records) * fraction)
    return list(records[:cut]), list(records[cut:])


# ---------------------------------------------------------------------------
# Session-log files


def write_session_log(path, records: Sequence[SessionRecord], rows: int, cols: int) -> None:
    """Line-delimited log: a versioned header, then one JSON session per line."""
    header = {
        "format": LOG_FORMAT_NAME,
        "version": LOG_FORMAT_VERSION,
        "page_rows": rows,
        "page_cols": cols,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            payload = {
                "history": [item.id for item in record.history],
                "steps": [
                    {
                        "items": [item.id for item in step.page.items],
                        "feedback": [int(code) for code in step.page.feedback],
                        "reward": step.reward,
                    }
                    for step in record.steps
                ],
            }
            fh.write(json.dumps(payload, sort_keys=True) + "\n")


def read_session_log(path, catalog: Catalog) -> list[SessionRecord]:
    """Parse a session log back into records; errors carry line numbers."""
    path = Path(path)
    records = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SessionLogError(f"{path}:1: empty file, expected a header line")

    def fail(lineno, message):
        raise SessionLogError(f"{path}:{lineno}: {message}")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"header is not valid JSON ({exc.msg})")
    if header.get("format") != LOG_FORMAT_NAME:
        fail(1, f"unexpected format {header.get('format')!r}")
    if header.get("version") != LOG_FORMAT_VERSION:
        fail(1, f"unsupported version {header.get('version')!r}")
    rows, cols = header.get("page_rows"), header.get("page_cols")
    if not (isinstance(rows, int) and isinstance(cols, int)):
        fail(1, "header must carry integer page_rows/page_cols")

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(lineno, f"not valid JSON ({exc.msg})")
        try:
            history = tuple(catalog.item(i) for i in payload["history"])
            steps = []
            for step in payload["steps"]:
                page = PageObservation(
                    items=tuple(catalog.item(i) for i in step["items"]),
                    feedback=tuple(int(c) for c in step["feedback"]),
                    rows=rows,
                    cols=cols,
                )
                steps.append(SessionStep(page=page, reward=float(step["reward"])))
            records.append(SessionRecord(history=history, steps=tuple(steps)))
        except (KeyError, TypeError) as exc:
            fail(lineno, f"missing or malformed field ({exc})")
        except (ValueError,) as exc:
            fail(lineno, str(exc))
    return records


# ---------------------------------------------------------------------------
# Catalog files


def save_catalog(path, catalog: Catalog) -> None:
    np.savez(
        path,
        ids=np.array([i.id for i in catalog.items]),
        embeddings=np.stack([i.embedding for i in catalog.items]),
        categories=np.array([i.category for i in catalog.items]),
        centers=catalog.centers,
        meta=np.array([catalog.n_categories, catalog.seed]),
    )


def load_catalog(path) -> Catalog:
    data = np.load(path)
    n_categories, seed = (int(v) for v in data["meta"])
    items = tuple(
        Item(id=int(i), embedding=e, category=int(c))
        for i, e, c in zip(data["ids"], data["embeddings"], data["categories"])
    )
    return Catalog(items=items, n_categories=n_categories, seed=seed, centers=data["centers"])
