"""Evaluation protocols: offline reranking of logged sessions, ranking
metrics over the reordered lists, and online rollouts against the simulator.

The reranker may consult the logged per-item feedback only to advance its
state after a page is emitted, never to choose the page; rewards enter the
metrics afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actor import CandidatePool, greedy_fill
from .config import SHORT_SESSION, RunConfig
from .encoder import REWARD_VALUES, Item, PageObservation
from .environment import Catalog, SessionRecord, SimUser, run_session
from .runtime import single_threaded_blas

__all__ = [
    "RankedList",
    "MetricReport",
    "offline_rerank",
    "compute_metrics",
    "aggregate_reports",
    "online_test",
    "report_csv_lines",
    "report_table",
]


@dataclass(frozen=True)
class RankedList:
    """A session's items in the order the policy emitted them, with the
    logged reward of each item."""

    items: tuple[Item, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.rewards):
            raise ValueError("ranked list items and rewards differ in length")


@dataclass
class MetricReport:
    """Ranking quality of one list, or the average over many.

    Fields may be None where a metric is undefined (no relevant items) and
    therefore excluded from averages.
    """

    precision: float | None
    recall: float | None
    f1: float | None
    ndcg: float | None
    mean_average_precision: float | None
    session_reward: float
    k: int = 20

    FIELD_LABELS = (
        ("precision", "precision@{k}"),
        ("recall", "recall@{k}"),
        ("f1", "f1@{k}"),
        ("ndcg", "ndcg@{k}"),
        ("mean_average_precision", "map"),
        ("session_reward", "session_reward"),
    )


def _session_rewards(record: SessionRecord) -> dict[int, float]:
    """Per-item logged reward; repeated showings keep the best outcome."""
    rewards: dict[int, float] = {}
    for step in record.steps:
        for item, code in zip(step.page.items, step.page.feedback):
            value = REWARD_VALUES[code]
            rewards[item.id] = max(rewards.get(item.id, 0.0), value)
    return rewards


def _feedback_for(record: SessionRecord) -> dict[int, int]:
    codes: dict[int, int] = {}
    for step in record.steps:
        for item, code in zip(step.page.items, step.page.feedback):
            codes[item.id] = max(codes.get(item.id, 0), int(code))
    return codes


def offline_rerank(session: SessionRecord, agent, config: RunConfig) -> RankedList:
    """Reorder a logged session's own items by repeatedly acting on them.

    Each round maps the agent's proposal onto the remaining items of the
    session, appends the page to the output list, advances the agent's state
    using the logged feedback of the chosen items, and removes them. A final
    partial page handles the leftover items in one truncated mapping pass.
    """
    rows, cols = config.page_rows, config.page_cols
    page_size = rows * cols
    remaining = {item.id: item for item in session.item_set()}
    if not remaining:
        raise ValueError("offline_rerank: session contains no items")
    rewards = _session_rewards(session)
    feedback = _feedback_for(session)
    state = agent.initial_state(session.history)
    ranked_items: list[Item] = []
    ranked_rewards: list[float] = []
    while remaining:
        pool = CandidatePool(remaining.values())
        n_slots = min(page_size, len(pool))
        proto = agent.propose(state)
        chosen = greedy_fill(proto, pool, n_slots, rows, cols)
        for item in chosen:
            ranked_items.append(item)
            ranked_rewards.append(rewards[item.id])
            del remaining[item.id]
        if len(chosen) == page_size and remaining:
            observation = PageObservation(
                items=tuple(chosen),
                feedback=tuple(feedback[item.id] for item in chosen),
                rows=rows,
                cols=cols,
            )
            state = agent.advance_state(state, observation)
    return RankedList(items=tuple(ranked_items), rewards=tuple(ranked_rewards))


def compute_metrics(ranked: RankedList, k: int = 20) -> MetricReport:
    """Standard ranking metrics; relevance is positive logged reward, and
    the ranking gain for ndcg is the logged reward itself."""
    rewards = np.asarray(ranked.rewards, dtype=np.float64)
    relevant = rewards > 0.0
    n_relevant = int(relevant.sum())
    top_k = relevant[:k]
    precision = float(top_k.sum() / k)
    if n_relevant == 0:
        return MetricReport(
            precision=precision,
            recall=None,
            f1=None,
            ndcg=None,
            mean_average_precision=None,
            session_reward=float(rewards.sum()),
            k=k,
        )
    recall = float(top_k.sum() / n_relevant)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = rewards[:k]
    dcg = float((gains * discounts[: gains.size]).sum())
    ideal = np.sort(rewards)[::-1][:k]
    idcg = float((ideal * discounts[: ideal.size]).sum())
    ndcg = dcg / idcg if idcg > 0 else None
    hits = 0
    precisions = []
    for position, rel in enumerate(relevant, start=1):
        if rel:
            hits += 1
            precisions.append(hits / position)
    mean_ap = float(sum(precisions) / n_relevant)
    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        ndcg=ndcg,
        mean_average_precision=mean_ap,
        session_reward=float(rewards.sum()),
        k=k,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Averages per metric, skipping sessions where a metric is undefined."""
    if not reports:
        raise ValueError("aggregate_reports: no reports to aggregate")

    def averaged(field: str) -> float | None:
        values = [getattr(r, field) for r in reports if getattr(r, field) is not None]
        return float(np.mean(values)) if values else None

    return MetricReport(
        precision=averaged("precision"),
        recall=averaged("recall"),
        f1=averaged("f1"),
        ndcg=averaged("ndcg"),
        mean_average_precision=averaged("mean_average_precision"),
        session_reward=float(np.mean([r.session_reward for r in reports])),
        k=reports[0].k,
    )


def online_test(
    policy,
    catalog: Catalog,
    n_sessions: int,
    session_length: int = SHORT_SESSION,
    seed: int = 0,
    config: RunConfig | None = None,
    user_factory=None,
) -> tuple[float, list[float]]:
    """Mean cumulative session reward of a frozen policy on fresh sessions.

    Session i draws its user and feedback randomness from (seed, i), so two
    policies evaluated with the same seed face the same users.
    """
    config = config or RunConfig()
    factory = user_factory or SimUser.sample
    rewards = []
    with single_threaded_blas():
        for i in range(n_sessions):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
            user = factory(catalog, rng, config.page_rows, config.page_cols)
            record = run_session(
                policy,
                user,
                catalog,
                session_length,
                rng,
                history_length=config.history_length,
            )
            rewards.append(record.total_reward)
    mean = float(np.mean(rewards)) if rewards else 0.0
    return mean, rewards


def _format(value: float | None) -> str:
    return "nan" if value is None else f"{value:.6f}"


def report_csv_lines(rows: Sequence[tuple[str, MetricReport]]) -> list[str]:
    """Comma-separated table, one row per labelled report."""
    k = rows[0][1].k if rows else 20
    header = "method," + ",".join(label.format(k=k) for _, label in MetricReport.FIELD_LABELS)
    lines = [header]
    for label, report in rows:
        values = [_format(getattr(report, field)) for field, _ in MetricReport.FIELD_LABELS]
        lines.append(label + "," + ",".join(values))
    return lines


def report_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned text table in the usual metric column order."""
    k = rows[0][1].k if rows else 20
    headers = ["method"] + [label.format(k=k) for _, label in MetricReport.FIELD_LABELS]
    table_rows = [headers]
    for label, report in rows:
        table_rows.append(
            [label] + [_format(getattr(report, field)) for field, _ in MetricReport.FIELD_LABELS]
        )
    widths = [max(len(row[i]) for row in table_rows) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table_rows):
        lines.append("  ".join(cell.rjust(width) for cell, width in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines)
