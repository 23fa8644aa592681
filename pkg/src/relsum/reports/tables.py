"""Plain-text report tables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from ..core.corpus import Product, Query
from ..services.ranking import MetricReport

REPORT_COLUMNS = (
    "candidate",
    "split",
    "r_at_90p",
    "ndcg_at_5",
    "gain_r",
    "gain_ndcg",
    "threshold",
    "mean_context_length",
    "mean_abs_err",
    "flags",
)


def _pct(value: float | None) -> str:
    return "n/a" if value is None else f"{value:+.2f}%"


def format_gain_table(report: MetricReport) -> str:
    """Gains over the title-only baseline, golden-full and golden-tail side by side."""

    header = f"{'Candidate':<12} | {'full R@90P':>11} {'full NDCG@5':>12} | {'tail R@90P':>11} {'tail NDCG@5':>12}"
    lines = [header, "-" * len(header)]
    for tag, splits in report.metrics.items():
        full, tail = splits["full"], splits["tail"]
        lines.append(
            f"{tag:<12} | {_pct(full.gain_r):>11} {_pct(full.gain_ndcg):>12} | {_pct(tail.gain_r):>11} {_pct(tail.gain_ndcg):>12}"
        )
    lines.append("")
    lines.append(f"{'Candidate':<12} | {'split':<5} | {'R@90P':>7} {'NDCG@5':>7} {'ctx len':>8} {'|r-l|':>7}  flags")
    for tag, split, values in report.rows():
        lines.append(
            f"{tag:<12} | {split:<5} | {values.r_at_90p:>7.4f} {values.ndcg_at_5:>7.4f} "
            f"{values.mean_context_length:>8.1f} {values.mean_abs_err:>7.4f}  {','.join(values.flags) or '-'}"
        )
    return "\n".join(lines) + "\n"


def report_rows(report: MetricReport) -> list[list[object]]:
    rows: list[list[object]] = []
    for tag, split, values in report.rows():
        payload = values.to_payload()
        rows.append([tag, split, *(payload[column] for column in REPORT_COLUMNS[2:-1]), ";".join(values.flags)])
    return rows


@dataclass(slots=True)
class SummaryExample:
    query: Query | None
    product: Product
    summaries: Mapping[str, Sequence[str]]


def _mark(tokens: Sequence[str], wanted: set[str]) -> str:
    return " ".join(f"*{token}*" if token in wanted else token for token in tokens)


def format_examples(examples: Sequence[SummaryExample]) -> str:
    """Query, title, description and summaries; query attributes found in the text are starred."""

    blocks: list[str] = []
    for example in examples:
        wanted = set(example.query.targets) if example.query is not None else set()
        lines = [f"product     : {example.product.id}"]
        if example.query is not None:
            lines.append(f"query       : {' '.join(example.query.tokens)}")
        lines.append(f"title       : {_mark(example.product.title, wanted)}")
        lines.append(f"description : {_mark(example.product.description, wanted)}")
        for tag, summary in example.summaries.items():
            recovered = sorted(wanted & set(summary) - set(example.product.title))
            suffix = f"  (recovers {', '.join(recovered)})" if recovered else ""
            lines.append(f"{tag:<12}: {_mark(summary, wanted)}{suffix}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
