"""Rendering helpers for training curves and offline gain charts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from matplotlib import colormaps, ticker
from matplotlib.axes import Axes
from matplotlib.figure import Figure

from ..services.ranking import MetricReport

TEXT_COLOR = "#1f2933"
GRID_COLOR = "#dbe3f5"


@dataclass(slots=True)
class CurveRenderResult:
    """Metadata about the rendered training curves."""

    plotted_any: bool
    runs: list[str]
    max_step: int


@dataclass(slots=True)
class GainRenderResult:
    """Metadata about the rendered gain bars."""

    candidates: list[str]
    splits: list[str]
    max_abs_gain: float


def _style(axes: Axes) -> None:
    axes.set_facecolor("#ffffff")
    for spine in axes.spines.values():
        spine.set_color(TEXT_COLOR)
    axes.tick_params(colors=TEXT_COLOR, labelsize=8)
    axes.grid(True, linestyle="--", linewidth=0.6, color=GRID_COLOR, alpha=0.8)


class TrainingCurvePresenter:
    """Plots one metric of several training logs against the optimizer step."""

    def render(
        self,
        axes: Axes,
        logs: Mapping[str, Sequence[Mapping[str, object]]],
        *,
        metric: str = "mean_abs_err",
        title: str | None = None,
    ) -> CurveRenderResult:
        axes.clear()
        _style(axes)
        plotted: list[str] = []
        max_step = 0
        for name, records in logs.items():
            points = [
                (int(record["step"]), float(record[metric]))
                for record in records
                if record.get(metric) is not None
            ]
            if not points:
                continue
            xs, ys = zip(*points)
            axes.plot(xs, ys, label=name, linewidth=1.4, marker="o", markersize=2.5)
            plotted.append(name)
            max_step = max(max_step, max(xs))

        axes.set_xlabel("Optimizer step", fontsize=9, color=TEXT_COLOR)
        axes.set_ylabel(metric.replace("_", " "), fontsize=9, color=TEXT_COLOR)
        axes.set_title(title or f"Training {metric.replace('_', ' ')}", fontsize=11, color=TEXT_COLOR)
        axes.set_xlim(0, max(1, max_step))
        axes.xaxis.set_major_locator(ticker.MaxNLocator(integer=True))
        if plotted:
            axes.legend(loc="upper right", fontsize=8)
        return CurveRenderResult(plotted_any=bool(plotted), runs=plotted, max_step=max_step)


class GainPresenter:
    """Grouped bars of the percentage gain over the title-only baseline."""

    def render(
        self,
        axes: Axes,
        report: MetricReport,
        *,
        metric: str = "gain_ndcg",
        splits: Sequence[str] = ("full", "tail"),
    ) -> GainRenderResult:
        axes.clear()
        _style(axes)
        candidates = [tag for tag in report.metrics if tag != report.baseline]
        if not candidates:
            return GainRenderResult(candidates=[], splits=list(splits), max_abs_gain=0.0)

        cmap = colormaps.get_cmap("tab10")
        width = 0.8 / max(1, len(splits))
        max_abs = 0.0
        for split_index, split in enumerate(splits):
            values = []
            for tag in candidates:
                value = getattr(report.metrics[tag][split], metric)
                values.append(0.0 if value is None else float(value))
            max_abs = max([max_abs, *(abs(v) for v in values)])
            offsets = [i + (split_index - (len(splits) - 1) / 2) * width for i in range(len(candidates))]
            axes.bar(offsets, values, width=width, label=f"golden-{split}", color=cmap(split_index), edgecolor="#374151", linewidth=0.4)

        axes.axhline(0.0, color=TEXT_COLOR, linewidth=0.8)
        axes.set_xticks(list(range(len(candidates))))
        axes.set_xticklabels(candidates, color=TEXT_COLOR, fontsize=8)
        label = "NDCG@5" if metric == "gain_ndcg" else "R@90P"
        axes.set_ylabel(f"{label} gain over None (%)", fontsize=9, color=TEXT_COLOR)
        axes.set_title(f"{label} gain by candidate", fontsize=11, color=TEXT_COLOR)
        padding = max(1.0, max_abs * 0.1)
        axes.set_ylim(-max_abs - padding, max_abs + padding)
        axes.legend(loc="upper left", fontsize=8)
        return GainRenderResult(candidates=candidates, splits=list(splits), max_abs_gain=max_abs)


def save_training_curves(path: str | Path, logs: Mapping[str, Sequence[Mapping[str, object]]]) -> CurveRenderResult:
    figure = Figure(figsize=(9, 3.2), dpi=100, tight_layout=True)
    presenter = TrainingCurvePresenter()
    error_axes = figure.add_subplot(121)
    kl_axes = figure.add_subplot(122)
    result = presenter.render(error_axes, logs, metric="mean_abs_err", title="Mean |r - l| of sampled summaries")
    presenter.render(kl_axes, logs, metric="kl", title="KL to the reference policy")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, facecolor="#f5f7fb")
    return result


def save_gain_chart(path: str | Path, report: MetricReport) -> GainRenderResult:
    figure = Figure(figsize=(6, 3.2), dpi=100, tight_layout=True)
    result = GainPresenter().render(figure.add_subplot(111), report)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, facecolor="#f5f7fb")
    return result
