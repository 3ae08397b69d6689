"""
    Metrics report: one SVG line chart per metric column across runs (drawn with matplotlib), plus a summary of
    final and best values.

    Training metrics CSVs (steps.csv, epochs.csv) are plotted against their first column. A mixing CSV
    (domain,ratio,accuracy) gives one accuracy-over-ratio series per domain, optionally overlaid with the fitted
    laws. Output is a pure function of the inputs.
"""

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from pathvalidate import sanitize_filename

from dalip.errors import CsvParseError
from dalip.mixlaw import CSV_HEADER, DomainLaw, parse_observations, read_text

LOGGER = logging.getLogger("Report")

FIGSIZE = (6.4, 4.0)
FIT_SAMPLES = 101

# Fixed id salt, text kept as text, so equal charts give equal bytes
SVG_STYLE = {"svg.hashsalt": "dalip", "svg.fonttype": "none", "font.family": "sans-serif"}

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class Series:
    name: str
    points: List[Tuple[float, float]] = field(default_factory=list)
    dashed: bool = False


@dataclass
class Chart:
    title: str
    x_label: str
    y_label: str
    series: List[Series] = field(default_factory=list)


@dataclass
class MetricsTable:
    name: str
    columns: List[str]
    rows: List[List[Optional[float]]]

    def column(self, name) -> List[Optional[float]]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]


def parse_metrics(text, source="<csv>", name=None) -> MetricsTable:
    """ Parses a numeric CSV with a header. Empty cells become None """

    reader = csv.reader(io.StringIO(text))

    try:
        header = next(reader)
    except StopIteration:
        raise CsvParseError(source, 1, "file is empty")

    header = [h.strip() for h in header]

    if not header or any(not h for h in header) or len(set(header)) != len(header):
        raise CsvParseError(source, 1, f"header must hold distinct, nonempty column names, got {header}")

    rows = []

    for number, row in enumerate(reader, start=2):
        if not row:
            continue

        if len(row) != len(header):
            raise CsvParseError(source, number, f"expected {len(header)} fields, got {len(row)}")

        try:
            rows.append([float(cell) if cell.strip() else None for cell in row])
        except ValueError:
            raise CsvParseError(source, number, f"non-numeric value in {row}")

        if any(v is not None and not math.isfinite(v) for v in rows[-1]):
            raise CsvParseError(source, number, "values must be finite")

    return MetricsTable(name or source, header, rows)


def run_name(path):
    """ Legend name of a CSV: its parent directory and file stem """

    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    stem = os.path.splitext(os.path.basename(path))[0]

    return f"{parent}/{stem}" if parent else stem


def render_svg(chart: Chart) -> str:
    """ Renders {chart} as a standalone SVG document with axes, labels and a legend """

    with matplotlib.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)

        try:
            for i, series in enumerate(chart.series):
                xs = [x for x, _ in series.points]
                ys = [y for _, y in series.points]
                ax.plot(xs, ys, color=PALETTE[i % len(PALETTE)], linestyle="--" if series.dashed else "-",
                        linewidth=1.5, label=series.name)

            ax.set_title(chart.title)
            ax.set_xlabel(chart.x_label)
            ax.set_ylabel(chart.y_label)

            if chart.series:
                ax.legend(loc="upper left", bbox_to_anchor=(1.02, 1.0), fontsize="small", frameon=False)

            buffer = io.StringIO()
            fig.savefig(buffer, format="svg", bbox_inches="tight", metadata={"Date": None})
        finally:
            plt.close(fig)

    return buffer.getvalue()


def metric_charts(tables: Sequence[MetricsTable]) -> Dict[str, Chart]:
    """ One chart per non-x column, with one series per table holding that column """

    charts: Dict[str, Chart] = {}

    for table in tables:
        x_name = table.columns[0]

        for column in table.columns[1:]:
            chart = charts.setdefault(column, Chart(title=column, x_label=x_name, y_label=column))
            points = [(x, y) for x, y in zip(table.column(x_name), table.column(column)) if x is not None and y is not None]
            chart.series.append(Series(table.name, points))

    return charts


def mixing_chart(path, laws: Sequence[DomainLaw] = (), label=None) -> Chart:
    """
        Accuracy over ratio per domain of the mixing CSV at {path}, with dashed fitted curves for {laws}.
        A {label} prefixes the domain series names.
    """

    observations = parse_observations(read_text(path), source=path)
    chart = Chart(title="accuracy", x_label="ratio", y_label="accuracy")

    for domain in sorted({o.domain for o in observations}):
        points = sorted((o.ratio, o.accuracy) for o in observations if o.domain == domain)
        chart.series.append(Series(f"{label}: {domain}" if label else domain, points))

    grid = np.linspace(0.0, 1.0, FIT_SAMPLES)

    for law in laws:
        chart.series.append(Series(f"fit: {law.domain}", [(float(r), float(law(r))) for r in grid], dashed=True))

    return chart


def merge_chart(charts: Dict[str, Chart], name, chart: Chart):
    """ Adds {chart} to {charts}, appending its series when a chart called {name} is already there """

    if name in charts:
        charts[name].series.extend(chart.series)
    else:
        charts[name] = chart


def summarize(tables: Sequence[MetricsTable]) -> Dict:
    """
        Final and best value per run and metric. Best is the minimum for loss columns and the maximum otherwise,
        None for columns without values.
    """

    summary = {}

    for table in tables:
        metrics = {}

        for column in table.columns[1:]:
            values = [v for v in table.column(column) if v is not None]
            best = (min(values) if column.startswith("loss") else max(values)) if values else None
            metrics[column] = {"final": values[-1] if values else None, "best": best}

        summary[table.name] = metrics

    return summary


def _is_mixing_csv(text):
    first = text.splitlines()[0] if text else ""
    return [c.strip() for c in first.split(",")] == CSV_HEADER


def write_report(paths: Sequence[str], out_dir, laws: Sequence[DomainLaw] = ()) -> Dict:
    """
        Writes <metric>.svg charts and summary.json for the CSVs at {paths} into {out_dir}.
        Series for the same metric from several CSVs end up on one chart.

        Returns: The summary dictionary
    """

    os.makedirs(out_dir, exist_ok=True)
    tables, charts = [], {}

    for path in paths:
        text = read_text(path)

        if _is_mixing_csv(text):
            first = "accuracy" not in charts
            merge_chart(charts, "accuracy", mixing_chart(path, laws if first else (), None if first else run_name(path)))
            observations = parse_observations(text, source=path)
            columns = ["ratio"] + sorted({o.domain for o in observations})
            rows = [[o.ratio] + [o.accuracy if o.domain == d else None for d in columns[1:]]
                    for o in sorted(observations, key=lambda o: (o.ratio, o.domain))]
            tables.append(MetricsTable(run_name(path), columns, rows))
        else:
            tables.append(parse_metrics(text, source=path, name=run_name(path)))

    for name, chart in metric_charts([t for t in tables if t.columns[0] != "ratio"]).items():
        merge_chart(charts, name, chart)

    written = []

    for name, chart in sorted(charts.items()):
        filename = sanitize_filename(f"{name}.svg", replacement_text="_")

        with open(os.path.join(out_dir, filename), "w") as sf:
            sf.write(render_svg(chart))

        written.append(filename)

    summary = {"charts": written, "runs": summarize(tables)}

    with open(os.path.join(out_dir, "summary.json"), "w") as jf:
        jf.write(json.dumps(summary, indent=2, sort_keys=True))

    LOGGER.info(f"Wrote {len(written)} charts for {len(tables)} runs to {out_dir}")

    return summary
