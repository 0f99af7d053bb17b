"""Result tables rendered as CSV and aligned Markdown."""

import csv
import io
import math
from dataclasses import dataclass, field

FAMILY_LABELS = {
    "olat": "OLAT",
    "group_olat": "Group OLAT",
    "mono_gradient": "Mono-gradient",
    "mono_random": "Mono-random",
    "tri_gradient": "Tri-gradient",
    "tri_random": "Tri-random",
    "flat_gray": "Flat gray",
    "mono_complementary": "Mono-complementary",
    "tri_complementary": "Tri-complementary",
}


def format_sig(value, digits: int = 4) -> str:
    """Format a number with ``digits`` significant digits; NaN renders as ``nan``."""
    if isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.{digits}g}"


@dataclass
class ReportTable:
    header: list  # first entry labels the row-label column
    rows: list = field(default_factory=list)  # (label, [values])

    def add_row(self, label: str, values) -> None:
        values = list(values)
        if len(values) != len(self.header) - 1:
            raise ValueError(f"row {label!r} has {len(values)} values, expected {len(self.header) - 1}")
        self.rows.append((label, values))

    def _cells(self):
        return [[label] + [format_sig(v) for v in values] for label, values in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self._cells())
        return buf.getvalue()

    def to_markdown(self) -> str:
        table = [list(self.header)] + self._cells()
        widths = [max(len(row[i]) for row in table) for i in range(len(self.header))]

        def line(cells):
            padded = [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))]
            return "| " + " | ".join(padded) + " |"

        rule = "|" + "|".join("-" * (w + 1) + (":" if i else "-") for i, w in enumerate(widths)) + "|"
        return "\n".join([line(table[0]), rule] + [line(r) for r in table[1:]]) + "\n"


def alpha_table(families, alphas, errors) -> ReportTable:
    """Families x step sizes, plus a column-wise Average row. ``errors[(family, alpha)]``."""
    table = ReportTable(["Illumination patterns"] + [f"alpha = {a}" for a in alphas])
    for fam in families:
        table.add_row(FAMILY_LABELS.get(fam, fam), [errors[(fam, a)] for a in alphas])
    averages = []
    for a in alphas:
        vals = [errors[(f, a)] for f in families if not math.isnan(errors[(f, a)])]
        averages.append(sum(vals) / len(vals) if vals else float("nan"))
    table.add_row("Average", averages)
    return table


def family_table(rows) -> ReportTable:
    """``rows`` of (family, K, initial error, learned error)."""
    table = ReportTable(["Illumination patterns", "Number of patterns", "Initial", "Learned"])
    for fam, K, initial, learned in rows:
        table.add_row(FAMILY_LABELS.get(fam, fam), [int(K), initial, learned])
    return table
