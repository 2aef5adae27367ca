"""Per-condition metric aggregates, CSV output and the printed table."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CSV_HEADER = ("method", "condition", "metric", "mean", "std", "n")


@dataclass(frozen=True)
class ReportRow:
    method: str
    condition: str
    metric: str
    mean: float
    std: float | None
    n: int
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.n < 2 and self.std is not None:
            raise ValueError("std is only defined for n >= 2")


def aggregate(values, method: str, condition: str, metric: str = "si_sdr",
              seeds=()) -> ReportRow:
    """Mean and sample standard deviation (n - 1 denominator)."""
    v = np.asarray(list(values), dtype=np.float64)
    n = v.size
    if n == 0:
        raise ValueError("cannot aggregate an empty set")
    with np.errstate(invalid="ignore"):
        mean = float(v.mean())
        std = float(v.std(ddof=1)) if n >= 2 else None
    return ReportRow(method, condition, metric, mean, std, n, tuple(int(s) for s in seeds))


def _fmt_csv(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _fmt_db(x: float | None) -> str:
    if x is None:
        return "-"
    if math.isinf(x):
        return "perfect" if x > 0 else "-inf"
    return f"{x:.2f}"


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def get(self, method: str, condition: str = "all", metric: str = "si_sdr") -> ReportRow:
        for r in self.rows:
            if (r.method, r.condition, r.metric) == (method, condition, metric):
                return r
        raise KeyError((method, condition, metric))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def conditions(self) -> list[str]:
        conds = list(dict.fromkeys(r.condition for r in self.rows))
        return sorted(conds, key=lambda c: (c == "all", c))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.method, r.condition, r.metric, _fmt_csv(r.mean), _fmt_csv(r.std), r.n])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
            for d in reader:
                rows.append(ReportRow(d["method"], d["condition"], d["metric"], float(d["mean"]),
                                      float(d["std"]) if d["std"] else None, int(d["n"])))
        return cls(rows)

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=2, sort_keys=True)

    def table(self, metric: str = "si_sdr") -> str:
        """Methods down, conditions across; cells are 'mean ± std [dB]'."""
        conds = self.conditions
        cells = defaultdict(dict)
        for r in self.rows:
            if r.metric != metric:
                continue
            cell = _fmt_db(r.mean) if r.std is None else f"{_fmt_db(r.mean)} ± {_fmt_db(r.std)}"
            cells[r.method][r.condition] = cell
        header = ["method"] + conds
        body = [[m] + [cells[m].get(c, "") for c in conds] for m in self.methods]
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(str(v).ljust(w) for v, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in body]
        return "\n".join(lines)
