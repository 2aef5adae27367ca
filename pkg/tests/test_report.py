import math

import numpy as np
import pytest

from re2re.report import CSV_HEADER, MetricsReport, ReportRow, aggregate


def sample_report():
    rng = np.random.default_rng(0)
    report = MetricsReport()
    for method in ("input", "remixit", "re2re"):
        for cond in ("pink/snr[0,5)", "all"):
            report.add(aggregate(rng.normal(5, 2, 4), method, cond, seeds=range(4)))
    return report


class TestRow:
    def test_std_needs_two(self):
        with pytest.raises(ValueError):
            ReportRow("m", "all", "si_sdr", 1.0, 0.5, 1)
        ReportRow("m", "all", "si_sdr", 1.0, None, 1)

    def test_n_positive(self):
        with pytest.raises(ValueError):
            ReportRow("m", "all", "si_sdr", 1.0, None, 0)


class TestAggregate:
    def test_sample_std(self):
        row = aggregate([1.0, 2.0, 4.0], "m", "all")
        assert row.mean == pytest.approx(7 / 3, abs=1e-15)
        assert row.std == pytest.approx(math.sqrt(((1 - 7 / 3) ** 2 + (2 - 7 / 3) ** 2
                                                   + (4 - 7 / 3) ** 2) / 2), abs=1e-15)
        assert row.n == 3

    def test_single_value_has_no_std(self):
        row = aggregate([3.0], "m", "all")
        assert row.std is None and row.n == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([], "m", "all")


class TestCsv:
    def test_header(self):
        assert sample_report().to_csv().splitlines()[0] == ",".join(CSV_HEADER)

    def test_round_trip_exact(self, tmp_path):
        report = sample_report()
        back = MetricsReport.read_csv(report.write_csv(tmp_path / "r.csv"))
        for a, b in zip(report.rows, back.rows):
            assert (a.method, a.condition, a.mean, a.std, a.n) == (b.method, b.condition, b.mean, b.std, b.n)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            MetricsReport.read_csv(path)


class TestTable:
    def test_numbers_match_csv(self, tmp_path):
        # the table is the CSV rounded to 2 decimals
        report = sample_report()
        table = report.table()
        for row in MetricsReport.read_csv(report.write_csv(tmp_path / "r.csv")).rows:
            assert f"{row.mean:.2f} ± {row.std:.2f}" in table

    def test_layout(self):
        lines = sample_report().table().splitlines()
        assert lines[0].split() == ["method", "pink/snr[0,5)", "all"]
        assert [l.split()[0] for l in lines[2:]] == ["input", "remixit", "re2re"]

    def test_infinite_is_perfect(self):
        report = MetricsReport([aggregate([np.inf], "oracle", "all")])
        assert "perfect" in report.table()

    def test_get(self):
        report = sample_report()
        assert report.get("re2re", "all").n == 4
        with pytest.raises(KeyError):
            report.get("mixit")
