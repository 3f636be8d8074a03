"""Metrics parsing and figure rendering."""

import pytest

from sjea.errors import FormatError
from sjea.report import read_metrics, render_report
from sjea.train import METRICS_HEADER

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SAMPLE = METRICS_HEADER + "\n" + "\n".join([
    "0,49.2,1.1,0.9,0.30,1.2,0.95,0.40,0.001,",
    "1,40.8,0.9,0.7,0.22,1.0,0.80,0.31,0.0009,",
    "2,33.1,0.7,0.5,0.15,0.8,0.62,0.25,0.0007,",
])

SINGLE_STACK = METRICS_HEADER + "\n" + "\n".join([
    "0,20.0,0.8,0.6,0.2,,,,0.001,1.25",
    "1,15.0,0.6,0.4,0.1,,,,0.0008,1.31",
])


class TestReadMetrics:
    def test_typed_rows_with_blank_cells(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text(SINGLE_STACK)
        rows = read_metrics(str(path))
        assert len(rows) == 2
        assert rows[0]["total"] == pytest.approx(20.0)
        assert rows[0]["s1"] is None
        assert rows[0]["seconds"] == pytest.approx(1.25)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("epoch,loss\n0,1.0\n")
        with pytest.raises(FormatError):
            read_metrics(str(path))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("")
        with pytest.raises(FormatError):
            read_metrics(str(path))

    def test_header_without_rows_rejected(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text(METRICS_HEADER + "\n")
        with pytest.raises(FormatError):
            read_metrics(str(path))

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text(METRICS_HEADER + "\n0,1.0\n")
        with pytest.raises(FormatError, match=":2"):
            read_metrics(str(path))


class TestRenderReport:
    @pytest.mark.parametrize("content", [SAMPLE, SINGLE_STACK],
                             ids=["two_stack", "one_stack"])
    def test_writes_four_png_figures(self, tmp_path, content):
        """Every figure lands on disk as a real PNG."""
        metrics = tmp_path / "metrics.csv"
        metrics.write_text(content)
        out = tmp_path / "figs"
        written = render_report(str(metrics), str(out))
        names = sorted(p.rsplit("/", 1)[-1] for p in written)
        assert names == ["covariance_trace.png", "learning_rate.png",
                         "loss_terms.png", "loss_total.png"]
        for path in written:
            with open(path, "rb") as fh:
                assert fh.read(8) == PNG_MAGIC
