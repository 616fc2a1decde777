import io

import pytest
from rich.console import Console

from hdg_audit import rich_utils
from hdg_audit.inequalities import AuditResult, judge


@pytest.fixture
def output(mocker):
    buffer = io.StringIO()
    mocker.patch.object(rich_utils, "console", Console(file=buffer, width=200, color_system=None))
    return buffer


def _results(inequality, values):
    return [
        AuditResult(inequality, 1, level, 0.5 / 2 ** level, 10, "eigen", v, True, float("nan"), 0, 0)
        for level, v in enumerate(values)
    ]


class TestStatusLines:
    def test_marked(self):
        assert rich_utils.marked("ok", "done") == "[green]✓[/green] done"
        assert rich_utils.marked("error", "bad").startswith("[red]✗")

    def test_unknown_status_falls_back_to_info(self):
        assert rich_utils.marked("shrug", "hm") == rich_utils.marked("info", "hm")

    @pytest.mark.parametrize("printer, mark", [
        (rich_utils.print_success, "✓"),
        (rich_utils.print_error, "✗"),
        (rich_utils.print_warning, "⚠"),
        (rich_utils.print_info, "ℹ"),
    ])
    def test_printers(self, output, printer, mark):
        printer("level 2 cached")
        assert output.getvalue().strip() == f"{mark} level 2 cached"

    def test_verdict_status(self):
        assert rich_utils.VERDICT_STATUS["pass"] == "ok"
        assert rich_utils.VERDICT_STATUS["expected-fail"] == "ok"
        assert rich_utils.VERDICT_STATUS["fail"] == "error"
        assert rich_utils.VERDICT_STATUS["unexpected-pass"] == "error"


class TestTables:
    def test_audit_table(self, output):
        sweeps = [
            judge("lift-bound", _results("lift-bound", [1.0, 1.0])),
            judge("brenner-mean", _results("brenner-mean", [1.0, 8.0])),
        ]
        rich_utils.print_audit_table(sweeps)
        text = output.getvalue()
        assert "Inequality Audit" in text
        assert "✓ pass" in text
        assert "✗ fail" in text
        assert text.count("lift-bound") == 2

    def test_unbounded_level(self, output):
        results = _results("lift-bound", [1.0])
        results[0].bounded = False
        rich_utils.print_audit_table([judge("lift-bound", results)])
        assert "unbounded" in output.getvalue()

    def test_experiment_table(self, output):
        rich_utils.print_experiment_table("Convergence", ["experiment", "level", "err_u"], [["converge", 0, 0.125]])
        text = output.getvalue()
        assert "Convergence" in text
        assert "0.125" in text

    def test_run_panels(self, output):
        rich_utils.print_run_start("Inequality audit", {"k": 1, "Levels": 4})
        rich_utils.print_run_complete(3, 4, 1.5)
        text = output.getvalue()
        assert "Levels: 4" in text
        assert "✗ 3/4 verdicts as expected in 1.5 s" in text
