"""Console output on stderr: status lines, audit and experiment tables, run panels."""
from typing import Dict, List, Sequence, Tuple

from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

# stdout carries CSV
console = Console(stderr=True)

STATUS_MARKS: Dict[str, Tuple[str, str]] = {
    "ok": ("green", "✓"),
    "error": ("red", "✗"),
    "warning": ("yellow", "⚠"),
    "info": ("blue", "ℹ"),
}

VERDICT_STATUS = {
    "pass": "ok",
    "expected-fail": "ok",
    "fail": "error",
    "unexpected-pass": "error",
}


def marked(status: str, text: str) -> str:
    """Console markup for ``text`` prefixed with the colored mark of ``status``."""
    style, mark = STATUS_MARKS.get(status, STATUS_MARKS["info"])
    return f"[{style}]{mark}[/{style}] {text}"


def print_status(status: str, message: str) -> None:
    console.print(marked(status, message))


def print_success(message: str) -> None:
    print_status("ok", message)


def print_warning(message: str) -> None:
    print_status("warning", message)


def print_error(message: str) -> None:
    print_status("error", message)


def print_info(message: str) -> None:
    print_status("info", message)


def create_progress_bar() -> Progress:
    """Progress bar for audit jobs; tasks carry a ``done`` field such as "3/12"."""
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(bar_width=40),
        TextColumn("[bold blue]{task.fields[done]} levels"),
        TimeElapsedColumn(),
        console=console,
        expand=True,
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def print_audit_table(sweeps: Sequence):
    """One row per (inequality, level); the verdict cell carries the sweep verdict mark."""
    table = Table(title="Inequality Audit", header_style="bold magenta")
    for name, justify in (("Inequality", "left"), ("k", "right"), ("Level", "right"), ("h_max", "right"),
                          ("dofs", "right"), ("lambda", "right"), ("sample max", "right"), ("Verdict", "left")):
        table.add_column(name, justify=justify)

    for sweep in sweeps:
        verdict = marked(VERDICT_STATUS.get(sweep.verdict, "info"), sweep.verdict)
        for r in sweep.results:
            lam = "[red]unbounded[/red]" if not r.bounded else f"[yellow]{_fmt(r.lambda_max)}[/yellow]"
            table.add_row(
                f"[cyan]{r.inequality}[/cyan]", str(r.k), str(r.level), _fmt(r.h_max), str(r.n_dof),
                lam, _fmt(r.sample_max), verdict,
            )

    console.print(table)


def print_experiment_table(title: str, columns: List[str], rows: List[List]):
    table = Table(title=title, header_style="bold magenta")
    for column in columns:
        table.add_column(column, justify="left" if column == "experiment" else "right")
    for row in rows:
        table.add_row(*[_fmt(v) for v in row])
    console.print(table)


def print_run_start(title: str, details: dict):
    body = "\n".join([f"[bold cyan]{title}[/bold cyan]"] + [f"{key}: {value}" for key, value in details.items()])
    console.print(Panel(body, border_style="cyan"))


def print_run_complete(passed: int, total: int, duration: float):
    status = "ok" if passed == total else "error"
    console.print(Panel(
        marked(status, f"{passed}/{total} verdicts as expected in {duration:.1f} s"),
        border_style=STATUS_MARKS[status][0],
    ))
