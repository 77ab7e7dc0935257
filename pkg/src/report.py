"""
Render benchmark results as an HTML report and a plain-text summary.
"""

import logging
import os
from datetime import datetime, timezone

from jinja2 import Environment, FileSystemLoader, select_autoescape

from src import config
from src.eval_harness import BenchmarkReport, VARIANTS

logger = logging.getLogger(__name__)


def _fmt(v, digits: int = 3) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}g}"
    return str(v)


def _overall(report: BenchmarkReport) -> dict[str, dict]:
    return {s["variant"]: s for s in report.summary if s["scope"] == "all"}


def generate_report_html(report: BenchmarkReport, title: str = "", date_str: str = "") -> str:
    """Render the benchmark report from the Jinja2 template."""
    if not date_str:
        date_str = datetime.now(timezone.utc).strftime("%d %B %Y %H:%M UTC")

    env = Environment(
        loader=FileSystemLoader(config.TEMPLATES_DIR),
        autoescape=select_autoescape(["html"]),
    )
    env.filters["fmt"] = _fmt
    template = env.get_template("benchmark_report.html")

    overall = _overall(report)
    per_kernel = [s for s in report.summary if s["scope"].startswith("kernel:")]
    failures = [r for r in report.rows if r["error"]]
    return template.render(
        title=title or "Blind deblurring benchmark",
        date=date_str,
        run_key=report.run_key,
        variants=[v for v in VARIANTS if v in overall],
        overall=overall,
        per_kernel=per_kernel,
        rows=report.rows,
        failures=failures,
        pair_count=len({(r["image"], r["kernel"]) for r in report.rows}),
    )


def generate_report_plain(report: BenchmarkReport) -> str:
    """Plain-text summary printed after a benchmark run."""
    overall = _overall(report)
    lines = [
        f"Blind deblurring benchmark (run {report.run_key})",
        "=" * 50,
        f"Pairs evaluated: {len({(r['image'], r['kernel']) for r in report.rows})}",
        "",
    ]
    for variant in VARIANTS:
        s = overall.get(variant)
        if not s:
            continue
        rate = "-" if s["success_rate"] is None else f"{100 * s['success_rate']:.0f}%"
        lines.append(
            f"[{variant}] mean r {_fmt(s['mean_r'])} | 95% {_fmt(s['p95_r'])} | "
            f"max {_fmt(s['max_r'])} | success {rate} ({s['failed']} failed)"
        )
    failures = [r for r in report.rows if r["error"]]
    if failures:
        lines.append("")
        lines.append(f"Failures ({len(failures)}):")
        for r in failures:
            lines.append(f"  {r['image']} x {r['kernel']} [{r['variant']}]: {r['error']}")
    return "\n".join(lines)


def save_report_html(report: BenchmarkReport, path: str, title: str = "") -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(generate_report_html(report, title))
    logger.info("HTML report saved to %s", path)
