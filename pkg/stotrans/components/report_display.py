# stotrans/components/report_display.py

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from stotrans.pdf_generator import make_report_pdf
from stotrans.services.training_service import TrainHistory
from stotrans.utils import output_path

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["Method", "ID (%)", "OOD (%)", "ΔID (%)", "ΔOOD (%)"]
EXAMPLE_COLUMNS = ["method", "dataset", "id", "label", "prob_corr_mean", "prob_corr_std", "correct", "total"]
SWEEP_COLUMNS = ["method", "tau", "tau1", "tau2", "id_mean", "id_std", "ood_mean", "ood_std"]


def format_delta(delta: Optional[float]) -> str:
    """Signed percentage-point difference with an arrow; the baseline shows 0."""
    if delta is None:
        return "-"
    points = delta * 100
    if abs(points) < 5e-3:
        return "0.00"
    return f"{points:+.2f} {'↑' if points > 0 else '↓'}"


def _baseline(evaluations: Sequence) -> Any:
    for evaluation in evaluations:
        if getattr(evaluation, "key", "") == "trans":
            return evaluation
    return evaluations[0]


def comparison_frame(evaluations: Sequence) -> pd.DataFrame:
    """Table with one row per method and deltas against the deterministic baseline."""
    if not evaluations:
        return pd.DataFrame(columns=TABLE_COLUMNS)
    base = _baseline(evaluations)
    rows = []
    for evaluation in evaluations:
        ood = evaluation.ood_report
        base_ood = base.ood_report
        rows.append({
            "Method": evaluation.method,
            "ID (%)": evaluation.id_report.render(),
            "OOD (%)": ood.render() if ood else "-",
            "ΔID (%)": format_delta(evaluation.id_report.mean - base.id_report.mean),
            "ΔOOD (%)": format_delta(ood.mean - base_ood.mean) if ood and base_ood else "-",
        })
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def _format_diagnostic(value: Any) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_format_diagnostic(v) for v in value) + "]"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.6f}"
    return str(value)


def render_report(evaluations: Sequence, metric: str = "accuracy", runs: Optional[int] = None) -> str:
    """Human-readable report: the comparison table followed by per-method diagnostics."""
    header = f"metric: {metric}" + (f", T = {runs} inference runs" if runs else "")
    lines = [header, "", comparison_frame(evaluations).to_string(index=False)]
    for evaluation in evaluations:
        if evaluation.diagnostics:
            lines += ["", f"{evaluation.method}:"]
            lines += [f"  {k}: {_format_diagnostic(v)}" for k, v in sorted(evaluation.diagnostics.items())]
    return "\n".join(lines) + "\n"


def records(evaluations: Sequence) -> List[Dict[str, Any]]:
    out = []
    for evaluation in evaluations:
        out.append(evaluation.id_report.to_record())
        if evaluation.ood_report:
            out.append(evaluation.ood_report.to_record())
    return out


def examples_frame(evaluations: Sequence) -> pd.DataFrame:
    rows = []
    for evaluation in evaluations:
        for tag, examples in (("ID", evaluation.id_examples), ("OOD", evaluation.ood_examples or [])):
            rows += [dict(method=evaluation.method, dataset=tag, **record.to_row()) for record in examples]
    return pd.DataFrame(rows, columns=EXAMPLE_COLUMNS)


class ReportWriter:
    """
    Writes every report artifact into one output directory.
    """

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)

    def _path(self, name: str) -> Path:
        return output_path(self.out_dir, name)

    def write_evaluations(self, evaluations: Sequence, metric: str = "accuracy",
                          runs: Optional[int] = None, pdf: bool = False) -> str:
        """Write report.txt, report.jsonl and examples.csv (and report.pdf on request)."""
        text = render_report(evaluations, metric, runs)
        self._path("report.txt").write_text(text, encoding="utf-8")
        with open(self._path("report.jsonl"), "w", encoding="utf-8") as f:
            for record in records(evaluations):
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
        examples_frame(evaluations).to_csv(self._path("examples.csv"), index=False, float_format="%.10g")
        if pdf:
            self.write_pdf({"Results": text})
        logger.info(f"Wrote report.txt, report.jsonl and examples.csv to {self.out_dir}")
        return text

    def write_history(self, history: TrainHistory, name: str = "history.csv") -> Path:
        path = history.to_csv(self._path(name))
        logger.info(f"Wrote training history to {path}")
        return path

    def write_sweep(self, rows: Sequence[Dict[str, Any]], pdf: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame(list(rows), columns=SWEEP_COLUMNS)
        frame.to_csv(self._path("sweep.csv"), index=False, float_format="%.10g")
        if pdf:
            self.write_pdf({"Temperature sweep": frame.to_string(index=False)}, title="Temperature Sweep")
        logger.info(f"Wrote sweep.csv ({len(frame)} configurations) to {self.out_dir}")
        return frame

    def write_verification(self, results: Sequence) -> str:
        text = "\n".join(result.render() for result in results) + "\n"
        self._path("verify.txt").write_text(text, encoding="utf-8")
        return text

    def write_pdf(self, sections: Dict[str, Any], title: str = "Uncertainty Report") -> Path:
        path = self._path("report.pdf")
        path.write_bytes(make_report_pdf(sections, title))
        return path
