"""
Report renderer for detection results.

Renders a DetectionReport as schema-versioned JSON and as a human-readable
table through a jinja2 template from the templates directory.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateNotFound

from .models import DetectionReport, DetectedSpin

logger = logging.getLogger(__name__)

REPORT_TEMPLATE = "detection_report.txt.j2"


class ReportRenderError(Exception):
    """Custom exception for report templates that cannot be loaded or rendered."""
    pass


def format_value(value: float, sigma: float, unit: float = 1e3) -> str:
    """'12.345 ± 0.067' in kHz; sigma zero prints the value alone."""
    if sigma > 0:
        return f"{value / unit:.3f} ± {sigma / unit:.3f}"
    return f"{value / unit:.3f}"


class ReportRenderer:
    """Renders detection reports with jinja2 templates."""

    def __init__(self, templates_dir: Path = Path("templates")):
        self.templates_dir = Path(templates_dir)
        self.env = Environment(
            loader=FileSystemLoader(str(self.templates_dir)),
            undefined=StrictUndefined,
            keep_trailing_newline=True,
            trim_blocks=True,
            lstrip_blocks=True,
        )

    def _rows(self, spins: List[DetectedSpin]) -> List[Dict]:
        rows = []
        for number, spin in enumerate(spins, start=1):
            rows.append({
                "number": number,
                "a": format_value(spin.a_hz, spin.sigma_a_hz),
                "b": format_value(spin.b_hz, spin.sigma_b_hz),
                "c32": "-" if spin.confidence_n32 is None else f"{spin.confidence_n32:.3f}",
                "c256": "-" if spin.confidence_n256 is None else f"{spin.confidence_n256:.3f}",
                "group": spin.group_tag,
                "regime": spin.regime.value,
                "tp_index": spin.tp_index,
                "notes": ", ".join(spin.diagnostics + (["flagged"] if spin.flagged else [])),
            })
        return rows

    def render_text(self, report: DetectionReport, title: Optional[str] = None) -> str:
        """
        Render the human-readable report.

        Raises:
            ReportRenderError: If the template is missing or fails to render
        """
        try:
            template = self.env.get_template(REPORT_TEMPLATE)
        except TemplateNotFound:
            raise ReportRenderError(f"Template not found: {self.templates_dir / REPORT_TEMPLATE}")

        groups = sorted({s.group_tag for s in report.spins if s.is_broad_dip})
        try:
            return template.render(
                title=title or "Detected nuclear spins",
                report=report,
                rows=self._rows(report.spins),
                broad_dip_groups=groups,
                regimes=[r.value for r in report.regimes],
            )
        except Exception as e:
            raise ReportRenderError(f"Failed to render {REPORT_TEMPLATE}: {e}")

    def save(self, report: DetectionReport, out_dir: Path, title: Optional[str] = None) -> Dict[str, Path]:
        """Write report.json and report.txt into out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "report.json"
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
        text_path = out_dir / "report.txt"
        text_path.write_text(self.render_text(report, title), encoding="utf-8")
        logger.info(f"Saved detection report to {out_dir}")
        return {"json": json_path, "text": text_path}


def load_report(path: Path) -> DetectionReport:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    data.pop("summary_total", None)
    return DetectionReport(**data)


def create_report_renderer(templates_dir: str = "templates") -> ReportRenderer:
    return ReportRenderer(Path(templates_dir))
