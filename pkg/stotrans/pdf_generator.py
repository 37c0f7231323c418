# stotrans/pdf_generator.py

import io
from typing import Any, Dict

from reportlab.lib.pagesizes import A4
from reportlab.pdfgen import canvas

from stotrans.utils import text_wrap


def make_report_pdf(sections: Dict[str, Any], title: str = "Uncertainty Report") -> bytes:
    """Render report sections to a simple, printable PDF.

    Each section value may be a preformatted text block (rendered in a
    monospace font so tables keep their columns), a dict of ``key: value``
    lines, or a list of such dicts.
    """
    buffer = io.BytesIO()
    c = canvas.Canvas(buffer, pagesize=A4, invariant=1)
    w, h = A4
    line_height = 12
    margin = 40
    y = h - margin

    def check_page_break(y_pos):
        """Adds a new page if content gets too close to the bottom margin."""
        if y_pos < margin + 2 * line_height:
            c.showPage()
            return h - margin
        return y_pos

    c.setFont("Helvetica-Bold", 16)
    c.drawString(margin, y, title)
    y -= 2 * line_height

    for section, data in sections.items():
        y = check_page_break(y)
        c.setFont("Helvetica-Bold", 12)
        y -= line_height
        c.drawString(margin, y, str(section))
        y -= 0.5 * line_height
        c.line(margin, y, w - margin, y)
        y -= line_height

        if isinstance(data, str):
            c.setFont("Courier", 7)
            for line in data.splitlines():
                y = check_page_break(y)
                c.drawString(margin + 10, y, line)
                y -= line_height
        elif isinstance(data, list):
            c.setFont("Helvetica", 9)
            for i, item in enumerate(data):
                text = ", ".join(f"{k}: {v}" for k, v in item.items()) if isinstance(item, dict) else str(item)
                for chunk in text_wrap(f"#{i + 1} {text}", 110):
                    y = check_page_break(y)
                    c.drawString(margin + 10, y, chunk)
                    y -= line_height
        elif isinstance(data, dict):
            c.setFont("Helvetica", 9)
            for key, value in data.items():
                for chunk in text_wrap(f"{key}: {value}", 100):
                    y = check_page_break(y)
                    c.drawString(margin + 10, y, chunk)
                    y -= line_height
        else:
            c.setFont("Helvetica", 9)
            for chunk in text_wrap(str(data), 100):
                y = check_page_break(y)
                c.drawString(margin + 10, y, chunk)
                y -= line_height
        y -= 0.5 * line_height

    c.showPage()
    c.save()
    buffer.seek(0)
    return buffer.read()
