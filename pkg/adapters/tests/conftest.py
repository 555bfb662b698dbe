import json
from pathlib import Path

import pytest
from PIL import Image, ImageDraw

FIXTURES = Path(__file__).parent / "fixtures"

# three sample document pages: (page layout blocks with raw labels per parser)
PAGES = {
    "doc_report": {
        "size": (900, 1200),
        "blocks": [
            ("title", (80, 60, 820, 110), "Quarterly operations report"),
            ("plain_text", (80, 140, 820, 420),
             "Throughput held steady across all regions during the quarter "
             "with minor seasonal variation in the northern corridor."),
            ("table", (80, 460, 820, 760), "region qty delta north 120 +4"),
            ("figure_caption", (80, 790, 820, 830), "Figure 1: corridor map"),
            ("image", (80, 860, 820, 1120), ""),
        ],
    },
    "doc_article": {
        "size": (850, 1100),
        "blocks": [
            ("title", (70, 50, 780, 100), "On load balancing heuristics"),
            ("plain_text", (70, 130, 780, 520),
             "We compare three heuristics under bursty arrivals and show "
             "that the two-choice rule dominates once queues saturate."),
            ("isolate_formula", (70, 560, 780, 640), "L = lambda W"),
            ("plain_text", (70, 680, 780, 1020),
             "The analysis extends to heterogeneous servers with minor "
             "changes to the drift argument."),
            ("abandon", (70, 1040, 780, 1080), "draft watermark"),
        ],
    },
    "doc_form": {
        "size": (800, 1000),
        "blocks": [
            ("title", (60, 40, 740, 90), "Registration form"),
            ("plain_text", (60, 120, 740, 300), "Name and mailing address"),
            ("table", (60, 340, 740, 700), "field value name given"),
            ("plain_text", (60, 740, 740, 930), "Sign and date below"),
        ],
    },
}

# PP-StructureV3 uses its own raw label vocabulary for the same pages
_PP_LABELS = {"plain_text": "text", "isolate_formula": "equation",
              "figure_caption": "text", "image": "figure",
              "abandon": "header", "title": "title", "table": "table"}


def _render_page(size, blocks, path: Path) -> None:
    img = Image.new("L", size, 255)
    draw = ImageDraw.Draw(img)
    for _, (x0, y0, x1, y1), text in blocks:
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), outline=120)
        if text:
            draw.text((x0 + 8, y0 + 8), text[:60], fill=20)
    img.save(path, format="PNG")


@pytest.fixture(scope="session")
def sample_batch(tmp_path_factory):
    """Input image dir plus native fixture dirs for both parsers."""
    root = tmp_path_factory.mktemp("adapter_batch")
    in_dir = root / "in"
    mineru_native = root / "mineru_native"
    pp_native = root / "pp_native"
    for d in (in_dir, mineru_native, pp_native):
        d.mkdir()
    for page_id, spec in PAGES.items():
        _render_page(spec["size"], spec["blocks"], in_dir / f"{page_id}.png")
        content_list = [
            {"type": label, "bbox": list(bbox), "text": text}
            for label, bbox, text in spec["blocks"]
        ]
        (mineru_native / f"{page_id}.json").write_text(json.dumps(content_list))
        regions = [
            {"type": _PP_LABELS[label], "bbox": list(bbox),
             "res": [{"text": text}] if text else []}
            for label, bbox, text in spec["blocks"]
        ]
        (pp_native / f"{page_id}.json").write_text(json.dumps(regions))
    return {"in": in_dir, "mineru": mineru_native, "pp": pp_native}


@pytest.fixture(scope="session")
def schema():
    return json.loads((FIXTURES / "parse_output.schema.json").read_text())
