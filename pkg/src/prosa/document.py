"""Canonical page/parse data model shared by every other module.

A parsed element is a (box, category, text) triple; parse outputs and
annotation sets are ordered collections of elements plus page geometry.
Raw dataset/parser labels are normalized to the five canonical layout
categories on ingest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .constants import CANONICAL_CATEGORIES


class IngestError(ValueError):
    """Raised when a parse-output or annotation file violates the schema."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in page pixel coordinates, origin top-left."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise IngestError(f"bbox.{name} is not finite: {v!r}")
        if self.x1 < self.x0:
            raise IngestError(f"bbox.x1 < bbox.x0 ({self.x1} < {self.x0})")
        if self.y1 < self.y0:
            raise IngestError(f"bbox.y1 < bbox.y0 ({self.y1} < {self.y0})")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def clamped(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x0, 0.0), width),
            min(max(self.y0, 0.0), height),
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
        )

    def cells(self) -> tuple[int, int, int, int]:
        """Integer pixel-cell extent (x0, y0, x1, y1), half-open on the right/bottom."""
        return (
            math.floor(self.x0),
            math.floor(self.y0),
            math.ceil(self.x1),
            math.ceil(self.y1),
        )


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when the union has no area."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class LayoutElement:
    box: BBox
    category: str          # one of CANONICAL_CATEGORIES
    text: str = ""
    source_index: int = 0

    def __post_init__(self):
        if self.category not in CANONICAL_CATEGORIES:
            raise IngestError(f"category {self.category!r} is not canonical")


@dataclass(frozen=True)
class ParseOutput:
    page_id: str
    page_width: float
    page_height: float
    elements: tuple[LayoutElement, ...] = ()

    def __len__(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class AnnotationSet:
    elements: tuple[LayoutElement, ...] = ()
    source: str = "unknown"
    page_id: str = ""
    page_width: float = 0.0
    page_height: float = 0.0

    def __len__(self) -> int:
        return len(self.elements)


# ---------------------------------------------------------------------------
# Label normalization
# ---------------------------------------------------------------------------

NON_CONTENT_LABELS = frozenset(
    s.casefold() for s in ("Page-header", "Page-footer", "header", "footer", "abandon", "seal")
)

_PUBLAYNET_MAP = {"text": "text", "list": "text", "title": "title",
                  "table": "table", "figure": "figure"}

_DOCLAYNET_MAP = {"caption": "text", "footnote": "text", "list-item": "text",
                  "section-header": "title", "picture": "figure", "formula": "equation"}

_PARSER_MAP = {
    "figure_caption": "text", "table_caption": "text", "reference": "text",
    "list": "text", "plain_text": "text", "table_footnote": "text",
    "formula_caption": "text", "index": "text", "normal_text": "text",
    "image": "figure",
    "formula": "equation", "isolate_formula": "equation",
    "embedding": "equation", "isolated": "equation",
}

_FAMILY_MAPS = {"publaynet": _PUBLAYNET_MAP, "doclaynet": _DOCLAYNET_MAP,
                "parser": _PARSER_MAP}


def normalize_label(raw: str, family: str = "parser") -> str | None:
    """Map a raw dataset/parser label to a canonical category.

    Returns None for non-content labels (ignored downstream); unseen labels
    fall back to "text". Canonical names pass through for every family.
    """
    key = raw.strip().casefold()
    if key in NON_CONTENT_LABELS:
        return None
    fam = family.strip().casefold()
    for name in _FAMILY_MAPS:
        if name in fam:
            fam = name
            break
    table = _FAMILY_MAPS.get(fam, _PARSER_MAP)
    if key in table:
        return table[key]
    if key in CANONICAL_CATEGORIES:
        return key
    return "text"


# ---------------------------------------------------------------------------
# Canonical JSON I/O
# ---------------------------------------------------------------------------
# Schema: {"page_id": str, "width": number, "height": number,
#          "elements": [{"bbox": [x0,y0,x1,y1], "category": str, "text": str}]}
# Annotation files carry an extra "source" field.


def _parse_elements(data: dict, family: str) -> tuple[tuple[LayoutElement, ...], int]:
    try:
        width = float(data["width"])
        height = float(data["height"])
        raw_elements = data["elements"]
    except KeyError as exc:
        raise IngestError(f"missing required field {exc.args[0]!r}") from None
    if not isinstance(raw_elements, list):
        raise IngestError("field 'elements' must be an array")

    elements: list[LayoutElement] = []
    clamp_warnings = 0
    for i, entry in enumerate(raw_elements):
        try:
            bbox = entry["bbox"]
            raw_cat = entry["category"]
        except (KeyError, TypeError) as exc:
            raise IngestError(f"elements[{i}] missing field {exc.args[0]!r}") from None
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise IngestError(f"elements[{i}].bbox must be [x0, y0, x1, y1]")
        try:
            box = BBox(*(float(v) for v in bbox))
        except IngestError as exc:
            raise IngestError(f"elements[{i}].{exc}") from None
        clamped = box.clamped(width, height)
        if clamped != box:
            clamp_warnings += 1
        category = normalize_label(str(raw_cat), family)
        if category is None:
            continue  # non-content label
        text = str(entry.get("text", ""))
        elements.append(LayoutElement(clamped, category, text, source_index=len(elements)))
    return tuple(elements), clamp_warnings


def load_parse_output(path: str | Path, family: str = "parser") -> ParseOutput:
    """Load a canonical parse-output JSON file, clamping boxes to the page."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise IngestError("top-level JSON value must be an object")
    elements, _ = _parse_elements(data, family)
    return ParseOutput(
        page_id=str(data.get("page_id", path.stem)),
        page_width=float(data["width"]),
        page_height=float(data["height"]),
        elements=elements,
    )


def load_annotations(path: str | Path) -> AnnotationSet:
    """Load a ground-truth annotation file (same shape plus a `source` tag)."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise IngestError("top-level JSON value must be an object")
    source = str(data.get("source", "unknown"))
    elements, _ = _parse_elements(data, source)
    return AnnotationSet(
        elements=elements,
        source=source,
        page_id=str(data.get("page_id", path.stem)),
        page_width=float(data["width"]),
        page_height=float(data["height"]),
    )


def parse_output_to_dict(parse: ParseOutput) -> dict:
    return {
        "page_id": parse.page_id,
        "width": parse.page_width,
        "height": parse.page_height,
        "elements": [
            {"bbox": [e.box.x0, e.box.y0, e.box.x1, e.box.y1],
             "category": e.category, "text": e.text}
            for e in parse.elements
        ],
    }


def write_parse_output(parse: ParseOutput, path: str | Path) -> None:
    Path(path).write_text(json.dumps(parse_output_to_dict(parse), ensure_ascii=False),
                          encoding="utf-8")


def write_annotations(ann: AnnotationSet, path: str | Path) -> None:
    data = {
        "page_id": ann.page_id,
        "width": ann.page_width,
        "height": ann.page_height,
        "source": ann.source,
        "elements": [
            {"bbox": [e.box.x0, e.box.y0, e.box.x1, e.box.y1],
             "category": e.category, "text": e.text}
            for e in ann.elements
        ],
    }
    Path(path).write_text(json.dumps(data, ensure_ascii=False), encoding="utf-8")


def annotations_as_parse(ann: AnnotationSet) -> ParseOutput:
    """View an annotation set as a parse output (for clean-reference audits)."""
    return ParseOutput(ann.page_id, ann.page_width, ann.page_height, ann.elements)
