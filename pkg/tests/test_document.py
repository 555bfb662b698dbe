import json

import pytest
from hypothesis import given, strategies as st

from prosa.document import (
    AnnotationSet,
    BBox,
    IngestError,
    LayoutElement,
    ParseOutput,
    iou,
    load_annotations,
    load_parse_output,
    normalize_label,
    parse_output_to_dict,
    write_parse_output,
)


# ---------------------------------------------------------------------------
# label normalization (the published mapping table)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("raw,family,expected", [
    ("Text", "publaynet", "text"),
    ("List", "publaynet", "text"),
    ("Title", "publaynet", "title"),
    ("Table", "publaynet", "table"),
    ("Figure", "publaynet", "figure"),
    ("Caption", "doclaynet", "text"),
    ("Footnote", "doclaynet", "text"),
    ("List-item", "doclaynet", "text"),
    ("Section-header", "doclaynet", "title"),
    ("Picture", "doclaynet", "figure"),
    ("Formula", "doclaynet", "equation"),
    ("Table", "doclaynet", "table"),
    ("plain_text", "parser", "text"),
    ("figure_caption", "parser", "text"),
    ("table_caption", "parser", "text"),
    ("reference", "parser", "text"),
    ("table_footnote", "parser", "text"),
    ("formula_caption", "parser", "text"),
    ("index", "parser", "text"),
    ("normal_text", "parser", "text"),
    ("image", "parser", "figure"),
    ("formula", "parser", "equation"),
    ("isolate_formula", "parser", "equation"),
    ("embedding", "parser", "equation"),
    ("isolated", "parser", "equation"),
    ("totally-novel-tag", "parser", "text"),
])
def test_normalize_label_table(raw, family, expected):
    assert normalize_label(raw, family) == expected


@pytest.mark.parametrize("raw", ["Page-header", "Page-footer", "header",
                                 "footer", "abandon", "seal"])
@pytest.mark.parametrize("family", ["publaynet", "doclaynet", "parser"])
def test_normalize_label_non_content(raw, family):
    assert normalize_label(raw, family) is None


def test_normalize_label_idempotent_on_canonical():
    for cat in ("text", "title", "table", "figure", "equation"):
        for family in ("publaynet", "doclaynet", "parser"):
            assert normalize_label(cat, family) == cat
            assert normalize_label(normalize_label(cat, family), family) == cat


# ---------------------------------------------------------------------------
# iou
# ---------------------------------------------------------------------------

def test_iou_examples():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_zero_area_box():
    degenerate = BBox(5, 5, 5, 5)
    assert iou(degenerate, BBox(0, 0, 10, 10)) == 0.0
    assert iou(degenerate, degenerate) == 0.0


boxes = st.builds(
    lambda x0, y0, w, h: BBox(x0, y0, x0 + w, y0 + h),
    st.floats(0, 500), st.floats(0, 500),
    st.floats(0, 300), st.floats(0, 300),
)


@given(boxes, boxes)
def test_iou_symmetric(a, b):
    assert iou(a, b) == iou(b, a)


@given(boxes)
def test_iou_self_is_one_when_area_positive(b):
    if b.area > 0:
        assert iou(b, b) == 1.0


# ---------------------------------------------------------------------------
# model invariants and JSON round trips
# ---------------------------------------------------------------------------

def test_bbox_rejects_inverted():
    with pytest.raises(IngestError):
        BBox(10, 0, 5, 10)
    with pytest.raises(IngestError):
        BBox(0, 10, 10, 5)
    with pytest.raises(IngestError):
        BBox(float("nan"), 0, 1, 1)


def test_layout_element_requires_canonical_category():
    with pytest.raises(IngestError):
        LayoutElement(BBox(0, 0, 1, 1), "Paragraph")


def _write(tmp_path, payload, name="page.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_load_minimal_parse_output(tmp_path):
    path = _write(tmp_path, {
        "page_id": "p1", "width": 100, "height": 200,
        "elements": [{"bbox": [0, 0, 10, 10], "category": "plain_text",
                      "text": "hi"}],
    })
    parse = load_parse_output(path)
    assert len(parse) == 1
    assert parse.elements[0].category == "text"
    assert parse.elements[0].text == "hi"


def test_load_empty_elements_ok(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 10, "height": 10,
                             "elements": []})
    assert len(load_parse_output(path)) == 0


def test_load_inverted_box_is_ingest_error(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 100, "height": 100,
                             "elements": [{"bbox": [50, 0, 10, 10],
                                           "category": "text", "text": ""}]})
    with pytest.raises(IngestError, match="x1"):
        load_parse_output(path)


def test_load_missing_field_named(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 100, "elements": []})
    with pytest.raises(IngestError, match="height"):
        load_parse_output(path)


def test_out_of_range_box_clamped(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 100, "height": 100,
                             "elements": [{"bbox": [-5, 0, 120, 50],
                                           "category": "text", "text": "x"}]})
    parse = load_parse_output(path)
    box = parse.elements[0].box
    assert (box.x0, box.x1) == (0, 100)


def test_non_content_elements_dropped(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 100, "height": 100,
                             "elements": [
                                 {"bbox": [0, 0, 10, 10], "category": "abandon", "text": ""},
                                 {"bbox": [0, 0, 10, 10], "category": "text", "text": "a"},
                             ]})
    parse = load_parse_output(path)
    assert len(parse) == 1
    assert parse.elements[0].source_index == 0


def test_round_trip(tmp_path):
    original = _write(tmp_path, {
        "page_id": "p7", "width": 300, "height": 400,
        "elements": [
            {"bbox": [0, 0, 10.5, 10.25], "category": "title", "text": "Heading"},
            {"bbox": [5, 20, 200, 80], "category": "plain_text", "text": "body text"},
            {"bbox": [5, 90, 200, 150], "category": "image", "text": ""},
        ],
    })
    first = load_parse_output(original)
    out_path = tmp_path / "rt.json"
    write_parse_output(first, out_path)
    second = load_parse_output(out_path)
    assert first == second
    assert parse_output_to_dict(first) == parse_output_to_dict(second)


def test_load_annotations_source_family(tmp_path):
    path = _write(tmp_path, {
        "page_id": "p", "width": 100, "height": 100, "source": "doclaynet",
        "elements": [{"bbox": [0, 0, 10, 10], "category": "Section-header",
                      "text": ""}]})
    ann = load_annotations(path)
    assert isinstance(ann, AnnotationSet)
    assert ann.source == "doclaynet"
    assert ann.elements[0].category == "title"


def test_zero_area_box_counts_toward_length(tmp_path):
    path = _write(tmp_path, {"page_id": "p", "width": 100, "height": 100,
                             "elements": [{"bbox": [5, 5, 5, 5],
                                           "category": "text", "text": "t"}]})
    parse = load_parse_output(path)
    assert len(parse) == 1
    assert parse.elements[0].box.area == 0


def test_parse_output_is_immutable():
    parse = ParseOutput("p", 10, 10, (LayoutElement(BBox(0, 0, 1, 1), "text"),))
    with pytest.raises(AttributeError):
        parse.page_id = "q"
