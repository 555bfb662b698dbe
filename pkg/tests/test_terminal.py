import random

import pytest

from prosa.audit import match
from prosa.document import AnnotationSet, BBox, LayoutElement, ParseOutput
from prosa.terminal import (
    cer_element,
    delta_map,
    levenshtein,
    map50,
    mean_cer,
    terminal_scores,
)


def parse_of(*specs, page_id="p", w=1000, h=1000):
    elements = tuple(LayoutElement(BBox(*box), cat, text, i)
                     for i, (box, cat, text) in enumerate(specs))
    return ParseOutput(page_id, w, h, elements)


def ann_of(*specs, w=1000, h=1000):
    elements = tuple(LayoutElement(BBox(*box), cat, text, i)
                     for i, (box, cat, text) in enumerate(specs))
    return AnnotationSet(elements, source="synthetic", page_id="p",
                         page_width=w, page_height=h)


# ---------------------------------------------------------------------------
# Levenshtein / CER
# ---------------------------------------------------------------------------

def _lev_dp(a, b):
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[m][n]


def test_levenshtein_random_against_dp():
    rng = random.Random(31)
    for _ in range(500):
        a = "".join(rng.choice("abcde ") for _ in range(rng.randint(0, 15)))
        b = "".join(rng.choice("abcde ") for _ in range(rng.randint(0, 15)))
        assert levenshtein(a, b) == _lev_dp(a, b)


def test_cer_element_examples():
    assert cer_element("hello", "hallo", overlapped=True) == pytest.approx(0.2)
    assert cer_element("abc", "abc", overlapped=True) == 0.0
    assert cer_element("abc", "xyz", overlapped=False) == 1.0


def test_cer_element_normalizes():
    assert cer_element("  HELLO ", "hello", overlapped=True) == 0.0


def test_cer_element_self_zero():
    for r in ("a", "some longer reference", "x" * 100):
        assert cer_element(r, r, overlapped=True) == 0.0


def test_mean_cer_identical_zero():
    clean = parse_of(((0, 0, 100, 50), "text", "alpha"),
                     ((0, 60, 100, 100), "text", "beta"))
    assert mean_cer(clean, clean) == 0.0


def test_mean_cer_no_text_convention():
    clean = parse_of(((0, 0, 100, 50), "figure", ""),
                     ((0, 60, 100, 100), "figure", ""))
    assert mean_cer(clean, clean) == 1.0


def test_mean_cer_arithmetic():
    clean = parse_of(((0, 0, 100, 50), "text", "hello"),
                     ((0, 60, 100, 100), "text", "world"))
    adv = parse_of(((0, 0, 100, 50), "text", "hallo"),       # CER 0.2
                   ((700, 700, 800, 800), "text", "world"))  # no overlap -> 1.0
    assert mean_cer(clean, adv) == pytest.approx(0.6)


def test_mean_cer_overlap_gate_is_strict_positive():
    # adjacent but non-overlapping boxes: iou == 0 -> total loss case
    clean = parse_of(((0, 0, 100, 50), "text", "hello"))
    adv = parse_of(((100, 0, 200, 50), "text", "hello"))
    assert mean_cer(clean, adv) == 1.0


# ---------------------------------------------------------------------------
# mAP@0.5
# ---------------------------------------------------------------------------

def test_map50_perfect_single():
    ann = ann_of(((0, 0, 100, 50), "text", ""))
    pred = parse_of(((0, 0, 100, 50), "text", "x"))
    assert map50(ann, pred) == 1.0


def test_map50_below_threshold():
    ann = ann_of(((0, 0, 100, 100), "text", ""))
    pred = parse_of(((0, 60, 100, 160), "text", "x"))    # iou = 0.25
    assert map50(ann, pred) == 0.0


def test_map50_two_gt_one_hit():
    ann = ann_of(((0, 0, 100, 50), "text", ""), ((0, 100, 100, 150), "text", ""))
    pred = parse_of(((0, 0, 100, 50), "text", "x"))
    assert map50(ann, pred) == pytest.approx(0.5)


def test_map50_no_gt_undefined():
    assert map50(ann_of(), parse_of(((0, 0, 10, 10), "text", "x"))) is None


def test_map50_duplicate_detection_is_fp():
    ann = ann_of(((0, 0, 100, 50), "text", ""))
    pred = parse_of(((0, 0, 100, 50), "text", "a"),
                    ((0, 0, 100, 50), "text", "b"))
    # second detection of the same GT is a false positive; AP stays 1.0
    # under all-points interpolation (precision envelope at full recall)
    assert map50(ann, pred) == 1.0


def test_map50_class_averaging():
    ann = ann_of(((0, 0, 100, 50), "text", ""), ((0, 100, 100, 150), "table", ""))
    pred = parse_of(((0, 0, 100, 50), "text", "x"))
    assert map50(ann, pred) == pytest.approx(0.5)   # text AP 1, table AP 0


def test_delta_map_cases():
    ann = ann_of(((0, 0, 100, 50), "text", ""), ((0, 100, 100, 150), "text", ""))
    clean = parse_of(((0, 0, 100, 50), "text", "a"), ((0, 100, 100, 150), "text", "b"))
    m_clean, m_adv, drop = delta_map(ann, clean, clean)
    assert drop == 0.0
    _, _, drop_full = delta_map(ann, clean, parse_of())
    assert drop_full == 1.0


def test_delta_map_antisymmetric():
    ann = ann_of(((0, 0, 100, 50), "text", ""), ((0, 100, 100, 150), "text", ""))
    e1 = parse_of(((0, 0, 100, 50), "text", "a"))
    e2 = parse_of(((0, 100, 100, 150), "text", "b"), ((300, 300, 340, 340), "text", "c"))
    _, _, d12 = delta_map(ann, e1, e2)
    _, _, d21 = delta_map(ann, e2, e1)
    assert d12 == pytest.approx(-d21)


def test_terminal_scores_without_annotations():
    clean = parse_of(((0, 0, 100, 50), "text", "alpha"))
    scores = terminal_scores(clean, clean, None, match(clean, clean))
    assert scores.cer_matched_mean == 0.0
    assert scores.map_clean is None and scores.delta_map is None
