"""Desk-scale synthetic pages and a geometry-driven mock parser.

Pages are monospaced pseudo-text blocks on a white canvas with known
annotations and one glyph cell per character. The mock parser reads the
sidecar geometry (never pixels) plus the probe mask and applies fixed,
hand-checkable failure rules, so every audit pathway is constructible in
tests: drop by occlusion, merge across bridged gaps, category flips under
boundary-band coverage, and per-character corruption.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .constants import CANONICAL_CATEGORIES, DELTA_PX
from .document import AnnotationSet, BBox, LayoutElement, ParseOutput, write_annotations, load_annotations
from .probes import ProbeMask, SupportIndex, _find_gaps
from PIL import Image


class GenerationError(ValueError):
    """Raised when the requested layout does not fit on the page."""


DEFAULT_CATEGORIES = ("title", "text", "text", "table", "text", "figure", "text", "equation")


@dataclass(frozen=True)
class PageSpec:
    page_id: str = "page"
    width: int = 1000
    height: int = 1300
    columns: int = 2
    n_blocks: int = 8
    chars_min: int = 340
    chars_max: int = 390
    char_w: int = 7
    char_h: int = 14
    margin: int = 60
    block_gap: int = 28
    col_gap: int = 80
    seed: int = 0
    categories: tuple[str, ...] = DEFAULT_CATEGORIES


@dataclass
class SyntheticPage:
    page_id: str
    width: int
    height: int
    image: np.ndarray                      # uint8 (H, W)
    annotations: AnnotationSet
    glyph_cells: list[list[BBox]]          # one cell per character, per element
    seed: int = 0
    _cell_cache: dict = field(default_factory=dict, repr=False)

    def clean_parse(self) -> ParseOutput:
        return ParseOutput(self.page_id, self.width, self.height,
                           self.annotations.elements)

    def cell_array(self, element_index: int) -> np.ndarray:
        """Glyph cells of one element as an (n_chars, 4) int array (cached)."""
        if element_index not in self._cell_cache:
            self._cell_cache[element_index] = np.array(
                [c.cells() for c in self.glyph_cells[element_index]], dtype=np.int64
            ).reshape(-1, 4)
        return self._cell_cache[element_index]


_WORD_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _pseudo_text(rng: np.random.Generator, marker: str, n_chars: int) -> str:
    parts = [marker]
    length = len(marker)
    while length < n_chars + 8:
        word = "".join(_WORD_LETTERS[int(i)] for i in rng.integers(0, 26, size=int(rng.integers(3, 9))))
        parts.append(word)
        length += len(word) + 1
    text = " ".join(parts)[:n_chars]
    if text.endswith(" "):
        text = text[:-1] + "x"
    return text


def generate_page(spec: PageSpec) -> SyntheticPage:
    """Deterministic synthetic page with annotations and glyph-cell geometry."""
    rng = np.random.default_rng(spec.seed)
    col_w = (spec.width - 2 * spec.margin - (spec.columns - 1) * spec.col_gap) // spec.columns
    chars_per_line = col_w // spec.char_w
    if chars_per_line < 4:
        raise GenerationError("column too narrow for the character grid")

    per_col = math.ceil(spec.n_blocks / spec.columns)
    image = np.full((spec.height, spec.width), 255, dtype=np.uint8)
    final_elements: list[LayoutElement] = []
    cells_per_element: list[list[BBox]] = []
    y_offsets = [spec.margin] * spec.columns

    for b in range(spec.n_blocks):
        col = b // per_col
        n_chars = int(rng.integers(spec.chars_min, spec.chars_max + 1))
        marker = f"blk{spec.page_id}x{b:02d}"
        text = _pseudo_text(rng, marker, n_chars)
        n_lines = math.ceil(len(text) / chars_per_line)
        x0 = spec.margin + col * (col_w + spec.col_gap)
        y0 = y_offsets[col]
        y1 = y0 + n_lines * spec.char_h
        if y1 > spec.height - spec.margin:
            raise GenerationError(
                f"block {b} overflows the page (y1={y1}, height={spec.height})")
        y_offsets[col] = y1 + spec.block_gap
        box = BBox(x0, y0, x0 + chars_per_line * spec.char_w, y1)
        category = spec.categories[b % len(spec.categories)]
        if category not in CANONICAL_CATEGORIES:
            raise GenerationError(f"unknown category {category!r}")
        final_elements.append(LayoutElement(box, category, text, source_index=b))
        cells: list[BBox] = []
        for i, ch in enumerate(text):
            line, c = divmod(i, chars_per_line)
            cx0 = x0 + c * spec.char_w
            cy0 = y0 + line * spec.char_h
            cells.append(BBox(cx0, cy0, cx0 + spec.char_w, cy0 + spec.char_h))
            if ch != " ":
                image[int(cy0) + 2:int(cy0) + spec.char_h - 2,
                      int(cx0) + 1:int(cx0) + spec.char_w - 1] = 20
        cells_per_element.append(cells)

    ann = AnnotationSet(tuple(final_elements), source="synthetic",
                        page_id=spec.page_id, page_width=spec.width,
                        page_height=spec.height)
    return SyntheticPage(spec.page_id, spec.width, spec.height, image, ann,
                         cells_per_element, seed=spec.seed)


# ---------------------------------------------------------------------------
# Mock parser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MockParserRules:
    drop_threshold: float = 0.6       # element dropped when rho >= threshold
    misclass_coverage: float = 0.5    # boundary-band coverage flipping text<->title
    band_radius: int = DELTA_PX
    merge_glue: str = "\n"


def _box_rho(box: BBox, index: SupportIndex) -> float:
    h, w = index.shape
    x0, y0, x1, y1 = box.cells()
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    area = (x1 - x0) * (y1 - y0)
    if area <= 0:
        return 0.0
    return index.rect_sum(x0, y0, x1, y1) / area


def _clipped_area(x0, y0, x1, y1, w, h) -> int:
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    return max(x1 - x0, 0) * max(y1 - y0, 0)


def _band_coverage(box: BBox, index: SupportIndex, radius: int) -> float:
    """Coverage of the Chebyshev frame of width `radius` around the box edge."""
    h, w = index.shape
    x0, y0, x1, y1 = box.cells()
    outer = (x0 - radius, y0 - radius, x1 + radius, y1 + radius)
    inner = (x0 + radius, y0 + radius, x1 - radius, y1 - radius)
    band_px = (_clipped_area(*outer, w, h) - _clipped_area(*inner, w, h))
    if band_px <= 0:
        return 0.0
    covered = index.rect_sum(*outer) - index.rect_sum(*inner)
    return covered / band_px


def mock_parse(page: SyntheticPage, mask: ProbeMask | None = None,
               rules: MockParserRules = MockParserRules()) -> ParseOutput:
    """Apply the failure rules (drop, merge, misclass, corrupt) to the sidecar.

    With no mask the ground truth is returned verbatim. Rules are evaluated
    in order; merging joins texts with the glue character and unions boxes,
    and corruption deletes exactly the characters whose glyph cells the
    mask touches.
    """
    if mask is None or not mask.support.any():
        return page.clean_parse()
    index = mask.index()

    # 1. drop by direct occlusion
    survivors = [i for i, e in enumerate(page.annotations.elements)
                 if _box_rho(e.box, index) < rules.drop_threshold]

    # 2. merge pairs whose separating gap is crossed by an inject region
    boxes = [page.annotations.elements[i].box for i in survivors]
    parent = list(range(len(survivors)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    inject = mask.inject_support
    if inject is not None and inject.any():
        h, w = inject.shape
        for gap in _find_gaps(boxes):
            x0, y0, x1, y1 = gap.rect.cells()
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, w), min(y1, h)
            if x1 > x0 and y1 > y0 and inject[y0:y1, x0:x1].any():
                ra, rb = find(gap.index_a), find(gap.index_b)
                if ra != rb:
                    parent[rb] = ra

    groups: dict[int, list[int]] = {}
    for local, orig in enumerate(survivors):
        groups.setdefault(find(local), []).append(orig)

    # 3+4. per output element: category flip, then character corruption
    out: list[LayoutElement] = []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = sorted(groups[root])
        parts_text: list[str] = []
        for orig in members:
            e = page.annotations.elements[orig]
            hits = index.rect_sums(page.cell_array(orig)) > 0
            parts_text.append("".join(ch for ch, hit in zip(e.text, hits) if not hit))
        first = page.annotations.elements[members[0]]
        box = first.box
        for orig in members[1:]:
            b = page.annotations.elements[orig].box
            box = BBox(min(box.x0, b.x0), min(box.y0, b.y0),
                       max(box.x1, b.x1), max(box.y1, b.y1))
        category = first.category
        if _band_coverage(box, index, rules.band_radius) > rules.misclass_coverage:
            if category == "text":
                category = "title"
            elif category == "title":
                category = "text"
        out.append(LayoutElement(box, category, rules.merge_glue.join(parts_text),
                                 source_index=len(out)))
    return ParseOutput(page.page_id, page.width, page.height, tuple(out))


# ---------------------------------------------------------------------------
# Pool storage: PNG + annotation JSON + glyph-cell sidecar
# ---------------------------------------------------------------------------

def save_page(page: SyntheticPage, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(page.image).save(directory / f"{page.page_id}.png", format="PNG")
    write_annotations(page.annotations, directory / f"{page.page_id}.annotations.json")
    sidecar = {
        "page_id": page.page_id,
        "seed": page.seed,
        "cells": [[[c.x0, c.y0, c.x1, c.y1] for c in cells]
                  for cells in page.glyph_cells],
    }
    (directory / f"{page.page_id}.glyphs.json").write_text(
        json.dumps(sidecar), encoding="utf-8")


def load_page(directory: str | Path, page_id: str) -> SyntheticPage:
    directory = Path(directory)
    image = np.asarray(Image.open(directory / f"{page_id}.png").convert("L"))
    ann = load_annotations(directory / f"{page_id}.annotations.json")
    sidecar_path = directory / f"{page_id}.glyphs.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing glyph sidecar for page {page_id!r}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    cells = [[BBox(*c) for c in element_cells] for element_cells in sidecar["cells"]]
    return SyntheticPage(page_id, image.shape[1], image.shape[0], image, ann,
                         cells, seed=int(sidecar.get("seed", 0)))


def make_pool(directory: str | Path, n_pages: int, base_seed: int = 42,
              spec: PageSpec = PageSpec()) -> list[str]:
    """Write a deterministic pool of synthetic pages; returns sorted page ids."""
    ids = []
    for i in range(n_pages):
        page_spec = replace(spec, page_id=f"{spec.page_id}{i:04d}", seed=base_seed + i)
        save_page(generate_page(page_spec), directory)
        ids.append(page_spec.page_id)
    return sorted(ids)
