"""Structure-aware comparison of clean vs. perturbed parse outputs.

Each clean element is matched to its best-IoU counterpart in the perturbed
output (many-to-one; ties broken by lowest adversarial index). An element
survives only if both the IoU gate and the LCS text-similarity gate pass.
Failed elements are attributed to one of four pathways (miss, merge,
misclass, degraded) by occlusion ratio, match multiplicity, and category
agreement, in that priority order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    DELTA_PX,
    ETA_OCC,
    OVERLAP_PX,
    TAU_IOU,
    TAU_TEXT,
    TEXTSIM_MAX_CHARS,
)
from .document import AnnotationSet, LayoutElement, ParseOutput, iou
from .probes import SupportIndex, boxes_raster, _boundary_raster, dilate, erode

PATHWAY_LABELS = ("intact", "miss", "merge", "misclass", "degraded")


def cells_array(elements) -> np.ndarray:
    """Pixel-cell extents of element boxes as an (n, 4) integer array."""
    if not elements:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([e.box.cells() for e in elements], dtype=np.int64)


# ---------------------------------------------------------------------------
# Text similarity (character-level LCS)
# ---------------------------------------------------------------------------

def normalize_text(s: str) -> str:
    """Strip leading/trailing whitespace and case-fold; keep inner whitespace."""
    return s.strip().casefold()


def lcs_length(a: str, b: str) -> int:
    """Length of the longest common subsequence (bit-parallel row encoding)."""
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return 0
    if m > n:
        a, b = b, a
        m, n = n, m
    pm: dict[str, int] = {}
    bit = 1
    for ch in a:
        pm[ch] = pm.get(ch, 0) | bit
        bit <<= 1
    mask = (1 << m) - 1
    v = mask
    for ch in b:
        u = v & pm.get(ch, 0)
        v = ((v + u) | (v - u)) & mask
    return m - v.bit_count()


def text_sim(a: str, b: str, max_chars: int = TEXTSIM_MAX_CHARS) -> float:
    """LCS similarity of normalized strings; 1 when both are empty."""
    na = normalize_text(a)[:max_chars]
    nb = normalize_text(b)[:max_chars]
    if not na and not nb:
        return 1.0
    return lcs_length(na, nb) / max(len(na), len(nb))


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchEntry:
    clean_index: int
    adv_index: int | None      # None only when the perturbed output is empty
    iou: float
    textsim: float
    aligned: bool
    truncated: bool = False    # element text exceeded the LCS length cap


@dataclass
class MatchResult:
    entries: list[MatchEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def multiplicity(self) -> Counter:
        """How many clean elements map to each perturbed element."""
        return Counter(e.adv_index for e in self.entries if e.adv_index is not None)


def match(clean: ParseOutput, adv: ParseOutput,
          tau_iou: float = TAU_IOU, tau_text: float = TAU_TEXT) -> MatchResult:
    """Best-IoU lookup of each clean element's perturbed counterpart."""
    result = MatchResult()
    if len(clean) == 0:
        return result
    for e in clean.elements:
        if len(adv) == 0:
            result.entries.append(MatchEntry(e.source_index, None, 0.0, 0.0, False))
            continue
        best_idx, best_iou = 0, -1.0
        for k, cand in enumerate(adv.elements):
            v = iou(e.box, cand.box)
            if v > best_iou:
                best_idx, best_iou = k, v
        best_iou = max(best_iou, 0.0)
        matched = adv.elements[best_idx]
        truncated = (len(e.text) > TEXTSIM_MAX_CHARS
                     or len(matched.text) > TEXTSIM_MAX_CHARS)
        ts = text_sim(e.text, matched.text)
        aligned = best_iou >= tau_iou and ts >= tau_text
        result.entries.append(
            MatchEntry(e.source_index, best_idx, best_iou, ts, aligned, truncated))
    return result


def b_slr(result: MatchResult,
          tau_iou: float = TAU_IOU) -> tuple[float, float, float]:
    """Structural loss rate and its (iou-fail, text-fail-only) channels."""
    n = len(result)
    if n == 0:
        raise ValueError("B-SLR is undefined for an empty clean output")
    iou_only = sum(1 for e in result.entries if e.iou < tau_iou)
    text_only = sum(1 for e in result.entries
                    if e.iou >= tau_iou and not e.aligned)
    failed = sum(1 for e in result.entries if not e.aligned)
    assert iou_only + text_only == failed
    return failed / n, iou_only / n, text_only / n


# ---------------------------------------------------------------------------
# Occlusion and pathway attribution
# ---------------------------------------------------------------------------

def occlusion_ratio(element: LayoutElement, support: np.ndarray | None) -> float:
    """Fraction of the element's box pixels covered by the probe support."""
    if support is None:
        return 0.0
    h, w = support.shape
    x0, y0, x1, y1 = element.box.cells()
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    area = (x1 - x0) * (y1 - y0)
    if area <= 0:
        return 0.0
    return float(support[y0:y1, x0:x1].sum()) / float(area)


def occlusion_ratios(elements, index: SupportIndex | None) -> list[float]:
    """Vectorized occlusion ratios for a list of elements."""
    if index is None or not elements:
        return [0.0] * len(elements)
    cells = cells_array(elements)
    h, w = index.shape
    x0 = np.clip(cells[:, 0], 0, w)
    y0 = np.clip(cells[:, 1], 0, h)
    x1 = np.maximum(np.clip(cells[:, 2], 0, w), x0)
    y1 = np.maximum(np.clip(cells[:, 3], 0, h), y0)
    areas = (x1 - x0) * (y1 - y0)
    covered = index.rect_sums(cells)
    return [float(c) / a if a > 0 else 0.0 for c, a in zip(covered, areas)]


@dataclass
class PathwayResult:
    labels: list[str]
    counts: dict[str, int]
    slr_miss: float
    slr_topo: float
    rhos: list[float]


def attribute_pathways(result: MatchResult, clean: ParseOutput, adv: ParseOutput,
                       support: np.ndarray | None,
                       tau_iou: float = TAU_IOU,
                       eta_occ: float = ETA_OCC,
                       index: SupportIndex | None = None) -> PathwayResult:
    """Classify every clean element as intact or one failure pathway.

    Priority for failed elements: occlusion (miss), then merge, then
    misclass, then degraded; labels partition the failure set.
    """
    if index is None and support is not None:
        index = SupportIndex(support)
    all_rhos = occlusion_ratios(list(clean.elements), index)
    mult = result.multiplicity()
    labels: list[str] = []
    rhos: list[float] = []
    counts = {k: 0 for k in PATHWAY_LABELS}
    for entry, e, rho in zip(result.entries, clean.elements, all_rhos):
        rhos.append(rho)
        if entry.aligned:
            label = "intact"
        elif rho >= eta_occ:
            label = "miss"
        elif entry.adv_index is not None and mult[entry.adv_index] > 1:
            label = "merge"
        elif (entry.adv_index is not None and entry.iou >= tau_iou
              and e.category != adv.elements[entry.adv_index].category):
            label = "misclass"
        else:
            label = "degraded"
        labels.append(label)
        counts[label] += 1
    n = len(result)
    slr_miss = counts["miss"] / n if n else 0.0
    slr_topo = (counts["merge"] + counts["misclass"] + counts["degraded"]) / n if n else 0.0
    return PathwayResult(labels, counts, slr_miss, slr_topo, rhos)


# ---------------------------------------------------------------------------
# Exposure descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExposureDescriptors:
    tor: float
    eir: float | None
    acr: float | None = None
    bpo: float | None = None
    boc: float | None = None


@dataclass
class PageGeometry:
    """Per-page rasters reused across many probe configurations."""

    width: int
    height: int
    clean_cells: np.ndarray
    ann_cells: np.ndarray | None = None
    ann_region: np.ndarray | None = None
    ann_band: np.ndarray | None = None


def page_geometry(clean: ParseOutput, annotations: AnnotationSet | None = None,
                  delta: int = DELTA_PX) -> PageGeometry:
    w, h = int(clean.page_width), int(clean.page_height)
    geo = PageGeometry(w, h, cells_array(list(clean.elements)))
    if annotations is not None and len(annotations) > 0:
        boxes = [e.box for e in annotations.elements]
        geo.ann_cells = cells_array(list(annotations.elements))
        geo.ann_region = boxes_raster(boxes, w, h)
        geo.ann_band = (dilate(_boundary_raster(boxes, w, h), delta)
                        & ~erode(geo.ann_region, delta))
    return geo


def _hit_fraction(cells: np.ndarray, index: SupportIndex,
                  overlap_px: int) -> float | None:
    if len(cells) == 0:
        return None
    hits = int((index.rect_sums(cells) >= overlap_px).sum())
    return hits / len(cells)


def exposure(support: np.ndarray, clean: ParseOutput,
             annotations: AnnotationSet | None = None,
             delta: int = DELTA_PX, overlap_px: int = OVERLAP_PX,
             geometry: PageGeometry | None = None,
             index: SupportIndex | None = None) -> ExposureDescriptors:
    """Area-family (TOR/ACR/BPO) and structure-family (BOC/EIR) descriptors.

    ACR, BPO, and BOC are computed only when annotations are supplied and
    their reference supports are nonempty; absent values are None.
    """
    h, w = support.shape
    if index is None:
        index = SupportIndex(support)
    if geometry is None:
        geometry = page_geometry(clean, annotations, delta)
    tor = float(index.total) / float(h * w)
    eir = _hit_fraction(geometry.clean_cells, index, overlap_px)
    acr = bpo = boc = None
    if geometry.ann_region is not None:
        region_px = int(geometry.ann_region.sum())
        if region_px > 0:
            acr = float((support & geometry.ann_region).sum()) / region_px
        band_px = int(geometry.ann_band.sum())
        if band_px > 0:
            bpo = float((support & geometry.ann_band).sum()) / band_px
        boc = _hit_fraction(geometry.ann_cells, index, overlap_px)
    return ExposureDescriptors(tor=tor, eir=eir, acr=acr, bpo=bpo, boc=boc)


# ---------------------------------------------------------------------------
# Page-level diagnostic record
# ---------------------------------------------------------------------------

@dataclass
class ElementAudit:
    index: int
    adv_index: int | None
    iou: float
    textsim: float
    rho: float
    label: str


@dataclass
class DiagnosticRecord:
    page_id: str
    descriptors: ExposureDescriptors
    b_slr: float
    b_slr_iou_only: float
    b_slr_text_only: float
    slr_miss: float
    slr_topo: float
    pathway_counts: dict[str, int]
    elements: list[ElementAudit]
    n_elements: int
    truncated_texts: int = 0

    def to_dict(self) -> dict:
        d = self.descriptors
        return {
            "page_id": self.page_id,
            "n_elements": self.n_elements,
            "descriptors": {"TOR": d.tor, "ACR": d.acr, "BPO": d.bpo,
                            "BOC": d.boc, "EIR": d.eir},
            "b_slr": self.b_slr,
            "b_slr_iou_only": self.b_slr_iou_only,
            "b_slr_text_only": self.b_slr_text_only,
            "slr_miss": self.slr_miss,
            "slr_topo": self.slr_topo,
            "pathways": {k: v for k, v in self.pathway_counts.items() if k != "intact"},
            "truncated_texts": self.truncated_texts,
            "elements": [
                {"index": e.index, "adv_index": e.adv_index, "iou": e.iou,
                 "textsim": e.textsim, "rho": e.rho, "label": e.label}
                for e in self.elements
            ],
        }


class AuditSkipped(Exception):
    """A page could not be audited; the reason is the exception message."""


def audit_page(clean: ParseOutput, adv: ParseOutput,
               support: np.ndarray | None = None,
               annotations: AnnotationSet | None = None,
               tau_iou: float = TAU_IOU, tau_text: float = TAU_TEXT,
               eta_occ: float = ETA_OCC,
               geometry: PageGeometry | None = None,
               index: SupportIndex | None = None) -> DiagnosticRecord:
    """Full structural audit of one page: matching, channels, pathways, exposure."""
    if len(clean) == 0:
        raise AuditSkipped("clean parse has no elements; B-SLR undefined")
    result = match(clean, adv, tau_iou, tau_text)
    slr, iou_only, text_only = b_slr(result, tau_iou)
    if support is not None and index is None:
        index = SupportIndex(support)
    paths = attribute_pathways(result, clean, adv, support, tau_iou, eta_occ, index)
    if support is not None:
        desc = exposure(support, clean, annotations, geometry=geometry, index=index)
    else:
        desc = ExposureDescriptors(tor=0.0, eir=0.0 if len(clean) else None)
    rows = [
        ElementAudit(entry.clean_index, entry.adv_index, entry.iou,
                     entry.textsim, rho, label)
        for entry, rho, label in zip(result.entries, paths.rhos, paths.labels)
    ]
    return DiagnosticRecord(
        page_id=clean.page_id,
        descriptors=desc,
        b_slr=slr,
        b_slr_iou_only=iou_only,
        b_slr_text_only=text_only,
        slr_miss=paths.slr_miss,
        slr_topo=paths.slr_topo,
        pathway_counts=paths.counts,
        elements=rows,
        n_elements=len(clean),
        truncated_texts=sum(1 for e in result.entries if e.truncated),
    )
