"""Terminal degradation judges: OCR character error rate and detection mAP.

CER is referenced against the clean parser text of each matched element;
detection quality is per-image mAP at IoU 0.5 over the canonical classes
present in the ground truth, with the clean-to-perturbed drop as the
degradation signal. Parsers emit no confidence scores, so detections are
ranked in parse-output order and average precision uses all-points
interpolation (area under the precision envelope).
"""

from __future__ import annotations

from dataclasses import dataclass

from .audit import MatchResult, match, normalize_text
from .document import AnnotationSet, ParseOutput, iou


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute), bit-parallel implementation."""
    if a == b:
        return 0
    if len(a) > len(b):
        a, b = b, a
    m = len(a)
    if m == 0:
        return len(b)
    peq: dict[str, int] = {}
    bit = 1
    for ch in a:
        peq[ch] = peq.get(ch, 0) | bit
        bit <<= 1
    mask = (1 << m) - 1
    high = 1 << (m - 1)
    pv, mv = mask, 0
    score = m
    for ch in b:
        eq = peq.get(ch, 0)
        xv = eq | mv
        xh = ((((eq & pv) + pv) & mask) ^ pv) | eq
        ph = mv | (~(xh | pv) & mask)
        mh = pv & xh
        if ph & high:
            score += 1
        if mh & high:
            score -= 1
        ph = ((ph << 1) | 1) & mask
        mh = (mh << 1) & mask
        pv = mh | (~(xv | ph) & mask)
        mv = ph & xv
    return score


def cer_element(reference: str, hypothesis: str, overlapped: bool) -> float:
    """Per-element CER; total loss (1.0) when nothing overlaps the element."""
    if not overlapped:
        return 1.0
    r = normalize_text(reference)
    h = normalize_text(hypothesis)
    return levenshtein(r, h) / max(len(r), 1)


def mean_cer(clean: ParseOutput, adv: ParseOutput,
             result: MatchResult | None = None) -> float:
    """Mean CER over clean elements with non-empty text; 1.0 when there are none."""
    if result is None:
        result = match(clean, adv)
    total, count = 0.0, 0
    for entry, e in zip(result.entries, clean.elements):
        if e.text == "":
            continue
        count += 1
        if entry.adv_index is None or entry.iou <= 0.0:
            total += 1.0
        else:
            hyp = adv.elements[entry.adv_index].text
            total += cer_element(e.text, hyp, overlapped=True)
    if count == 0:
        return 1.0
    return total / count


# ---------------------------------------------------------------------------
# Detection-side metrics
# ---------------------------------------------------------------------------

def _average_precision(tp_flags: list[bool], n_gt: int) -> float:
    """All-points AP from ranked TP/FP flags against n_gt ground truths."""
    if n_gt == 0:
        return 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    ap = 0.0
    prev_recall = 0.0
    for i, r in enumerate(recalls):
        if r > prev_recall:
            # precision envelope: best precision at any recall >= r
            ap += (r - prev_recall) * max(precisions[i:])
            prev_recall = r
    return ap


def _class_ap(gt_boxes, pred_boxes, iou_thresh: float = 0.5) -> float:
    matched = [False] * len(gt_boxes)
    flags: list[bool] = []
    for pb in pred_boxes:
        best, best_i = 0.0, -1
        for gi, gb in enumerate(gt_boxes):
            v = iou(pb, gb)
            if v > best:
                best, best_i = v, gi
        if best >= iou_thresh and best_i >= 0 and not matched[best_i]:
            matched[best_i] = True
            flags.append(True)
        else:
            flags.append(False)
    return _average_precision(flags, len(gt_boxes))


def map50(annotations: AnnotationSet, predictions: ParseOutput,
          iou_thresh: float = 0.5) -> float | None:
    """Per-image mAP at IoU 0.5 over the canonical classes present in the GT.

    Returns None when the ground truth has no classes. Detections are
    ranked in parse-output order; each ground-truth box is matched at
    most once, duplicates count as false positives.
    """
    classes = sorted({e.category for e in annotations.elements})
    if not classes:
        return None
    aps = []
    for cls in classes:
        gt = [e.box for e in annotations.elements if e.category == cls]
        preds = [e.box for e in predictions.elements if e.category == cls]
        aps.append(_class_ap(gt, preds, iou_thresh))
    return sum(aps) / len(aps)


def delta_map(annotations: AnnotationSet, clean: ParseOutput,
              adv: ParseOutput) -> tuple[float | None, float | None, float | None]:
    """(mAP_clean, mAP_adv, clean-to-perturbed drop); negative drops are legal."""
    m_clean = map50(annotations, clean)
    m_adv = map50(annotations, adv)
    if m_clean is None or m_adv is None:
        return m_clean, m_adv, None
    return m_clean, m_adv, m_clean - m_adv


@dataclass(frozen=True)
class TerminalScores:
    cer_matched_mean: float
    map_clean: float | None
    map_adv: float | None
    delta_map: float | None


def terminal_scores(clean: ParseOutput, adv: ParseOutput,
                    annotations: AnnotationSet | None = None,
                    result: MatchResult | None = None) -> TerminalScores:
    cer = mean_cer(clean, adv, result)
    if annotations is None:
        return TerminalScores(cer, None, None, None)
    m_clean, m_adv, drop = delta_map(annotations, clean, adv)
    return TerminalScores(cer, m_clean, m_adv, drop)
