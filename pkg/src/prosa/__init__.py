"""ProSA: probe-guided structure-aware auditing for document layout analysis."""

__version__ = "0.1.0"

from .document import (  # noqa: F401
    AnnotationSet,
    BBox,
    LayoutElement,
    ParseOutput,
    iou,
    load_annotations,
    load_parse_output,
    normalize_label,
)
from .audit import audit_page, b_slr, match, text_sim  # noqa: F401
from .probes import ProbeConfig, ProbeMask, apply, compose, nt_place  # noqa: F401
from .terminal import cer_element, delta_map, levenshtein, map50, mean_cer  # noqa: F401
