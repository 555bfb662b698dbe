"""Operational constants, the probe catalog, and threshold configuration.

All gates and radii used by matching, pathway attribution, and mask
construction live here so that every module shares one source of truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

# Matching gates and geometry constants (fixed across all audits).
TAU_IOU = 0.1          # IoU gate for output matching
TAU_TEXT = 0.5         # text-similarity gate for textual identity
ETA_OCC = 0.3          # occlusion threshold splitting miss vs. topology failures
DELTA_PX = 5           # boundary-mask dilation radius, px
OVERLAP_PX = 1         # box/mask intersection threshold for hit counting

# Probe composition limits.
MAX_PROBES_PER_PAGE = 3
TOTAL_AREA_BUDGET = 0.25   # cap on combined mask coverage of the page

# Iterative stamp placement defaults (disk stamps).
NT_STAMP_RADIUS = 40
NT_STAMP_ALPHA = 0.6
NT_STAMP_BUDGET = 64

# Text-similarity guard against pathological element texts.
TEXTSIM_MAX_CHARS = 20_000

CANONICAL_CATEGORIES = ("text", "title", "table", "figure", "equation")

PLACEMENTS = ("anchor", "content", "random", "bridge")


@dataclass(frozen=True)
class ProbeSpec:
    """Catalog entry: geometry family, composition behavior, parameter ranges."""

    geometry: str                 # line | disk | rect | blob | points
    behavior: str                 # inject | blend | erase
    appearance: str               # solid | gradient | ring | texture
    params: dict[str, tuple[float, float]]
    placements: tuple[str, ...]
    orientation: str | None = None   # line orientation: horizontal | vertical | diagonal


# The nine admissible probes with their bounded parameter ranges and the
# placement strategies each one supports.
PROBE_CATALOG: dict[str, ProbeSpec] = {
    "P1": ProbeSpec("line", "inject", "solid",
                    {"w": (1, 10), "l_r": (0.5, 1.0)},
                    ("anchor", "content", "random"), orientation="horizontal"),
    "P2": ProbeSpec("line", "inject", "solid",
                    {"w": (1, 10), "l_r": (0.5, 1.0)},
                    ("anchor", "content", "random"), orientation="vertical"),
    "P3": ProbeSpec("disk", "blend", "solid",
                    {"r": (30, 90), "alpha": (0.2, 1.0)},
                    ("anchor", "content", "random")),
    "P4": ProbeSpec("rect", "erase", "solid",
                    {"a_area": (0.03, 0.25), "beta": (0.2, 1.0)},
                    ("content", "bridge")),
    "P5": ProbeSpec("line", "inject", "solid",
                    {"w": (1, 5), "l_r": (0.2, 0.8)},
                    ("bridge", "content", "random"), orientation="horizontal"),
    "P6": ProbeSpec("line", "blend", "gradient",
                    {"alpha": (0.05, 0.4), "w": (2, 10)},
                    ("anchor",), orientation="horizontal"),
    "P7": ProbeSpec("points", "inject", "solid",
                    {"n": (10, 100), "r": (1, 4), "sigma": (10, 50)},
                    ("random",)),
    "P8": ProbeSpec("blob", "blend", "texture",
                    {"r_b": (30, 80), "kappa": (0.1, 0.5), "alpha": (0.3, 0.7)},
                    ("anchor",)),
    "P9": ProbeSpec("line", "inject", "solid",
                    {"theta": (20, 70), "w": (1, 6)},
                    ("anchor",), orientation="diagonal"),
}

PROBE_IDS = tuple(sorted(PROBE_CATALOG))


@dataclass(frozen=True)
class Thresholds:
    """Tunable audit thresholds; overridable from a config file."""

    tau_iou: float = TAU_IOU
    tau_text: float = TAU_TEXT
    eta_occ: float = ETA_OCC
    delta_px: int = DELTA_PX
    overlap_px: int = OVERLAP_PX
    area_budget: float = TOTAL_AREA_BUDGET
    nt_stamp_radius: float = NT_STAMP_RADIUS
    nt_stamp_alpha: float = NT_STAMP_ALPHA
    nt_stamp_budget: int = NT_STAMP_BUDGET
    # rule-based policy constants
    rule_gap_density: float = 0.8      # gaps per 1000 px of page height
    rule_boundary_density: float = 0.05
    rule_min_area: float = 0.03
    extras: dict = field(default_factory=dict)


DEFAULT_THRESHOLDS = Thresholds()


def _parse_flat_kv(text: str) -> dict:
    """Parse a minimal flat `key = value` file (TOML-style scalars only)."""
    out: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        if "=" not in line:
            continue
        key, _, raw = line.partition("=")
        raw = raw.split("#", 1)[0].strip().strip('"').strip("'")
        if raw.lower() in ("true", "false"):
            val: object = raw.lower() == "true"
        else:
            try:
                val = int(raw)
            except ValueError:
                try:
                    val = float(raw)
                except ValueError:
                    val = raw
        out[key.strip()] = val
    return out


def load_thresholds(path: str | Path | None) -> Thresholds:
    """Load threshold overrides from a JSON or flat key=value (TOML-like) file."""
    if path is None:
        return Thresholds()
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
    else:
        data = _parse_flat_kv(path.read_text(encoding="utf-8"))
    known = {f for f in Thresholds.__dataclass_fields__ if f != "extras"}
    fields = {k: v for k, v in data.items() if k in known}
    extras = {k: v for k, v in data.items() if k not in known}
    return replace(Thresholds(**fields), extras=extras)
