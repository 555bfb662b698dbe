"""Probe rendering, placement, and page composition.

Probes are binary masks produced from closed-form geometry primitives
(line strip, disk, rectangle, irregular blob, point cluster), combined
with a per-pixel alpha raster and composed onto the page image by alpha
blending. Placement is one of four layout-aware strategies computed from
the clean-layout boxes.

Rasterization rule: a pixel belongs to a mask iff its center satisfies
the geometry's set definition. Axis-aligned strips and rectangles are
snapped to cell boundaries so integer-sized shapes cover exact pixel
counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter, minimum_filter

from .constants import (
    MAX_PROBES_PER_PAGE,
    NT_STAMP_ALPHA,
    NT_STAMP_BUDGET,
    NT_STAMP_RADIUS,
    PROBE_CATALOG,
    TOTAL_AREA_BUDGET,
    DELTA_PX,
)
from .document import BBox, LayoutElement


class ProbeRenderError(ValueError):
    """Raised for degenerate geometry that produces an empty mask."""


@dataclass(frozen=True)
class ProbeConfig:
    """One perturbation specification: probe family, parameters, placement."""

    probe_id: str
    placement: str
    params: dict = field(default_factory=dict)
    probe_count: int = 1
    seed: int = 0
    behavior: str | None = None      # default: catalog behavior
    appearance: str | None = None    # default: catalog appearance

    @property
    def spec(self):
        return PROBE_CATALOG[self.probe_id]

    def resolved_behavior(self) -> str:
        return self.behavior or self.spec.behavior

    def resolved_appearance(self) -> str:
        return self.appearance or self.spec.appearance


def config_to_dict(config: ProbeConfig) -> dict:
    """JSON-ready form using the catalog parameter names."""
    out = {"probe_id": config.probe_id, "placement": config.placement,
           "params": dict(config.params), "probe_count": config.probe_count,
           "seed": config.seed,
           "behavior": config.resolved_behavior(),
           "appearance": config.resolved_appearance()}
    return out


def config_from_dict(data: dict) -> ProbeConfig:
    spec = PROBE_CATALOG[data["probe_id"]]
    behavior = data.get("behavior")
    appearance = data.get("appearance")
    return ProbeConfig(
        probe_id=data["probe_id"],
        placement=data["placement"],
        params=dict(data.get("params", {})),
        probe_count=int(data.get("probe_count", 1)),
        seed=int(data.get("seed", 0)),
        behavior=None if behavior == spec.behavior else behavior,
        appearance=None if appearance == spec.appearance else appearance,
    )


def clamp_config(config: ProbeConfig) -> tuple[ProbeConfig, list[str]]:
    """Clamp parameters into the catalog ranges; returns the adjustments made."""
    if config.probe_id not in PROBE_CATALOG:
        raise ValueError(f"unknown probe id {config.probe_id!r}")
    spec = config.spec
    adjustments: list[str] = []
    params = dict(config.params)
    for name, (lo, hi) in spec.params.items():
        if name not in params:
            params[name] = (lo + hi) / 2.0
            adjustments.append(f"{name}=default")
        elif not (lo <= params[name] <= hi):
            params[name] = min(max(params[name], lo), hi)
            adjustments.append(f"{name}=clamped")
    placement = config.placement
    if placement not in spec.placements:
        placement = spec.placements[0]
        adjustments.append("placement=clamped")
    count = min(max(int(config.probe_count), 1), MAX_PROBES_PER_PAGE)
    if count != config.probe_count:
        adjustments.append("probe_count=clamped")
    return replace(config, params=params, placement=placement, probe_count=count), adjustments


class SupportIndex:
    """Integral image over a binary raster for O(1) rectangle pixel counts."""

    def __init__(self, support: np.ndarray):
        h, w = support.shape
        self.shape = (h, w)
        ii = np.zeros((h + 1, w + 1), dtype=np.int32)  # page pixel counts fit
        ii[1:, 1:] = support
        np.cumsum(ii, axis=0, out=ii)
        np.cumsum(ii, axis=1, out=ii)
        self.ii = ii
        self.total = int(ii[h, w])

    def rect_sum(self, x0: int, y0: int, x1: int, y1: int) -> int:
        h, w = self.shape
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w), min(y1, h)
        if x1 <= x0 or y1 <= y0:
            return 0
        ii = self.ii
        return int(ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0])

    def rect_sums(self, cells: np.ndarray) -> np.ndarray:
        """Vectorized rect_sum over an (n, 4) array of [x0, y0, x1, y1] cells."""
        if len(cells) == 0:
            return np.zeros(0, dtype=np.int64)
        h, w = self.shape
        x0 = np.clip(cells[:, 0], 0, w)
        y0 = np.clip(cells[:, 1], 0, h)
        x1 = np.maximum(np.clip(cells[:, 2], 0, w), x0)
        y1 = np.maximum(np.clip(cells[:, 3], 0, h), y0)
        ii = self.ii
        return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


@dataclass
class ProbeMask:
    """Rasterized probe support with alpha and fill target."""

    support: np.ndarray            # bool (H, W)
    alpha: np.ndarray              # float32 (H, W), > 0 exactly on support
    fill: object = 0               # scalar, (H, W), or (H, W, 3) target value
    inject_support: np.ndarray | None = None   # subset composed with behavior inject
    poses: list = field(default_factory=list)
    fallbacks: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    _index: SupportIndex | None = field(default=None, repr=False, compare=False)

    def tor(self) -> float:
        h, w = self.support.shape
        return float(self.support.sum()) / float(h * w)

    def index(self) -> SupportIndex:
        """Cached integral image; build only after the support is final."""
        if self._index is None:
            self._index = SupportIndex(self.support)
        return self._index


def empty_mask(width: int, height: int) -> ProbeMask:
    return ProbeMask(
        support=np.zeros((height, width), dtype=bool),
        alpha=np.zeros((height, width), dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# Page context: content/anchor masks and the inter-block gap list
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gap:
    """Gap between two facing neighbor boxes, with the empty rectangle between."""

    index_a: int
    index_b: int
    axis: str            # "v": a above b; "h": a left of b
    rect: BBox
    midpoint: tuple[float, float]


@dataclass
class PageContext:
    width: int
    height: int
    content_mask: np.ndarray    # bool (H, W)
    anchor_mask: np.ndarray     # bool (H, W)
    gaps: list[Gap]
    _content_pool: np.ndarray = None
    _anchor_pool: np.ndarray = None

    def content_pool(self) -> np.ndarray:
        if self._content_pool is None:
            self._content_pool = np.flatnonzero(self.content_mask)
        return self._content_pool

    def anchor_pool(self) -> np.ndarray:
        if self._anchor_pool is None:
            self._anchor_pool = np.flatnonzero(self.anchor_mask)
        return self._anchor_pool


def boxes_raster(boxes: list[BBox], width: int, height: int) -> np.ndarray:
    """Filled union of boxes on the pixel-cell grid."""
    out = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = b.cells()
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width), min(y1, height)
        if x1 > x0 and y1 > y0:
            out[y0:y1, x0:x1] = True
    return out


def _boundary_raster(boxes: list[BBox], width: int, height: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = b.cells()
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width), min(y1, height)
        if x1 <= x0 or y1 <= y0:
            continue
        out[y0, x0:x1] = True
        out[y1 - 1, x0:x1] = True
        out[y0:y1, x0] = True
        out[y0:y1, x1 - 1] = True
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)-square structuring element."""
    if radius <= 0 or not mask.any():
        return mask.copy()
    return maximum_filter(mask, size=2 * radius + 1)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return minimum_filter(mask, size=2 * radius + 1)


def _find_gaps(boxes: list[BBox]) -> list[Gap]:
    gaps: list[Gap] = []
    n = len(boxes)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = boxes[i], boxes[j]
            # vertical neighbor: a above b with shared x extent
            ox0, ox1 = max(a.x0, b.x0), min(a.x1, b.x1)
            if ox1 > ox0 and b.y0 > a.y1:
                rect = BBox(ox0, a.y1, ox1, b.y0)
                if not _rect_blocked(rect, boxes, i, j):
                    mid = ((ox0 + ox1) / 2.0, (a.y1 + b.y0) / 2.0)
                    gaps.append(Gap(i, j, "v", rect, mid))
            # horizontal neighbor: a left of b with shared y extent
            oy0, oy1 = max(a.y0, b.y0), min(a.y1, b.y1)
            if oy1 > oy0 and b.x0 > a.x1:
                rect = BBox(a.x1, oy0, b.x0, oy1)
                if not _rect_blocked(rect, boxes, i, j):
                    mid = ((a.x1 + b.x0) / 2.0, (oy0 + oy1) / 2.0)
                    gaps.append(Gap(i, j, "h", rect, mid))
    gaps.sort(key=lambda g: (g.rect.y0, g.rect.x0, g.index_a, g.index_b))
    return gaps


def _rect_blocked(rect: BBox, boxes: list[BBox], i: int, j: int) -> bool:
    for k, b in enumerate(boxes):
        if k in (i, j):
            continue
        ix = min(rect.x1, b.x1) - max(rect.x0, b.x0)
        iy = min(rect.y1, b.y1) - max(rect.y0, b.y0)
        if ix > 0 and iy > 0:
            return True
    return False


def compute_page_context(elements: list[LayoutElement], width: int, height: int,
                         delta: int = DELTA_PX) -> PageContext:
    """Content mask, anchor band, and neighbor-gap list from clean-layout boxes."""
    boxes = [e.box for e in elements]
    content = boxes_raster(boxes, width, height)
    boundary = _boundary_raster(boxes, width, height)
    anchor = dilate(boundary, delta) & ~erode(content, delta)
    return PageContext(width, height, content, anchor, _find_gaps(boxes))


# ---------------------------------------------------------------------------
# Geometry rendering
# ---------------------------------------------------------------------------

def _axis_line_mask(width: int, height: int, pose: tuple[float, float],
                    length: float, w: float, horizontal: bool) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    cx, cy = pose
    if horizontal:
        span, cross, cross_n = width, cy, height
    else:
        span, cross, cross_n = height, cx, width
    half_l = min(length, span) / 2.0
    # along-axis center clamped so the strip stays on the page
    c_along = min(max(cx if horizontal else cy, half_l), span - half_l)
    a0 = int(math.ceil(c_along - half_l - 0.5))     # first cell whose center >= lo
    a1 = int(math.floor(c_along + half_l - 0.5))    # last cell whose center <= hi
    a0, a1 = max(a0, 0), min(a1, span - 1)
    # cross-axis band snapped to cell boundaries: integer widths cover w cells
    off = round(cross - w / 2.0)
    b0, b1 = off, off + max(int(round(w)), 1) - 1
    b0c, b1c = max(b0, 0), min(b1, cross_n - 1)
    if a1 < a0 or b1c < b0c:
        return out
    if horizontal:
        out[b0c:b1c + 1, a0:a1 + 1] = True
    else:
        out[a0:a1 + 1, b0c:b1c + 1] = True
    return out


def _oriented_line_mask(width: int, height: int, pose: tuple[float, float],
                        theta_deg: float, length: float, w: float) -> np.ndarray:
    t = math.radians(theta_deg)
    ux, uy = math.cos(t), math.sin(t)
    cx, cy = pose
    half_l, half_w = length / 2.0, w / 2.0
    # bounding box of the strip
    ex = abs(ux) * half_l + abs(uy) * half_w + 1
    ey = abs(uy) * half_l + abs(ux) * half_w + 1
    x0, x1 = max(int(cx - ex), 0), min(int(cx + ex) + 1, width)
    y0, y1 = max(int(cy - ey), 0), min(int(cy + ey) + 1, height)
    out = np.zeros((height, width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return out
    xs = np.arange(x0, x1) + 0.5 - cx
    ys = np.arange(y0, y1) + 0.5 - cy
    gx, gy = np.meshgrid(xs, ys)
    s = gx * ux + gy * uy
    d = np.abs(gx * uy - gy * ux)
    out[y0:y1, x0:x1] = (d < half_w) & (np.abs(s) <= half_l)
    return out


def _radial_mask(width: int, height: int, center: tuple[float, float],
                 limit) -> np.ndarray:
    """Pixels whose center distance from `center` is <= limit(phi).

    `limit` is a scalar radius or a callable mapping angle arrays in
    [0, 2pi) to per-pixel radius bounds. The disk and blob share this path
    so a zero-roughness blob is pixel-identical to the disk.
    """
    cx, cy = center
    rmax = limit if np.isscalar(limit) else limit.max_radius
    x0, x1 = max(int(cx - rmax) - 1, 0), min(int(cx + rmax) + 2, width)
    y0, y1 = max(int(cy - rmax) - 1, 0), min(int(cy + rmax) + 2, height)
    out = np.zeros((height, width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return out
    xs = np.arange(x0, x1) + 0.5 - cx
    ys = np.arange(y0, y1) + 0.5 - cy
    gx, gy = np.meshgrid(xs, ys)
    dist = np.hypot(gx, gy)
    if np.isscalar(limit):
        bound = limit
    else:
        phi = np.mod(np.arctan2(gy, gx), 2 * math.pi)
        bound = limit(phi)
    out[y0:y1, x0:x1] = dist <= bound
    return out


class _BlobLimit:
    """Angle-dependent radius bound r_b * (1 + kappa * noise(phi))."""

    def __init__(self, r_b: float, kappa: float, rng: np.random.Generator):
        self.r_b = r_b
        self.kappa = kappa
        self._noise = _periodic_value_noise(rng)
        self.max_radius = r_b * (1 + kappa)

    def __call__(self, phi: np.ndarray) -> np.ndarray:
        if self.kappa == 0:
            return np.full_like(phi, self.r_b)
        return self.r_b * (1 + self.kappa * self._noise(phi))


def _periodic_value_noise(rng: np.random.Generator, base_knots: int = 8,
                          octaves: int = 2):
    """1-D periodic value noise on [0, 2pi), cosine-interpolated, in [-1, 1]."""
    tables = [rng.uniform(-1.0, 1.0, size=base_knots * (2 ** o)) for o in range(octaves)]

    def noise(phi: np.ndarray) -> np.ndarray:
        total = np.zeros_like(phi)
        amp_sum = 0.0
        amp = 1.0
        for tab in tables:
            k = len(tab)
            x = phi / (2 * math.pi) * k
            i0 = np.floor(x).astype(int) % k
            i1 = (i0 + 1) % k
            t = x - np.floor(x)
            ct = (1 - np.cos(t * math.pi)) / 2.0
            total = total + amp * (tab[i0] * (1 - ct) + tab[i1] * ct)
            amp_sum += amp
            amp /= 2.0
        return total / amp_sum

    return noise


def _rect_mask(width: int, height: int, center: tuple[float, float],
               w_r: float, h_r: float) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    w = max(int(round(w_r)), 1)
    h = max(int(round(h_r)), 1)
    w, h = min(w, width), min(h, height)
    x0 = int(round(center[0] - w / 2.0))
    y0 = int(round(center[1] - h / 2.0))
    x0 = min(max(x0, 0), width - w)
    y0 = min(max(y0, 0), height - h)
    out[y0:y0 + h, x0:x0 + w] = True
    return out


def render_geometry(config: ProbeConfig, pose: tuple[float, float],
                    width: int, height: int,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Render the probe's binary support raster at the given pose."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    spec = config.spec
    p = config.params
    if spec.geometry == "line":
        w = float(p.get("w", 1))
        if w <= 0:
            raise ProbeRenderError(f"{config.probe_id}: degenerate width {w}")
        if spec.orientation == "horizontal":
            length = float(p.get("l_r", 1.0)) * width
            mask = _axis_line_mask(width, height, pose, length, w, horizontal=True)
        elif spec.orientation == "vertical":
            length = float(p.get("l_r", 1.0)) * height
            mask = _axis_line_mask(width, height, pose, length, w, horizontal=False)
        else:
            theta = float(p.get("theta", 45.0))
            length = float(p.get("l_r", 1.0)) * math.hypot(width, height)
            mask = _oriented_line_mask(width, height, pose, theta, length, w)
    elif spec.geometry == "disk":
        r = float(p.get("r", 0))
        if r <= 0:
            raise ProbeRenderError(f"{config.probe_id}: degenerate radius {r}")
        mask = _radial_mask(width, height, pose, r)
        if config.resolved_appearance() == "ring":
            inner = _radial_mask(width, height, pose, r * 0.85)
            mask = mask & ~inner
    elif spec.geometry == "blob":
        r_b = float(p.get("r_b", 0))
        if r_b <= 0:
            raise ProbeRenderError(f"{config.probe_id}: degenerate radius {r_b}")
        limit = _BlobLimit(r_b, float(p.get("kappa", 0.0)), rng)
        mask = _radial_mask(width, height, pose, limit)
    elif spec.geometry == "rect":
        a_area = float(p.get("a_area", 0))
        if a_area <= 0:
            raise ProbeRenderError(f"{config.probe_id}: degenerate area {a_area}")
        side = math.sqrt(a_area)
        mask = _rect_mask(width, height, pose, side * width, side * height)
    elif spec.geometry == "points":
        n = int(round(p.get("n", 0)))
        r = float(p.get("r", 0))
        sigma = float(p.get("sigma", 10))
        if n <= 0 or r <= 0:
            raise ProbeRenderError(f"{config.probe_id}: degenerate point cluster")
        centers = rng.normal(loc=pose, scale=sigma, size=(n, 2))
        mask = np.zeros((height, width), dtype=bool)
        for cxy in centers:
            mask |= _radial_mask(width, height, (cxy[0], cxy[1]), r)
    else:  # pragma: no cover - catalog is closed
        raise ValueError(f"unknown geometry {spec.geometry!r}")
    if not mask.any():
        raise ProbeRenderError(f"{config.probe_id}: empty mask at pose {pose}")
    return mask


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

def place_probe(config: ProbeConfig, ctx: PageContext,
                rng: np.random.Generator) -> tuple[tuple[float, float], bool]:
    """Sample a pose for the configured strategy.

    Returns (pose, fallback) where fallback is True when the strategy was
    infeasible and a uniform-random pose was used instead.
    """
    strategy = config.placement
    if strategy == "bridge":
        if ctx.gaps:
            gap = ctx.gaps[int(rng.integers(len(ctx.gaps)))]
            return gap.midpoint, False
        strategy = "random"
        fallback = True
    elif strategy == "anchor":
        pool = ctx.anchor_pool()
        if pool.size:
            flat = int(pool[int(rng.integers(pool.size))])
            y, x = divmod(flat, ctx.width)
            return (x + 0.5, y + 0.5), False
        strategy = "random"
        fallback = True
    elif strategy == "content":
        pool = ctx.content_pool()
        if pool.size:
            flat = int(pool[int(rng.integers(pool.size))])
            y, x = divmod(flat, ctx.width)
            return (x + 0.5, y + 0.5), False
        strategy = "random"
        fallback = True
    else:
        fallback = False
    x = float(rng.uniform(0, ctx.width))
    y = float(rng.uniform(0, ctx.height))
    return (x, y), fallback


# ---------------------------------------------------------------------------
# Alpha construction and composition
# ---------------------------------------------------------------------------

def _support_window(support: np.ndarray, pad: int = 0):
    rows = np.flatnonzero(support.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(support.any(axis=0))
    h, w = support.shape
    return (slice(max(int(rows[0]) - pad, 0), min(int(rows[-1]) + 1 + pad, h)),
            slice(max(int(cols[0]) - pad, 0), min(int(cols[-1]) + 1 + pad, w)))


def _local_background(image: np.ndarray, support: np.ndarray):
    """Median of the 8-px ring just outside the support (erase target)."""
    win = _support_window(support, pad=9)
    if win is None:
        return 255
    local = support[win]
    ring = dilate(local, 8) & ~local
    if not ring.any():
        return 255
    patch = image[win]
    if image.ndim == 2:
        return float(np.median(patch[ring]))
    return np.median(patch[ring], axis=0).astype(np.float64)


def _build_alpha_fill(config: ProbeConfig, support: np.ndarray,
                      rng: np.random.Generator, image: np.ndarray):
    behavior = config.resolved_behavior()
    appearance = config.resolved_appearance()
    alpha = np.zeros(support.shape, dtype=np.float32)
    if behavior == "inject":
        alpha[support] = 1.0
        fill: object = 0
    elif behavior == "erase":
        alpha[support] = float(config.params.get("beta", 1.0))
        fill = _local_background(image, support)
    else:  # blend
        level = float(config.params.get("alpha", 0.5))
        alpha[support] = level
        fill = 0
        if appearance == "texture":
            tex = rng.integers(0, 160, size=support.shape).astype(np.float64)
            fill = tex
    if appearance == "gradient":
        # linear ramp across the band's rows, 0 at the top edge to full alpha
        rows = np.flatnonzero(support.any(axis=1))
        if rows.size:
            level = float(config.params.get("alpha", 0.5))
            ramp = (np.arange(support.shape[0]) - rows[0] + 0.5) / max(rows.size, 1)
            ramp = np.clip(ramp, 0.0, 1.0).astype(np.float32)
            alpha = np.where(support, level * ramp[:, None], 0.0).astype(np.float32)
    return alpha, fill


def compose(image: np.ndarray, mask: ProbeMask) -> np.ndarray:
    """Alpha-blend the probe onto the image; pixels off-support are unchanged."""
    if image.shape[:2] != mask.support.shape:
        raise ValueError(
            f"image {image.shape[:2]} and mask {mask.support.shape} dimensions differ")
    out = image.copy()
    win = _support_window(mask.support)
    if win is None:
        return out
    alpha = np.where(mask.support[win], mask.alpha[win], 0.0).astype(np.float64)
    fill = mask.fill
    if isinstance(fill, np.ndarray) and fill.ndim >= 2:
        fill = fill[win]
    patch = image[win]
    if image.ndim == 3:
        alpha = alpha[..., None]
        if isinstance(fill, np.ndarray) and fill.ndim == 2:
            fill = fill[..., None]
    blended = (1.0 - alpha) * patch.astype(np.float64) + alpha * np.asarray(fill, dtype=np.float64)
    out[win] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# The perturbation operator
# ---------------------------------------------------------------------------

def apply(config: ProbeConfig, image: np.ndarray, ctx: PageContext,
          rng: np.random.Generator | None = None,
          area_budget: float = TOTAL_AREA_BUDGET) -> tuple[np.ndarray, ProbeMask]:
    """Place and compose 1..3 probes; returns the perturbed image and union mask.

    Deterministic given (config, seed, image). Additional probes that would
    push combined coverage past the area budget are skipped and recorded.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    height, width = image.shape[:2]
    union = empty_mask(width, height)
    out = image
    placed = 0
    for _ in range(config.probe_count):
        pose, fallback = place_probe(config, ctx, rng)
        support = render_geometry(config, pose, width, height, rng)
        new_cover = (union.support | support).sum() / (width * height)
        if placed > 0 and new_cover > area_budget:
            union.meta["budget_capped"] = True
            break
        alpha, fill = _build_alpha_fill(config, support, rng, out)
        probe = ProbeMask(support, alpha, fill)
        out = compose(out, probe)
        union.support |= support
        union.alpha = np.maximum(union.alpha, alpha)
        union.fill = fill
        if config.resolved_behavior() == "inject":
            if union.inject_support is None:
                union.inject_support = support.copy()
            else:
                union.inject_support |= support
        union.poses.append(pose)
        union.fallbacks.append(fallback)
        placed += 1
    union.meta["placed"] = placed
    return out, union


def apply_at(config: ProbeConfig, image: np.ndarray, pose: tuple[float, float],
             rng: np.random.Generator | None = None) -> tuple[np.ndarray, ProbeMask]:
    """Render one probe at an explicit pose and compose it (no placement)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    height, width = image.shape[:2]
    support = render_geometry(config, pose, width, height, rng)
    alpha, fill = _build_alpha_fill(config, support, rng, image)
    inject = support if config.resolved_behavior() == "inject" else None
    mask = ProbeMask(support, alpha, fill, inject_support=inject,
                     poses=[pose], fallbacks=[False])
    return compose(image, mask), mask


def compose_stamps(image: np.ndarray, mask: ProbeMask) -> np.ndarray:
    """Compose an already-built mask (e.g. iterative stamps) onto an image."""
    return compose(image, mask)


def nt_place(target: float, elements: list[LayoutElement], width: int, height: int,
             rng: np.random.Generator,
             radius: float = NT_STAMP_RADIUS, alpha: float = NT_STAMP_ALPHA,
             budget: int = NT_STAMP_BUDGET) -> ProbeMask:
    """Iterative stamp placement until the element-hit fraction reaches target.

    Disk stamps are added over uncovered elements until the fraction of
    clean boxes intersecting the mask is >= target, or the stamp budget
    runs out (achieved fraction and shortfall recorded in the mask meta).
    """
    if not (0 < target <= 1):
        raise ValueError(f"target must be in (0, 1], got {target}")
    mask = empty_mask(width, height)
    mask.alpha = mask.alpha.astype(np.float32)
    n = len(elements)
    if n == 0:
        mask.meta.update(target=target, achieved=0.0, shortfall=True, stamps=0)
        return mask

    def hit_fraction() -> float:
        hits = 0
        for e in elements:
            x0, y0, x1, y1 = e.box.cells()
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, width), min(y1, height)
            if x1 > x0 and y1 > y0 and mask.support[y0:y1, x0:x1].any():
                hits += 1
        return hits / n

    order = rng.permutation(n)
    stamps = 0
    achieved = 0.0
    for idx in order:
        achieved = hit_fraction()
        if achieved >= target or stamps >= budget:
            break
        e = elements[int(idx)]
        x0, y0, x1, y1 = e.box.cells()
        if mask.support[max(y0, 0):min(y1, height), max(x0, 0):min(x1, width)].any():
            continue  # already hit incidentally
        center = ((e.box.x0 + e.box.x1) / 2.0, (e.box.y0 + e.box.y1) / 2.0)
        stamp = _radial_mask(width, height, center, radius)
        mask.support |= stamp
        mask.alpha[stamp] = alpha
        mask.poses.append(center)
        stamps += 1
    achieved = hit_fraction()
    mask.fill = 0
    mask.meta.update(target=target, achieved=achieved,
                     shortfall=achieved < target, stamps=stamps)
    return mask


# ---------------------------------------------------------------------------
# Image / mask I/O (lossless PNG)
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img)


def save_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(path, format="PNG")


def save_mask(mask: ProbeMask, path: str | Path) -> None:
    Image.fromarray(mask.support).convert("1").save(path, format="PNG")


def load_mask(path: str | Path) -> ProbeMask:
    support = np.asarray(Image.open(path).convert("1"), dtype=bool)
    alpha = np.zeros(support.shape, dtype=np.float32)
    alpha[support] = 1.0
    return ProbeMask(support=support, alpha=alpha)
