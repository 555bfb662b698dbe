"""Campaign orchestration: fixed/targeted/sweep matrices over a page pool.

Phase 1 traverses the fixed configurations (22 standard + 7 interference
targets) and the 13 randomized sweeps; Phase 2 runs the policy families
over the same pool. Each (image, config) attempt yields one flat record
with the fixed column schema; skipped pages are logged with reasons.

Seed discipline: deterministic components derive from the base seed 42
per (image, config). Randomized sweeps use per-image seeds
(image_index + 1) * 10^5 + pair_id; paired sweeps draw their geometry/
appearance/behavior parameters from the shared base-member seed (stream
tag 0) so only placement differs (stream tag 1).
"""

from __future__ import annotations

import csv
import json
import shlex
import subprocess
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audit import AuditSkipped, audit_page, match, page_geometry
from .constants import Thresholds
from .document import (
    AnnotationSet,
    ParseOutput,
    load_annotations,
    load_parse_output,
)
from .policies import PolicyError, compute_policy_context, decide
from .probes import (
    PageContext,
    ProbeConfig,
    ProbeMask,
    ProbeRenderError,
    apply,
    compose_stamps,
    compute_page_context,
    load_image,
    nt_place,
    save_image,
    save_mask,
)
from .synth import MockParserRules, load_page, mock_parse
from .terminal import terminal_scores

BASE_SEED = 42

CAMPAIGN_COLUMNS = (
    "image_id", "config_id", "TOR", "ACR", "BPO", "BOC", "EIR",
    "B_SLR", "B_SLR_iou_only", "SLR_miss", "SLR_topo",
    "CER_matched_mean", "mAP_clean", "mAP_adv", "delta_mAP", "n_orig_spans",
)

MIN_SPANS = 5


# ---------------------------------------------------------------------------
# Configuration matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixEntry:
    config_id: str
    kind: str                      # fixed | nt | sweep
    probe_id: str | None = None
    placement: str | None = None
    params: dict = field(default_factory=dict)
    nt_target: float | None = None
    sweep_ranges: dict = field(default_factory=dict)
    pair_group: str | None = None  # base config id of the placement-pair group
    pair_id: int = 0               # 0 base/unpaired, 1..2 placement variants


def _fixed(cid, probe, placement, **params):
    return MatrixEntry(cid, "fixed", probe, placement, params)


A_SERIES = [
    _fixed("A01", "P1", "anchor", w=1.0, l_r=1.0),
    _fixed("A02", "P1", "anchor", w=8.0, l_r=1.0),
    _fixed("A03", "P2", "anchor", w=1.0, l_r=1.0),
    _fixed("A04", "P2", "anchor", w=8.0, l_r=1.0),
    _fixed("A05", "P3", "anchor", r=60.0, alpha=0.3),
    _fixed("A06", "P3", "anchor", r=60.0, alpha=1.0),
    _fixed("A07", "P4", "content", a_area=0.05, beta=0.3),
    _fixed("A08", "P4", "content", a_area=0.20, beta=1.0),
    _fixed("A09", "P5", "bridge", w=1.0, l_r=0.5),
    _fixed("A10", "P5", "bridge", w=3.0, l_r=0.5),
    _fixed("A11", "P6", "anchor", alpha=0.1, w=5.0),
    _fixed("A12", "P6", "anchor", alpha=0.3, w=5.0),
    _fixed("A13", "P1", "content", w=3.0, l_r=1.0),
    _fixed("A14", "P1", "random", w=3.0, l_r=1.0),
    _fixed("A15", "P3", "content", r=60.0, alpha=0.5),
    _fixed("A16", "P3", "random", r=60.0, alpha=0.5),
    _fixed("A17", "P5", "content", w=2.0, l_r=0.5),
    _fixed("A18", "P5", "random", w=2.0, l_r=0.5),
    _fixed("A19", "P4", "bridge", a_area=0.20, beta=1.0),
    _fixed("A20", "P5", "content", w=3.0, l_r=0.5),
    _fixed("A21", "P3", "anchor", r=60.0, alpha=0.5),
    _fixed("A22", "P1", "anchor", w=3.0, l_r=1.0),
]

NT_SERIES = [
    MatrixEntry(f"NT{i + 1:02d}", "nt", nt_target=t)
    for i, t in enumerate((0.05, 0.10, 0.20, 0.35, 0.50, 0.70, 1.00))
]


def _sweep(cid, probe, placement, ranges, fixed_params=None, group=None, pair_id=0):
    return MatrixEntry(cid, "sweep", probe, placement,
                       params=dict(fixed_params or {}), sweep_ranges=ranges,
                       pair_group=group or cid, pair_id=pair_id)


S_SERIES = [
    _sweep("S01", "P1", "anchor", {"w": (1, 10)}, {"l_r": 0.75}),
    _sweep("S02", "P2", "anchor", {"w": (1, 10)}, {"l_r": 0.75}),
    _sweep("S03", "P3", "anchor", {"r": (30, 90), "alpha": (0.2, 1.0)}),
    _sweep("S04", "P4", "content", {"a_area": (0.03, 0.25), "beta": (0.2, 1.0)}),
    _sweep("S05", "P5", "bridge", {"w": (1, 5), "l_r": (0.2, 0.8)}),
    _sweep("S06", "P6", "anchor", {"alpha": (0.05, 0.4), "w": (2, 10)}),
    _sweep("S07", "P7", "random", {"n": (10, 100), "r": (1, 4)}, {"sigma": 30.0}),
    _sweep("S08", "P8", "anchor", {"r_b": (30, 80), "kappa": (0.1, 0.5)}, {"alpha": 0.5}),
    _sweep("S09", "P9", "anchor", {"theta": (20, 70), "w": (1, 6)}, {"l_r": 1.0}),
    _sweep("S10", "P1", "content", {"w": (1, 10)}, {"l_r": 0.75}, group="S01", pair_id=1),
    _sweep("S11", "P1", "random", {"w": (1, 10)}, {"l_r": 0.75}, group="S01", pair_id=2),
    _sweep("S12", "P3", "content", {"r": (30, 90), "alpha": (0.2, 1.0)}, group="S03", pair_id=1),
    _sweep("S13", "P3", "random", {"r": (30, 90), "alpha": (0.2, 1.0)}, group="S03", pair_id=2),
]

MATRIX = {e.config_id: e for e in A_SERIES + NT_SERIES + S_SERIES}


def decode_config(config_id: str) -> MatrixEntry:
    try:
        return MATRIX[config_id]
    except KeyError:
        raise KeyError(f"unknown config id {config_id!r}") from None


def matrix_ids(selector: str) -> list[str]:
    """Expand a matrix selector: a | nt | s | all, or a comma combination."""
    groups = {"a": [e.config_id for e in A_SERIES],
              "nt": [e.config_id for e in NT_SERIES],
              "s": [e.config_id for e in S_SERIES]}
    out: list[str] = []
    for token in selector.split(","):
        token = token.strip().lower()
        if token == "all":
            for key in ("a", "nt", "s"):
                out.extend(groups[key])
        elif token in groups:
            out.extend(groups[token])
        elif token.upper() in MATRIX:
            out.append(token.upper())
        else:
            raise ValueError(f"unknown matrix selector {token!r}")
    return out


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def sweep_member_seed(image_index: int, pair_id: int) -> int:
    return (image_index + 1) * 100_000 + pair_id


def sample_sweep_params(entry: MatrixEntry, image_index: int) -> dict:
    """Sample the sweep's probe parameters from the pair group's base seed.

    Members of a pair group share the base member's stream (pair_id 0), so
    geometry/appearance/behavior draws are identical and only the
    placement stream differs.
    """
    rng = np.random.default_rng([sweep_member_seed(image_index, 0), 0])
    params = dict(entry.params)
    for name in sorted(entry.sweep_ranges):
        lo, hi = entry.sweep_ranges[name]
        if name == "n":
            params[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            params[name] = float(rng.uniform(lo, hi))
    return params


def materialize(entry: MatrixEntry, image_index: int, config_ordinal: int,
                base_seed: int = BASE_SEED) -> tuple[ProbeConfig, np.random.Generator]:
    """Concrete probe config and its placement/appearance rng for one image."""
    if entry.kind == "sweep":
        params = sample_sweep_params(entry, image_index)
        seed = sweep_member_seed(image_index, entry.pair_id)
    else:
        params = dict(entry.params)
        seed = derived_seed(base_seed, image_index, config_ordinal)
    config = ProbeConfig(entry.probe_id or "P3", entry.placement or "random",
                         params, probe_count=1, seed=seed)
    return config, np.random.default_rng([seed, 1])


# ---------------------------------------------------------------------------
# Parser adapters
# ---------------------------------------------------------------------------

class AdapterFailure(Exception):
    pass


@dataclass
class AdapterItem:
    image_id: str
    image: np.ndarray
    mask: ProbeMask | None = None


class MockAdapter:
    """In-process adapter over a synthetic pool (reads sidecar geometry)."""

    name = "mock"

    def __init__(self, pool_dir: str | Path, rules: MockParserRules = MockParserRules()):
        self.pool_dir = Path(pool_dir)
        self.rules = rules
        self._cache: dict = {}

    def _page(self, image_id: str):
        if image_id not in self._cache:
            self._cache[image_id] = load_page(self.pool_dir, image_id)
        return self._cache[image_id]

    def parse_batch(self, items: list[AdapterItem]) -> dict[str, ParseOutput]:
        out = {}
        for item in items:
            page = self._page(item.image_id)
            out[item.image_id] = mock_parse(page, item.mask, self.rules)
        return out

    def __getstate__(self):
        return {"pool_dir": self.pool_dir, "rules": self.rules}

    def __setstate__(self, state):
        self.pool_dir = state["pool_dir"]
        self.rules = state["rules"]
        self._cache = {}


class SubprocessAdapter:
    """Filesystem exchange: write PNGs, invoke `cmd <in_dir> <out_dir>`,
    read one canonical parse JSON per image. Masks are written alongside
    as `<id>.mask.png`; adapters that only see pixels ignore them."""

    def __init__(self, cmd: str):
        self.cmd = cmd
        self.name = cmd.split()[0] if cmd else "adapter"

    def parse_batch(self, items: list[AdapterItem]) -> dict[str, ParseOutput]:
        out: dict[str, ParseOutput] = {}
        with tempfile.TemporaryDirectory(prefix="prosa_xchg_") as tmp:
            in_dir = Path(tmp) / "in"
            out_dir = Path(tmp) / "out"
            in_dir.mkdir()
            out_dir.mkdir()
            for item in items:
                save_image(item.image, in_dir / f"{item.image_id}.png")
                if item.mask is not None:
                    save_mask(item.mask, in_dir / f"{item.image_id}.mask.png")
                    if item.mask.inject_support is not None and item.mask.inject_support.any():
                        save_mask(ProbeMask(item.mask.inject_support,
                                            item.mask.alpha),
                                  in_dir / f"{item.image_id}.inject.png")
            proc = subprocess.run(
                shlex.split(self.cmd) + [str(in_dir), str(out_dir)],
                capture_output=True, text=True)
            if proc.returncode != 0:
                raise AdapterFailure(
                    f"adapter exited {proc.returncode}: {proc.stderr[-500:]}")
            for item in items:
                path = out_dir / f"{item.image_id}.json"
                if not path.exists():
                    raise AdapterFailure(f"adapter produced no output for {item.image_id}")
                out[item.image_id] = load_parse_output(path)
        return out


def make_adapter(spec: str):
    """Adapter factory for CLI values: 'mock:<pool_dir>' or a shell command."""
    if spec.startswith("mock:"):
        return MockAdapter(spec.split(":", 1)[1])
    return SubprocessAdapter(spec)


# ---------------------------------------------------------------------------
# Pool handling
# ---------------------------------------------------------------------------

@dataclass
class PoolPage:
    page_id: str
    image_path: Path
    annotations: AnnotationSet

    def image(self) -> np.ndarray:
        return load_image(self.image_path)


def load_pool(pool_dir: str | Path) -> list[PoolPage]:
    pool_dir = Path(pool_dir)
    pages = []
    for ann_path in sorted(pool_dir.glob("*.annotations.json")):
        page_id = ann_path.name[: -len(".annotations.json")]
        image_path = pool_dir / f"{page_id}.png"
        if not image_path.exists():
            continue
        pages.append(PoolPage(page_id, image_path, load_annotations(ann_path)))
    return pages


# ---------------------------------------------------------------------------
# Record assembly
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    return str(value)


def make_record(image_id: str, config_id: str, diag, term, n_spans: int) -> dict:
    d = diag.descriptors
    return {
        "image_id": image_id, "config_id": config_id,
        "TOR": d.tor, "ACR": d.acr, "BPO": d.bpo, "BOC": d.boc, "EIR": d.eir,
        "B_SLR": diag.b_slr, "B_SLR_iou_only": diag.b_slr_iou_only,
        "SLR_miss": diag.slr_miss, "SLR_topo": diag.slr_topo,
        "CER_matched_mean": term.cer_matched_mean,
        "mAP_clean": term.map_clean, "mAP_adv": term.map_adv,
        "delta_mAP": term.delta_map, "n_orig_spans": n_spans,
    }


@dataclass
class CampaignResult:
    records: list[dict]
    skips: list[dict]
    param_log: list[dict]
    filtered_pages: list[str]
    columns: tuple = CAMPAIGN_COLUMNS


def write_records_csv(records: list[dict], path: str | Path,
                      columns=CAMPAIGN_COLUMNS) -> None:
    records = sorted(records, key=lambda r: (str(r["config_id"]), str(r["image_id"]))
                     if "policy" not in r else
                     (str(r.get("policy")), str(r["config_id"]), str(r["image_id"])))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def read_records_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row: dict = {}
            for key, value in raw.items():
                if key in ("image_id", "config_id", "policy"):
                    row[key] = value
                elif value == "" or value is None:
                    row[key] = None
                elif key == "n_orig_spans":
                    row[key] = int(value)
                else:
                    row[key] = float(value)
            rows.append(row)
        return rows


def write_skips(skips: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(skips, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

def _clean_parses(pages: list[PoolPage], adapter,
                  cache_dir: str | Path | None = None) -> dict[str, ParseOutput]:
    """Parse unperturbed pages once, content-addressed on the image bytes."""
    import hashlib

    out: dict[str, ParseOutput] = {}
    todo: list[AdapterItem] = []
    hashes: dict[str, str] = {}
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    for page in pages:
        if cache:
            digest = hashlib.sha256(page.image_path.read_bytes()).hexdigest()
            hashes[page.page_id] = digest
            cached = cache / f"{digest}.json"
            if cached.exists():
                out[page.page_id] = load_parse_output(cached)
                continue
        todo.append(AdapterItem(page.page_id, page.image(), None))
    if todo:
        parsed = adapter.parse_batch(todo)
        out.update(parsed)
        if cache:
            from .document import write_parse_output

            for page_id, parse in parsed.items():
                write_parse_output(parse, cache / f"{hashes[page_id]}.json")
    return out


def _perturb(entry: MatrixEntry, config: ProbeConfig, rng, image: np.ndarray,
             ctx: PageContext, clean: ParseOutput,
             thresholds: Thresholds) -> tuple[np.ndarray, ProbeMask]:
    if entry.kind == "nt":
        mask = nt_place(entry.nt_target, list(clean.elements),
                        ctx.width, ctx.height, rng,
                        radius=thresholds.nt_stamp_radius,
                        alpha=thresholds.nt_stamp_alpha,
                        budget=thresholds.nt_stamp_budget)
        return compose_stamps(image, mask), mask
    return apply(config, image, ctx, rng, area_budget=thresholds.area_budget)


def _phase1_pages(pool_dir: str | Path, adapter, page_ids: list[str],
                  index_of: dict[str, int], config_ids: list[str],
                  base_seed: int, thresholds: Thresholds,
                  audit_sink=None) -> CampaignResult:
    pages = [p for p in load_pool(pool_dir) if p.page_id in set(page_ids)]
    clean = _clean_parses(pages, adapter)
    records, skips, param_log = [], [], []
    for page in pages:
        image_index = index_of[page.page_id]
        parse = clean[page.page_id]
        ctx = compute_page_context(list(parse.elements), int(parse.page_width),
                                   int(parse.page_height), thresholds.delta_px)
        geometry = page_geometry(parse, page.annotations, thresholds.delta_px)
        image = page.image()
        for ordinal, cid in enumerate(config_ids):
            entry = decode_config(cid)
            try:
                config, rng = materialize(entry, image_index, ordinal, base_seed)
                perturbed, mask = _perturb(entry, config, rng, image, ctx,
                                           parse, thresholds)
                adv = adapter.parse_batch(
                    [AdapterItem(page.page_id, perturbed, mask)])[page.page_id]
                diag = audit_page(parse, adv, mask.support, page.annotations,
                                  thresholds.tau_iou, thresholds.tau_text,
                                  thresholds.eta_occ, geometry=geometry,
                                  index=mask.index())
                term = terminal_scores(parse, adv, page.annotations,
                                       match(parse, adv, thresholds.tau_iou,
                                             thresholds.tau_text))
                records.append(make_record(page.page_id, cid, diag, term, len(parse)))
                if audit_sink is not None:
                    audit_sink(page.page_id, cid, diag)
                entry_log = {"config_id": cid, "image_id": page.page_id,
                             "params": dict(config.params),
                             "placement": config.placement, "seed": config.seed}
                if entry.kind == "nt":
                    entry_log["nt"] = dict(mask.meta)
                param_log.append(entry_log)
            except (AuditSkipped, ProbeRenderError, AdapterFailure, PolicyError) as exc:
                skips.append({"image_id": page.page_id, "config_id": cid,
                              "reason": f"{type(exc).__name__}: {exc}"})
    return CampaignResult(records, skips, param_log, [])


def run_phase1(pool_dir: str | Path, adapter, matrix: str = "a,nt",
               base_seed: int = BASE_SEED,
               thresholds: Thresholds = Thresholds(),
               workers: int = 1,
               resume_records: list[dict] | None = None,
               audit_sink=None) -> CampaignResult:
    """Fixed-configuration audit of every pool page under every config.

    `audit_sink(image_id, config_id, diagnostic)` receives every per-page
    diagnostic (serial execution only).
    """
    config_ids = matrix_ids(matrix) if isinstance(matrix, str) else list(matrix)
    pool = load_pool(pool_dir)
    eligible = [p for p in pool if len(p.annotations) >= MIN_SPANS]
    filtered = [p.page_id for p in pool if len(p.annotations) < MIN_SPANS]
    page_ids = sorted(p.page_id for p in eligible)
    index_of = {pid: i for i, pid in enumerate(page_ids)}

    done = set()
    if resume_records:
        done = {(r["config_id"], r["image_id"]) for r in resume_records}
        page_work = [pid for pid in page_ids
                     if any((cid, pid) not in done for cid in config_ids)]
    else:
        page_work = page_ids

    results: list[CampaignResult] = []
    if workers > 1 and len(page_work) > 1 and audit_sink is None:
        chunks = [list(page_work[i::workers]) for i in range(workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool_exec:
            futures = [pool_exec.submit(_phase1_pages, str(pool_dir), adapter, c,
                                        index_of, config_ids, base_seed, thresholds)
                       for c in chunks]
            results = [f.result() for f in futures]
    elif page_work:
        results = [_phase1_pages(pool_dir, adapter, page_work, index_of,
                                 config_ids, base_seed, thresholds, audit_sink)]

    records = list(resume_records or [])
    skips, param_log = [], []
    for res in results:
        for r in res.records:
            if (r["config_id"], r["image_id"]) not in done:
                records.append(r)
        skips.extend(res.skips)
        param_log.extend(res.param_log)
    return CampaignResult(records, skips, param_log, filtered)


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

PHASE2_COLUMNS = CAMPAIGN_COLUMNS + ("policy",)


def run_phase2(pool_dir: str | Path, adapter, policies: list[str],
               client=None, base_seed: int = BASE_SEED,
               thresholds: Thresholds = Thresholds()) -> CampaignResult:
    """Policy-driven audit: per page per policy, same record schema + policy."""
    pool = load_pool(pool_dir)
    eligible = sorted((p for p in pool if len(p.annotations) >= MIN_SPANS),
                      key=lambda p: p.page_id)
    filtered = [p.page_id for p in pool if len(p.annotations) < MIN_SPANS]
    clean = _clean_parses(eligible, adapter)
    records, skips, param_log = [], [], []
    for image_index, page in enumerate(eligible):
        parse = clean[page.page_id]
        ctx = compute_page_context(list(parse.elements), int(parse.page_width),
                                   int(parse.page_height), thresholds.delta_px)
        geometry = page_geometry(parse, page.annotations, thresholds.delta_px)
        image = page.image()
        policy_ctx = compute_policy_context(image, list(parse.elements), ctx)
        for policy_index, kind in enumerate(policies):
            rng = np.random.default_rng([base_seed, image_index, policy_index])
            try:
                decision = decide(kind, policy_ctx, image, rng, client, thresholds)
                perturbed, mask = apply(decision.config, image, ctx, rng,
                                        area_budget=thresholds.area_budget)
                adv = adapter.parse_batch(
                    [AdapterItem(page.page_id, perturbed, mask)])[page.page_id]
                diag = audit_page(parse, adv, mask.support, page.annotations,
                                  thresholds.tau_iou, thresholds.tau_text,
                                  thresholds.eta_occ, geometry=geometry,
                                  index=mask.index())
                term = terminal_scores(parse, adv, page.annotations,
                                       match(parse, adv, thresholds.tau_iou,
                                             thresholds.tau_text))
                row = make_record(page.page_id, decision.config.probe_id, diag,
                                  term, len(parse))
                row["config_id"] = f"{decision.config.probe_id}.{decision.config.placement[0]}"
                row["policy"] = kind
                records.append(row)
                param_log.append({"policy": kind, "image_id": page.page_id,
                                  "config": row["config_id"],
                                  "params": dict(decision.config.params),
                                  "fallbacks": decision.fallbacks})
            except (AuditSkipped, ProbeRenderError, AdapterFailure, PolicyError) as exc:
                skips.append({"image_id": page.page_id, "policy": kind,
                              "config_id": "", "reason": f"{type(exc).__name__}: {exc}"})
    return CampaignResult(records, skips, param_log, filtered,
                          columns=PHASE2_COLUMNS)
