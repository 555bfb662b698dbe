"""Targeting policies: map page context to a probe configuration.

Five families share one action space (the probe catalog), so damage
differences reflect targeting logic alone: seeded uniform sampling, a
boundary/gap rule, two prompted text policies (structure-biased and
neutral context renderings), and an image-only prompted policy. Prompted
policies run against a replayable transcript store by default, so
campaigns are reproducible without network access.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .constants import PROBE_CATALOG, PROBE_IDS, Thresholds
from .document import LayoutElement
from .probes import PageContext, ProbeConfig, clamp_config

POLICY_KINDS = ("random", "rule", "llm-biased", "llm-neutral", "vlm")

# neutral/image prompts use indirection-free placement words
STRATEGY_ALIASES = {"between": "bridge", "edge": "anchor",
                    "inside": "content", "anywhere": "random"}

VLM_LONG_EDGE = 1024
VLM_JPEG_QUALITY = 85
PROMPT_TEMPERATURE = 0.7
MAX_RETRIES = 3


class PolicyError(RuntimeError):
    """A prompted policy failed after all retries; the page is skipped."""


@dataclass(frozen=True)
class PolicyContext:
    """Page-level features computable from the image and clean layout only."""

    width: int
    height: int
    gray_mean: float
    gray_std: float
    edge_density: float
    block_count: int
    category_entropy: float
    area_mean: float
    area_std: float
    gap_count: int
    gap_density: float          # gaps per 1000 px of page height
    nn_spacing: float
    n_columns: int
    boundary_density: float     # anchor-band pixels / page pixels
    blocks: tuple = ()          # (category, (x0, y0, x1, y1)) per element
    gaps: tuple = ()            # Gap entries


def compute_policy_context(image: np.ndarray, elements: list[LayoutElement],
                           ctx: PageContext) -> PolicyContext:
    gray = image if image.ndim == 2 else image.mean(axis=2)
    gray = gray.astype(np.float64)
    gx = np.abs(np.diff(gray, axis=1)) > 30
    gy = np.abs(np.diff(gray, axis=0)) > 30
    edge_density = float((gx.sum() + gy.sum()) / gray.size)

    cats = Counter(e.category for e in elements)
    total = sum(cats.values())
    entropy = -sum((c / total) * math.log(c / total) for c in cats.values()) if total else 0.0
    areas = np.array([e.box.area for e in elements]) if elements else np.zeros(1)

    centers = np.array([((e.box.x0 + e.box.x1) / 2, (e.box.y0 + e.box.y1) / 2)
                        for e in elements])
    if len(elements) >= 2:
        dists = []
        for i in range(len(centers)):
            d = np.hypot(centers[:, 0] - centers[i, 0], centers[:, 1] - centers[i, 1])
            d[i] = np.inf
            dists.append(d.min())
        nn_spacing = float(np.mean(dists))
    else:
        nn_spacing = 0.0
    col_bins = {int(e.box.x0 // 50) for e in elements}
    return PolicyContext(
        width=ctx.width, height=ctx.height,
        gray_mean=float(gray.mean()), gray_std=float(gray.std()),
        edge_density=edge_density,
        block_count=len(elements),
        category_entropy=entropy,
        area_mean=float(areas.mean()), area_std=float(areas.std()),
        gap_count=len(ctx.gaps),
        gap_density=len(ctx.gaps) / (ctx.height / 1000.0),
        nn_spacing=nn_spacing,
        n_columns=max(len(col_bins), 1),
        boundary_density=float(ctx.anchor_mask.sum()) / (ctx.width * ctx.height),
        blocks=tuple((e.category, (e.box.x0, e.box.y0, e.box.x1, e.box.y1))
                     for e in elements),
        gaps=tuple(ctx.gaps),
    )


@dataclass
class PolicyDecision:
    config: ProbeConfig
    policy: str
    fallbacks: list[str] = field(default_factory=list)
    raw_response: str | None = None


# ---------------------------------------------------------------------------
# Deterministic policies
# ---------------------------------------------------------------------------

def policy_random(ctx: PolicyContext, rng: np.random.Generator) -> PolicyDecision:
    """Uniform draw over probe ids, their parameter ranges, and placements."""
    probe_id = PROBE_IDS[int(rng.integers(len(PROBE_IDS)))]
    spec = PROBE_CATALOG[probe_id]
    params = {}
    for name, (lo, hi) in spec.params.items():
        if name == "n":
            params[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            params[name] = float(rng.uniform(lo, hi))
    placement = spec.placements[int(rng.integers(len(spec.placements)))]
    config = ProbeConfig(probe_id, placement, params,
                         seed=int(rng.integers(2 ** 62)))
    config, adjustments = clamp_config(config)
    return PolicyDecision(config, "random", fallbacks=adjustments)


def policy_rule(ctx: PolicyContext, rng: np.random.Generator,
                thresholds: Thresholds = Thresholds()) -> PolicyDecision:
    """Gap/boundary heuristics: separator on gap-dense pages, crease on
    boundary-dense pages, minimal content erasure otherwise."""
    seed = int(rng.integers(2 ** 62))
    if ctx.gap_density > thresholds.rule_gap_density and ctx.gap_count > 0:
        config = ProbeConfig("P5", "bridge", {"w": 2.0, "l_r": 0.5}, seed=seed)
    elif ctx.boundary_density > thresholds.rule_boundary_density:
        probe_id = "P2" if ctx.n_columns >= 2 else "P1"
        config = ProbeConfig(probe_id, "anchor", {"w": 3.0, "l_r": 1.0}, seed=seed)
    else:
        config = ProbeConfig("P4", "content",
                             {"a_area": thresholds.rule_min_area, "beta": 0.6},
                             seed=seed)
    config, adjustments = clamp_config(config)
    return PolicyDecision(config, "rule", fallbacks=adjustments)


# ---------------------------------------------------------------------------
# Context renderings for prompted policies
# ---------------------------------------------------------------------------

def encode_context_biased(ctx: PolicyContext) -> str:
    """Structure-aware rendering: coordinates, every gap, vulnerable regions."""
    lines = [f"Page {ctx.width}x{ctx.height} px, {ctx.block_count} blocks, "
             f"{ctx.n_columns} column(s)."]
    for i, (cat, (x0, y0, x1, y1)) in enumerate(ctx.blocks):
        lines.append(f"Block {i}: {cat} at ({x0:.0f}, {y0:.0f}, {x1:.0f}, {y1:.0f})")
    lines.append(f"Gap entries ({ctx.gap_count}):")
    for g in ctx.gaps:
        lines.append(
            f"  gap between block {g.index_a} and block {g.index_b} ({g.axis}) "
            f"at midpoint ({g.midpoint[0]:.0f}, {g.midpoint[1]:.0f}), "
            f"rect ({g.rect.x0:.0f}, {g.rect.y0:.0f}, {g.rect.x1:.0f}, {g.rect.y1:.0f})")
    lines.append(f"Boundary-band density: {ctx.boundary_density:.4f}")
    lines.append("Candidate vulnerable regions: gap midpoints above and block boundaries.")
    return "\n".join(lines)


def encode_context_neutral(ctx: PolicyContext) -> str:
    """Coordinate-only rendering: block types and boxes, no structural hints."""
    lines = [f"Page {ctx.width}x{ctx.height} px with {ctx.block_count} blocks."]
    for i, (cat, (x0, y0, x1, y1)) in enumerate(ctx.blocks):
        lines.append(f"Block {i}: {cat} at ({x0:.0f}, {y0:.0f}, {x1:.0f}, {y1:.0f})")
    return "\n".join(lines)


def _prompt_template(name: str) -> str:
    return resources.files("prosa.prompts").joinpath(f"{name}.txt").read_text(
        encoding="utf-8")


def encode_vlm_image(image: np.ndarray) -> tuple[bytes, str]:
    """JPEG payload for the image policy: long edge 1024 px, quality 85."""
    img = Image.fromarray(image)
    w, h = img.size
    scale = VLM_LONG_EDGE / max(w, h)
    if scale < 1:
        img = img.resize((max(int(w * scale), 1), max(int(h * scale), 1)),
                         Image.LANCZOS)
    buf = io.BytesIO()
    img.convert("RGB").save(buf, format="JPEG", quality=VLM_JPEG_QUALITY)
    data = buf.getvalue()
    return data, hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Chat/vision client with replayable transcripts
# ---------------------------------------------------------------------------

class ClientError(RuntimeError):
    pass


class TranscriptStore:
    """Content-addressed request/response JSON files; writes serialized."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, payload: dict) -> str | None:
        path = self.directory / f"{self.key(payload)}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, payload: dict, response: str) -> None:
        path = self.directory / f"{self.key(payload)}.json"
        with self._lock:
            path.write_text(
                json.dumps({"request": payload, "response": response},
                           ensure_ascii=False, sort_keys=True),
                encoding="utf-8")


class ReplayClient:
    """Serves responses from a transcript store only (hermetic campaigns)."""

    def __init__(self, store: TranscriptStore):
        self.store = store

    def complete(self, payload: dict, image_bytes: bytes | None = None) -> str:
        response = self.store.get(payload)
        if response is None:
            raise ClientError(f"no transcript for request {self.store.key(payload)[:12]}")
        return response


class HttpChatClient:
    """Minimal chat-completions client; API key comes from the environment."""

    def __init__(self, base_url: str, model: str,
                 api_key_env: str = "PROSA_API_KEY", timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def complete(self, payload: dict, image_bytes: bytes | None = None) -> str:
        import base64

        import requests

        api_key = os.environ.get(self.api_key_env, "")
        content: list | str = payload["prompt"]
        if image_bytes is not None:
            b64 = base64.b64encode(image_bytes).decode("ascii")
            content = [
                {"type": "text", "text": payload["prompt"]},
                {"type": "image_url",
                 "image_url": {"url": f"data:image/jpeg;base64,{b64}"}},
            ]
        body = {
            "model": self.model,
            "temperature": payload.get("temperature", PROMPT_TEMPERATURE),
            "messages": [{"role": "user", "content": content}],
        }
        if payload.get("response_format") == "json_object":
            body["response_format"] = {"type": "json_object"}
        if payload.get("max_tokens"):
            body["max_tokens"] = payload["max_tokens"]
        resp = requests.post(
            f"{self.base_url}/chat/completions", json=body, timeout=self.timeout,
            headers={"Authorization": f"Bearer {api_key}"})
        if resp.status_code != 200:
            raise ClientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()["choices"][0]["message"]["content"]


class RecordingClient:
    """Answers from the store when possible; otherwise asks and records."""

    def __init__(self, inner, store: TranscriptStore):
        self.inner = inner
        self.store = store

    def complete(self, payload: dict, image_bytes: bytes | None = None) -> str:
        cached = self.store.get(payload)
        if cached is not None:
            return cached
        response = self.inner.complete(payload, image_bytes)
        self.store.put(payload, response)
        return response


# ---------------------------------------------------------------------------
# Prompted policies
# ---------------------------------------------------------------------------

def _build_payload(kind: str, ctx: PolicyContext,
                   image: np.ndarray | None) -> tuple[dict, bytes | None]:
    if kind == "llm-biased":
        prompt = _prompt_template("llm_biased").replace(
            "{context}", encode_context_biased(ctx))
        return ({"kind": kind, "prompt": prompt,
                 "temperature": PROMPT_TEMPERATURE,
                 "response_format": "json_object"}, None)
    if kind == "llm-neutral":
        prompt = _prompt_template("llm_neutral").replace(
            "{context}", encode_context_neutral(ctx))
        return ({"kind": kind, "prompt": prompt,
                 "temperature": PROMPT_TEMPERATURE,
                 "response_format": "json_object"}, None)
    if kind == "vlm":
        if image is None:
            raise PolicyError("vlm policy requires the page image")
        jpeg, digest = encode_vlm_image(image)
        prompt = _prompt_template("vlm")
        return ({"kind": kind, "prompt": prompt,
                 "temperature": PROMPT_TEMPERATURE,
                 "max_tokens": 1024,
                 "image_sha256": digest,
                 "image_long_edge": VLM_LONG_EDGE,
                 "jpeg_quality": VLM_JPEG_QUALITY}, jpeg)
    raise ValueError(f"unknown prompted policy kind {kind!r}")


def _parse_response(kind: str, text: str, rng: np.random.Generator) -> PolicyDecision:
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("response is not a JSON object")
    fallbacks: list[str] = []
    probe = str(data.get("probe", ""))
    if probe not in PROBE_CATALOG:
        probe = "P5"
        fallbacks.append("probe_fallback")
    strategy = str(data.get("strategy", "")).strip().casefold()
    strategy = STRATEGY_ALIASES.get(strategy, strategy)
    if strategy not in ("anchor", "content", "random", "bridge"):
        strategy = "random"
        fallbacks.append("strategy_fallback")
    params = data.get("parameters", {})
    if not isinstance(params, dict):
        params = {}
    clean_params = {}
    for key, value in params.items():
        try:
            clean_params[str(key)] = float(value)
        except (TypeError, ValueError):
            continue
    config = ProbeConfig(probe, strategy, clean_params,
                         seed=int(rng.integers(2 ** 62)))
    config, adjustments = clamp_config(config)
    return PolicyDecision(config, kind, fallbacks + adjustments, raw_response=text)


def policy_prompted(kind: str, ctx: PolicyContext, image: np.ndarray | None,
                    client, rng: np.random.Generator,
                    max_retries: int = MAX_RETRIES) -> PolicyDecision:
    """Query the configured client and parse its probe selection.

    Unknown strategies fall back to random placement, unknown probe types
    to P5; after max_retries failed attempts the page is skipped with a
    recorded error.
    """
    payload, image_bytes = _build_payload(kind, ctx, image)
    last_error = None
    for _ in range(max_retries):
        try:
            text = client.complete(payload, image_bytes)
            return _parse_response(kind, text, rng)
        except (ClientError, ValueError, json.JSONDecodeError, KeyError) as exc:
            last_error = exc
    raise PolicyError(f"{kind} policy failed after {max_retries} attempts: {last_error}")


def decide(kind: str, ctx: PolicyContext, image: np.ndarray | None,
           rng: np.random.Generator, client=None,
           thresholds: Thresholds = Thresholds()) -> PolicyDecision:
    """Dispatch one policy family; prompted kinds require a client."""
    if kind == "random":
        return policy_random(ctx, rng)
    if kind == "rule":
        return policy_rule(ctx, rng, thresholds)
    if kind in ("llm-biased", "llm-neutral", "vlm"):
        if client is None:
            raise PolicyError(f"{kind} policy requires a client or transcript store")
        return policy_prompted(kind, ctx, image, client, rng)
    raise ValueError(f"unknown policy kind {kind!r}")
