"""Shared adapter machinery: label mapping, canonical JSON, manifest.

Adapters are deliberately standalone: they emit the documented canonical
parse-output JSON files and never import the auditing package. Raw parser
labels are preserved in a `raw_category` field next to the mapped
canonical category; non-content labels are dropped (and counted).
"""

from __future__ import annotations

import argparse
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

CANONICAL = ("text", "title", "table", "figure", "equation")

NON_CONTENT = {s.casefold() for s in
               ("Page-header", "Page-footer", "header", "footer", "abandon", "seal")}

# raw parser label -> canonical category (unknown labels default to text)
PARSER_LABEL_MAP = {
    "figure_caption": "text", "table_caption": "text", "reference": "text",
    "list": "text", "plain_text": "text", "table_footnote": "text",
    "formula_caption": "text", "index": "text", "normal_text": "text",
    "image": "figure", "picture": "figure",
    "formula": "equation", "isolate_formula": "equation",
    "embedding": "equation", "isolated": "equation",
    "interline_equation": "equation", "inline_equation": "equation",
}


def map_label(raw: str) -> str | None:
    """Canonical category for a raw parser label; None for non-content."""
    key = raw.strip().casefold()
    if key in NON_CONTENT:
        return None
    if key in PARSER_LABEL_MAP:
        return PARSER_LABEL_MAP[key]
    if key in CANONICAL:
        return key
    return "text"


@dataclass
class ImageStatus:
    image_id: str
    status: str                  # ok | failed
    n_elements: int = 0
    dropped_non_content: int = 0
    error: str = ""


@dataclass
class AdapterManifest:
    parser: str
    version: str
    models: dict = field(default_factory=dict)
    input_dir: str = ""
    output_dir: str = ""
    images: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "parser": self.parser,
            "version": self.version,
            "models": self.models,
            "input_dir": self.input_dir,
            "output_dir": self.output_dir,
            "images": [vars(s) for s in self.images],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2),
                              encoding="utf-8")


def image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size


def list_input_images(in_dir: Path) -> list[Path]:
    out = []
    for pattern in ("*.png", "*.jpg", "*.jpeg"):
        out.extend(in_dir.glob(pattern))
    # auxiliary rasters written by the campaign runner are not pages
    return sorted(p for p in out
                  if not p.name.endswith(".mask.png")
                  and not p.name.endswith(".inject.png"))


def write_canonical(page_id: str, width: float, height: float,
                    elements: list[dict], path: Path) -> None:
    """Write one canonical parse-output file.

    `elements` entries carry bbox [x0, y0, x1, y1], a canonical category,
    the raw label, and the recognized text.
    """
    payload = {"page_id": page_id, "width": width, "height": height,
               "elements": elements}
    path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def convert_blocks(raw_blocks: list[dict], width: float, height: float):
    """Map raw (label, bbox, text) blocks into canonical element dicts."""
    elements = []
    dropped = 0
    for block in raw_blocks:
        raw_label = str(block.get("label", ""))
        category = map_label(raw_label)
        if category is None:
            dropped += 1
            continue
        x0, y0, x1, y1 = (float(v) for v in block["bbox"])
        x0, x1 = sorted((min(max(x0, 0.0), width), min(max(x1, 0.0), width)))
        y0, y1 = sorted((min(max(y0, 0.0), height), min(max(y1, 0.0), height)))
        elements.append({
            "bbox": [x0, y0, x1, y1],
            "category": category,
            "raw_category": raw_label,
            "text": str(block.get("text", "") or ""),
        })
    return elements, dropped


def run_adapter(parser_name: str, version: str, models: dict,
                parse_image, in_dir: str | Path, out_dir: str | Path,
                manifest_path: str | Path | None = None) -> AdapterManifest:
    """Drive one batch: parse every input image, convert, write, record.

    `parse_image(path)` returns raw blocks [{label, bbox, text}, ...]; any
    exception marks that image failed and the batch continues.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = AdapterManifest(parser_name, version, models,
                               str(in_dir), str(out_dir))
    for image_path in list_input_images(in_dir):
        page_id = image_path.stem
        try:
            width, height = image_size(image_path)
            raw_blocks = parse_image(image_path)
            elements, dropped = convert_blocks(raw_blocks, width, height)
            write_canonical(page_id, width, height, elements,
                            out_dir / f"{page_id}.json")
            manifest.images.append(ImageStatus(page_id, "ok", len(elements),
                                               dropped))
        except Exception as exc:  # per-image isolation: batch continues
            manifest.images.append(ImageStatus(
                page_id, "failed",
                error=f"{type(exc).__name__}: {exc}"[:500]))
            traceback.print_exc()
    manifest.write(Path(manifest_path) if manifest_path
                   else out_dir / "manifest.json")
    return manifest


def build_arg_parser(prog: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog)
    parser.add_argument("in_pos", nargs="?", default=None,
                        help="input image directory (positional form)")
    parser.add_argument("out_pos", nargs="?", default=None,
                        help="output directory (positional form)")
    parser.add_argument("--in", dest="in_dir", default=None)
    parser.add_argument("--out", dest="out_dir", default=None)
    parser.add_argument("--backend", default="auto",
                        help="'auto' or 'fixture:<dir>' of native outputs")
    parser.add_argument("--manifest", default=None)
    return parser


def resolve_dirs(args) -> tuple[Path, Path]:
    in_dir = args.in_dir or args.in_pos
    out_dir = args.out_dir or args.out_pos
    if not in_dir or not out_dir:
        raise SystemExit("input and output directories are required")
    return Path(in_dir), Path(out_dir)
