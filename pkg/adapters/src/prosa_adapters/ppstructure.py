"""PP-StructureV3 adapter: wraps the PaddleOCR structure pipeline.

The auto backend imports PaddleOCR lazily and runs the pipeline in
process; the fixture backend consumes pre-recorded native result files.
Native results are lists of regions: objects with `type`, `bbox`
[x0, y0, x1, y1], and a `res` payload whose `text` entries (or plain
string) form the recognized content.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .common import build_arg_parser, resolve_dirs, run_adapter

PARSER_NAME = "ppstructure"
PINNED_VERSION = "v3"
MODELS = {"layout": "rt-detr-h", "ocr": "paddleocr-3.x"}


class BackendUnavailable(RuntimeError):
    pass


def _region_text(res) -> str:
    if res is None:
        return ""
    if isinstance(res, str):
        return res
    if isinstance(res, dict):
        if "text" in res:
            return str(res["text"])
        if "html" in res:
            return str(res["html"])
        return ""
    if isinstance(res, list):
        return " ".join(_region_text(r) for r in res if r)
    return ""


def _blocks_from_regions(regions: list) -> list[dict]:
    blocks = []
    for region in regions:
        if not isinstance(region, dict) or "bbox" not in region:
            continue
        blocks.append({"label": str(region.get("type", "")),
                       "bbox": region["bbox"],
                       "text": _region_text(region.get("res"))})
    return blocks


def _parse_with_pipeline(image_path: Path) -> list[dict]:
    try:
        from paddleocr import PPStructureV3  # type: ignore
    except ImportError as exc:
        raise BackendUnavailable(
            "paddleocr with PP-StructureV3 is not installed; use "
            "--backend fixture:<dir>") from exc
    pipeline = _parse_with_pipeline._pipeline  # cached across images
    if pipeline is None:
        pipeline = PPStructureV3()
        _parse_with_pipeline._pipeline = pipeline
    regions = []
    for result in pipeline.predict(str(image_path)):
        data = result if isinstance(result, dict) else getattr(result, "json", {})
        for region in data.get("res", data.get("parsing_res_list", [])) or []:
            regions.append(region)
    return _blocks_from_regions(regions)


_parse_with_pipeline._pipeline = None


def _parse_from_fixture(fixture_dir: Path):
    def parse(image_path: Path) -> list[dict]:
        native = fixture_dir / f"{image_path.stem}.json"
        regions = json.loads(native.read_text(encoding="utf-8"))
        return _blocks_from_regions(regions)
    return parse


def main(argv=None) -> int:
    args = build_arg_parser("adapter-ppstructure").parse_args(argv)
    in_dir, out_dir = resolve_dirs(args)
    if args.backend.startswith("fixture:"):
        parse = _parse_from_fixture(Path(args.backend.split(":", 1)[1]))
        backend = "fixture"
    else:
        parse = _parse_with_pipeline
        backend = "pipeline"
    manifest = run_adapter(PARSER_NAME, PINNED_VERSION,
                           dict(MODELS, backend=backend),
                           parse, in_dir, out_dir, args.manifest)
    failed = sum(1 for s in manifest.images if s.status == "failed")
    print(f"{PARSER_NAME}: {len(manifest.images) - failed} ok, {failed} failed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
