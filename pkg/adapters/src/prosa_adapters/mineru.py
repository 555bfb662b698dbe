"""MinerU adapter: wraps the pinned MinerU v2.7.6 CLI.

The auto backend shells out to the `mineru` executable per image and
converts its content-list JSON. A fixture backend consumes pre-recorded
content-list files instead, so the conversion and manifest contracts are
testable without the model stack. Content-list blocks are expected as
objects with `type`, `bbox` [x0, y0, x1, y1], and `text` fields; block-
level entries are emitted one element each, in list order.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

from .common import build_arg_parser, resolve_dirs, run_adapter

PARSER_NAME = "mineru"
PINNED_VERSION = "2.7.6"
MODELS = {"layout": "doclayout-yolo"}


class BackendUnavailable(RuntimeError):
    pass


def _blocks_from_content_list(content: list) -> list[dict]:
    blocks = []
    for item in content:
        if not isinstance(item, dict) or "bbox" not in item:
            continue
        text = item.get("text") or item.get("table_body") or ""
        if isinstance(text, list):
            text = " ".join(str(t) for t in text)
        blocks.append({"label": str(item.get("type", "")),
                       "bbox": item["bbox"], "text": str(text)})
    return blocks


def _parse_with_cli(image_path: Path) -> list[dict]:
    exe = shutil.which("mineru")
    if exe is None:
        raise BackendUnavailable(
            "mineru executable not found; install MinerU v2.7.6 or use "
            "--backend fixture:<dir>")
    with tempfile.TemporaryDirectory(prefix="mineru_") as tmp:
        proc = subprocess.run(
            [exe, "-p", str(image_path), "-o", tmp],
            capture_output=True, text=True, timeout=600)
        if proc.returncode != 0:
            raise RuntimeError(f"mineru exited {proc.returncode}: "
                               f"{proc.stderr[-300:]}")
        matches = list(Path(tmp).rglob("*_content_list.json"))
        if not matches:
            raise RuntimeError("mineru produced no content-list output")
        content = json.loads(matches[0].read_text(encoding="utf-8"))
    return _blocks_from_content_list(content)


def _parse_from_fixture(fixture_dir: Path):
    def parse(image_path: Path) -> list[dict]:
        native = fixture_dir / f"{image_path.stem}.json"
        content = json.loads(native.read_text(encoding="utf-8"))
        return _blocks_from_content_list(content)
    return parse


def main(argv=None) -> int:
    args = build_arg_parser("adapter-mineru").parse_args(argv)
    in_dir, out_dir = resolve_dirs(args)
    if args.backend.startswith("fixture:"):
        parse = _parse_from_fixture(Path(args.backend.split(":", 1)[1]))
        backend = "fixture"
    else:
        parse = _parse_with_cli
        backend = "cli"
    manifest = run_adapter(PARSER_NAME, PINNED_VERSION,
                           dict(MODELS, backend=backend),
                           parse, in_dir, out_dir, args.manifest)
    failed = sum(1 for s in manifest.images if s.status == "failed")
    print(f"{PARSER_NAME}: {len(manifest.images) - failed} ok, {failed} failed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
