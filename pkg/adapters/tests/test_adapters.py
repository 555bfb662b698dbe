import json
import subprocess
import sys

import jsonschema
import pytest

from prosa_adapters.common import map_label
from prosa_adapters.mineru import main as mineru_main
from prosa_adapters.ppstructure import main as pp_main

ADAPTERS = [
    ("mineru", mineru_main, "mineru"),
    ("ppstructure", pp_main, "pp"),
]


def _run(main_fn, in_dir, out_dir, native_dir):
    rc = main_fn(["--in", str(in_dir), "--out", str(out_dir),
                  "--backend", f"fixture:{native_dir}"])
    assert rc == 0


# ---------------------------------------------------------------------------
# label mapping
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("raw,expected", [
    ("plain_text", "text"),
    ("figure_caption", "text"),
    ("image", "figure"),
    ("isolate_formula", "equation"),
    ("interline_equation", "equation"),
    ("table", "table"),
    ("title", "title"),
    ("never-seen-before", "text"),
])
def test_map_label(raw, expected):
    assert map_label(raw) == expected


@pytest.mark.parametrize("raw", ["abandon", "header", "footer",
                                 "Page-header", "Page-footer", "seal"])
def test_map_label_non_content(raw):
    assert map_label(raw) is None


# ---------------------------------------------------------------------------
# adapter contract: schema-valid canonical output + manifest
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,main_fn,native_key", ADAPTERS)
def test_adapter_emits_schema_valid_json(name, main_fn, native_key,
                                         sample_batch, schema, tmp_path):
    out_dir = tmp_path / f"{name}_out"
    _run(main_fn, sample_batch["in"], out_dir, sample_batch[native_key])
    outputs = sorted(out_dir.glob("*.json"))
    outputs = [p for p in outputs if p.name != "manifest.json"]
    assert len(outputs) == 3
    for path in outputs:
        data = json.loads(path.read_text())
        jsonschema.validate(data, schema)
        assert data["elements"], "sample pages carry content blocks"
        for element in data["elements"]:
            assert element["category"] in ("text", "title", "table",
                                           "figure", "equation")
            assert "raw_category" in element


@pytest.mark.parametrize("name,main_fn,native_key", ADAPTERS)
def test_adapter_manifest_statuses(name, main_fn, native_key,
                                   sample_batch, tmp_path):
    out_dir = tmp_path / f"{name}_out"
    _run(main_fn, sample_batch["in"], out_dir, sample_batch[native_key])
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["parser"] == name
    assert manifest["version"]
    statuses = {row["image_id"]: row for row in manifest["images"]}
    assert set(statuses) == {"doc_report", "doc_article", "doc_form"}
    assert all(row["status"] == "ok" for row in statuses.values())
    # non-content labels are dropped and counted
    assert statuses["doc_article"]["dropped_non_content"] == 1


def test_mineru_raw_label_mapping(sample_batch, tmp_path):
    out_dir = tmp_path / "mineru_out"
    _run(mineru_main, sample_batch["in"], out_dir, sample_batch["mineru"])
    data = json.loads((out_dir / "doc_report.json").read_text())
    by_raw = {e["raw_category"]: e["category"] for e in data["elements"]}
    assert by_raw["plain_text"] == "text"
    assert by_raw["image"] == "figure"
    assert by_raw["figure_caption"] == "text"


def test_adapter_per_image_failure_continues(sample_batch, tmp_path):
    broken_native = tmp_path / "broken_native"
    broken_native.mkdir()
    for path in sample_batch["mineru"].glob("*.json"):
        broken_native.joinpath(path.name).write_text(path.read_text())
    (broken_native / "doc_form.json").write_text("{not json")
    out_dir = tmp_path / "out"
    _run(mineru_main, sample_batch["in"], out_dir, broken_native)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    statuses = {row["image_id"]: row["status"] for row in manifest["images"]}
    assert statuses["doc_form"] == "failed"
    assert statuses["doc_report"] == "ok" and statuses["doc_article"] == "ok"
    assert not (out_dir / "doc_form.json").exists()


def test_adapter_auto_backend_degrades_gracefully(sample_batch, tmp_path):
    # without the parser stack installed every image fails with a reason
    out_dir = tmp_path / "auto_out"
    rc = mineru_main(["--in", str(sample_batch["in"]), "--out", str(out_dir)])
    assert rc == 0
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert all(row["status"] == "failed" for row in manifest["images"])
    assert all(row["error"] for row in manifest["images"])


def test_adapter_positional_invocation(sample_batch, tmp_path):
    # the campaign runner invokes adapters as `cmd <in> <out>`
    out_dir = tmp_path / "positional_out"
    rc = mineru_main([str(sample_batch["in"]), str(out_dir),
                      "--backend", f"fixture:{sample_batch['mineru']}"])
    assert rc == 0
    assert (out_dir / "doc_report.json").exists()


def test_adapter_console_script(sample_batch, tmp_path):
    out_dir = tmp_path / "script_out"
    proc = subprocess.run(
        ["adapter-ppstructure", "--in", str(sample_batch["in"]),
         "--out", str(out_dir), "--backend", f"fixture:{sample_batch['pp']}"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "3 ok" in proc.stdout


# ---------------------------------------------------------------------------
# round trip through the auditing CLI (external interface only)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,main_fn,native_key", ADAPTERS)
def test_adapter_output_round_trips_through_audit(name, main_fn, native_key,
                                                  sample_batch, tmp_path):
    out_dir = tmp_path / f"{name}_audit"
    _run(main_fn, sample_batch["in"], out_dir, sample_batch[native_key])
    for path in sorted(out_dir.glob("doc_*.json")):
        proc = subprocess.run(
            [sys.executable, "-m", "prosa.cli", "audit",
             "--clean", str(path), "--adv", str(path)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        audit = json.loads(proc.stdout)
        assert audit["b_slr"] == 0.0
        assert audit["terminal"]["CER_matched_mean"] == 0.0
