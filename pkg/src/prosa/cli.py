"""Command-line interface.

Subcommands: synth (build a synthetic pool), campaign (Phase 1 fixed/sweep
matrices), phase2 (policy families), audit (single page), stats / report
(tables, verdicts, figures), retrieval (downstream QA metrics), and
mock-adapter (the subprocess parser contract over a synthetic corpus).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import campaign as camp
from .audit import audit_page, match
from .constants import load_thresholds
from .document import load_annotations, load_parse_output
from .policies import ReplayClient, TranscriptStore
from .probes import load_mask
from .report import render_figures, write_stats_outputs
from .retrieval import evaluate_retrieval, load_qa_file
from .synth import PageSpec, load_page, make_pool, mock_parse
from .terminal import terminal_scores


def _cmd_synth(args) -> int:
    spec = PageSpec(page_id=args.prefix, n_blocks=args.blocks, columns=args.columns,
                    chars_min=args.chars_min, chars_max=args.chars_max)
    ids = make_pool(args.out, args.pages, base_seed=args.seed, spec=spec)
    print(f"wrote {len(ids)} pages to {args.out}")
    return 0


def _write_campaign(result, args) -> None:
    camp.write_records_csv(result.records, args.out, result.columns)
    print(f"{len(result.records)} records -> {args.out}")
    if result.skips or args.skips:
        skips_path = args.skips or f"{args.out}.skips.json"
        camp.write_skips(result.skips, skips_path)
        print(f"{len(result.skips)} skips -> {skips_path}")
    if args.params_log:
        Path(args.params_log).write_text(json.dumps(result.param_log, indent=2),
                                         encoding="utf-8")
    if result.filtered_pages:
        print(f"filtered {len(result.filtered_pages)} pages with fewer than "
              f"{camp.MIN_SPANS} spans")


def _cmd_campaign(args) -> int:
    thresholds = load_thresholds(args.config)
    adapter = camp.make_adapter(args.adapter)
    resume = camp.read_records_csv(args.out) if args.resume and Path(args.out).exists() else None
    result = camp.run_phase1(args.pool, adapter, matrix=args.matrix,
                             base_seed=args.seed, thresholds=thresholds,
                             workers=args.workers, resume_records=resume)
    _write_campaign(result, args)
    return 0


def _cmd_phase2(args) -> int:
    thresholds = load_thresholds(args.config)
    adapter = camp.make_adapter(args.adapter)
    client = None
    if args.transcripts:
        client = ReplayClient(TranscriptStore(args.transcripts))
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    result = camp.run_phase2(args.pool, adapter, policies, client=client,
                             base_seed=args.seed, thresholds=thresholds)
    _write_campaign(result, args)
    return 0


def _cmd_audit(args) -> int:
    clean = load_parse_output(args.clean)
    adv = load_parse_output(args.adv)
    support = load_mask(args.mask).support if args.mask else None
    annotations = load_annotations(args.annotations) if args.annotations else None
    thresholds = load_thresholds(args.config)
    diag = audit_page(clean, adv, support, annotations,
                      thresholds.tau_iou, thresholds.tau_text, thresholds.eta_occ)
    term = terminal_scores(clean, adv, annotations,
                           match(clean, adv, thresholds.tau_iou, thresholds.tau_text))
    out = diag.to_dict()
    out["terminal"] = {"CER_matched_mean": term.cer_matched_mean,
                       "mAP_clean": term.map_clean, "mAP_adv": term.map_adv,
                       "delta_mAP": term.delta_map}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_stats(args) -> int:
    records = camp.read_records_csv(args.records)
    verdicts = write_stats_outputs(records, args.outdir)
    print(json.dumps(verdicts, indent=2))
    return 0


def _cmd_report(args) -> int:
    records = camp.read_records_csv(args.records)
    write_stats_outputs(records, args.outdir)
    figures = render_figures(records, args.outdir)
    print(f"wrote tables and {len(figures)} figures to {args.outdir}")
    return 0


def _cmd_retrieval(args) -> int:
    import csv as _csv

    qas = load_qa_file(args.qa)
    parses = {}
    for qa in qas:
        if qa.page_id not in parses:
            parses[qa.page_id] = load_parse_output(Path(args.parses) / f"{qa.page_id}.json")
    metrics = evaluate_retrieval(qas, parses, k=args.k)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(("label", "n", f"evidence_recall_at{args.k}_pct",
                         "evidence_mrr_at10_pct", f"answer_hit_at{args.k}_pct",
                         "answer_missing_pct"))
        writer.writerow((args.label, metrics.n,
                         100.0 * metrics.recall_at_k_evidence,
                         100.0 * metrics.mrr_at_10_evidence,
                         100.0 * metrics.answer_hit_at_k,
                         100.0 * metrics.answer_missing_rate))
    print(f"retrieval metrics -> {args.out}")
    return 0


def _cmd_mock_adapter(args) -> int:
    from .document import write_parse_output
    from .probes import load_mask as _load_mask

    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for png in sorted(in_dir.glob("*.png")):
        if png.name.endswith(".mask.png") or png.name.endswith(".inject.png"):
            continue
        page_id = png.stem
        mask_path = in_dir / f"{page_id}.mask.png"
        mask = _load_mask(mask_path) if mask_path.exists() else None
        inject_path = in_dir / f"{page_id}.inject.png"
        if mask is not None and inject_path.exists():
            mask.inject_support = _load_mask(inject_path).support
        page = load_page(args.corpus, page_id)
        parse = mock_parse(page, mask)
        write_parse_output(parse, out_dir / f"{page_id}.json")
        count += 1
    print(f"parsed {count} pages")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prosa",
                                     description="Probe-guided structural auditing "
                                                 "for document layout analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic page pool")
    p.add_argument("--out", required=True)
    p.add_argument("--pages", type=int, default=20)
    p.add_argument("--seed", type=int, default=camp.BASE_SEED)
    p.add_argument("--prefix", default="page")
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--columns", type=int, default=2)
    p.add_argument("--chars-min", type=int, default=340)
    p.add_argument("--chars-max", type=int, default=390)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("campaign", help="run the Phase 1 fixed/sweep matrices")
    p.add_argument("--pool", required=True)
    p.add_argument("--adapter", required=True,
                   help="'mock:<pool_dir>' or a shell command taking <in> <out>")
    p.add_argument("--matrix", default="a,nt", help="a | nt | s | all | comma list")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=camp.BASE_SEED)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", default=None, help="thresholds file (json or key=value)")
    p.add_argument("--skips", default=None)
    p.add_argument("--params-log", default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_campaign)

    p = sub.add_parser("phase2", help="run policy families over the pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--policies", default="random,rule")
    p.add_argument("--out", required=True)
    p.add_argument("--transcripts", default=None,
                   help="transcript store for prompted policies (replay)")
    p.add_argument("--seed", type=int, default=camp.BASE_SEED)
    p.add_argument("--config", default=None)
    p.add_argument("--skips", default=None)
    p.add_argument("--params-log", default=None)
    p.set_defaults(func=_cmd_phase2)

    p = sub.add_parser("audit", help="audit one clean/perturbed parse pair")
    p.add_argument("--clean", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("stats", help="aggregate tables and verdicts from records")
    p.add_argument("--records", required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("report", help="stats tables plus summary figures")
    p.add_argument("--records", required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("retrieval", help="downstream QA/retrieval metrics")
    p.add_argument("--qa", required=True)
    p.add_argument("--parses", required=True, help="dir of <page_id>.json parses")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--label", default="condition")
    p.set_defaults(func=_cmd_retrieval)

    p = sub.add_parser("mock-adapter",
                       help="subprocess parser contract over a synthetic corpus")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=_cmd_mock_adapter)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
