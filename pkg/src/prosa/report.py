"""Delimited stats tables, JSON verdicts, and summary figures.

The CSV/JSON outputs are the canonical interface; the figures are
rendered alongside them for quick inspection of a campaign.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .stats import (  # noqa: E402
    AGGREGATE_VARIABLES,
    aggregate_by,
    dose_response,
    faithfulness,
    ols_r2,
    policy_summary,
)

FAITHFULNESS_VARIABLES = ("TOR", "ACR", "BPO", "BOC", "EIR",
                          "B_SLR", "B_SLR_iou_only", "SLR_miss", "SLR_topo")


def _fmt(v):
    return "" if v is None else v


def write_stats_outputs(records: list[dict], outdir: str | Path) -> dict:
    """Write aggregate tables and a verdict JSON; returns the verdict dict."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    aggs = aggregate_by(records)
    with open(outdir / "config_aggregates.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("config_id", "n") + AGGREGATE_VARIABLES)
        for a in aggs:
            writer.writerow([a.config_id, a.n] + [_fmt(a.means.get(v))
                                                  for v in AGGREGATE_VARIABLES])

    verdicts: dict = {"n_records": len(records), "n_configs": len(aggs)}
    faith_rows = []
    for var in FAITHFULNESS_VARIABLES:
        try:
            fit = faithfulness(records, var)
        except ValueError:
            continue
        faith_rows.append((var, fit.r2, fit.slope, fit.intercept, fit.n, fit.degenerate))
    with open(outdir / "faithfulness.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variable", "r2", "slope", "intercept", "n_configs", "degenerate"))
        writer.writerows(faith_rows)
    verdicts["faithfulness_r2"] = {row[0]: row[1] for row in faith_rows}

    try:
        dr = dose_response(records)
        with open(outdir / "dose_response.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("bin", "edge_lo", "edge_hi", "count", "mean_response"))
            for k, (count, mean) in enumerate(zip(dr.bin_counts, dr.bin_means)):
                writer.writerow((k, dr.edges[k], dr.edges[k + 1], count, mean))
        verdicts["dose_response"] = {"verdict": dr.verdict,
                                     "bin_means": dr.bin_means,
                                     "merged_edges": dr.merged_edges}
    except ValueError:
        pass

    if records and "policy" in records[0]:
        summaries, consistency = policy_summary(records)
        with open(outdir / "policy_summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("policy", "n", "TOR", "BPO", "BOC", "EIR",
                             "CER", "delta_mAP", "B_SLR", "SLR_miss", "SLR_topo",
                             "TopoShare", "EffB_config_means", "EffC_config_means",
                             "EffB_per_image", "EffC_per_image"))
            for s in summaries:
                m = s.means
                writer.writerow((s.policy, s.n, _fmt(m.get("TOR")), _fmt(m.get("BPO")),
                                 _fmt(m.get("BOC")), _fmt(m.get("EIR")),
                                 _fmt(m.get("CER_matched_mean")), _fmt(m.get("delta_mAP")),
                                 _fmt(m.get("B_SLR")), _fmt(m.get("SLR_miss")),
                                 _fmt(m.get("SLR_topo")), _fmt(s.topo_share),
                                 _fmt(s.eff_b), _fmt(s.eff_c),
                                 _fmt(s.eff_b_per_image), _fmt(s.eff_c_per_image)))
        verdicts["rank_consistency"] = consistency

    (outdir / "verdicts.json").write_text(json.dumps(verdicts, indent=2),
                                          encoding="utf-8")
    return verdicts


def _config_mean_scatter(ax, records, x_var, y_var):
    aggs = aggregate_by(records, variables=(x_var, y_var))
    xs = [a.means[x_var] for a in aggs if a.means[x_var] is not None
          and a.means[y_var] is not None]
    ys = [a.means[y_var] for a in aggs if a.means[x_var] is not None
          and a.means[y_var] is not None]
    ax.scatter(xs, ys, s=24)
    if len(xs) >= 2:
        fit = ols_r2(xs, ys)
        lo, hi = min(xs), max(xs)
        ax.plot([lo, hi], [fit.slope * lo + fit.intercept,
                           fit.slope * hi + fit.intercept], lw=1, color="tab:red")
        ax.set_title(f"{x_var} vs {y_var}  (R² = {fit.r2:.3f}, n = {fit.n})")
    else:
        ax.set_title(f"{x_var} vs {y_var}")
    ax.set_xlabel(f"mean {x_var} per config")
    ax.set_ylabel(f"mean {y_var} per config")


def render_figures(records: list[dict], outdir: str | Path) -> list[Path]:
    """Render the campaign summary figures as PNG files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    for x_var, name in (("TOR", "tor_vs_cer"), ("B_SLR", "bslr_vs_cer")):
        fig, ax = plt.subplots(figsize=(5, 4))
        _config_mean_scatter(ax, records, x_var, "CER_matched_mean")
        fig.tight_layout()
        path = outdir / f"{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    aggs = aggregate_by(records)
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(aggs)), 4))
    labels = [a.config_id for a in aggs]
    miss = [a.means.get("SLR_miss") or 0.0 for a in aggs]
    topo = [a.means.get("SLR_topo") or 0.0 for a in aggs]
    ax.bar(labels, miss, label="occlusion loss")
    ax.bar(labels, topo, bottom=miss, label="topology loss")
    ax.set_ylabel("mean structural loss")
    ax.legend()
    ax.tick_params(axis="x", rotation=90, labelsize=6)
    fig.tight_layout()
    path = outdir / "pathway_decomposition.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    try:
        dr = dose_response(records)
        fig, ax = plt.subplots(figsize=(5, 4))
        centers = [(dr.edges[i] + dr.edges[i + 1]) / 2 for i in range(len(dr.bin_means))]
        ax.plot(centers, dr.bin_means, marker="o")
        ax.set_xlabel("EIR bin center")
        ax.set_ylabel("mean B-SLR")
        ax.set_title(f"dose response ({dr.verdict})")
        fig.tight_layout()
        path = outdir / "dose_response.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    except ValueError:
        pass
    return written
