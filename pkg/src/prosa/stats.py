"""Statistical verification layers over campaign records.

Records are flat dicts (one per image x config attempt). The layers:
configuration-level aggregation, univariate OLS R^2, Spearman rank
correlation, image fixed effects on de-meaned residuals, dose-response
binning, within-configuration quartiles, faithfulness against mean CER,
and the policy-audit summaries (TopoShare and per-footprint efficiency).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r2: float
    n: int
    degenerate: bool = False


def ols_r2(x, y) -> RegressionResult:
    """Univariate least-squares fit with intercept; r2 = 1 - SSres/SStot.

    A zero-variance response is flagged degenerate with r2 = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("ols_r2 requires two equal-length series of length >= 2")
    n = x.size
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    var_x = float(np.sum((x - x.mean()) ** 2))
    if ss_tot == 0.0:
        return RegressionResult(0.0, float(y.mean()), 0.0, n, degenerate=True)
    if var_x == 0.0:
        return RegressionResult(0.0, float(y.mean()), 0.0, n, degenerate=True)
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / var_x)
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    return RegressionResult(slope, intercept, 1.0 - ss_res / ss_tot, n)


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); ties share the mean of their rank span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    n: int
    degenerate: bool = False

    def __float__(self) -> float:
        return self.rho


def spearman(x, y) -> SpearmanResult:
    """Pearson correlation of average ranks; degenerate series give rho 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman requires two equal-length series of length >= 2")
    rx, ry = _ranks(x), _ranks(y)
    sx = float(np.sum((rx - rx.mean()) ** 2))
    sy = float(np.sum((ry - ry.mean()) ** 2))
    if sx == 0.0 or sy == 0.0:
        return SpearmanResult(0.0, x.size, degenerate=True)
    cov = float(np.sum((rx - rx.mean()) * (ry - ry.mean())))
    return SpearmanResult(cov / np.sqrt(sx * sy), x.size)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

AGGREGATE_VARIABLES = ("TOR", "ACR", "BPO", "BOC", "EIR", "B_SLR",
                       "B_SLR_iou_only", "SLR_miss", "SLR_topo",
                       "CER_matched_mean", "delta_mAP")


@dataclass
class ConfigAggregate:
    config_id: str
    n: int
    means: dict = field(default_factory=dict)


def _numeric(value) -> float | None:
    if value is None or value == "":
        return None
    return float(value)


def aggregate_by(records: list[dict], group_key: str = "config_id",
                 variables=AGGREGATE_VARIABLES) -> list[ConfigAggregate]:
    """Per-group means over the valid (present) values of each variable."""
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(str(r[group_key]), []).append(r)
    out = []
    for key in sorted(groups):
        rows = groups[key]
        means = {}
        for var in variables:
            vals = [_numeric(r.get(var)) for r in rows]
            vals = [v for v in vals if v is not None]
            means[var] = sum(vals) / len(vals) if vals else None
        out.append(ConfigAggregate(key, len(rows), means))
    return out


def faithfulness(records: list[dict], variable: str,
                 cer_field: str = "CER_matched_mean",
                 group_key: str = "config_id") -> RegressionResult:
    """R^2 between configuration-level means of `variable` and mean CER."""
    aggs = aggregate_by(records, group_key, (variable, cer_field))
    xs, ys = [], []
    for a in aggs:
        x, y = a.means.get(variable), a.means.get(cer_field)
        if x is not None and y is not None:
            xs.append(x)
            ys.append(y)
    return ols_r2(xs, ys)


def fixed_effects_r2(records: list[dict], x_field: str, y_field: str,
                     group_key: str = "image_id") -> tuple[RegressionResult, int]:
    """OLS on per-image de-meaned residuals; returns (fit, images dropped)."""
    groups: dict[str, list[tuple[float, float]]] = {}
    for r in records:
        x, y = _numeric(r.get(x_field)), _numeric(r.get(y_field))
        if x is None or y is None:
            continue
        groups.setdefault(str(r[group_key]), []).append((x, y))
    xs, ys = [], []
    dropped = 0
    for rows in groups.values():
        if len(rows) < 2:
            dropped += 1
            continue
        gx = np.array([p[0] for p in rows])
        gy = np.array([p[1] for p in rows])
        xs.extend(gx - gx.mean())
        ys.extend(gy - gy.mean())
    return ols_r2(xs, ys), dropped


# ---------------------------------------------------------------------------
# Dose-response binning
# ---------------------------------------------------------------------------

@dataclass
class DoseResponse:
    edges: list[float]
    bin_means: list[float]
    bin_counts: list[int]
    verdict: str            # increasing | nondecreasing | flat | none
    merged_edges: int = 0


def _bin_verdict(means: list[float], tol: float = 1e-12) -> str:
    if len(means) < 2:
        return "flat"
    diffs = [b - a for a, b in zip(means, means[1:])]
    if all(abs(d) <= tol for d in diffs):
        return "flat"
    if all(d > tol for d in diffs):
        return "increasing"
    if all(d >= -tol for d in diffs):
        return "nondecreasing"
    return "none"


def dose_response(records: list[dict], dose: str = "EIR", response: str = "B_SLR",
                  bins: int = 5) -> DoseResponse:
    """Quantile-bin the dose variable and report per-bin response means."""
    pairs = [(_numeric(r.get(dose)), _numeric(r.get(response))) for r in records]
    pairs = [(d, y) for d, y in pairs if d is not None and y is not None]
    if len(pairs) < bins:
        raise ValueError(f"need at least {bins} records, got {len(pairs)}")
    doses = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    raw_edges = np.quantile(doses, np.linspace(0, 1, bins + 1))
    edges = np.unique(raw_edges)
    merged = len(raw_edges) - len(edges)
    # assign by the inner edges; the top edge is inclusive
    idx = np.searchsorted(edges[1:-1], doses, side="right")
    bin_means, bin_counts = [], []
    for k in range(len(edges) - 1):
        sel = idx == k
        bin_counts.append(int(sel.sum()))
        bin_means.append(float(ys[sel].mean()) if sel.any() else float("nan"))
    return DoseResponse(list(map(float, edges)), bin_means, bin_counts,
                        _bin_verdict([m for m in bin_means if not np.isnan(m)]),
                        merged)


def within_config_quartiles(records: list[dict], config_id: str,
                            dose: str = "EIR", response: str = "B_SLR") -> DoseResponse:
    """Dose-response with four quantile bins restricted to one configuration."""
    rows = [r for r in records if str(r.get("config_id")) == str(config_id)]
    return dose_response(rows, dose, response, bins=4)


# ---------------------------------------------------------------------------
# Policy-audit summaries
# ---------------------------------------------------------------------------

@dataclass
class PolicySummary:
    policy: str
    n: int
    means: dict
    topo_share: float | None
    eff_b: float | None            # ratio of configuration means B-SLR / TOR
    eff_c: float | None            # ratio of configuration means CER / TOR
    eff_b_per_image: float | None  # mean of per-image ratios
    eff_c_per_image: float | None


def policy_summary(records: list[dict],
                   policy_key: str = "policy") -> tuple[list[PolicySummary], dict]:
    """Per-policy aggregates, TopoShare, efficiencies, and rank consistency."""
    aggs = aggregate_by(records, policy_key)
    by_policy: dict[str, list[dict]] = {}
    for r in records:
        by_policy.setdefault(str(r[policy_key]), []).append(r)

    summaries = []
    for agg in aggs:
        m = agg.means
        miss, topo = m.get("SLR_miss"), m.get("SLR_topo")
        topo_share = None
        if miss is not None and topo is not None and (miss + topo) > 0:
            topo_share = topo / (miss + topo)
        tor = m.get("TOR")
        eff_b = m["B_SLR"] / tor if tor and m.get("B_SLR") is not None else None
        eff_c = m["CER_matched_mean"] / tor if tor and m.get("CER_matched_mean") is not None else None
        ratios_b, ratios_c = [], []
        for r in by_policy[agg.config_id]:
            t = _numeric(r.get("TOR"))
            if not t:
                continue
            b = _numeric(r.get("B_SLR"))
            c = _numeric(r.get("CER_matched_mean"))
            if b is not None:
                ratios_b.append(b / t)
            if c is not None:
                ratios_c.append(c / t)
        summaries.append(PolicySummary(
            policy=agg.config_id, n=agg.n, means=m, topo_share=topo_share,
            eff_b=eff_b, eff_c=eff_c,
            eff_b_per_image=sum(ratios_b) / len(ratios_b) if ratios_b else None,
            eff_c_per_image=sum(ratios_c) / len(ratios_c) if ratios_c else None,
        ))

    consistency = {}
    if len(summaries) >= 2:
        def series(var):
            vals = [s.means.get(var) for s in summaries]
            return None if any(v is None for v in vals) else vals
        for struct_var in ("B_SLR", "TOR"):
            for term_var in ("CER_matched_mean", "delta_mAP"):
                xs, ys = series(struct_var), series(term_var)
                if xs is not None and ys is not None:
                    consistency[f"{struct_var}_vs_{term_var}"] = spearman(xs, ys).rho
    return summaries, consistency
