"""Harmonization evaluation: pre/post distribution comparison over scanner groups.

Builds per-scanner mean intensity distributions from paired before/after
directories, computes all pairwise divergence metrics, runs the k-sample test
on per-image medians, bootstraps confidence intervals for the metric deltas,
and scores anatomy preservation with SSIM per input/output pair.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import (
    ad_ksample,
    bootstrap_paired_ci,
    distribution_samples,
    intensity_distribution,
    pairwise_report,
    ssim_pair,
)
from .phantom import read_manifest
from .volume import load_volume, normalize


def load_groups(directory) -> tuple[dict[str, list], list[tuple[str, object]]]:
    """Volumes grouped by scanner id, plus (path, volume) rows in manifest order."""
    directory = Path(directory)
    rows = read_manifest(directory / "manifest.csv")
    groups: dict[str, list] = {}
    ordered = []
    for row in rows:
        vol = load_volume(directory / row["path"])
        if not vol.normalized:
            vol = normalize(vol)
        groups.setdefault(row["scanner_id"], []).append(vol)
        ordered.append((row["path"], vol))
    return groups, ordered


def _distributions(groups: dict[str, list], n_bins: int):
    return {name: intensity_distribution(vols, n_bins=n_bins) for name, vols in groups.items()}


def _ad_over_groups(dists: dict, n_per_group: int, seed: int) -> dict:
    """K-sample test applied to the set of group distributions via seeded draws."""
    samples = [distribution_samples(dists[name], n_per_group, seed=seed + i)
               for i, name in enumerate(sorted(dists))]
    stat, p = ad_ksample(samples)
    return {"statistic": stat, "p_value": p, "reject_at_0.05": bool(p < 0.05)}


def evaluate_directories(
    before_dir,
    after_dir,
    n_bins: int = 128,
    ad_samples_per_group: int = 256,
    n_boot: int = 2000,
    seed: int = 0,
) -> dict:
    """Full pre/post comparison report; both directories need a manifest.csv."""
    groups_pre, ordered_pre = load_groups(before_dir)
    groups_post, ordered_post = load_groups(after_dir)
    if set(groups_pre) != set(groups_post):
        raise ConfigError(
            f"scanner sets differ: {sorted(groups_pre)} vs {sorted(groups_post)}"
        )

    dists_pre = _distributions(groups_pre, n_bins)
    dists_post = _distributions(groups_post, n_bins)
    report_pre = pairwise_report(dists_pre)
    report_post = pairwise_report(dists_post)

    deltas = {}
    for metric in report_pre["metrics"]:
        pre_vals = np.asarray(report_pre["metrics"][metric]["values"])
        post_vals = np.asarray(report_post["metrics"][metric]["values"])
        if pre_vals.size >= 2:
            lo, hi = bootstrap_paired_ci(pre_vals, post_vals, n_boot=n_boot, seed=seed)
        else:  # a single scanner pair has no resampling variability
            lo = hi = float(post_vals[0] - pre_vals[0])
        deltas[metric] = {
            "mean_delta": float((post_vals - pre_vals).mean()),
            "ci95": [lo, hi],
            "significant": bool(lo > 0 or hi < 0),
        }

    by_path = dict(ordered_post)
    ssim_vals, struct_vals = [], []
    for path, vol_pre in ordered_pre:
        vol_post = by_path.get(path)
        if vol_post is not None and vol_post.shape == vol_pre.shape:
            s, t = ssim_pair(vol_pre, vol_post)
            ssim_vals.append(s)
            struct_vals.append(t)

    def _summary(vals):
        if not vals:
            return None
        arr = np.asarray(vals)
        return {
            "mean": float(arr.mean()),
            "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "min": float(arr.min()),
            "values": arr.tolist(),
        }

    return {
        "groups": sorted(groups_pre),
        "n_pairs": len(report_pre["metrics"]["jsd"]["values"]),
        "before": report_pre,
        "after": report_post,
        "deltas": deltas,
        "ad_test": {
            "before": _ad_over_groups(dists_pre, ad_samples_per_group, seed),
            "after": _ad_over_groups(dists_post, ad_samples_per_group, seed),
        },
        "ssim": _summary(ssim_vals),
        "struct_ssim": _summary(struct_vals),
        "densities": {
            "before": {k: {"centers": d.centers.tolist(), "probabilities": d.probabilities.tolist()}
                       for k, d in dists_pre.items()},
            "after": {k: {"centers": d.centers.tolist(), "probabilities": d.probabilities.tolist()}
                      for k, d in dists_post.items()},
        },
    }


def flatten_report_csv(report: dict) -> str:
    """Per-pair metric values as CSV rows: stage,metric,group_a,group_b,value."""
    lines = ["stage,metric,group_a,group_b,value"]
    for stage in ("before", "after"):
        for metric, block in report[stage]["metrics"].items():
            for (a, b), value in zip(block["pairs"], block["values"]):
                lines.append(f"{stage},{metric},{a},{b},{value!r}")
    return "\n".join(lines) + "\n"


def render_text_report(report: dict) -> str:
    lines = [f"scanner groups: {', '.join(report['groups'])} ({report['n_pairs']} pairs per metric)"]
    for metric in report["before"]["metrics"]:
        pre = report["before"]["metrics"][metric]
        post = report["after"]["metrics"][metric]
        delta = report["deltas"][metric]
        star = "*" if delta["significant"] else ""
        lines.append(
            f"{metric:>12}: pre {pre['mean']:.4f} +/- {pre['sd']:.4f}"
            f" | post {post['mean']:.4f} +/- {post['sd']:.4f}"
            f" | delta CI95 [{delta['ci95'][0]:+.4f}, {delta['ci95'][1]:+.4f}]{star}"
        )
    for stage in ("before", "after"):
        ad = report["ad_test"][stage]
        verdict = "reject" if ad["reject_at_0.05"] else "no rejection"
        lines.append(f"AD-test {stage:>6}: T = {ad['statistic']:+.3f}, p = {ad['p_value']:.4f} ({verdict})")
    if report.get("struct_ssim"):
        s = report["struct_ssim"]
        lines.append(f"Struct-SSIM(original, harmonized): {s['mean']:.4f} +/- {s['sd']:.4f} (min {s['min']:.4f})")
    return "\n".join(lines)
