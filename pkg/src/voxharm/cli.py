"""Command-line entry point wiring the modules into reproducible pipelines.

Subcommands: simulate, train, harmonize, evaluate, analyze, plot.  Every run
echoes its resolved configuration and a machine-readable JSON report into the
output directory; flags override the config file, and the DISARM_SEED
environment variable provides a global seed fallback.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import analysis as ana
from . import engine
from .config import default_scanner_configs, dump_config, load_config, resolve_seed
from .evaluation import evaluate_directories, flatten_report_csv, render_text_report
from .nets import ModelBundle
from .phantom import make_dataset, read_manifest
from .volume import load_volume, normalize, save_volume


def _prepare_out(out_dir: Path, force: bool) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise click.ClickException(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


@click.group()
def main():
    """Scanner harmonization pipeline for 3D MR volumes."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--scanners", type=int, default=None, help="Number of synthetic scanners.")
@click.option("--subjects", type=int, default=None, help="Number of phantom subjects.")
@click.option("--seed", type=int, default=None)
@click.option("--test-fraction", type=float, default=None)
@click.option("--force", is_flag=True)
def simulate(config_path, out_dir, scanners, subjects, seed, test_fraction, force):
    """Generate a multi-scanner phantom dataset with a manifest."""
    overrides = {"phantom.n_subjects": subjects, "phantom.test_fraction": test_fraction}
    cfg = load_config(config_path, overrides)
    cfg = dataclasses.replace(cfg, seed=resolve_seed(seed, cfg))
    if scanners is not None:
        cfg = dataclasses.replace(cfg, phantom=dataclasses.replace(cfg.phantom,
                                                                   scanners=default_scanner_configs(scanners)))
    out = _prepare_out(Path(out_dir), force)
    manifest = make_dataset(
        cfg.phantom_spec(),
        cfg.scanner_effects(),
        cfg.phantom.n_subjects,
        out,
        test_fraction=cfg.phantom.test_fraction,
        split_seed=cfg.seed,
    )
    dump_config(cfg, out / "config.yaml")
    rows = read_manifest(manifest)
    click.echo(f"wrote {len(rows)} volumes across {len({r['scanner_id'] for r in rows})} scanners to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--iterations", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
def train(config_path, manifest_path, out_dir, iterations, seed, resume_path, force):
    """Train the harmonization model on a dataset manifest."""
    cfg = load_config(config_path, {"train.iterations": iterations})
    cfg = dataclasses.replace(cfg, seed=resolve_seed(seed, cfg))
    rows = [r for r in read_manifest(manifest_path) if r["split"] == "train"]
    scanner_ids = sorted({r["scanner_id"] for r in rows})
    if len(scanner_ids) < 2:
        raise click.ClickException("training manifest must contain at least 2 scanners")
    out = _prepare_out(Path(out_dir), force or resume_path is not None)
    dump_config(cfg, out / "config.yaml")
    train_cfg = cfg.train_config(n_scanners=len(scanner_ids))
    bundle = engine.train(train_cfg, manifest_path, out_dir=out, resume_from=resume_path)
    click.echo(f"trained {bundle.iteration} iterations; bundle at {out / 'bundle.pt'}")


@main.command()
@click.option("--bundle", "bundle_path", type=click.Path(exists=True), required=True)
@click.option("--inputs", "inputs_dir", type=click.Path(exists=True), required=True,
              help="Directory containing volumes and a manifest.csv.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice(["scanner-free", "reference"]), default="scanner-free")
@click.option("--ref", "reference", default=None, help="Reference scanner id (reference mode).")
@click.option("--seed", type=int, default=None)
@click.option("--split", default="all", help="Manifest split to harmonize (train/test/all).")
@click.option("--force", is_flag=True)
def harmonize(bundle_path, inputs_dir, out_dir, mode, reference, seed, split, force):
    """Harmonize every manifest volume into the scanner-free or a reference space."""
    if mode == "reference" and not reference:
        raise click.UsageError("--mode reference requires --ref <scanner_id>")
    bundle = ModelBundle.load(bundle_path)
    seed = resolve_seed(seed, load_config(None))
    inputs_dir = Path(inputs_dir)
    out = _prepare_out(Path(out_dir), force)
    rows = read_manifest(inputs_dir / "manifest.csv")
    if split != "all":
        rows = [r for r in rows if r["split"] == split]
    out_rows = []
    for i, row in enumerate(rows):
        vol = load_volume(inputs_dir / row["path"])
        if not vol.normalized:
            vol = normalize(vol)
        if mode == "scanner-free":
            result = engine.harmonize_scanner_free(vol, bundle, seed=seed + i)
        else:
            try:
                result = engine.harmonize_to_reference(vol, bundle, reference)
            except KeyError as exc:
                raise click.ClickException(str(exc)) from exc
        name = Path(row["path"]).stem + "_harmonized.vol"
        save_volume(result, out / name)
        out_rows.append({**row, "path": name})
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(out_rows[0].keys()))
        writer.writeheader()
        writer.writerows(out_rows)
    _write_json(out / "run.json", {"command": "harmonize", "mode": mode, "reference": reference,
                                   "seed": seed, "bundle": str(bundle_path), "count": len(out_rows)})
    click.echo(f"harmonized {len(out_rows)} volumes ({mode}) into {out}")


@main.command()
@click.option("--before", "before_dir", type=click.Path(exists=True), required=True)
@click.option("--after", "after_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--bins", type=int, default=128)
@click.option("--seed", type=int, default=None)
@click.option("--plots", "with_plots", is_flag=True)
@click.option("--csv", "with_csv", is_flag=True, help="Also write the pairwise values as CSV.")
@click.option("--force", is_flag=True)
def evaluate(before_dir, after_dir, out_dir, bins, seed, with_plots, with_csv, force):
    """Compare per-scanner intensity distributions before vs after harmonization."""
    seed = resolve_seed(seed, load_config(None))
    out = _prepare_out(Path(out_dir), force)
    try:
        report = evaluate_directories(before_dir, after_dir, n_bins=bins, seed=seed)
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    report["run"] = {"command": "evaluate", "seed": seed, "bins": bins,
                     "before": str(before_dir), "after": str(after_dir)}
    _write_json(out / "report.json", report)
    text = render_text_report(report)
    (out / "report.txt").write_text(text + "\n")
    if with_csv:
        (out / "report.csv").write_text(flatten_report_csv(report))
    if with_plots:
        _emit_plots(report, out)
    click.echo(text)


def _emit_plots(report: dict, out: Path) -> None:
    from .metrics import IntensityDistribution
    from .plots import density_overlay, pairwise_heatmap

    def as_dists(block):
        out_d = {}
        for name, d in block.items():
            centers = np.asarray(d["centers"])
            step = centers[1] - centers[0]
            edges = np.concatenate([[centers[0] - step / 2], centers + step / 2])
            probs = np.asarray(d["probabilities"])
            out_d[name] = IntensityDistribution(edges, probs / probs.sum(), 1)
        return out_d

    density_overlay(as_dists(report["densities"]["before"]), as_dists(report["densities"]["after"]),
                    out / "densities.png")
    for metric in report["before"]["metrics"]:
        for stage in ("before", "after"):
            pairwise_heatmap(
                report[stage]["metrics"][metric]["matrix"],
                report["groups"],
                out / f"heatmap_{metric}_{stage}.png",
                f"{metric} ({stage})",
            )


@main.command()
@click.option("--features", "features_path", type=click.Path(exists=True), required=True)
@click.option("--task", type=click.Choice(["age", "lmm", "auc", "classify"]), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--target", default="age")
@click.option("--group-col", default="scanner_id")
@click.option("--label-col", default="diagnosis")
@click.option("--folds", type=int, default=10)
@click.option("--splits", type=int, default=10)
@click.option("--var-target", type=float, default=0.70)
@click.option("--direction", type=click.Choice(["volume_on_age", "age_on_volume"]), default="volume_on_age",
              help="Mixed-model regression direction (lmm task).")
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def analyze(features_path, task, out_dir, target, group_col, label_col, folds, splits, var_target, direction,
            seed, force):
    """Run one downstream analysis over a feature table."""
    seed = resolve_seed(seed, load_config(None))
    out = _prepare_out(Path(out_dir), force)
    table = pd.read_csv(features_path)
    reserved = {target, group_col, label_col, "subject_id", "path", "split"}
    feature_cols = [c for c in table.columns if c not in reserved and pd.api.types.is_numeric_dtype(table[c])]
    try:
        if task == "age":
            result = ana.fit_age_lm_cv(table, feature_cols, target=target, k=folds, seed=seed)
            lines = [
                f"age prediction ({folds}-fold CV over {len(feature_cols)} features)",
                f"R2   = {result['r2']['mean']:.4f} +/- {result['r2']['sd']:.4f}",
                f"RMSE = {result['rmse']['mean']:.4f} +/- {result['rmse']['sd']:.4f}",
                f"BIC  = {result['bic']['mean']:.1f} +/- {result['bic']['sd']:.1f}",
            ]
        elif task == "lmm":
            result, lines = {}, [f"{'variable':>16} {'ICC%':>8} {'R2m%':>8} {'dBIC':>10}"]
            for col in feature_cols:
                response, predictor = (col, target) if direction == "volume_on_age" else (target, col)
                fit = ana.fit_lmm(table, response=response, predictor=predictor, group_col=group_col)
                result[col] = {"icc": fit.icc, "r2m": fit.r2m, "delta_bic": fit.delta_bic,
                               "sigma_u2": fit.sigma_u2, "sigma_eps2": fit.sigma_eps2}
                lines.append(f"{col:>16} {100 * fit.icc:8.2f} {100 * fit.r2m:8.2f} {fit.delta_bic:+10.1f}")
        elif task == "auc":
            x = table[feature_cols].to_numpy(float)
            y = table[label_col].to_numpy()
            components, projected = ana.pca_reduce(x, var_target=var_target)
            auc = ana.fit_logistic_auc(projected, (y == np.unique(y)[1]).astype(float))
            result = {"auc": auc, "n_components": int(components.shape[0]), "variance_target": var_target}
            lines = [f"PCA retained {components.shape[0]} components (target {var_target:.0%} variance)",
                     f"logistic-regression AUC = {auc:.4f}"]
        else:  # classify
            root = Path(features_path).parent
            volumes = [load_volume(root / p) for p in table["path"]]
            result = ana.train_toy_classifier(volumes, table[label_col].to_numpy(), n_splits=splits, seed=seed)
            lines = [f"{m}: {v['mean']:.3f} +/- {v['sd']:.3f}" for m, v in result.items()]
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    _write_json(out / f"{task}_report.json", {"task": task, "result": result})
    text = "\n".join(lines)
    (out / f"{task}_report.txt").write_text(text + "\n")
    click.echo(text)


@main.command("plot")
@click.option("--report", "report_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
def plot_cmd(report_path, out_dir, force):
    """Render density overlays and pairwise heatmaps from an evaluation report."""
    out = _prepare_out(Path(out_dir), force)
    with open(report_path) as f:
        report = json.load(f)
    _emit_plots(report, out)
    click.echo(f"plots written to {out}")


if __name__ == "__main__":
    main()
