"""Desk-scale end-to-end probe: train on 3-scanner phantoms, harmonize held-out
subjects scanner-free, and print the evaluation numbers the acceptance suite
checks.  Also trains the no-scanner-free-loss ablation variant."""

import json
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from voxharm.config import PipelineConfig, default_scanner_configs
from voxharm.engine import TrainConfig, harmonize_scanner_free, train
from voxharm.evaluation import evaluate_directories
from voxharm.nets import ScaleConfig, one_hot_label, volume_to_tensor
from voxharm.objective import LossWeights
from voxharm.phantom import PhantomSpec, make_dataset, read_manifest
from voxharm.volume import Volume, load_volume, save_volume

ITERS = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0

root = Path(tempfile.mkdtemp(prefix="e2e_"))
print("workdir:", root, flush=True)

scanners = default_scanner_configs(3)
effects = {s.id: s.effect(seed=SEED + 101 * (i + 1)) for i, s in enumerate(scanners)}
spec = PhantomSpec(shape=(32, 32, 32), seed=SEED)

train_dir = root / "train"
make_dataset(spec, effects, 20, train_dir)
test_dir = root / "test"
from voxharm.phantom import subject_specs
test_specs = subject_specs(PhantomSpec(shape=(32, 32, 32), seed=SEED + 555_001), 12)
make_dataset(test_specs, effects, 12, test_dir)

scale = ScaleConfig(input_shape=(32, 32, 8), n_scanners=3)
cfg = TrainConfig(iterations=ITERS, scale=scale, window_size=8, window_stride=8, seed=SEED)

t0 = time.time()
losses = []
bundle = train(cfg, train_dir / "manifest.csv", out_dir=root / "run", log_hook=lambda r: losses.append(r))
print(f"trained {ITERS} iters in {(time.time()-t0)/60:.1f} min", flush=True)

first50 = np.mean([r.cc + r.rec for r in losses[:50]])
last50 = np.mean([r.cc + r.rec for r in losses[-50:]])
print(f"cc+rec first50={first50:.4f} last50={last50:.4f} ratio={last50/first50:.3f}")

harm_dir = root / "harmonized"
harm_dir.mkdir()
rows = read_manifest(test_dir / "manifest.csv")
out_rows = []
for i, row in enumerate(rows):
    vol = load_volume(test_dir / row["path"])
    out = harmonize_scanner_free(vol, bundle, seed=SEED + 9000 + i)
    save_volume(out, harm_dir / row["path"])
    out_rows.append(row)
import csv
with open(harm_dir / "manifest.csv", "w", newline="") as f:
    wtr = csv.DictWriter(f, fieldnames=list(out_rows[0].keys()))
    wtr.writeheader(); wtr.writerows(out_rows)

report = evaluate_directories(test_dir, harm_dir, seed=SEED)
pre = report["before"]["metrics"]["jsd"]["mean"]
post = report["after"]["metrics"]["jsd"]["mean"]
print(f"JSD pre={pre:.4f} post={post:.4f} ratio={post/pre:.3f} (need <= 0.5)")
print("AD before:", report["ad_test"]["before"])
print("AD after: ", report["ad_test"]["after"])
print("struct-SSIM:", report["struct_ssim"]["mean"], "min:", report["struct_ssim"]["min"], "(need every pair >= 0.90)")
print("full SSIM:", report["ssim"]["mean"])
print("jsd delta CI:", report["deltas"]["jsd"]["ci95"], "(needs to exclude 0)")

# traveling-subject check: pairwise SSIM between same-subject scans pre/post
from voxharm.metrics import ssim_pair, bootstrap_paired_ci
groups = {}
for row in rows:
    groups.setdefault(row["subject_id"], []).append(row["path"])
pre_vals, post_vals = [], []
for subj, paths in sorted(groups.items())[:10]:
    for a in range(len(paths)):
        for b in range(a + 1, len(paths)):
            va, vb = load_volume(test_dir / paths[a]), load_volume(test_dir / paths[b])
            ha, hb = load_volume(harm_dir / paths[a]), load_volume(harm_dir / paths[b])
            pre_vals.append(ssim_pair(va, vb)[0])
            post_vals.append(ssim_pair(ha, hb)[0])
lo, hi = bootstrap_paired_ci(pre_vals, post_vals, seed=SEED)
print(f"traveling: SSIM pre={np.mean(pre_vals):.4f} post={np.mean(post_vals):.4f} delta CI=[{lo:.4f},{hi:.4f}] (need lo>0)")

# ablation: lambda_sf = 0
cfg_abl = replace(cfg, weights=LossWeights(sf=0.0))
bundle_abl = train(cfg_abl, train_dir / "manifest.csv", out_dir=root / "run_abl")
print(f"ablation trained, total {(time.time()-t0)/60:.1f} min", flush=True)

def sf_gap(bdl, n_pairs=15):
    gen = torch.Generator().manual_seed(1234)
    vols = [load_volume(test_dir / r["path"]) for r in rows[:2 * n_pairs]]
    gaps = []
    c0 = one_hot_label(None, 3)
    for j in range(n_pairs):
        v1, v2 = vols[2 * j], vols[2 * j + 1]
        eps = torch.randn(bdl.cfg.s_dim, generator=gen)
        h1 = harmonize_scanner_free_fixed_eps(v1, bdl, eps)
        h2 = harmonize_scanner_free_fixed_eps(v2, bdl, eps)
        from voxharm.volume import WindowPlan, split_windows
        plan = WindowPlan(window_size=8, stride=8)
        w1 = split_windows(h1, plan).windows[2]
        w2 = split_windows(h2, plan).windows[2]
        with torch.no_grad():
            m1 = bdl.encode_scanner(volume_to_tensor(w1.data), c0, eps=torch.zeros(bdl.cfg.s_dim)).mu
            m2 = bdl.encode_scanner(volume_to_tensor(w2.data), c0, eps=torch.zeros(bdl.cfg.s_dim)).mu
        gaps.append(float((m1 - m2).abs().mean()))
    return np.mean(gaps)

def harmonize_scanner_free_fixed_eps(v, bdl, eps):
    from voxharm.engine import _windows_through
    return _windows_through(bdl, v, eps, one_hot_label(None, bdl.cfg.n_scanners))

g_full = sf_gap(bundle)
g_abl = sf_gap(bundle_abl)
print(f"sf-gap full={g_full:.6f} ablation={g_abl:.6f} ratio={g_abl/max(g_full,1e-12):.2f} (need >= 1.5)")
print(json.dumps({"workdir": str(root)}))
