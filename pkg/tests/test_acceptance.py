"""Acceptance suite: one test per acceptance criterion, each printing a
[PASS]/[FAIL] line.  The phantom end-to-end experiment (dataset generation,
two trainings, harmonization, evaluation) runs once in a session fixture and
its products feed the last four criteria.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
"""

import csv
import hashlib
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import integrate

import voxharm.engine as engine
from voxharm.config import default_scanner_configs
from voxharm.engine import TrainConfig, harmonize_scanner_free, train
from voxharm.evaluation import evaluate_directories
from voxharm.metrics import (
    ad_ksample,
    bootstrap_paired_ci,
    fid,
    hellinger,
    intensity_distribution,
    jsd,
    ssim_pair,
    wasserstein1,
)
from voxharm.nets import ModelBundle, ScaleConfig, one_hot_label, volume_to_tensor
from voxharm.objective import (
    LossWeights,
    brain_adversarial_loss,
    cycle_consistency_loss,
    kl_loss,
    latent_loss,
    scanner_adversarial_loss,
    scanner_classification_loss,
    scanner_free_loss,
    self_reconstruction_loss,
    total_loss,
)
from voxharm.phantom import PhantomSpec, make_dataset, read_manifest, subject_specs
from voxharm.volume import WindowPlan, load_volume, merge_windows, split_windows, window_offsets

from test_analysis import simulate_lmm_table
from test_metrics import dist_from, oracle_fid_eig, oracle_hellinger, oracle_jsd, oracle_ssim_volume
from voxharm.analysis import fit_lmm


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion: metric oracle suite (runtime < 1 min)
# ---------------------------------------------------------------------------


class TestMetricOracleSuite:
    def test_metric_oracles_100_seeds(self):
        t0 = time.time()
        worst = {"jsd": 0.0, "hd": 0.0, "wd": 0.0, "ssim": 0.0, "struct": 0.0, "fid": 0.0, "kl": 0.0}

        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = dist_from(rng.uniform(0.01, 1.0, size=12))
            q = dist_from(rng.uniform(0.01, 1.0, size=12))

            ref = oracle_jsd(p.probabilities, q.probabilities)
            worst["jsd"] = max(worst["jsd"], abs(jsd(p, q) - ref) / max(ref, 1e-12))

            ref = oracle_hellinger(p.probabilities, q.probabilities)
            worst["hd"] = max(worst["hd"], abs(hellinger(p, q) - ref) / max(ref, 1e-12))

            # loop oracle for the CDF-area distance with mass at bin centers
            centers = p.centers
            cum = 0.0
            ref = 0.0
            for i in range(len(centers) - 1):
                cum += p.probabilities[i] - q.probabilities[i]
                ref += abs(cum) * (centers[i + 1] - centers[i])
            worst["wd"] = max(worst["wd"], abs(wasserstein1(p, q) - ref) / max(ref, 1e-12))

            a = rng.standard_normal((10, 5)) @ rng.standard_normal((5, 5))
            b = rng.standard_normal((11, 5)) @ rng.standard_normal((5, 5)) + 0.3
            ref = max(oracle_fid_eig(a, b), 0.0)
            worst["fid"] = max(worst["fid"], abs(fid(a, b) - ref) / max(ref, 1e-12))

        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            x = rng.random((8, 8, 8))
            y = rng.random((8, 8, 8))
            s, t = ssim_pair(x, y)
            s_ref, t_ref = oracle_ssim_volume(x, y)
            worst["ssim"] = max(worst["ssim"], abs(s - s_ref) / max(abs(s_ref), 1e-12))
            worst["struct"] = max(worst["struct"], abs(t - t_ref) / max(abs(t_ref), 1e-12))

        for seed in range(100):
            rng = np.random.default_rng(2000 + seed)
            mu = rng.normal(0, 1.2, size=2)
            sigma = rng.uniform(0.4, 2.0, size=2)
            got = float(kl_loss(torch.tensor(mu), torch.tensor(sigma)))
            ref = 0.0
            for m, s in zip(mu, sigma):
                def integrand(x, m=m, s=s):
                    pdf = math.exp(-((x - m) ** 2) / (2 * s * s)) / (s * math.sqrt(2 * math.pi))
                    return pdf * (x * x / 2.0 - ((x - m) ** 2) / (2 * s * s) - math.log(s))
                val, _ = integrate.quad(integrand, m - 12 * s, m + 12 * s, limit=200)
                ref += val
            worst["kl"] = max(worst["kl"], abs(got - ref) / max(abs(ref), 1e-6))

        elapsed = time.time() - t0
        tight = all(worst[k] <= 1e-6 for k in ("jsd", "hd", "wd", "ssim", "struct", "fid"))
        ok = tight and worst["kl"] <= 1e-4 and elapsed < 60
        verdict(
            "metric-oracle-suite",
            ok,
            "worst rel err " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# Criterion: loss identity suite (runtime < 2 min)
# ---------------------------------------------------------------------------


class TestLossIdentitySuite:
    def test_loss_identities_and_gradients(self):
        t0 = time.time()
        checks = []

        x = torch.rand(8)
        checks.append(abs(float(cycle_consistency_loss(x, x, x, x))) < 1e-12)
        checks.append(abs(float(cycle_consistency_loss(x, x, x + 0.1, x + 0.1)) - 0.2) < 1e-6)
        checks.append(abs(float(self_reconstruction_loss(x, x, x, x))) < 1e-12)
        half = torch.tensor([0.5])
        checks.append(abs(float(brain_adversarial_loss(half, half)) - math.log(0.25)) < 1e-6)
        uniform5 = torch.full((2, 5), 0.2)
        checks.append(abs(float(scanner_classification_loss(uniform5, [0, 1])) - 2 * math.log(5)) < 1e-6)
        checks.append(abs(float(scanner_adversarial_loss(half, half, half, half)) - math.log(0.25)) < 1e-6)
        z = torch.rand(6)
        checks.append(abs(float(scanner_free_loss(z, z + 0.3)) - 0.3) < 1e-5)
        checks.append(abs(float(kl_loss(torch.zeros(4), torch.ones(4)))) < 1e-9)
        checks.append(abs(float(kl_loss(torch.tensor([1.0]), torch.tensor([1.0]))) - 0.5) < 1e-9)
        mu = torch.zeros(16)
        mu[0] = 2.0
        checks.append(abs(float(latent_loss(mu)) - 0.25) < 1e-7)
        unit_terms = dict.fromkeys(("cc", "rec", "lat", "kl", "sf", "adv_b", "cls_s", "adv_s"), 1.0)
        checks.append(abs(total_loss(unit_terms, LossWeights()) - 21.01) < 1e-9)
        plugins_ok = all(checks)

        # central-difference gradient checks on 8-element inputs
        def grad_ok(fn, *tensors):
            tensors = [t.clone().double().requires_grad_(True) for t in tensors]
            grads = torch.autograd.grad(fn(*tensors), tensors)
            h = 1e-6
            for t, g in zip(tensors, grads):
                flat = t.detach().view(-1)
                for idx in range(flat.numel()):
                    orig = flat[idx].item()
                    with torch.no_grad():
                        flat[idx] = orig + h
                    up = float(fn(*tensors))
                    with torch.no_grad():
                        flat[idx] = orig - h
                    down = float(fn(*tensors))
                    with torch.no_grad():
                        flat[idx] = orig
                    numeric = (up - down) / (2 * h)
                    analytic = g.view(-1)[idx].item()
                    if abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6) > 1e-3:
                        return False
            return True

        gen = torch.Generator().manual_seed(0)
        probs = [torch.rand(8, generator=gen) * 0.8 + 0.1 for _ in range(4)]
        raw = torch.rand(2, 4, generator=gen) + 0.2
        grads_ok = all(
            [
                grad_ok(lambda a, b: cycle_consistency_loss(x.double(), x.double() + 0.2, a, b),
                        torch.rand(8, generator=gen), torch.rand(8, generator=gen)),
                grad_ok(lambda a, b: self_reconstruction_loss(x.double(), x.double(), a, b),
                        torch.rand(8, generator=gen), torch.rand(8, generator=gen)),
                grad_ok(brain_adversarial_loss, probs[0], probs[1]),
                grad_ok(scanner_adversarial_loss, *probs),
                grad_ok(lambda p: scanner_classification_loss(p, [1, 3]), raw / raw.sum(dim=1, keepdim=True)),
                grad_ok(scanner_free_loss, torch.rand(8, generator=gen), torch.rand(8, generator=gen)),
                grad_ok(kl_loss, torch.randn(8, generator=gen) * 0.5, torch.rand(8, generator=gen) + 0.5),
                grad_ok(latent_loss, torch.randn(8, generator=gen)),
            ]
        )
        elapsed = time.time() - t0
        ok = plugins_ok and grads_ok and elapsed < 120
        verdict(
            "loss-identity-suite",
            ok,
            f"plugins={'ok' if plugins_ok else 'FAIL'}, gradients={'ok' if grads_ok else 'FAIL'}, {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# Criterion: windowing
# ---------------------------------------------------------------------------


class TestWindowingCriterion:
    def test_windowing_round_trips(self):
        t0 = time.time()
        offsets = window_offsets(182, 26, 26)
        seven = offsets == [0, 26, 52, 78, 104, 130, 156]

        from voxharm.volume import Volume

        rng = np.random.default_rng(0)
        v = Volume(rng.random((6, 6, 24)).astype(np.float32))
        exact = np.array_equal(merge_windows(split_windows(v, WindowPlan(window_size=8, stride=8))).data, v.data)
        overlap_err = float(
            np.abs(merge_windows(split_windows(v, WindowPlan(window_size=8, stride=5))).data - v.data).max()
        )
        elapsed = time.time() - t0
        ok = seven and exact and overlap_err <= 1e-6 and elapsed < 30
        verdict(
            "windowing",
            ok,
            f"182/26 -> {len(offsets)} windows, disjoint exact={exact}, overlap max err={overlap_err:.2e}",
        )


# ---------------------------------------------------------------------------
# Criterion: statistical calibration (runtime < 10 min)
# ---------------------------------------------------------------------------


class TestStatisticalCalibration:
    def test_ad_null_rejection_rate(self):
        rng = np.random.default_rng(7)
        rejections = 0
        trials = 500
        for _ in range(trials):
            samples = [rng.normal(0.0, 1.0, 200) for _ in range(5)]
            _, p = ad_ksample(samples)
            rejections += p < 0.05
        rate = rejections / trials
        verdict("ad-null-rejection", 0.02 <= rate <= 0.09, f"rate at alpha=0.05: {rate:.3f} over {trials} trials")

    def test_ad_pvalue_uniformity(self):
        rng = np.random.default_rng(8)
        pvals = []
        for _ in range(500):
            samples = [rng.normal(0.0, 1.0, 150) for _ in range(4)]
            pvals.append(ad_ksample(samples)[1])
        pvals = np.sort(pvals)
        grid = (np.arange(len(pvals)) + 1) / len(pvals)
        ks = float(np.max(np.abs(pvals - grid)))
        verdict("ad-pvalue-uniformity", ks < 0.08, f"Kolmogorov distance to uniform: {ks:.4f}")

    def test_bootstrap_coverage(self):
        rng = np.random.default_rng(9)
        shift = 0.6
        covered = 0
        sims = 1000
        for i in range(sims):
            before = rng.normal(0.0, 1.0, 40)
            after = before + shift + rng.normal(0.0, 0.8, 40)
            lo, hi = bootstrap_paired_ci(before, after, n_boot=1000, seed=i)
            covered += lo <= shift <= hi
        rate = covered / sims
        verdict("bootstrap-coverage", 0.93 <= rate <= 0.97, f"95% CI coverage: {rate:.3f} over {sims} simulations")

    def test_lmm_icc_recovery(self):
        sigma_u, sigma_eps = 1.2, 1.0
        true_icc = sigma_u**2 / (sigma_u**2 + sigma_eps**2)
        errors = []
        for seed in range(50):
            table = simulate_lmm_table(
                np.random.default_rng(5000 + seed), n_groups=40, per_group=25, sigma_u=sigma_u, sigma_eps=sigma_eps
            )
            fit = fit_lmm(table, "volume", "age")
            errors.append(abs(fit.icc - true_icc) / true_icc)
        med = float(np.median(errors))
        verdict("lmm-icc-recovery", med <= 0.2, f"median ICC relative error over 50 seeds: {med:.4f}")


# ---------------------------------------------------------------------------
# Phantom end-to-end experiment (shared by the last four criteria)
# ---------------------------------------------------------------------------

E2E_SEED = 0
E2E_ITERATIONS = 3000


@pytest.fixture(scope="session")
def phantom_experiment(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("acceptance_e2e")
    scanners = default_scanner_configs(3)
    effects = {s.id: s.effect(seed=E2E_SEED + 101 * (i + 1)) for i, s in enumerate(scanners)}

    train_dir = root / "train"
    make_dataset(PhantomSpec(shape=(32, 32, 32), seed=E2E_SEED), effects, 20, train_dir)
    test_dir = root / "test"
    test_specs = subject_specs(PhantomSpec(shape=(32, 32, 32), seed=E2E_SEED + 555_001), 12)
    make_dataset(test_specs, effects, 12, test_dir)

    scale = ScaleConfig(input_shape=(32, 32, 8), n_scanners=3)
    config = TrainConfig(iterations=E2E_ITERATIONS, scale=scale, window_size=8, window_stride=8,
                         seed=E2E_SEED, checkpoint_every=0)

    t0 = time.time()
    bundle = train(config, train_dir / "manifest.csv", out_dir=root / "run")
    train_minutes = (time.time() - t0) / 60

    rows = read_manifest(test_dir / "manifest.csv")
    harm_dir = root / "harmonized"
    harm_dir.mkdir()
    for i, row in enumerate(rows):
        vol = load_volume(test_dir / row["path"])
        out = harmonize_scanner_free(vol, bundle, seed=E2E_SEED + 9000 + i)
        from voxharm.volume import save_volume

        save_volume(out, harm_dir / row["path"])
    with open(harm_dir / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    report = evaluate_directories(test_dir, harm_dir, seed=E2E_SEED)

    config_ablation = replace(config, weights=LossWeights(sf=0.0))
    bundle_ablation = train(config_ablation, train_dir / "manifest.csv", out_dir=root / "run_ablation")

    return {
        "root": root,
        "bundle": bundle,
        "bundle_ablation": bundle_ablation,
        "report": report,
        "rows": rows,
        "test_dir": test_dir,
        "harm_dir": harm_dir,
        "train_minutes": train_minutes,
        "effects": effects,
    }


class TestEndToEndPhantom:
    def test_phantom_harmonization(self, phantom_experiment):
        exp = phantom_experiment
        report = exp["report"]
        pre = report["before"]["metrics"]["jsd"]["mean"]
        post = report["after"]["metrics"]["jsd"]["mean"]
        ratio = post / pre
        ad_pre = report["ad_test"]["before"]
        ad_post = report["ad_test"]["after"]
        struct_min = report["struct_ssim"]["min"]
        ci = report["deltas"]["jsd"]["ci95"]
        ok = (
            exp["train_minutes"] < 60
            and ratio <= 0.5
            and ad_pre["p_value"] < 0.05
            and ad_post["p_value"] > 0.05
            and struct_min >= 0.90
            and (ci[1] < 0 or ci[0] > 0)
        )
        verdict(
            "end-to-end-phantom",
            ok,
            f"train {exp['train_minutes']:.1f} min; JSD {pre:.4f}->{post:.4f} (ratio {ratio:.3f}); "
            f"AD p {ad_pre['p_value']:.2e}->{ad_post['p_value']:.3f}; struct-SSIM min {struct_min:.4f}; "
            f"JSD delta CI [{ci[0]:+.4f},{ci[1]:+.4f}]",
        )

    def test_scanner_free_embedding_property(self, phantom_experiment):
        # after training, same-noise scanner-free outputs have closer scanner
        # embeddings than their differently-scanned inputs
        exp = phantom_experiment
        bundle = exp["bundle"]
        rows = exp["rows"]
        plan = WindowPlan(window_size=8, stride=8)
        c0 = one_hot_label(None, 3)
        eps0 = torch.zeros(bundle.cfg.s_dim)
        gen = torch.Generator().manual_seed(77)
        closer = 0
        total = 0
        by_subject = {}
        for row in rows:
            by_subject.setdefault(row["subject_id"], []).append(row)
        scanner_index = {sc: i for i, sc in enumerate(sorted(exp["effects"]))}
        for subject, srows in sorted(by_subject.items())[:6]:
            v1 = load_volume(exp["test_dir"] / srows[0]["path"])
            v2 = load_volume(exp["test_dir"] / srows[1]["path"])
            eps = torch.randn(bundle.cfg.s_dim, generator=gen)
            h1 = engine._windows_through(bundle, v1, eps, c0)
            h2 = engine._windows_through(bundle, v2, eps, c0)
            with torch.no_grad():
                win = lambda v: volume_to_tensor(split_windows(v, plan).windows[1].data)
                mu_out1 = bundle.encode_scanner(win(h1), c0, eps=eps0).mu
                mu_out2 = bundle.encode_scanner(win(h2), c0, eps=eps0).mu
                c1 = one_hot_label(scanner_index[srows[0]["scanner_id"]], 3)
                c2 = one_hot_label(scanner_index[srows[1]["scanner_id"]], 3)
                mu_in1 = bundle.encode_scanner(win(v1), c1, eps=eps0).mu
                mu_in2 = bundle.encode_scanner(win(v2), c2, eps=eps0).mu
            gap_out = float((mu_out1 - mu_out2).abs().mean())
            gap_in = float((mu_in1 - mu_in2).abs().mean())
            closer += gap_out < gap_in
            total += 1
        verdict("scanner-free-embedding-property", closer == total, f"{closer}/{total} subjects closer after")


class TestTravelingSubject:
    def test_traveling_subject_ssim_gain(self, phantom_experiment):
        exp = phantom_experiment
        groups = {}
        for row in exp["rows"]:
            groups.setdefault(row["subject_id"], []).append(row["path"])
        pre_vals, post_vals = [], []
        for subject, paths in sorted(groups.items())[:10]:
            for a in range(len(paths)):
                for b in range(a + 1, len(paths)):
                    va = load_volume(exp["test_dir"] / paths[a])
                    vb = load_volume(exp["test_dir"] / paths[b])
                    ha = load_volume(exp["harm_dir"] / paths[a])
                    hb = load_volume(exp["harm_dir"] / paths[b])
                    pre_vals.append(ssim_pair(va, vb)[0])
                    post_vals.append(ssim_pair(ha, hb)[0])
        lo, hi = bootstrap_paired_ci(pre_vals, post_vals, seed=E2E_SEED)
        gain = np.mean(post_vals) - np.mean(pre_vals)
        verdict(
            "traveling-subject",
            lo > 0 and gain > 0,
            f"pairwise SSIM {np.mean(pre_vals):.4f} -> {np.mean(post_vals):.4f}, delta CI95 [{lo:+.4f},{hi:+.4f}]",
        )


class TestAblationSmoke:
    def test_scanner_free_loss_effect_direction(self, phantom_experiment):
        exp = phantom_experiment
        rows = exp["rows"]
        test_dir = exp["test_dir"]

        def sf_gap(bundle, n_pairs=12):
            gen = torch.Generator().manual_seed(1234)
            c0 = one_hot_label(None, 3)
            plan = WindowPlan(window_size=8, stride=8)
            gaps = []
            for j in range(n_pairs):
                v1 = load_volume(test_dir / rows[2 * j]["path"])
                v2 = load_volume(test_dir / rows[2 * j + 1]["path"])
                eps = torch.randn(bundle.cfg.s_dim, generator=gen)
                h1 = engine._windows_through(bundle, v1, eps, c0)
                h2 = engine._windows_through(bundle, v2, eps, c0)
                w1 = split_windows(h1, plan).windows[2]
                w2 = split_windows(h2, plan).windows[2]
                with torch.no_grad():
                    m1 = bundle.encode_scanner(volume_to_tensor(w1.data), c0, eps=torch.zeros(bundle.cfg.s_dim)).mu
                    m2 = bundle.encode_scanner(volume_to_tensor(w2.data), c0, eps=torch.zeros(bundle.cfg.s_dim)).mu
                gaps.append(float((m1 - m2).abs().mean()))
            return float(np.mean(gaps))

        g_full = sf_gap(exp["bundle"])
        g_ablation = sf_gap(exp["bundle_ablation"])
        ratio = g_ablation / max(g_full, 1e-12)
        verdict(
            "ablation-scanner-free-loss",
            ratio >= 1.5,
            f"consistency gap full={g_full:.6f} vs lambda_sf=0 {g_ablation:.6f} (ratio {ratio:.1f}x)",
        )


# ---------------------------------------------------------------------------
# Criterion: determinism of the whole pipeline
# ---------------------------------------------------------------------------


def _hash_tree(root) -> dict:
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestDeterminism:
    def test_pipeline_bit_identical_reruns(self, tmp_path):
        torch.set_num_threads(1)
        scanners = default_scanner_configs(2)
        effects = {s.id: s.effect(seed=31 + i) for i, s in enumerate(scanners)}
        scale = ScaleConfig(input_shape=(16, 16, 8), n_scanners=2, s_dim=8, base_channels=4, zb_channels=4)
        config = TrainConfig(iterations=25, scale=scale, window_size=8, window_stride=8, seed=5,
                             checkpoint_every=0)

        hashes = []
        for run in ("one", "two"):
            root = tmp_path / run
            data = root / "data"
            make_dataset(PhantomSpec(shape=(16, 16, 16), seed=5), effects, 4, data)
            bundle = train(config, data / "manifest.csv", out_dir=root / "run")
            harm = root / "harm"
            harm.mkdir()
            rows = read_manifest(data / "manifest.csv")
            for i, row in enumerate(rows):
                vol = load_volume(data / row["path"])
                from voxharm.volume import save_volume

                save_volume(harmonize_scanner_free(vol, bundle, seed=100 + i), harm / row["path"])
            hashes.append(_hash_tree(root))

        same = hashes[0] == hashes[1]
        n_files = len(hashes[0])
        verdict("determinism", same and n_files > 10, f"{n_files} files bit-identical across reruns: {same}")
