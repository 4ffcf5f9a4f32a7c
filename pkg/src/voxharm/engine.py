"""Training loop and inference modes.

Each training iteration samples two scanner domains, swaps anatomical
embeddings through the generator, reconstructs cyclically and directly,
generates two scanner-free images under a shared noise vector, and applies a
discriminator ascent step followed by a generator/encoder descent step.

Inference either transfers a volume into a training scanner's space (using a
stored reference scanner embedding) or into the scanner-free space (noise in
place of a scanner embedding, drawn once per volume).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, ShapeError, TrainingDiverged
from .nets import ModelBundle, ScaleConfig, one_hot_label, volume_to_tensor
from .objective import (
    LOG_COLUMNS,
    LossReport,
    LossWeights,
    brain_adversarial_loss,
    cycle_consistency_loss,
    kl_loss,
    latent_loss,
    make_report,
    scanner_adversarial_loss,
    scanner_classification_loss,
    scanner_free_loss,
    self_reconstruction_loss,
)
from .phantom import read_manifest
from .volume import Volume, WindowPlan, load_volume, merge_windows, normalize, split_windows

TRAIN_STATE_FORMAT = "voxharm-train-state-v1"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    window_size: int = 8
    window_stride: int = 8
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    augment: bool = False
    augment_magnitude: float = 2.0
    checkpoint_every: int = 1000
    reference_sample: int = 8

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.scale.input_shape[2] != self.window_size:
            raise ConfigError("scale.input_shape depth must equal window_size")


class TrainState:
    """Everything needed to continue training bit-exact: bundle, optimizers, RNG."""

    def __init__(self, config: TrainConfig, bundle: ModelBundle | None = None):
        self.config = config
        self.bundle = bundle or ModelBundle(config.scale, seed=config.seed)
        self.opt_g = torch.optim.Adam(self.bundle.parameters_g(), lr=config.lr_g, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.bundle.parameters_d(), lr=config.lr_d, betas=config.betas)
        self.torch_rng = torch.Generator().manual_seed(config.seed + 1)
        self.numpy_rng = np.random.default_rng(config.seed + 2)

    @property
    def iteration(self) -> int:
        return self.bundle.iteration

    def save(self, path) -> None:
        payload = {
            "format": TRAIN_STATE_FORMAT,
            "bundle": self.bundle.state_payload(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": self.torch_rng.get_state(),
            "numpy_rng": repr(self.numpy_rng.bit_generator.state),
            "config_seed": self.config.seed,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path, config: TrainConfig) -> "TrainState":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != TRAIN_STATE_FORMAT:
            raise ConfigError(f"not a {TRAIN_STATE_FORMAT} checkpoint")
        state = cls(config)
        bundle_payload = payload["bundle"]
        for name, m in state.bundle.modules().items():
            m.load_state_dict(bundle_payload["modules"][name])
        state.bundle.iteration = int(bundle_payload["iteration"])
        state.bundle.scanner_ids = list(bundle_payload.get("scanner_ids", []))
        state.bundle.reference_bank = dict(bundle_payload.get("reference_bank", {}))
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
        state.torch_rng.set_state(payload["torch_rng"])
        state.numpy_rng.bit_generator.state = eval(payload["numpy_rng"])  # repr of a plain dict
        return state


def train_step(state: TrainState, sample_k: tuple, sample_h: tuple) -> tuple[TrainState, LossReport]:
    """One adversarial update from a window pair of two distinct scanners.

    ``sample_k``/``sample_h`` are (window tensor (1,1,H,W,D), scanner index).
    """
    bundle, cfg = state.bundle, state.config
    w = cfg.weights
    n = bundle.cfg.n_scanners
    x_k, idx_k = sample_k
    x_h, idx_h = sample_h
    if idx_k == idx_h:
        raise ConfigError("train_step needs two distinct scanner domains")
    # Row 0 carries domain k, row 1 domain h; flip(0) swaps anatomy between them.
    x_pair = torch.cat([x_k, x_h])
    labels = torch.stack([one_hot_label(idx_k, n), one_hot_label(idx_h, n)])
    null_labels = torch.zeros_like(labels)
    targets = torch.tensor([idx_k, idx_h])

    # -- shared forward graph -------------------------------------------------
    zb = bundle.encode_brain(x_pair)
    post = bundle.encode_scanner(x_pair, labels, generator=state.torch_rng)

    # cross-generation: anatomy swapped, scanner kept -> [x_{h->k}, x_{k->h}]
    cross = bundle.generate(zb.flip(0), post.z_s, labels)

    # second swap: scanner embeddings re-extracted from the generated images
    zb_cross = bundle.encode_brain(cross)
    zs_cross = bundle.encode_scanner(cross, labels, generator=state.torch_rng).z_s
    cyclic = bundle.generate(zb_cross.flip(0), zs_cross, labels)  # [xhat_k, xhat_h]

    selfrec = bundle.generate(zb, post.z_s, labels)  # [x_{k->k}, x_{h->h}]

    # scanner-free generations share one noise vector under the null label
    eps_f = torch.randn(bundle.cfg.s_dim, generator=state.torch_rng)
    sf_pair = bundle.generate(zb, eps_f.expand(2, -1), null_labels)
    mu_sf = bundle.encode_scanner(sf_pair, null_labels, eps=torch.zeros(bundle.cfg.s_dim)).mu

    forwards = {"embedding": zb, "posterior_mu": post.mu, "posterior_sigma": post.sigma,
                "cross": cross, "cyclic": cyclic, "self": selfrec, "scanner_free": sf_pair}
    for tag, tensor in forwards.items():
        if not torch.isfinite(tensor).all():
            raise TrainingDiverged(
                f"non-finite {tag} tensor at iteration {bundle.iteration + 1}",
                report={"tensor": tag, "iteration": bundle.iteration + 1},
            )

    # -- discriminator ascent --------------------------------------------------
    d_b_loss = F.cross_entropy(bundle.brain_disc(zb.detach()), targets)
    real_scores, _ = bundle.discriminate_scanner(x_pair)
    fake_scores, fake_labels = bundle.discriminate_scanner(cross.detach())
    if not (torch.isfinite(real_scores).all() and torch.isfinite(fake_scores).all()):
        raise TrainingDiverged(
            f"non-finite discriminator scores at iteration {bundle.iteration + 1}",
            report={"tensor": "scores", "iteration": bundle.iteration + 1},
        )
    d_s_adv = F.binary_cross_entropy(real_scores, torch.ones_like(real_scores)) + F.binary_cross_entropy(
        fake_scores, torch.zeros_like(fake_scores)
    )
    d_s_cls = scanner_classification_loss(fake_labels, targets)

    state.opt_d.zero_grad()
    (d_b_loss + d_s_adv + d_s_cls).backward()
    state.opt_d.step()

    # -- generator/encoder descent (discriminators frozen, post-update) -------
    p_true = bundle.discriminate_brain(zb)[torch.arange(2), targets].clamp(1e-6, 1 - 1e-6)
    l_adv_b = brain_adversarial_loss(p_true[:1], p_true[1:])

    g_scores, g_labels = bundle.discriminate_scanner(cross)
    l_cls_s = scanner_classification_loss(g_labels, targets)
    # Non-saturating adversarial pressure: make the discriminator call fakes real.
    g_adv = -torch.log(g_scores.clamp(1e-6, 1.0)).mean() * 2.0

    l_cc = cycle_consistency_loss(x_k, x_h, cyclic[:1], cyclic[1:])
    l_rec = self_reconstruction_loss(x_k, x_h, selfrec[:1], selfrec[1:])
    l_kl = kl_loss(post.mu[0], post.sigma[0]) + kl_loss(post.mu[1], post.sigma[1])
    l_lat = latent_loss(post.mu[0]) + latent_loss(post.mu[1])
    l_sf = scanner_free_loss(mu_sf[0], mu_sf[1])

    g_loss = (
        w.cc * l_cc
        + w.rec * l_rec
        + w.lat * l_lat
        + w.kl * l_kl
        + w.sf * l_sf
        - w.adv_b * l_adv_b
        + w.cls_s * l_cls_s
        + w.adv_s * g_adv
    )
    state.opt_g.zero_grad()
    g_loss.backward()
    state.opt_g.step()

    # -- report (post-update discriminator outputs, per the printed equations) -
    with torch.no_grad():
        eps = 1e-6  # float32 sigmoids can saturate to exactly 0/1
        reals = bundle.discriminate_scanner(x_pair)[0].clamp(eps, 1 - eps)
        fakes = bundle.discriminate_scanner(cross)[0].clamp(eps, 1 - eps)
        l_adv_s = scanner_adversarial_loss(reals[:1], fakes[:1], reals[1:], fakes[1:])

    terms = {
        "cc": l_cc.item(),
        "rec": l_rec.item(),
        "adv_b": l_adv_b.item(),
        "cls_s": l_cls_s.item(),
        "adv_s": l_adv_s.item(),
        "sf": l_sf.item(),
        "kl": l_kl.item(),
        "lat": l_lat.item(),
    }
    bundle.iteration += 1
    report = make_report(bundle.iteration, terms, w)
    if not all(math.isfinite(v) for v in terms.values()):
        raise TrainingDiverged(f"non-finite loss at iteration {bundle.iteration}", report=report)
    return state, report


class WindowPool:
    """Training windows grouped by scanner, loaded once from a manifest."""

    def __init__(self, manifest_path, config: TrainConfig, split: str = "train"):
        rows = [r for r in read_manifest(manifest_path) if r["split"] == split or split == "all"]
        root = Path(manifest_path).parent
        plan = WindowPlan(window_size=config.window_size, stride=config.window_stride)
        by_scanner: dict[str, list[torch.Tensor]] = {}
        self.volumes: list[tuple[str, Volume]] = []
        for row in rows:
            vol = load_volume(root / row["path"])
            if not vol.normalized:
                vol = normalize(vol)
            if vol.shape[:2] != config.scale.input_shape[:2]:
                raise ShapeError(f"volume {row['path']} shape {vol.shape} does not match config")
            self.volumes.append((row["scanner_id"], vol))
            for win in split_windows(vol, plan).windows:
                by_scanner.setdefault(row["scanner_id"], []).append(volume_to_tensor(win.data))
        if len(by_scanner) < 2:
            raise ConfigError("training manifest must contain at least 2 scanners")
        self.scanner_ids = sorted(by_scanner)
        self.windows = {s: by_scanner[s] for s in self.scanner_ids}

    def sample_pair(self, rng: np.random.Generator) -> tuple[tuple, tuple]:
        ia, ib = rng.choice(len(self.scanner_ids), size=2, replace=False)
        sa, sb = self.scanner_ids[ia], self.scanner_ids[ib]
        wa = self.windows[sa][rng.integers(len(self.windows[sa]))]
        wb = self.windows[sb][rng.integers(len(self.windows[sb]))]
        return (wa, int(ia)), (wb, int(ib))


def build_reference_bank(state: TrainState, pool: WindowPool) -> None:
    """Store, per scanner, the mean scanner-effect posterior mean over sample windows."""
    bundle, cfg = state.bundle, state.config
    bank = {}
    with torch.no_grad():
        for idx, scanner in enumerate(pool.scanner_ids):
            wins = pool.windows[scanner][: cfg.reference_sample]
            mus = [
                bundle.encode_scanner(win, one_hot_label(idx, bundle.cfg.n_scanners),
                                      eps=torch.zeros(bundle.cfg.s_dim)).mu.squeeze(0)
                for win in wins
            ]
            bank[scanner] = torch.stack(mus).mean(dim=0)
    bundle.reference_bank = bank
    bundle.scanner_ids = list(pool.scanner_ids)


def train(
    config: TrainConfig,
    manifest_path,
    out_dir=None,
    resume_from=None,
    log_hook=None,
) -> ModelBundle:
    """Run the training loop over a manifest; returns the final bundle.

    Writes ``training_log.csv`` plus periodic/final checkpoints when ``out_dir``
    is given.  ``resume_from`` continues bit-exact from a saved train state.
    """
    torch.set_num_threads(1)  # thread fan-out only slows these tiny tensors and hurts reproducibility
    pool = WindowPool(manifest_path, config)
    if config.scale.n_scanners != len(pool.scanner_ids):
        raise ConfigError(
            f"config expects {config.scale.n_scanners} scanners, manifest has {len(pool.scanner_ids)}"
        )
    state = TrainState.load(resume_from, config) if resume_from else TrainState(config)

    out_dir = Path(out_dir) if out_dir else None
    log_rows: list[str] = []
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.iteration < config.iterations:
        sample_k, sample_h = pool.sample_pair(state.numpy_rng)
        if config.augment:
            sample_k = (elastic_augment_tensor(sample_k[0], config.augment_magnitude, state.numpy_rng), sample_k[1])
            sample_h = (elastic_augment_tensor(sample_h[0], config.augment_magnitude, state.numpy_rng), sample_h[1])
        state, report = train_step(state, sample_k, sample_h)
        log_rows.append(report.csv_row())
        if log_hook:
            log_hook(report)
        if out_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            build_reference_bank(state, pool)
            state.save(out_dir / f"state_{state.iteration:07d}.pt")

    build_reference_bank(state, pool)
    if out_dir:
        with open(out_dir / "training_log.csv", "w") as f:
            f.write(",".join(LOG_COLUMNS) + "\n")
            f.write("\n".join(log_rows) + "\n")
        state.save(out_dir / "state_final.pt")
        state.bundle.save(out_dir / "bundle.pt")
    return state.bundle


def _windows_through(bundle: ModelBundle, v: Volume, z_s: torch.Tensor, label: torch.Tensor,
                     stride: int | None = None) -> Volume:
    if not v.normalized:
        raise ShapeError("harmonization expects a normalized volume")
    wsize = bundle.cfg.input_shape[2]
    # Overlapping windows average away per-window generator noise at merge time.
    stride = max(1, wsize // 4) if stride is None else stride
    ws = split_windows(v, WindowPlan(window_size=wsize, stride=stride))
    outs = []
    with torch.no_grad():
        batch = torch.cat([volume_to_tensor(win.data) for win in ws.windows])
        z_b = bundle.encode_brain(batch)
        gen = bundle.generate(z_b, z_s.expand(len(ws.windows), -1) if z_s.ndim == 1 else z_s,
                              label.expand(len(ws.windows), -1) if label.ndim == 1 else label)
        for win, out in zip(ws.windows, gen):
            outs.append(win.with_data(out.squeeze(0).numpy(), normalized=True))
    merged = merge_windows(
        type(ws)(windows=tuple(outs), offsets=ws.offsets, original_shape=ws.original_shape)
    )
    return Volume(np.clip(merged.data, 0.0, 1.0), normalized=True, meta=dict(v.meta))


def harmonize_scanner_free(v: Volume, bundle: ModelBundle, seed: int, stride: int | None = None) -> Volume:
    """Transfer a volume into the scanner-free space.

    One noise vector is drawn per volume (not per window) so the merged output
    carries a single coherent style.
    """
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(bundle.cfg.s_dim, generator=gen)
    c_0 = one_hot_label(None, bundle.cfg.n_scanners)
    out = _windows_through(bundle, v, eps, c_0, stride=stride)
    out.meta["harmonized"] = "scanner_free"
    return out


def harmonize_to_reference(v: Volume, bundle: ModelBundle, scanner_id: str, stride: int | None = None) -> Volume:
    """Transfer a volume into the space of one training scanner."""
    if scanner_id not in bundle.reference_bank:
        raise KeyError(f"unknown reference scanner {scanner_id!r}; bank has {sorted(bundle.reference_bank)}")
    z_s = bundle.reference_bank[scanner_id]
    label = one_hot_label(bundle.scanner_ids.index(scanner_id), bundle.cfg.n_scanners)
    out = _windows_through(bundle, v, z_s, label, stride=stride)
    out.meta["harmonized"] = f"reference:{scanner_id}"
    return out


def _displacement_field(shape, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    disp = rng.standard_normal((3, *shape))
    sigma = max(2.0, min(shape) / 4.0)
    for a in range(3):
        disp[a] = ndimage.gaussian_filter(disp[a], sigma=sigma)
    norms = np.sqrt((disp**2).sum(axis=0))
    peak = norms.max()
    if peak > 0:
        disp *= magnitude / peak
    return disp


def elastic_augment(v: Volume, magnitude: float, seed: int) -> Volume:
    """Smooth random displacement warp; magnitude bounds the displacement in voxels."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if magnitude == 0:
        return v
    rng = np.random.default_rng(seed)
    disp = _displacement_field(v.shape, magnitude, rng)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in v.shape], indexing="ij")
    coords = [g + d for g, d in zip(grid, disp)]
    warped = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="reflect")
    if v.normalized:
        warped = np.clip(warped, 0.0, 1.0)
    return v.with_data(warped.astype(np.float32))


def elastic_augment_tensor(win: torch.Tensor, magnitude: float, rng: np.random.Generator) -> torch.Tensor:
    """Seeded elastic warp of a window tensor, used inside the training loop."""
    vol = Volume(win.squeeze(0).squeeze(0).numpy(), normalized=True)
    seed = int(rng.integers(2**31 - 1))
    return volume_to_tensor(elastic_augment(vol, magnitude, seed).data)
