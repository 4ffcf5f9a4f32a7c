"""Synthetic brain-like phantoms and parametric per-scanner intensity corruptions.

Phantoms are smoothed random tissue blobs, not anatomical atlases; they exist
to give the pipeline multi-scanner datasets with known ground truth, including
traveling subjects (the same phantom imaged under every scanner effect).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidConfig
from .volume import Volume, save_volume

MANIFEST_COLUMNS = ["path", "scanner_id", "subject_id", "split"]


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_tissues: int = 3
    tissue_means: tuple[float, ...] = (0.25, 0.55, 0.85)
    smoothness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_tissues < 2:
            raise InvalidConfig("need at least 2 tissue classes")
        if len(self.tissue_means) != self.n_tissues:
            raise InvalidConfig("tissue_means length must equal n_tissues")
        means = self.tissue_means
        if any(not 0.0 < m < 1.0 for m in means) or any(b <= a for a, b in zip(means, means[1:])):
            raise InvalidConfig("tissue_means must be strictly increasing within (0, 1)")
        if self.smoothness < 0:
            raise InvalidConfig("smoothness must be >= 0")


@dataclass(frozen=True)
class ScannerEffect:
    """Parametric intensity corruption: clip(gain * bias_field * v**gamma + noise, 0, 1).

    The identity effect is (gain 1, bias 0, gamma 1, noise 0).
    """

    gain: float = 1.0
    bias_amplitude: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gain <= 0 or self.gamma <= 0:
            raise InvalidConfig("gain and gamma must be > 0")
        if self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise InvalidConfig("bias_amplitude and noise_sigma must be >= 0")


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic tissue-blob phantom with intensities in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    field = rng.standard_normal(spec.shape)
    # Correlation length scales with the volume so blobs stay tissue-like.
    field = ndimage.gaussian_filter(field, sigma=max(2.0, min(spec.shape) / 8.0))
    # Equal-volume quantile bins give one region per tissue class.
    qs = np.quantile(field, np.linspace(0, 1, spec.n_tissues + 1)[1:-1])
    labels = np.searchsorted(qs, field)
    data = np.asarray(spec.tissue_means, dtype=np.float64)[labels]
    if spec.smoothness > 0:
        data = ndimage.gaussian_filter(data, sigma=spec.smoothness)
    data = np.clip(data, 0.0, 1.0)
    return Volume(data.astype(np.float32), normalized=True, meta={"phantom_seed": spec.seed})


def bias_field(shape: tuple[int, int, int], amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative low-order polynomial field, 1 +/- amplitude."""
    coeffs = rng.standard_normal(10)
    if amplitude == 0.0:
        return np.ones(shape, dtype=np.float64)
    axes = [np.linspace(-1.0, 1.0, s) if s > 1 else np.zeros(s) for s in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = [np.ones(shape), x, y, z, x * y, x * z, y * z, x * x, y * y, z * z]
    poly = sum(c * t for c, t in zip(coeffs, terms))
    poly -= poly.mean()
    peak = np.abs(poly).max()
    if peak > 0:
        poly /= peak
    return 1.0 + amplitude * poly


def apply_scanner_effect(v: Volume, e: ScannerEffect, noise_seed: int | None = None) -> Volume:
    """Corrupt a normalized volume with one scanner's gain/bias/gamma/noise.

    The bias field is fixed by the effect seed (a property of the scanner);
    noise varies per acquisition via ``noise_seed`` (defaults to the effect seed).
    """
    if not v.normalized:
        raise ValueError("apply_scanner_effect expects a normalized volume")
    if e == ScannerEffect(seed=e.seed):
        return v  # identity effect, bit-exact
    data = v.data.astype(np.float64)
    rng = np.random.default_rng(e.seed)
    out = e.gain * bias_field(v.shape, e.bias_amplitude, rng) * np.power(data, e.gamma)
    if e.noise_sigma > 0:
        noise_rng = np.random.default_rng(e.seed if noise_seed is None else noise_seed)
        out = out + noise_rng.normal(0.0, e.noise_sigma, size=v.shape)
    out = np.clip(out, 0.0, 1.0)
    meta = dict(v.meta)
    meta["scanner_seed"] = e.seed
    return Volume(out.astype(np.float32), normalized=True, meta=meta)


def subject_specs(base: PhantomSpec, n_subjects: int) -> list[PhantomSpec]:
    """Derive one deterministic phantom spec per subject from a base spec."""
    return [replace(base, seed=base.seed + 7919 * i) for i in range(n_subjects)]


def make_dataset(
    specs: PhantomSpec | list[PhantomSpec],
    effects: dict[str, ScannerEffect],
    n_subjects: int,
    out_dir,
    test_fraction: float = 0.0,
    split_seed: int = 0,
) -> Path:
    """Generate a multi-scanner phantom dataset and write its manifest CSV.

    Every subject is a traveling subject: the same phantom is imaged under
    every scanner effect.  Returns the manifest path.
    """
    if n_subjects < 1:
        raise InvalidConfig("n_subjects must be >= 1")
    if len(effects) < 2:
        raise InvalidConfig("need at least 2 scanner effects")
    if isinstance(specs, PhantomSpec):
        specs = subject_specs(specs, n_subjects)
    if len(specs) != n_subjects:
        raise InvalidConfig(f"got {len(specs)} specs for {n_subjects} subjects")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_rng = np.random.default_rng(split_seed)
    n_test = int(round(test_fraction * n_subjects))
    test_subjects = set(split_rng.permutation(n_subjects)[:n_test].tolist())

    rows = []
    for si, spec in enumerate(specs):
        phantom = generate_phantom(spec)
        split = "test" if si in test_subjects else "train"
        for scanner_id, effect in sorted(effects.items()):
            scanned = apply_scanner_effect(phantom, effect, noise_seed=effect.seed * 1_000_003 + si + 1)
            meta = dict(scanned.meta)
            meta.update({"subject_id": f"subj{si:03d}", "scanner_id": scanner_id})
            scanned = Volume(scanned.data, normalized=True, meta=meta)
            name = f"subj{si:03d}_{scanner_id}.vol"
            save_volume(scanned, out_dir / name)
            rows.append({"path": name, "scanner_id": scanner_id, "subject_id": f"subj{si:03d}", "split": split})

    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(path) -> list[dict]:
    """Read a dataset manifest CSV into a list of row dicts."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise InvalidConfig(f"manifest missing columns: {sorted(missing)}")
        return list(reader)
