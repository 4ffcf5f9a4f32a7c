"""Loss terms of the harmonization objective and the weighted total.

Reconstruction-style terms use the mean absolute error; adversarial terms are
log-probability expressions whose ascent/descent direction is wired by the
trainer, so every function here is a plain differentiable value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import torch

from .errors import DomainError, ShapeError

PROB_EPS = 1e-6

TERM_NAMES = ("cc", "rec", "adv_b", "cls_s", "adv_s", "sf", "kl", "lat")

LOG_COLUMNS = ["iter", "L_cc", "L_rec", "L_adv_b", "L_cls_s", "L_adv_s", "L_sf", "L_KL", "L_lat", "total"]


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the total objective (defaults are the trained-model settings)."""

    cc: float = 10.0
    rec: float = 10.0
    lat: float = 8.0
    kl: float = 0.01
    sf: float = 7.0
    adv_b: float = 1.0
    cls_s: float = 3.0
    adv_s: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise DomainError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    """Per-iteration scalar values of every term plus the weighted total."""

    iteration: int
    cc: float
    rec: float
    adv_b: float
    cls_s: float
    adv_s: float
    sf: float
    kl: float
    lat: float
    total: float

    def csv_row(self) -> str:
        vals = [self.iteration, self.cc, self.rec, self.adv_b, self.cls_s,
                self.adv_s, self.sf, self.kl, self.lat, self.total]
        return ",".join(repr(v) for v in vals)

    def terms(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERM_NAMES}


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.double() if not t.is_floating_point() else t


def _pair_l1(a, b) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _check_probs(p: torch.Tensor, name: str) -> torch.Tensor:
    if torch.any(p <= 0) or torch.any(p >= 1):
        raise DomainError(f"{name} must lie strictly inside (0, 1)")
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def cycle_consistency_loss(x_k, x_h, xhat_k, xhat_h) -> torch.Tensor:
    """Mean L1 between each original and its cyclic reconstruction, summed over the pair."""
    return _pair_l1(xhat_k, x_k) + _pair_l1(xhat_h, x_h)


def self_reconstruction_loss(x_k, x_h, xhat_kk, xhat_hh) -> torch.Tensor:
    """Mean L1 between each original and its direct reconstruction, summed over the pair."""
    return _pair_l1(xhat_kk, x_k) + _pair_l1(xhat_hh, x_h)


def brain_adversarial_loss(db_out_k, db_out_h) -> torch.Tensor:
    """0.5*E[log(p(1-p))] per branch, summed.

    Inputs are the domain probabilities the brain discriminator assigns to the
    true scanner of each embedding.  Maximal (log 1/4) at p = 0.5, i.e. when
    domain membership is indistinguishable; the trainer handles the sign.
    """
    out = _as_tensor(0.0)
    for p in (_as_tensor(db_out_k), _as_tensor(db_out_h)):
        p = _check_probs(p, "brain discriminator probabilities")
        out = out + 0.5 * torch.log(p * (1.0 - p)).mean()
    return out


def scanner_classification_loss(ds_label_out, true_labels) -> torch.Tensor:
    """Sum over generated images of -log(probability of the true scanner class).

    ``ds_label_out`` is an (M, N) matrix of probability rows, one per generated
    image; ``true_labels`` holds the M true class indices (or one-hot rows).
    """
    probs = _as_tensor(ds_label_out)
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
    labels = torch.as_tensor(true_labels)
    if labels.ndim == 2:  # one-hot rows
        labels = labels.argmax(dim=-1)
    if labels.numel() != probs.shape[0]:
        raise ShapeError("one true label per probability row is required")
    picked = probs[torch.arange(probs.shape[0]), labels.long()]
    if torch.any(picked <= 0):
        warnings.warn("zero probability at the true class; clamping", stacklevel=2)
    return -torch.log(picked.clamp(min=PROB_EPS)).sum()


def scanner_adversarial_loss(ds_real_k, ds_fake_k, ds_real_h, ds_fake_h) -> torch.Tensor:
    """0.5*E[log(D(real)*(1-D(fake)))] per domain, summed."""
    out = _as_tensor(0.0)
    for real, fake in ((ds_real_k, ds_fake_k), (ds_real_h, ds_fake_h)):
        r = _check_probs(_as_tensor(real), "real scores")
        f = _check_probs(_as_tensor(fake), "fake scores")
        out = out + 0.5 * (torch.log(r) + torch.log(1.0 - f)).mean()
    return out


def scanner_free_loss(zhat_kf, zhat_hf) -> torch.Tensor:
    """Mean L1 distance between the two scanner-free scanner embeddings."""
    return _pair_l1(zhat_kf, zhat_hf)


def kl_loss(mu, sigma) -> torch.Tensor:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)) = 0.5*sum(s^2 + m^2 - 1 - 2 log s)."""
    mu, sigma = _as_tensor(mu), _as_tensor(sigma)
    if torch.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    return 0.5 * (sigma**2 + mu**2 - 1.0 - 2.0 * torch.log(sigma)).sum()


def latent_loss(mu) -> torch.Tensor:
    """Mean squared posterior mean; pulls the scanner posterior toward the prior center."""
    mu = _as_tensor(mu)
    return (mu**2).mean()


def total_loss(terms: dict, w: LossWeights) -> float:
    """Weighted combination: recon/latent/KL/scanner-free enter positively,
    the three adversarial log-terms negatively."""
    t = {k: float(v) for k, v in terms.items()}
    return (
        w.cc * t["cc"]
        + w.rec * t["rec"]
        + w.lat * t["lat"]
        + w.kl * t["kl"]
        + w.sf * t["sf"]
        - w.adv_b * t["adv_b"]
        - w.cls_s * t["cls_s"]
        - w.adv_s * t["adv_s"]
    )


def make_report(iteration: int, terms: dict, w: LossWeights) -> LossReport:
    t = {k: float(v) for k, v in terms.items()}
    return LossReport(iteration=iteration, total=total_loss(t, w), **t)
