"""The five neural modules: brain encoder, variational scanner encoder, generator,
brain discriminator, and scanner discriminator, with channel/spatial attention.

All sizes come from a ScaleConfig so the same topology runs at desk scale on
CPU and at full scale.  Forward passes on a frozen bundle are deterministic;
scanner-effect sampling takes an explicit epsilon or generator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import LabelError, ShapeError

CHECKPOINT_FORMAT = "voxharm-bundle-v1"


@dataclass(frozen=True)
class ScaleConfig:
    """Width/size knobs shared by all five modules."""

    input_shape: tuple[int, int, int] = (32, 32, 8)
    n_scanners: int = 2
    s_dim: int = 16
    base_channels: int = 16
    zb_channels: int = 8
    attention: bool = True

    def __post_init__(self):
        if min(self.input_shape) < 2:
            raise ValueError("input_shape dims must be >= 2")
        if self.n_scanners < 2:
            raise ValueError("need at least 2 scanners")
        if min(self.s_dim, self.base_channels, self.zb_channels) < 1:
            raise ValueError("channel/latent sizes must be >= 1")

    @property
    def half_shape(self) -> tuple[int, int, int]:
        return tuple(-(-s // 2) for s in self.input_shape)


def one_hot_label(index: int | None, n_scanners: int) -> torch.Tensor:
    """One-hot scanner label, or the all-zero null label for index None."""
    label = torch.zeros(n_scanners)
    if index is not None:
        if not 0 <= index < n_scanners:
            raise LabelError(f"scanner index {index} out of range for N={n_scanners}")
        label[index] = 1.0
    return label


def check_label(label: torch.Tensor, n_scanners: int) -> torch.Tensor:
    """Validate a single label vector or a (B, N) batch of them."""
    label = torch.as_tensor(label, dtype=torch.get_default_dtype())
    rows = label.unsqueeze(0) if label.ndim == 1 else label
    if rows.ndim != 2 or rows.shape[1] != n_scanners:
        raise LabelError(f"label shape {tuple(label.shape)} incompatible with N={n_scanners}")
    for total in rows.sum(dim=1).tolist():
        if not (abs(total) < 1e-6 or abs(total - 1.0) < 1e-6):
            raise LabelError("each label must be one-hot or the all-zero null label")
    return label


def _broadcast_label(label: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    b, _, h, w, d = like.shape
    label = label.to(like.dtype)
    if label.ndim == 1:
        label = label.unsqueeze(0).expand(b, -1)
    return label.reshape(b, -1, 1, 1, 1).expand(b, -1, h, w, d)


class ChannelGate(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.Conv3d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.fc(F.adaptive_avg_pool3d(x, 1))
        mx = self.fc(F.adaptive_max_pool3d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialGate(nn.Module):
    def __init__(self, kernel_size: int = 5):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = torch.mean(x, dim=1, keepdim=True)
        mx, _ = torch.max(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class AttentionBlock(nn.Module):
    """Multiplicative channel and spatial gating; shape preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.channel_gate = ChannelGate(channels)
        self.spatial_gate = SpatialGate()

    def forward(self, x, force_identity: bool = False):
        if force_identity:
            return x
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


class FiLM(nn.Module):
    """Per-channel scale/shift derived from the scanner-effect vector."""

    def __init__(self, s_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(s_dim, 2 * channels)

    def forward(self, x, z_s):
        gamma, beta = self.proj(z_s).chunk(2, dim=-1)
        gamma = gamma.view(x.shape[0], -1, 1, 1, 1)
        beta = beta.view(x.shape[0], -1, 1, 1, 1)
        return x * (1.0 + gamma) + beta


class ResBlock(nn.Module):
    def __init__(self, channels: int, s_dim: int | None = None, attention: bool = False):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(channels, affine=False)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(channels, affine=False)
        self.film = FiLM(s_dim, channels) if s_dim else None
        self.attn = AttentionBlock(channels) if attention else None

    def forward(self, x, z_s=None):
        h = self.norm1(self.conv1(x))
        if self.film is not None:
            h = self.film(h, z_s)
        h = F.relu(h)
        h = self.norm2(self.conv2(h))
        if self.attn is not None:
            h = self.attn(h)
        return x + h


class BrainEncoder(nn.Module):
    """Maps an image window to the anatomical embedding at half resolution."""

    def __init__(self, cfg: ScaleConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv3d(1, c, 3, padding=1)
        self.down = nn.Conv3d(c, 2 * c, 3, stride=2, padding=1)
        self.res = ResBlock(2 * c, attention=cfg.attention)
        self.head = nn.Conv3d(2 * c, cfg.zb_channels, 3, padding=1)

    def forward(self, x):
        h = F.relu(self.stem(x))
        h = F.relu(self.down(h))
        h = self.res(h)
        return self.head(h)


class ScannerEncoder(nn.Module):
    """Variational encoder of the scanner effect, conditioned on the label."""

    def __init__(self, cfg: ScaleConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv3d(1 + cfg.n_scanners, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(2 * c, 2 * cfg.s_dim)
        self.s_dim = cfg.s_dim

    def forward(self, x, label):
        h = self.net(torch.cat([x, _broadcast_label(label, x)], dim=1))
        h = F.adaptive_avg_pool3d(h, 1).flatten(1)
        mu, logvar = self.fc(h).chunk(2, dim=-1)
        sigma = torch.exp(0.5 * logvar)
        return mu, sigma


class Generator(nn.Module):
    """Synthesizes an image from an anatomical embedding, a scanner vector, and a label."""

    def __init__(self, cfg: ScaleConfig):
        super().__init__()
        c = cfg.base_channels
        self.inp = nn.Conv3d(cfg.zb_channels + cfg.n_scanners, 2 * c, 3, padding=1)
        self.res1 = ResBlock(2 * c, s_dim=cfg.s_dim, attention=cfg.attention)
        self.res2 = ResBlock(2 * c, s_dim=cfg.s_dim, attention=cfg.attention)
        self.post = nn.Conv3d(2 * c, c, 3, padding=1)
        self.out = nn.Conv3d(c, 1, 3, padding=1)
        self.target_shape = cfg.input_shape

    def forward(self, z_b, z_s, label):
        h = F.relu(self.inp(torch.cat([z_b, _broadcast_label(label, z_b)], dim=1)))
        h = self.res1(h, z_s)
        h = self.res2(h, z_s)
        h = F.interpolate(h, size=self.target_shape, mode="trilinear", align_corners=False)
        h = F.relu(self.post(h))
        return torch.sigmoid(self.out(h))


class BrainDiscriminator(nn.Module):
    """Predicts the scanner domain of an anatomical embedding."""

    def __init__(self, cfg: ScaleConfig):
        super().__init__()
        c = cfg.base_channels
        self.conv1 = nn.Conv3d(cfg.zb_channels, c, 3, stride=2, padding=1)
        self.attn = AttentionBlock(c) if cfg.attention else None
        self.conv2 = nn.Conv3d(c, 2 * c, 3, stride=2, padding=1)
        self.fc = nn.Linear(2 * c, cfg.n_scanners)

    def forward(self, z_b):
        h = F.leaky_relu(self.conv1(z_b), 0.2)
        if self.attn is not None:
            h = self.attn(h)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.adaptive_avg_pool3d(h, 1).flatten(1)
        return self.fc(h)


class ScannerDiscriminator(nn.Module):
    """Real/generated score plus scanner-label prediction for an image window."""

    def __init__(self, cfg: ScaleConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv3d(1, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.score_head = nn.Linear(2 * c, 1)
        self.label_head = nn.Linear(2 * c, cfg.n_scanners)

    def forward(self, x):
        h = self.net(x)
        h = F.adaptive_avg_pool3d(h, 1).flatten(1)
        return self.score_head(h), self.label_head(h)


@dataclass
class ScannerPosterior:
    """Posterior of the scanner effect plus a reparameterized sample."""

    mu: torch.Tensor
    sigma: torch.Tensor
    z_s: torch.Tensor
    eps: torch.Tensor


class ModelBundle:
    """The five modules plus scale config, iteration counter and reference bank."""

    module_names = ("brain_encoder", "scanner_encoder", "generator", "brain_disc", "scanner_disc")

    def __init__(self, cfg: ScaleConfig, seed: int = 0):
        self.cfg = cfg
        self.iteration = 0
        self.reference_bank: dict[str, torch.Tensor] = {}
        self.scanner_ids: list[str] = []
        self.brain_encoder = BrainEncoder(cfg)
        self.scanner_encoder = ScannerEncoder(cfg)
        self.generator = Generator(cfg)
        self.brain_disc = BrainDiscriminator(cfg)
        self.scanner_disc = ScannerDiscriminator(cfg)
        self._init_parameters(seed)

    def modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in self.module_names}

    def _init_parameters(self, seed: int) -> None:
        # Biases get a tiny random value rather than zero: exact zeros park
        # pre-activations on the ReLU kink, breaking finite-difference checks.
        gen = torch.Generator().manual_seed(seed)
        for _, module in sorted(self.modules().items()):
            for _, p in sorted(module.named_parameters()):
                with torch.no_grad():
                    p.normal_(0.0, 0.02 if p.ndim >= 2 else 0.002, generator=gen)

    def parameters_g(self):
        for m in (self.brain_encoder, self.scanner_encoder, self.generator):
            yield from m.parameters()

    def parameters_d(self):
        for m in (self.brain_disc, self.scanner_disc):
            yield from m.parameters()

    def train(self, mode: bool = True):
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def double(self):
        for m in self.modules().values():
            m.double()
        return self

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0).unsqueeze(0)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (B,1,H,W,D) input, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.cfg.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[2:])} != configured {self.cfg.input_shape}")
        return x

    def encode_brain(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic anatomical embedding; spatial dims halved (ceil) per axis."""
        return self.brain_encoder(self._check_input(x))

    def encode_scanner(
        self,
        x: torch.Tensor,
        label: torch.Tensor,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> ScannerPosterior:
        """Scanner-effect posterior with z_s = sigma * eps + mu."""
        x = self._check_input(x)
        label = check_label(label, self.cfg.n_scanners)
        mu, sigma = self.scanner_encoder(x, label)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        else:
            eps = torch.as_tensor(eps, dtype=mu.dtype)
            if eps.shape != mu.shape:
                eps = eps.expand_as(mu)
        return ScannerPosterior(mu=mu, sigma=sigma, z_s=sigma * eps + mu, eps=eps)

    def generate(self, z_b: torch.Tensor, z_s: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        """Image in [0, 1] with the configured input shape."""
        if z_b.ndim == 4:
            z_b = z_b.unsqueeze(0)
        if tuple(z_b.shape[2:]) != self.cfg.half_shape or z_b.shape[1] != self.cfg.zb_channels:
            raise ShapeError(f"brain embedding shape {tuple(z_b.shape)} does not match config")
        z_s = torch.as_tensor(z_s, dtype=z_b.dtype)
        if z_s.ndim == 1:
            z_s = z_s.unsqueeze(0).expand(z_b.shape[0], -1)
        if z_s.shape[-1] != self.cfg.s_dim:
            raise ShapeError(f"scanner vector length {z_s.shape[-1]} != S={self.cfg.s_dim}")
        label = check_label(label, self.cfg.n_scanners)
        return self.generator(z_b, z_s, label)

    def discriminate_brain(self, z_b: torch.Tensor) -> torch.Tensor:
        """Probability vector over the N training scanners."""
        return torch.softmax(self.brain_disc(z_b), dim=-1)

    def discriminate_scanner(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(real-probability in (0,1), scanner-probability vector)."""
        score, label_logits = self.scanner_disc(self._check_input(x))
        return torch.sigmoid(score).squeeze(-1), torch.softmax(label_logits, dim=-1)

    # -- persistence ---------------------------------------------------------

    def state_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": json.dumps(asdict(self.cfg)),
            "iteration": self.iteration,
            "scanner_ids": list(self.scanner_ids),
            "reference_bank": {k: v.clone() for k, v in self.reference_bank.items()},
            "modules": {name: m.state_dict() for name, m in self.modules().items()},
        }

    def save(self, path) -> None:
        torch.save(self.state_payload(), path)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        raw = json.loads(payload["config"])
        raw["input_shape"] = tuple(raw["input_shape"])
        cfg = ScaleConfig(**raw)
        bundle = cls(cfg, seed=0)
        for name, m in bundle.modules().items():
            m.load_state_dict(payload["modules"][name])
        bundle.iteration = int(payload["iteration"])
        bundle.scanner_ids = list(payload.get("scanner_ids", []))
        bundle.reference_bank = dict(payload.get("reference_bank", {}))
        return bundle


def parameter_gradients_finite(bundle: ModelBundle) -> bool:
    """True when every parameter gradient that exists is finite."""
    for m in bundle.modules().values():
        for p in m.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                return False
    return True


def volume_to_tensor(data: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(data), dtype=dtype).unsqueeze(0).unsqueeze(0)
