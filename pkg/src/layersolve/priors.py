"""Pluggable generative priors over portrait images.

Two desk-scale implementations stand in for a large pretrained face
generator: `LinearPcaPrior` (mean + orthonormal component images, giving a
closed-form projection oracle) and `ToyConvPrior` (a small convolutional
decoder with per-resolution noise injection, consumed from a checkpoint
trained by scripts/train_toy_prior.py).

Latent conventions follow GAN-inversion practice: inputs are sampled in a
Gaussian z space and mapped into the optimization space w; for the linear
prior the mapping is the identity.
"""

from __future__ import annotations

import abc
import glob
import hashlib
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .imaging import FaceParseMap, Image, load_image
from .losses import FeatureExtractor, masked_perceptual_t

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentCode:
    """A latent vector together with the space it lives in ("z" or "w")."""

    w: np.ndarray
    space: str = "w"

    def __post_init__(self):
        arr = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.isfinite(arr).all():
            raise ValueError("latent contains non-finite values")
        if self.space not in ("z", "w"):
            raise ValueError(f"unknown latent space {self.space!r}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "w", arr)

    @property
    def dim(self) -> int:
        return self.w.shape[0]


class NoiseStack:
    """Ordered square noise maps, one per generator resolution level."""

    def __init__(self, maps: Sequence[torch.Tensor]):
        maps = list(maps)
        for m in maps:
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DimensionError(f"noise maps must be square 2-D, got {tuple(m.shape)}")
        sizes = [int(m.shape[0]) for m in maps]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"noise resolutions must be strictly increasing, got {sizes}")
        self.maps = maps

    @property
    def resolutions(self) -> List[int]:
        return [int(m.shape[0]) for m in self.maps]

    def __len__(self) -> int:
        return len(self.maps)

    def detach_clone(self) -> "NoiseStack":
        return NoiseStack([m.detach().clone() for m in self.maps])

    def requires_grad_(self, flag: bool = True) -> "NoiseStack":
        for m in self.maps:
            m.requires_grad_(flag)
        return self

    @staticmethod
    def empty() -> "NoiseStack":
        return NoiseStack([])


class PriorModel(abc.ABC):
    """Read-only image generator; weights are shared, optimization state is not."""

    latent_dim: int
    resolution: int

    # -- tensor path (autograd) ------------------------------------------------

    @abc.abstractmethod
    def generate_batch(self, w: torch.Tensor, noise: Optional[NoiseStack] = None) -> torch.Tensor:
        """(N, latent_dim) -> (N, 3, H, W); differentiable in w and noise."""

    def generate_tensor(self, w: torch.Tensor, noise: Optional[NoiseStack] = None) -> torch.Tensor:
        return self.generate_batch(w[None], noise)[0]

    @abc.abstractmethod
    def sample_noise(self, generator: torch.Generator) -> NoiseStack:
        """Fresh per-run noise inputs (empty stack if the prior has none)."""

    # -- latent mapping ---------------------------------------------------------

    @abc.abstractmethod
    def map_z_to_w_batch(self, z: np.ndarray) -> np.ndarray:
        ...

    # -- value path ---------------------------------------------------------

    def generate(self, w: LatentCode, noise: Optional[NoiseStack] = None) -> Image:
        if w.dim != self.latent_dim:
            raise DimensionError(f"latent dim {w.dim} != prior dim {self.latent_dim}")
        with torch.no_grad():
            out = self.generate_tensor(torch.from_numpy(w.w.copy()).float(), noise)
        return Image.from_tensor(out)

    @property
    def case_latent_scale(self) -> np.ndarray:
        """Per-coordinate scale of plausible latents (benchmark synthesis)."""
        return np.ones(self.latent_dim)

    @abc.abstractmethod
    def fingerprint(self) -> str:
        """Stable content hash used to key cached benchmark suites."""


# ---------------------------------------------------------------------------
# Linear prior with an exact projection oracle
# ---------------------------------------------------------------------------

class LinearPcaPrior(PriorModel):
    """Mean image plus an orthonormal basis of component images.

    generate(w) = mean + sum_k w_k * basis_k, with no clamping, so the map is
    exactly affine and least-squares projection is available as an oracle.
    """

    def __init__(self, mean: np.ndarray, basis: np.ndarray, component_scales: Optional[np.ndarray] = None):
        mean = np.asarray(mean, dtype=np.float64)
        basis = np.asarray(basis, dtype=np.float64)
        if mean.ndim != 3 or mean.shape[2] != 3:
            raise DimensionError(f"mean must be (H, W, 3), got {mean.shape}")
        if basis.ndim != 4 or basis.shape[1:] != mean.shape:
            raise DimensionError(f"basis must be (D,) + {mean.shape}, got {basis.shape}")
        flat = basis.reshape(basis.shape[0], -1)
        gram = flat @ flat.T
        if not np.allclose(gram, np.eye(basis.shape[0]), atol=1e-6):
            raise ConfigError("basis is not orthonormal within 1e-6")
        self.mean = mean
        self.basis = basis
        self.latent_dim = int(basis.shape[0])
        self.resolution = int(mean.shape[0])
        if component_scales is None:
            component_scales = np.ones(self.latent_dim)
        self._scales = np.asarray(component_scales, dtype=np.float64).reshape(self.latent_dim)
        # float32 copies in channel-first layout for the autograd path
        self._mean_t = torch.from_numpy(np.transpose(mean, (2, 0, 1)).copy()).float()
        self._basis_t = torch.from_numpy(
            np.transpose(basis, (0, 3, 1, 2)).reshape(self.latent_dim, -1).copy()
        ).float()

    def generate_batch(self, w: torch.Tensor, noise: Optional[NoiseStack] = None) -> torch.Tensor:
        if w.ndim != 2 or w.shape[1] != self.latent_dim:
            raise DimensionError(f"latents must be (N, {self.latent_dim}), got {tuple(w.shape)}")
        flat = w @ self._basis_t.to(w.dtype) + self._mean_t.to(w.dtype).reshape(1, -1)
        return flat.reshape(w.shape[0], 3, self.resolution, self.resolution)

    def generate(self, w: LatentCode, noise: Optional[NoiseStack] = None) -> Image:
        if w.dim != self.latent_dim:
            raise DimensionError(f"latent dim {w.dim} != prior dim {self.latent_dim}")
        # float64 path keeps the affine identity exact for oracle tests
        pixels = self.mean + np.tensordot(w.w, self.basis, axes=(0, 0))
        return Image(pixels)

    def sample_noise(self, generator: torch.Generator) -> NoiseStack:
        return NoiseStack.empty()

    def map_z_to_w_batch(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)

    @property
    def case_latent_scale(self) -> np.ndarray:
        return self._scales.copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.mean.tobytes())
        h.update(self.basis.tobytes())
        return "pca-" + h.hexdigest()[:16]


def build_pca_prior(image_dir, latent_dim: int = 32, resolution: int = 64) -> LinearPcaPrior:
    """Fit the linear prior from a folder of aligned same-size portraits."""
    paths = sorted(glob.glob(os.path.join(image_dir, "*.png")))
    if not paths:
        raise ConfigError(f"no PNG images found under {image_dir}")
    if len(paths) <= latent_dim:
        raise ConfigError(f"need more than latent_dim={latent_dim} images, found {len(paths)}")
    stack = []
    for p in paths:
        img = load_image(p)
        if img.height != resolution or img.width != resolution:
            raise ConfigError(f"{p}: expected {resolution}x{resolution}, got {img.height}x{img.width}")
        stack.append(img.pixels.reshape(-1))
    data = np.stack(stack)
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:latent_dim].reshape(latent_dim, resolution, resolution, 3)
    scales = svals[:latent_dim] / np.sqrt(len(paths))
    return LinearPcaPrior(mean.reshape(resolution, resolution, 3), basis, scales)


def pca_project_oracle(prior: LinearPcaPrior, target: Image) -> LatentCode:
    """Closed-form least-squares latent for a linear prior (test oracle)."""
    if not isinstance(prior, LinearPcaPrior):
        raise ConfigError("projection oracle requires a linear prior")
    residual = target.pixels - prior.mean
    w = np.tensordot(prior.basis, residual, axes=([1, 2, 3], [0, 1, 2]))
    return LatentCode(w, space="w")


# ---------------------------------------------------------------------------
# Small convolutional prior
# ---------------------------------------------------------------------------

class _UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.noise_strength = nn.Parameter(torch.zeros(()))

    def forward(self, x, noise_map=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        if noise_map is not None:
            x = x + self.noise_strength * noise_map[None, None]
        return F.leaky_relu(x, 0.2)


class ToyDecoderNet(nn.Module):
    """Latent -> image decoder with one square noise input per level."""

    def __init__(self, latent_dim: int, resolution: int, channels: Sequence[int]):
        super().__init__()
        levels = int(np.log2(resolution / 4))
        if 4 * 2**levels != resolution:
            raise ConfigError(f"resolution {resolution} must be 4 * 2^k")
        if len(channels) != levels + 1:
            raise ConfigError(f"need {levels + 1} channel widths, got {len(channels)}")
        self.latent_dim = latent_dim
        self.resolution = resolution
        self.channels = tuple(int(c) for c in channels)
        self.mapping = nn.Linear(latent_dim, latent_dim)
        self.fc = nn.Linear(latent_dim, channels[0] * 4 * 4)
        self.blocks = nn.ModuleList(
            _UpBlock(channels[i], channels[i + 1]) for i in range(levels)
        )
        self.to_rgb = nn.Conv2d(channels[-1], 3, 1)

    @property
    def noise_resolutions(self) -> List[int]:
        return [4 * 2 ** (i + 1) for i in range(len(self.blocks))]

    def forward(self, w, noise_maps=None):
        x = F.leaky_relu(self.fc(w), 0.2)
        x = x.reshape(-1, self.channels[0], 4, 4)
        for i, block in enumerate(self.blocks):
            n = noise_maps[i] if noise_maps is not None else None
            x = block(x, n)
        return self.to_rgb(x)


class ToyConvPrior(PriorModel):
    """Checkpoint-backed convolutional decoder with a z->w mapping layer."""

    def __init__(self, net: ToyDecoderNet):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.latent_dim = net.latent_dim
        self.resolution = net.resolution

    @staticmethod
    def create(latent_dim: int = 32, resolution: int = 64, seed: int = 0,
               channels: Optional[Sequence[int]] = None) -> "ToyConvPrior":
        if channels is None:
            levels = int(np.log2(resolution / 4))
            channels = [64] + [max(16, 64 // 2**i) for i in range(1, levels + 1)]
        net = ToyDecoderNet(latent_dim, resolution, channels)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in net.parameters():
                if p.ndim > 1:
                    nn.init.kaiming_normal_(p, a=0.2, generator=gen)
                else:
                    p.zero_()
            # identity-initialized mapping keeps sampled z and decoder w aligned
            net.mapping.weight.copy_(torch.eye(latent_dim))
            for b in net.blocks:
                b.noise_strength.fill_(0.05)
        return ToyConvPrior(net)

    def generate_batch(self, w: torch.Tensor, noise: Optional[NoiseStack] = None) -> torch.Tensor:
        if w.ndim != 2 or w.shape[1] != self.latent_dim:
            raise DimensionError(f"latents must be (N, {self.latent_dim}), got {tuple(w.shape)}")
        maps = None
        if noise is not None and len(noise):
            if noise.resolutions != self.net.noise_resolutions:
                raise ConfigError(
                    f"noise resolutions {noise.resolutions} != prior levels {self.net.noise_resolutions}"
                )
            maps = noise.maps
        return self.net(w, maps)

    def sample_noise(self, generator: torch.Generator) -> NoiseStack:
        return NoiseStack([
            torch.randn(r, r, generator=generator) for r in self.net.noise_resolutions
        ])

    def map_z_to_w_batch(self, z: np.ndarray) -> np.ndarray:
        zt = torch.from_numpy(np.asarray(z, dtype=np.float64)).float()
        with torch.no_grad():
            wt = self.net.mapping(zt)
        return wt.double().numpy()

    def randomized_copy(self, seed: int) -> "ToyConvPrior":
        """Same architecture with freshly random weights (prior-free control)."""
        fresh = ToyConvPrior.create(
            self.latent_dim, self.resolution, seed=seed, channels=self.net.channels
        )
        return fresh

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key, value in sorted(self.net.state_dict().items()):
            h.update(key.encode())
            h.update(value.detach().cpu().numpy().tobytes())
        return "conv-" + h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_prior(prior: PriorModel, path) -> None:
    if isinstance(prior, LinearPcaPrior):
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "pca",
            "latent_dim": prior.latent_dim,
            "resolution": prior.resolution,
            "mean": torch.from_numpy(prior.mean.copy()),
            "basis": torch.from_numpy(prior.basis.copy()),
            "component_scales": torch.from_numpy(prior.case_latent_scale),
        }
    elif isinstance(prior, ToyConvPrior):
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "conv",
            "latent_dim": prior.latent_dim,
            "resolution": prior.resolution,
            "channels": list(prior.net.channels),
            "state_dict": prior.net.state_dict(),
        }
    else:
        raise ConfigError(f"cannot serialize prior type {type(prior).__name__}")
    torch.save(payload, path)


def load_prior(path) -> PriorModel:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    kind = payload.get("kind")
    if kind == "pca":
        return LinearPcaPrior(
            payload["mean"].numpy(),
            payload["basis"].numpy(),
            payload["component_scales"].numpy(),
        )
    if kind == "conv":
        net = ToyDecoderNet(
            int(payload["latent_dim"]), int(payload["resolution"]), payload["channels"]
        )
        net.load_state_dict(payload["state_dict"])
        return ToyConvPrior(net)
    raise ConfigError(f"unknown prior kind {kind!r}")


# ---------------------------------------------------------------------------
# Latent sampling and initialization-candidate scoring
# ---------------------------------------------------------------------------

def sample_latents(prior: PriorModel, n: int, seed: int) -> List[LatentCode]:
    """n i.i.d. standard-normal z samples, mapped into w space."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((n, prior.latent_dim))
    w = prior.map_z_to_w_batch(z)
    return [LatentCode(w[i], space="w") for i in range(n)]


def map_z_to_w(prior: PriorModel, z: LatentCode) -> LatentCode:
    if z.dim != prior.latent_dim:
        raise DimensionError(f"latent dim {z.dim} != prior dim {prior.latent_dim}")
    return LatentCode(prior.map_z_to_w_batch(z.w[None])[0], space="w")


def select_best_latent(
    prior: PriorModel,
    candidates: Sequence[LatentCode],
    target: Image,
    parse: FaceParseMap,
    extractor: FeatureExtractor,
    noise: Optional[NoiseStack] = None,
    batch_size: int = 64,
) -> LatentCode:
    """Candidate with the smallest face-masked perceptual distance to the
    target; ties break toward the lowest candidate index."""
    if not candidates:
        raise ValueError("empty candidate list")
    target_t = target.to_tensor()
    region = torch.from_numpy(parse.face_mask[:, :, 0]).float()[None]
    dists = np.empty(len(candidates))
    with torch.no_grad():
        for start in range(0, len(candidates), batch_size):
            chunk = candidates[start : start + batch_size]
            w = torch.from_numpy(np.stack([c.w for c in chunk])).float()
            images = prior.generate_batch(w, noise)
            for j in range(images.shape[0]):
                dists[start + j] = float(
                    masked_perceptual_t(images[j], target_t, region, extractor)
                )
    best = int(np.argmin(dists))
    return candidates[best]
