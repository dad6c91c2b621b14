"""Scalar objectives for the three optimization stages.

All functions accept either the numpy-backed value types or torch tensors
(channel-first); tensor inputs keep the computation differentiable and
return 0-dim tensors, value inputs return plain floats. Feature extractors
run at the dtype of their input, so float64 finite-difference checks work
against the same instances the float32 pipeline uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError
from .imaging import BlendMask, FaceParseMap, Image


def to_chw(x, dtype=None) -> torch.Tensor:
    """Coerce an Image / (H, W, 3) array / (3, H, W) tensor to channel-first."""
    if isinstance(x, Image):
        return x.to_tensor(dtype)
    if isinstance(x, torch.Tensor):
        if x.ndim != 3:
            raise DimensionError(f"expected (C, H, W) tensor, got {tuple(x.shape)}")
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected (H, W, C) array, got {arr.shape}")
    t = torch.from_numpy(np.transpose(arr, (2, 0, 1)).copy())
    return t.to(dtype or torch.float32)


def region_to_tensor(region, dtype=None) -> torch.Tensor:
    """Coerce a binary region to a (1, H, W) tensor."""
    if isinstance(region, BlendMask):
        region = region.values
    if isinstance(region, torch.Tensor):
        t = region
        if t.ndim == 2:
            t = t[None]
        if t.ndim != 3 or t.shape[0] != 1:
            raise DimensionError(f"expected (1, H, W) region, got {tuple(t.shape)}")
        return t if dtype is None else t.to(dtype)
    arr = np.asarray(region, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DimensionError(f"expected (H, W) region, got {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("region must be binary")
    return torch.from_numpy(arr.copy())[None].to(dtype or torch.float32)


def _same_hw(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_float(value, tensor_inputs: bool):
    return value if tensor_inputs else float(value)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Maps an image to a list of feature tensors at multiple scales."""

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError

    def __call__(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.features(x)


class IdentityPixelExtractor(FeatureExtractor):
    """Single scale, the raw pixels; perceptual distance becomes plain L2."""

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        return [x]


class FixedRandomConvExtractor(FeatureExtractor, nn.Module):
    """Frozen random strided-conv pyramid.

    The shallowest scale is the input itself, so the distance is lower
    bounded by a pixel term; each scale is RMS-normalized to keep the scales
    commensurate. Weights are fixed by seed and never trained.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64), seed: int = 0):
        nn.Module.__init__(self)
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                nn.init.kaiming_normal_(conv.weight, a=0.2, generator=gen)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        feats = [x / np.sqrt(x[0].numel())]
        h = x
        for conv in self.convs:
            h = F.leaky_relu(
                F.conv2d(h, conv.weight.to(h.dtype), conv.bias.to(h.dtype), stride=2, padding=1),
                0.2,
            )
            feats.append(h / np.sqrt(h[0].numel()))
        if squeeze:
            feats = [f[0] for f in feats]
        return feats


# ---------------------------------------------------------------------------
# Loss weights
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    """Weights of the composite objectives.

    `feature_weights` defaults every facial feature to 1.0; entries override
    per feature name.
    """

    alpha: float = 1e5
    feature_weights: Dict[str, float] = field(default_factory=dict)
    binary_weight: float = 1.0

    def feature_weight(self, name: str) -> float:
        return float(self.feature_weights.get(name, 1.0))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def perceptual_distance(a, b, extractor: FeatureExtractor):
    """Sum over scales of the L2 distance between feature tensors."""
    tensor_inputs = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    at, bt = to_chw(a), to_chw(b)
    if at.dtype != bt.dtype:
        at, bt = at.double(), bt.double()
    _same_hw(at, bt, "perceptual operands")
    fa = extractor(at)
    fb = extractor(bt)
    total = None
    for xa, xb in zip(fa, fb):
        d = torch.linalg.vector_norm(xa - xb)
        total = d if total is None else total + d
    return _as_float(total, tensor_inputs)


def masked_perceptual_t(a: torch.Tensor, b: torch.Tensor, region: torch.Tensor,
                        extractor: FeatureExtractor) -> torch.Tensor:
    """Tensor-path twin of masked_perceptual, used inside optimization loops."""
    r = region.to(a.dtype)
    return perceptual_distance(a * r, b * r, extractor)


def masked_perceptual(a, b, region, extractor: FeatureExtractor):
    tensor_inputs = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    at, bt = to_chw(a), to_chw(b)
    if at.dtype != bt.dtype:
        at, bt = at.double(), bt.double()
    rt = region_to_tensor(region, dtype=at.dtype)
    _same_hw(at, rt, "mask region")
    return _as_float(masked_perceptual_t(at, bt, rt, extractor), tensor_inputs)


def _noise_maps(noise) -> List[torch.Tensor]:
    maps = getattr(noise, "maps", noise)
    out = []
    for m in maps:
        if not isinstance(m, torch.Tensor):
            m = torch.from_numpy(np.asarray(m, dtype=np.float64))
        if m.ndim != 2:
            raise DimensionError(f"noise maps must be 2-D, got {tuple(m.shape)}")
        out.append(m)
    return out


def noise_regularization(noise):
    """Squared normalized circular autocorrelations of every noise map,
    accumulated over a 2x-average-pool pyramid down to resolution 8."""
    maps = _noise_maps(noise)
    tensor_inputs = any(isinstance(m, torch.Tensor) for m in getattr(noise, "maps", noise) or [])
    if not maps:
        return 0.0
    total = None
    for m in maps:
        x = m[None, None]
        while True:
            horiz = (x * torch.roll(x, shifts=1, dims=3)).mean() ** 2
            vert = (x * torch.roll(x, shifts=1, dims=2)).mean() ** 2
            term = horiz + vert
            total = term if total is None else total + term
            if x.shape[2] <= 8:
                break
            x = F.avg_pool2d(x, kernel_size=2)
    return _as_float(total, tensor_inputs)


def stage1_loss(gen, target, parse: FaceParseMap, noise, extractor: FeatureExtractor,
                weights: LossWeights):
    """Face-masked perceptual distance plus weighted noise regularization."""
    d = masked_perceptual(gen, target, parse.face_mask, extractor)
    reg = noise_regularization(noise)
    return d + weights.alpha * reg


def reconstruction_mse(recon, target):
    tensor_inputs = isinstance(recon, torch.Tensor) or isinstance(target, torch.Tensor)
    rt, tt = to_chw(recon), to_chw(target)
    if rt.dtype != tt.dtype:
        rt, tt = rt.double(), tt.double()
    if rt.shape != tt.shape:
        raise DimensionError(f"reconstruction mse: {tuple(rt.shape)} vs {tuple(tt.shape)}")
    return _as_float(((rt - tt) ** 2).mean(), tensor_inputs)


def facial_feature_loss(recon, target, parse: FaceParseMap, extractor: FeatureExtractor,
                        weights: LossWeights):
    """Weighted masked perceptual distance per annotated facial feature;
    absent features contribute nothing."""
    tensor_inputs = isinstance(recon, torch.Tensor) or isinstance(target, torch.Tensor)
    rt, tt = to_chw(recon), to_chw(target)
    if rt.dtype != tt.dtype:
        rt, tt = rt.double(), tt.double()
    total = None
    for name, mask in parse.feature_masks.items():
        lam = weights.feature_weight(name)
        if lam == 0.0:
            continue
        region = region_to_tensor(mask, dtype=rt.dtype)
        term = lam * masked_perceptual_t(rt, tt, region, extractor)
        total = term if total is None else total + term
    if total is None:
        return 0.0
    return _as_float(total, tensor_inputs)


def binary_mask_loss(mask):
    """Mean pixelwise distance to the nearer of {0, 1}; maximal at 0.5."""
    tensor_inputs = isinstance(mask, torch.Tensor)
    if isinstance(mask, BlendMask):
        mask = mask.values
    if isinstance(mask, torch.Tensor):
        m = mask
    else:
        arr = np.asarray(mask, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        m = torch.from_numpy(arr.copy())
    return _as_float(torch.minimum(m, 1.0 - m).mean(), tensor_inputs)


def stage3_loss(recon, target, parse: FaceParseMap, extractor: FeatureExtractor,
                weights: LossWeights):
    """Facial-feature loss plus the face-masked perceptual distance."""
    feat = facial_feature_loss(recon, target, parse, extractor, weights)
    overall = masked_perceptual(recon, target, parse.face_mask, extractor)
    return feat + overall
