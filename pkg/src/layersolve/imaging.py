"""Image containers and the layer-compositing primitives.

Pixel values live in [0,1] floats; 8-bit PNG files are scaled by 255 on
load/save. Clamping happens only at serialization so gradients never die
inside an optimization graph. The low-level kernels (`blend`,
`scale_channels`, `hadamard`) are written against plain array semantics and
work unchanged on numpy arrays and torch tensors; the typed operations wrap
them with shape validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
import PIL.Image

from .errors import DimensionError

FEATURE_NAMES = ("nose", "eyebrow", "eyeball", "mouth", "glasses")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Differentiable kernels (numpy arrays or torch tensors)
# ---------------------------------------------------------------------------

def blend(free, full, mask):
    """free * mask + full * (1 - mask), broadcasting the mask over channels."""
    return free * mask + full * (1.0 - mask)


def scale_channels(image, lambdas):
    """Scale each color channel by its diagonal attenuation factor.

    `image` is channel-last (H, W, 3) for numpy or channel-first (3, H, W)
    for torch; `lambdas` must already be shaped to broadcast accordingly.
    """
    return image * lambdas


def hadamard(image, region):
    """Pixelwise product of an image with a single-channel region mask."""
    return image * region


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image:
    """H x W x 3 float image, immutable after construction."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"expected (H, W, 3) pixels, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "pixels", _freeze(arr))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def clamped(self) -> "Image":
        return Image(np.clip(self.pixels, 0.0, 1.0))

    def to_tensor(self, dtype=None):
        """Channel-first (3, H, W) torch tensor copy."""
        import torch

        dtype = dtype or torch.float32
        return torch.from_numpy(np.transpose(self.pixels, (2, 0, 1)).copy()).to(dtype)

    @staticmethod
    def from_tensor(tensor) -> "Image":
        arr = tensor.detach().cpu().double().numpy()
        return Image(np.transpose(arr, (1, 2, 0)))


@dataclass(frozen=True)
class BlendMask:
    """H x W x 1 blending weights; soft masks come from a sigmoid, binary
    masks from the overlay extension's regularizer."""

    values: np.ndarray
    mode: str = "soft"

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] != 1:
            raise DimensionError(f"expected (H, W, 1) mask, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("mask contains non-finite values")
        if self.mode not in ("soft", "binary"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_tensor(self, dtype=None):
        import torch

        dtype = dtype or torch.float32
        return torch.from_numpy(np.transpose(self.values, (2, 0, 1)).copy()).to(dtype)

    @staticmethod
    def from_tensor(tensor, mode: str = "soft") -> "BlendMask":
        arr = tensor.detach().cpu().double().numpy()
        return BlendMask(np.transpose(arr, (1, 2, 0)), mode=mode)


@dataclass(frozen=True)
class ColorMatrix:
    """Diagonal per-channel attenuation; off-diagonals do not exist."""

    lambda_r: float
    lambda_g: float
    lambda_b: float

    def __post_init__(self):
        for name in ("lambda_r", "lambda_g", "lambda_b"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda_r, self.lambda_g, self.lambda_b])


@dataclass(frozen=True)
class FaceParseMap:
    """Binary face region plus optional per-feature regions, all (H, W, 1)."""

    face_mask: np.ndarray
    feature_masks: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        face = self._check_binary(self.face_mask, "face_mask")
        feats: Dict[str, np.ndarray] = {}
        for name, mask in dict(self.feature_masks).items():
            if name not in FEATURE_NAMES:
                raise ValueError(f"unknown facial feature {name!r}")
            m = self._check_binary(mask, name)
            if m.shape != face.shape:
                raise DimensionError(f"feature {name} shape {m.shape} != face {face.shape}")
            if np.any(m > face):
                raise ValueError(f"feature {name} is not a subset of the face region")
            feats[name] = m
        object.__setattr__(self, "face_mask", face)
        object.__setattr__(self, "feature_masks", feats)

    @staticmethod
    def _check_binary(mask, name) -> np.ndarray:
        arr = np.asarray(mask, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] != 1:
            raise DimensionError(f"{name}: expected (H, W, 1), got {arr.shape}")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError(f"{name} must be 0/1 valued")
        return _freeze(arr)

    @staticmethod
    def full_face(height: int, width: int) -> "FaceParseMap":
        return FaceParseMap(np.ones((height, width, 1)))


# ---------------------------------------------------------------------------
# Typed compositing operations
# ---------------------------------------------------------------------------

def _require_same_size(a, b, what: str):
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionError(
            f"{what}: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def compose(free: Image, full: Image, mask: BlendMask) -> Image:
    """Blend the clean and degraded layers through the mask."""
    _require_same_size(free, full, "compose layers")
    _require_same_size(free, mask, "compose mask")
    return Image(blend(free.pixels, full.pixels, mask.values))


def compose_overlay(clean: Image, pure: Image, mask: BlendMask) -> Image:
    """Blend a clean layer with a pure-color layer; same formula as compose."""
    _require_same_size(clean, pure, "overlay layers")
    _require_same_size(clean, mask, "overlay mask")
    return Image(blend(clean.pixels, pure.pixels, mask.values))


def apply_color_matrix(free: Image, c: ColorMatrix) -> Image:
    """Per-channel attenuation producing the fully degraded layer."""
    return Image(scale_channels(free.pixels, c.as_array()))


def mask_image(img: Image, region: np.ndarray) -> Image:
    """Zero everything outside a binary region."""
    arr = np.asarray(region, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[:2] != (img.height, img.width) or arr.shape[2] != 1:
        raise DimensionError(f"region shape {arr.shape} does not match image")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("region must be binary")
    return Image(hadamard(img.pixels, arr))


def solid_image(color, height: int, width: int) -> Image:
    """Constant-color image, e.g. the pure layer of the overlay model."""
    rgb = np.asarray(color, dtype=np.float64).reshape(3)
    return Image(np.broadcast_to(rgb, (height, width, 3)).copy())


# ---------------------------------------------------------------------------
# PNG I/O (8-bit, scale factor 255)
# ---------------------------------------------------------------------------

def quantize8(arr: np.ndarray) -> np.ndarray:
    """Round [0,1] floats onto the 8-bit grid k/255, clamping first."""
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0)
    return q / 255.0


def save_image(img: Image, path) -> None:
    data = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PIL.Image.fromarray(data, mode="RGB").save(path)


def load_image(path) -> Image:
    with PIL.Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(data / 255.0)


def save_mask(mask: BlendMask, path) -> None:
    data = np.rint(np.clip(mask.values[:, :, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    PIL.Image.fromarray(data, mode="L").save(path)


def load_mask(path, mode: str = "soft") -> BlendMask:
    with PIL.Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    return BlendMask(data / 255.0, mode=mode)
