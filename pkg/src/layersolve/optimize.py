"""Three-stage progressive decomposition and its controlled variants.

Stage 1 projects the degraded portrait into the prior's latent space
(candidate selection, then Adam on the latent and noise inputs). Stage 2
freezes the projected face and fits the per-channel color attenuation plus
the mask network against a pixel reconstruction objective. Stage 3 freezes
the mask and jointly refines the latent and the color under perceptual and
facial-feature objectives.

The joint variant collapses the schedule into a single phase; the
prior-free variant reruns the full schedule on a freshly randomized
decoder. Overlay mode swaps the attenuation model for an optimizable
constant color and adds the binary-mask regularizer.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch

from .errors import ConfigError, NonFiniteLossError, UnsupportedVariantError
from .imaging import (
    BlendMask,
    ColorMatrix,
    FaceParseMap,
    Image,
    apply_color_matrix,
    blend,
    solid_image,
)
from .losses import (
    FeatureExtractor,
    LossWeights,
    binary_mask_loss,
    facial_feature_loss,
    masked_perceptual_t,
    noise_regularization,
    reconstruction_mse,
)
from .masknet import MaskNet, MaskNetConfig, init_masknet
from .priors import (
    LatentCode,
    LinearPcaPrior,
    NoiseStack,
    PriorModel,
    sample_latents,
    select_best_latent,
)

MODES = ("shadow", "overlay")
VARIANTS = ("full", "joint", "no_prior")


@dataclass
class RunConfig:
    """Schedule, learning rates and weights of one decomposition run."""

    n_init_samples: int = 500
    init_steps: int = 300
    blend_steps: int = 50
    refine_steps: int = 450
    lr_latent: float = 0.01
    lr_masknet: float = 0.001
    lr_color: float = 0.01
    alpha: float = 1e5
    color_init: float = 0.5
    mode: str = "shadow"
    variant: str = "full"
    seed: int = 0
    resolution: int = 64
    binary_weight: float = 1.0
    feature_weights: Dict[str, float] = field(default_factory=dict)
    # cosine ramp of the latent-projection stages (fractions of the stage)
    lr_rampup_frac: float = 0.05
    lr_rampdown_frac: float = 0.25
    candidate_batch: int = 64

    def __post_init__(self):
        if self.n_init_samples < 1:
            raise ConfigError("n_init_samples must be >= 1")
        for name in ("init_steps", "blend_steps", "refine_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr_latent", "lr_masknet", "lr_color"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.color_init <= 1.0:
            raise ConfigError("color_init must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha=self.alpha,
            feature_weights=dict(self.feature_weights),
            binary_weight=self.binary_weight,
        )


@dataclass(frozen=True)
class TraceStep:
    stage: str
    step: int
    loss: float
    components: Dict[str, float]


@dataclass
class OptimizationTrace:
    steps: List[TraceStep] = field(default_factory=list)
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def stage_steps(self, stage: str) -> List[TraceStep]:
        return [s for s in self.steps if s.stage == stage]

    def last_component(self, stage: str, name: str) -> Optional[float]:
        for s in reversed(self.steps):
            if s.stage == stage and name in s.components:
                return s.components[name]
        return None


@dataclass
class DecompositionResult:
    i_free: Image
    i_full: Image
    mask: BlendMask
    color: Optional[ColorMatrix]
    pure_color: Optional[np.ndarray]
    latent: LatentCode
    trace: OptimizationTrace
    mode: str

    def recomposed(self) -> Image:
        return Image(blend(self.i_free.pixels, self.i_full.pixels, self.mask.values))


# ---------------------------------------------------------------------------
# Internals
# ---------------------------------------------------------------------------

@dataclass
class _Stage1State:
    latent: LatentCode
    noise: NoiseStack
    image: Image
    w_tensor: torch.Tensor
    steps: List[TraceStep]
    wall: float


@dataclass
class _Stage2State:
    color: ColorMatrix
    masknet: MaskNet
    mask: BlendMask
    color_tensor: torch.Tensor
    mask_tensor: torch.Tensor
    steps: List[TraceStep]
    wall: float


def _derive_seeds(seed: int) -> Dict[str, int]:
    names = ("candidates", "prior_noise", "masknet", "variant")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _ramped_lr(base: float, step: int, total: int, rampup: float, rampdown: float) -> float:
    if total <= 1:
        return base
    t = step / total
    ramp = min(1.0, (1.0 - t) / max(rampdown, 1e-9))
    ramp = 0.5 - 0.5 * math.cos(ramp * math.pi)
    if rampup > 0:
        ramp = ramp * min(1.0, t / rampup + 1.0 / total)
    return base * ramp


def _check_finite(value: float, stage: str, step: int, steps: List[TraceStep]):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss at {stage} step {step}", steps)


def _digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _prior_digest(prior: PriorModel) -> str:
    return prior.fingerprint()


def _color_tensor(init: float) -> torch.Tensor:
    return torch.full((3,), float(init), requires_grad=True)


def _face_region(parse: FaceParseMap) -> torch.Tensor:
    return torch.from_numpy(parse.face_mask[:, :, 0].copy()).float()[None]


def _validate_run_inputs(input_image: Image, parse: FaceParseMap, prior: PriorModel, cfg: RunConfig):
    if input_image.height != cfg.resolution or input_image.width != cfg.resolution:
        raise ConfigError(
            f"input is {input_image.height}x{input_image.width}, config expects {cfg.resolution}"
        )
    if prior.resolution != cfg.resolution:
        raise ConfigError(f"prior resolution {prior.resolution} != configured {cfg.resolution}")
    if parse.face_mask.shape[:2] != (cfg.resolution, cfg.resolution):
        raise ConfigError("parse map resolution does not match the input")


# ---------------------------------------------------------------------------
# Stage 1: initial face projection
# ---------------------------------------------------------------------------

def stage1_initial_face(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> _Stage1State:
    """Candidate selection followed by latent/noise projection steps."""
    t0 = time.perf_counter()
    seeds = _derive_seeds(cfg.seed)
    weights = cfg.loss_weights()

    gen = torch.Generator().manual_seed(seeds["prior_noise"])
    noise = prior.sample_noise(gen)
    candidates = sample_latents(prior, cfg.n_init_samples, seeds["candidates"])
    best = select_best_latent(
        prior, candidates, input_image, parse, extractor,
        noise=noise, batch_size=cfg.candidate_batch,
    )

    w = torch.from_numpy(best.w.copy()).float().requires_grad_(True)
    noise.requires_grad_(True)
    target_t = input_image.to_tensor()
    region = _face_region(parse)

    params = [w, *noise.maps]
    opt = torch.optim.Adam(params, lr=cfg.lr_latent, betas=(0.9, 0.999), eps=1e-8)
    steps: List[TraceStep] = []
    for k in range(1, cfg.init_steps + 1):
        lr = _ramped_lr(cfg.lr_latent, k - 1, cfg.init_steps, cfg.lr_rampup_frac, cfg.lr_rampdown_frac)
        for group in opt.param_groups:
            group["lr"] = lr
        generated = prior.generate_tensor(w, noise)
        percep = masked_perceptual_t(generated, target_t, region, extractor)
        reg = noise_regularization(noise) if len(noise) else torch.zeros(())
        loss = percep + weights.alpha * reg
        loss_f = float(loss)
        _check_finite(loss_f, "init_face", k, steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        steps.append(TraceStep(
            "init_face", k, loss_f,
            {"perceptual": float(percep), "noise_reg": float(reg)},
        ))

    noise.requires_grad_(False)
    with torch.no_grad():
        final_img = prior.generate_tensor(w, noise)
    return _Stage1State(
        latent=LatentCode(w.detach().double().numpy()),
        noise=noise,
        image=Image.from_tensor(final_img),
        w_tensor=w,
        steps=steps,
        wall=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Stage 2: color matrix / pure color + mask network
# ---------------------------------------------------------------------------

def _fit_blend_layer(
    input_image: Image,
    i_free_init: Image,
    cfg: RunConfig,
    overlay: bool,
) -> _Stage2State:
    t0 = time.perf_counter()
    seeds = _derive_seeds(cfg.seed)
    net = init_masknet(MaskNetConfig(resolution=cfg.resolution), seeds["masknet"])
    color = _color_tensor(cfg.color_init)
    free_t = i_free_init.to_tensor()
    target_t = input_image.to_tensor()

    opt = torch.optim.Adam(
        [
            {"params": net.parameters(), "lr": cfg.lr_masknet},
            {"params": [color], "lr": cfg.lr_color},
        ],
        betas=(0.9, 0.999), eps=1e-8,
    )
    steps: List[TraceStep] = []
    stage = "fit_blend"
    for p in range(1, cfg.blend_steps + 1):
        mask = net()
        if overlay:
            degraded = color[:, None, None].expand_as(free_t)
        else:
            degraded = color[:, None, None] * free_t
        recon = blend(free_t, degraded, mask)
        mse = reconstruction_mse(recon, target_t)
        components = {"recon_mse": float(mse)}
        loss = mse
        if overlay and cfg.binary_weight != 0.0:
            binary = binary_mask_loss(mask)
            loss = loss + cfg.binary_weight * binary
            components["binary"] = float(binary)
        loss_f = float(loss)
        _check_finite(loss_f, stage, p, steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            color.clamp_(0.0, 1.0)
        steps.append(TraceStep(stage, p, loss_f, components))

    with torch.no_grad():
        mask_t = net().detach()
    rgb = color.detach().double().numpy()
    color_value = ColorMatrix(rgb[0], rgb[1], rgb[2])
    return _Stage2State(
        color=color_value,
        masknet=net,
        mask=BlendMask.from_tensor(mask_t, mode="binary" if overlay else "soft"),
        color_tensor=color,
        mask_tensor=mask_t,
        steps=steps,
        wall=time.perf_counter() - t0,
    )


def stage2_color_and_mask(input_image: Image, i_free_init: Image, cfg: RunConfig) -> _Stage2State:
    """Fit the diagonal color attenuation and the mask network while the
    projected face stays fixed."""
    return _fit_blend_layer(input_image, i_free_init, cfg, overlay=False)


# ---------------------------------------------------------------------------
# Stage 3: facial refinement
# ---------------------------------------------------------------------------

def stage3_refine(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    s1: _Stage1State,
    s2: _Stage2State,
    extractor: FeatureExtractor,
    cfg: RunConfig,
    stage1_wall: float = 0.0,
) -> DecompositionResult:
    """Refine latent and color (or pure color) against perceptual objectives;
    the mask from stage 2 stays frozen."""
    t0 = time.perf_counter()
    overlay = cfg.mode == "overlay"
    weights = cfg.loss_weights()
    target_t = input_image.to_tensor()
    mask_t = s2.mask_tensor.detach()

    w = s1.w_tensor.detach().clone().requires_grad_(True)
    color = s2.color_tensor.detach().clone().requires_grad_(True)
    noise = s1.noise

    opt = torch.optim.Adam(
        [
            {"params": [w], "lr": cfg.lr_latent},
            {"params": [color], "lr": cfg.lr_color},
        ],
        betas=(0.9, 0.999), eps=1e-8,
    )
    steps: List[TraceStep] = list(s1.steps) + list(s2.steps)
    stage = "refine_face"
    binary_const = float(binary_mask_loss(mask_t)) if overlay else 0.0
    n_own = 0
    for q in range(1, cfg.refine_steps + 1):
        for group in opt.param_groups:
            base = cfg.lr_latent if group["params"][0] is w else cfg.lr_color
            group["lr"] = _ramped_lr(base, q - 1, cfg.refine_steps, cfg.lr_rampup_frac, cfg.lr_rampdown_frac)
        generated = prior.generate_tensor(w, noise)
        if overlay:
            degraded = color[:, None, None].expand_as(generated)
        else:
            degraded = color[:, None, None] * generated
        recon = blend(generated, degraded, mask_t)
        feat = facial_feature_loss(recon, target_t, parse, extractor, weights)
        percep = masked_perceptual_t(recon, target_t, _face_region(parse), extractor)
        loss = feat + percep
        components = {"feature": float(feat), "perceptual": float(percep)}
        if overlay and cfg.binary_weight != 0.0:
            loss = loss + cfg.binary_weight * binary_const
            components["binary"] = binary_const
        loss_f = float(loss)
        _check_finite(loss_f, stage, q, steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            color.clamp_(0.0, 1.0)
        steps.append(TraceStep(stage, q, loss_f, components))
        n_own += 1

    with torch.no_grad():
        final_t = prior.generate_tensor(w, noise)
    i_free = Image.from_tensor(final_t)
    latent = LatentCode(w.detach().double().numpy())
    rgb = color.detach().double().numpy()
    if overlay:
        i_full = solid_image(rgb, i_free.height, i_free.width)
        color_value = None
        pure = rgb.copy()
    else:
        color_value = ColorMatrix(rgb[0], rgb[1], rgb[2])
        i_full = apply_color_matrix(i_free, color_value)
        pure = None
    trace = OptimizationTrace(
        steps=steps,
        wall_clock={
            "init_face": stage1_wall,
            "fit_blend": s2.wall,
            "refine_face": time.perf_counter() - t0,
        },
    )
    return DecompositionResult(
        i_free=i_free,
        i_full=i_full,
        mask=s2.mask,
        color=color_value,
        pure_color=pure,
        latent=latent,
        trace=trace,
        mode=cfg.mode,
    )


# ---------------------------------------------------------------------------
# End-to-end runs
# ---------------------------------------------------------------------------

def _run_three_stage(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> DecompositionResult:
    overlay = cfg.mode == "overlay"
    _validate_run_inputs(input_image, parse, prior, cfg)

    s1 = stage1_initial_face(input_image, parse, prior, extractor, cfg)

    # Stage 2 must not touch the latent, the noise inputs, or prior weights.
    before = _digest([s1.w_tensor, *s1.noise.maps]) + _prior_digest(prior)
    s2 = _fit_blend_layer(input_image, s1.image, cfg, overlay=overlay)
    after = _digest([s1.w_tensor, *s1.noise.maps]) + _prior_digest(prior)
    assert before == after, "stage 2 modified frozen projection state"

    # Stage 3 must not touch the mask network or the mask itself.
    theta_before = _digest(s2.masknet.parameters())
    mask_before = s2.mask_tensor.detach().clone()
    result = stage3_refine(input_image, parse, prior, s1, s2, extractor, cfg, stage1_wall=s1.wall)
    assert _digest(s2.masknet.parameters()) == theta_before, "stage 3 modified the mask network"
    assert torch.equal(mask_before, s2.mask_tensor), "stage 3 modified the frozen mask"

    return result


def run_decomposition(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> DecompositionResult:
    """Full progressive schedule for the shadow decomposition model."""
    if cfg.variant != "full":
        raise ConfigError("run_decomposition handles the full variant only")
    if cfg.mode != "shadow":
        raise ConfigError("run_decomposition handles shadow mode; use run_overlay")
    return _run_three_stage(input_image, parse, prior, extractor, cfg)


def run_overlay(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> DecompositionResult:
    """Full schedule for the constant-color overlay model (tattoo/watermark)."""
    if cfg.mode != "overlay":
        raise ConfigError("run_overlay requires mode='overlay'")
    if cfg.variant != "full":
        raise UnsupportedVariantError("overlay mode supports the full variant only")
    return _run_three_stage(input_image, parse, prior, extractor, cfg)


def _run_joint(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> DecompositionResult:
    """Single-phase control: all parameter groups optimized together against
    the reconstruction objective plus the projection perceptual term."""
    _validate_run_inputs(input_image, parse, prior, cfg)
    t0 = time.perf_counter()
    seeds = _derive_seeds(cfg.seed)
    weights = cfg.loss_weights()

    gen = torch.Generator().manual_seed(seeds["prior_noise"])
    noise = prior.sample_noise(gen)
    candidates = sample_latents(prior, cfg.n_init_samples, seeds["candidates"])
    best = select_best_latent(
        prior, candidates, input_image, parse, extractor,
        noise=noise, batch_size=cfg.candidate_batch,
    )

    w = torch.from_numpy(best.w.copy()).float().requires_grad_(True)
    noise.requires_grad_(True)
    net = init_masknet(MaskNetConfig(resolution=cfg.resolution), seeds["masknet"])
    color = _color_tensor(cfg.color_init)
    target_t = input_image.to_tensor()
    region = _face_region(parse)

    total_steps = cfg.init_steps + cfg.blend_steps + cfg.refine_steps
    opt = torch.optim.Adam(
        [
            {"params": [w, *noise.maps], "lr": cfg.lr_latent},
            {"params": net.parameters(), "lr": cfg.lr_masknet},
            {"params": [color], "lr": cfg.lr_color},
        ],
        betas=(0.9, 0.999), eps=1e-8,
    )
    base_lrs = [cfg.lr_latent, cfg.lr_masknet, cfg.lr_color]
    steps: List[TraceStep] = []
    for k in range(1, total_steps + 1):
        for group, base in zip(opt.param_groups, base_lrs):
            group["lr"] = _ramped_lr(base, k - 1, total_steps, cfg.lr_rampup_frac, cfg.lr_rampdown_frac)
        generated = prior.generate_tensor(w, noise)
        mask = net()
        recon = blend(generated, color[:, None, None] * generated, mask)
        mse = reconstruction_mse(recon, target_t)
        percep = masked_perceptual_t(generated, target_t, region, extractor)
        reg = noise_regularization(noise) if len(noise) else torch.zeros(())
        loss = mse + percep + weights.alpha * reg
        loss_f = float(loss)
        _check_finite(loss_f, "joint", k, steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            color.clamp_(0.0, 1.0)
        steps.append(TraceStep(
            "joint", k, loss_f,
            {"recon_mse": float(mse), "perceptual": float(percep), "noise_reg": float(reg)},
        ))

    with torch.no_grad():
        final_t = prior.generate_tensor(w, noise)
        mask_t = net().detach()
    i_free = Image.from_tensor(final_t)
    rgb = color.detach().double().numpy()
    color_value = ColorMatrix(rgb[0], rgb[1], rgb[2])
    trace = OptimizationTrace(steps=steps, wall_clock={"joint": time.perf_counter() - t0})
    return DecompositionResult(
        i_free=i_free,
        i_full=apply_color_matrix(i_free, color_value),
        mask=BlendMask.from_tensor(mask_t, mode="soft"),
        color=color_value,
        pure_color=None,
        latent=LatentCode(w.detach().double().numpy()),
        trace=trace,
        mode=cfg.mode,
    )


def run_variant(
    input_image: Image,
    parse: FaceParseMap,
    prior: PriorModel,
    extractor: FeatureExtractor,
    cfg: RunConfig,
) -> DecompositionResult:
    """Dispatch on cfg.variant; the controls mirror the reported ablations."""
    if cfg.variant == "full":
        if cfg.mode == "overlay":
            return run_overlay(input_image, parse, prior, extractor, cfg)
        return run_decomposition(input_image, parse, prior, extractor, cfg)
    if cfg.mode == "overlay":
        raise UnsupportedVariantError("joint/no_prior variants run in shadow mode only")
    if cfg.variant == "joint":
        return _run_joint(input_image, parse, prior, extractor, cfg)
    if cfg.variant == "no_prior":
        if not hasattr(prior, "randomized_copy"):
            raise UnsupportedVariantError(
                f"{type(prior).__name__} has no weights to randomize; no_prior needs the conv prior"
            )
        seeds = _derive_seeds(cfg.seed)
        fresh = prior.randomized_copy(seeds["variant"])
        return _run_three_stage(input_image, parse, fresh, extractor, cfg)
    raise ConfigError(f"unknown variant {cfg.variant!r}")
