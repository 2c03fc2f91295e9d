"""Model graphs: UNet, TransUNet, and their probabilistic variants.

Feature maps are torch tensors in NCHW layout; segmentation heads emit
single-channel logits at the input spatial size (the sigmoid lives at the
loss/metric boundary). The probabilistic variants add prior/posterior latent
encoders and fuse a sampled latent vector into the decoder's final feature
map through one of two combiners: channel-broadcast concatenation ("tile") or
a stack of stride-2 transposed convolutions ("deconv").

All activations are smooth (GELU) and normalization is stateless GroupNorm,
so forward passes are mode-free, bit-deterministic in single-threaded
execution, and friendly to finite-difference gradient verification.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .objective import DETERMINISTIC_KINDS, MODEL_KINDS, PROBABILISTIC_KINDS

log = logging.getLogger(__name__)

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


class ConfigError(ValueError):
    """Invalid model configuration or configuration/kind combination."""


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_size: int = 128
    in_channels: int = 1
    unet_filters: tuple[int, ...] = (64, 128, 256, 512, 1024)
    trans_filters: tuple[int, ...] = (16, 32, 64, 128)
    n_transformer_layers: int = 12
    hidden_dim: int = 768
    n_heads: int = 12
    mlp_dim: int = 3072
    latent_dim: int = 0
    combiner: str | None = None
    scale_preset: str = "custom"
    patch_grid: int = field(default=0)

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose one of {MODEL_KINDS}")
        if self.input_size < 8 or (self.input_size & (self.input_size - 1)) != 0:
            raise ConfigError(f"input_size must be a power of two >= 8, got {self.input_size}")
        if self.kind in PROBABILISTIC_KINDS:
            if self.latent_dim < 1:
                raise ConfigError(f"{self.kind} requires latent_dim >= 1")
            if self.combiner is None:
                object.__setattr__(self, "combiner", "tile" if self.kind == "prob-unet" else "deconv")
            if self.combiner not in ("tile", "deconv"):
                raise ConfigError(f"combiner must be 'tile' or 'deconv', got {self.combiner!r}")
        else:
            if self.latent_dim != 0:
                raise ConfigError(f"latent_dim is only meaningful for probabilistic kinds, got {self.latent_dim}")
            if self.combiner is not None:
                raise ConfigError(f"combiner is only meaningful for probabilistic kinds")
        if self.is_transformer:
            if len(self.trans_filters) < 2:
                raise ConfigError("trans_filters needs at least two entries")
            if self.hidden_dim % self.n_heads != 0:
                raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
            down = 2 ** len(self.trans_filters)
            if self.input_size % down != 0 or self.input_size < down:
                raise ConfigError(
                    f"input_size {self.input_size} incompatible with {len(self.trans_filters)} "
                    f"encoder scales (needs a multiple of {down})"
                )
            grid = self.input_size // down
            if self.patch_grid == 0:
                object.__setattr__(self, "patch_grid", grid)
            elif self.patch_grid != grid:
                raise ConfigError(f"patch_grid {self.patch_grid} inconsistent; derived value is {grid}")
        else:
            if len(self.unet_filters) < 2:
                raise ConfigError("unet_filters needs at least two entries")
            if any(b <= a for a, b in zip(self.unet_filters, self.unet_filters[1:])):
                raise ConfigError(f"unet_filters must be strictly increasing, got {self.unet_filters}")
            down = 2 ** (len(self.unet_filters) - 1)
            if self.input_size % down != 0:
                raise ConfigError(
                    f"input_size {self.input_size} not divisible by the UNet down path ({down})"
                )

    @property
    def is_probabilistic(self) -> bool:
        return self.kind in PROBABILISTIC_KINDS

    @property
    def is_transformer(self) -> bool:
        return self.kind in ("transunet", "prob-transunet")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_filters"] = list(d["unet_filters"])
        d["trans_filters"] = list(d["trans_filters"])
        return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["unet_filters"] = tuple(d["unet_filters"])
    d["trans_filters"] = tuple(d["trans_filters"])
    return ModelConfig(**d)


def config_hash(config: ModelConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_PAPER = {
    "unet": dict(unet_filters=(64, 128, 256, 512, 1024)),
    "prob-unet": dict(unet_filters=(32, 64, 128, 256, 512), latent_dim=6),
    "transunet": dict(
        trans_filters=(16, 32, 64, 128), n_transformer_layers=12, hidden_dim=768, n_heads=12, mlp_dim=3072
    ),
    "prob-transunet": dict(
        trans_filters=(16, 32, 64, 128),
        n_transformer_layers=12,
        hidden_dim=768,
        n_heads=12,
        mlp_dim=3072,
        latent_dim=6,
    ),
}

_DESK = {
    "unet": dict(unet_filters=(8, 16, 32, 64)),
    "prob-unet": dict(unet_filters=(8, 16, 32, 64), latent_dim=6),
    "transunet": dict(trans_filters=(8, 16, 32), n_transformer_layers=2, hidden_dim=32, n_heads=4, mlp_dim=64),
    "prob-transunet": dict(
        trans_filters=(8, 16, 32), n_transformer_layers=2, hidden_dim=32, n_heads=4, mlp_dim=64, latent_dim=6
    ),
}


def preset_config(kind: str, preset: str = "paper", input_size: int | None = None, **overrides) -> ModelConfig:
    """Table-driven defaults: 'paper' carries the reference hyperparameters at
    128 px; 'desk' shrinks widths, depth, and input size for laptop-speed runs."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose one of {MODEL_KINDS}")
    if preset == "paper":
        base, size = _PAPER[kind], 128
    elif preset == "desk":
        base, size = _DESK[kind], 32
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose 'paper' or 'desk'")
    kwargs = dict(base)
    kwargs.update(overrides)
    return ModelConfig(kind=kind, input_size=input_size or size, scale_preset=preset, **kwargs)


# ---------------------------------------------------------------------------
# Latent distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian over the latent space, parameterized per batch item."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and log_var {tuple(self.log_var.shape)} differ")
        if not bool(torch.isfinite(self.mean).all()) or not bool(torch.isfinite(self.log_var).all()):
            raise ValueError("DiagGaussian parameters must be finite")


def sample_latent(
    dist: DiagGaussian,
    mode: str = "reparameterized",
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw z from the distribution.

    'reparameterized' returns mean + exp(0.5*log_var) * eps with seeded eps,
    keeping the graph through mean/log_var; 'random' is the same draw detached;
    'mean' returns the mean vector.
    """
    if mode == "mean":
        return dist.mean
    if mode not in ("reparameterized", "random"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    eps = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
    z = dist.mean + torch.exp(0.5 * dist.log_var) * eps
    return z.detach() if mode == "random" else z


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(1, ch)


class ConvBlock(nn.Module):
    """Two conv3x3 + GroupNorm + GELU units."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.GELU(),
        )

    def forward(self, x):
        return self.net(x)


class Down(nn.Module):
    """Stride-2 conv downsampling (keeps the graph smooth for gradient checks)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), _norm(out_ch), nn.GELU())

    def forward(self, x):
        return self.net(x)


class PreActResBlock(nn.Module):
    """Pre-activation residual block with a strided 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.act = nn.GELU()
        self.proj = nn.Conv2d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return self.proj(x) + h


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x):
        h, _ = self.attn(self.ln1(x))
        x = x + h
        return x + self.mlp(self.ln2(x))


class TransformerEncoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(TransformerBlock(dim, heads, mlp_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        for block in self.layers:
            x = block(x)
        return self.norm(x)


class UNetCore(nn.Module):
    """Classic encoder/decoder with skip connections; returns the final
    decoder feature map at input resolution."""

    def __init__(self, in_ch: int, filters: tuple[int, ...]):
        super().__init__()
        self.stem = ConvBlock(in_ch, filters[0])
        self.downs = nn.ModuleList(
            nn.Sequential(Down(a, b), ConvBlock(b, b)) for a, b in zip(filters, filters[1:])
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(b, a, 2, stride=2) for a, b in zip(filters, filters[1:])
        )
        self.fuse = nn.ModuleList(ConvBlock(2 * a, a) for a in filters[:-1])

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for down in self.downs:
            skips.append(x)
            x = down(x)
        for up, fuse in zip(reversed(self.ups), reversed(self.fuse)):
            x = up(x)
            x = fuse(torch.cat([x, skips.pop()], dim=1))
        return x


class TransUNetCore(nn.Module):
    """Strided pre-activation CNN encoder, transformer bottleneck over
    1x1-conv token embeddings, and a skip-connected upsampling decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.trans_filters
        self.grid = config.patch_grid
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, f[0], 3, stride=2, padding=1), _norm(f[0]), nn.GELU()
        )
        self.stages = nn.ModuleList(PreActResBlock(a, b, stride=2) for a, b in zip(f, f[1:]))
        self.patch_embed = nn.Conv2d(f[-1], config.hidden_dim, 1)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, config.hidden_dim))
        self.encoder = TransformerEncoder(
            config.hidden_dim, config.n_transformer_layers, config.n_heads, config.mlp_dim
        )
        self.proj_back = nn.Conv2d(config.hidden_dim, f[-1], 1)
        self.ups = nn.ModuleList(nn.ConvTranspose2d(b, a, 2, stride=2) for a, b in zip(f, f[1:]))
        self.fuse = nn.ModuleList(ConvBlock(2 * a, a) for a in f[:-1])
        self.final_up = nn.ConvTranspose2d(f[0], f[0], 2, stride=2)
        self.final_block = ConvBlock(f[0], f[0])

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for stage in self.stages:
            skips.append(x)
            x = stage(x)
        b, c, h, w = x.shape
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        tokens = self.encoder(tokens)
        x = self.proj_back(tokens.transpose(1, 2).reshape(b, -1, h, w))
        for up, fuse in zip(reversed(self.ups), reversed(self.fuse)):
            x = up(x)
            x = fuse(torch.cat([x, skips.pop()], dim=1))
        return self.final_block(self.final_up(x))


class LatentEncoder(nn.Module):
    """CNN encoder emitting a DiagGaussian; the posterior variant sees the
    ground-truth mask as an extra input channel."""

    def __init__(self, in_ch: int, widths: tuple[int, ...], latent_dim: int):
        super().__init__()
        self.stem = ConvBlock(in_ch, widths[0])
        self.downs = nn.ModuleList(
            nn.Sequential(Down(a, b), ConvBlock(b, b)) for a, b in zip(widths, widths[1:])
        )
        self.head = nn.Linear(widths[-1], 2 * latent_dim)
        self.latent_dim = latent_dim

    def forward(self, x) -> DiagGaussian:
        x = self.stem(x)
        for down in self.downs:
            x = down(x)
        pooled = x.mean(dim=(2, 3))
        out = self.head(pooled)
        mean, log_var = out[:, : self.latent_dim], out[:, self.latent_dim :]
        return DiagGaussian(mean=mean, log_var=torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))


class _CombineHead(nn.Sequential):
    """Three 1x1 convs mapping concatenated (features, z-map) to logits."""

    def __init__(self, feat_ch: int, latent_dim: int):
        super().__init__(
            nn.Conv2d(feat_ch + latent_dim, feat_ch, 1),
            nn.GELU(),
            nn.Conv2d(feat_ch, feat_ch, 1),
            nn.GELU(),
            nn.Conv2d(feat_ch, 1, 1),
        )


class CombineTile(nn.Module):
    """Broadcast z across the spatial grid, concatenate on channels, then
    reduce with 1x1 convs."""

    def __init__(self, feat_ch: int, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.head = _CombineHead(feat_ch, latent_dim)

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        b, _, h, w = features.shape
        if z.shape != (b, self.latent_dim):
            raise ValueError(f"z shape {tuple(z.shape)} != ({b}, {self.latent_dim})")
        zmap = z[:, :, None, None].expand(b, self.latent_dim, h, w)
        return self.head(torch.cat([features, zmap], dim=1))


class CombineDeconv(nn.Module):
    """Grow z from 1x1 to the feature grid with stride-2 transposed convs
    (log2(size) stages), concatenate on channels, then reduce with 1x1 convs."""

    def __init__(self, feat_ch: int, latent_dim: int, size: int):
        super().__init__()
        if size < 2 or (size & (size - 1)) != 0:
            raise ValueError(f"deconv combiner needs a power-of-two spatial size, got {size}")
        self.latent_dim = latent_dim
        self.size = size
        n = int(math.log2(size))
        stages = []
        for _ in range(n):
            stages.extend([nn.ConvTranspose2d(latent_dim, latent_dim, 2, stride=2), nn.GELU()])
        self.grow = nn.Sequential(*stages)
        self.head = _CombineHead(feat_ch, latent_dim)

    @property
    def n_stages(self) -> int:
        return sum(1 for m in self.grow if isinstance(m, nn.ConvTranspose2d))

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        b, _, h, w = features.shape
        if z.shape != (b, self.latent_dim):
            raise ValueError(f"z shape {tuple(z.shape)} != ({b}, {self.latent_dim})")
        if h != self.size or w != self.size:
            raise ValueError(f"feature grid {h}x{w} does not match combiner size {self.size}")
        zmap = self.grow(z[:, :, None, None])
        return self.head(torch.cat([features, zmap], dim=1))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    @property
    def kind(self) -> str:
        return self.config.kind

    def _check_images(self, images: torch.Tensor) -> None:
        c = self.config
        if images.ndim != 4 or images.shape[1] != c.in_channels or images.shape[2:] != (c.input_size, c.input_size):
            raise ValueError(
                f"expected images of shape (B,{c.in_channels},{c.input_size},{c.input_size}), "
                f"got {tuple(images.shape)}"
            )


class UNetModel(SegModel):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.core = UNetCore(config.in_channels, config.unet_filters)
        self.head = nn.Conv2d(config.unet_filters[0], 1, 1)

    def forward(self, images):
        self._check_images(images)
        return self.head(self.core(images))


class TransUNetModel(SegModel):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.core = TransUNetCore(config)
        self.head = nn.Conv2d(config.trans_filters[0], 1, 1)

    def forward(self, images):
        self._check_images(images)
        return self.head(self.core(images))


class _ProbModel(SegModel):
    """Shared machinery for the probabilistic variants."""

    def __init__(self, config: ModelConfig, core: nn.Module, feat_ch: int, latent_widths: tuple[int, ...]):
        super().__init__(config)
        self.core = core
        self.prior = LatentEncoder(config.in_channels, latent_widths, config.latent_dim)
        self.posterior = LatentEncoder(config.in_channels + 1, latent_widths, config.latent_dim)
        if config.combiner == "tile":
            self.combiner: nn.Module = CombineTile(feat_ch, config.latent_dim)
        else:
            self.combiner = CombineDeconv(feat_ch, config.latent_dim, config.input_size)

    def forward(self, images):
        """Deterministic prediction path: prior mean latent."""
        self._check_images(images)
        dist = self.prior(images)
        return self.combiner(self.core(images), dist.mean)


class ProbUNetModel(_ProbModel):
    def __init__(self, config: ModelConfig):
        super().__init__(
            config,
            core=UNetCore(config.in_channels, config.unet_filters),
            feat_ch=config.unet_filters[0],
            latent_widths=config.unet_filters,
        )


class ProbTransUNetModel(_ProbModel):
    def __init__(self, config: ModelConfig):
        super().__init__(
            config,
            core=TransUNetCore(config),
            feat_ch=config.trans_filters[0],
            latent_widths=config.trans_filters,
        )


_MODEL_CLASSES = {
    "unet": UNetModel,
    "transunet": TransUNetModel,
    "prob-unet": ProbUNetModel,
    "prob-transunet": ProbTransUNetModel,
}


def _trunc_normal_(t: torch.Tensor, std: float, generator: torch.Generator) -> None:
    nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=generator)


def _init_parameters(model: nn.Module, seed: int) -> None:
    # Registration order is stable per config, so one seeded generator makes
    # the whole parameter set a pure function of (config, seed).
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = module.weight.shape[1] * module.weight.shape[2] * module.weight.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.Linear):
            with torch.no_grad():
                _trunc_normal_(module.weight, 0.02, gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, (nn.GroupNorm, nn.LayerNorm)):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
        elif isinstance(module, TransUNetCore):
            with torch.no_grad():
                _trunc_normal_(module.pos_embed, 0.02, gen)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: ModelConfig, seed: int = 0) -> SegModel:
    """Construct a model with deterministic, seed-driven initialization."""
    model = _MODEL_CLASSES[config.kind](config)
    _init_parameters(model, seed)
    log.info("built %s (%s preset, %dpx): %d parameters", config.kind, config.scale_preset,
             config.input_size, parameter_count(model))
    return model


# ---------------------------------------------------------------------------
# Forward contracts
# ---------------------------------------------------------------------------


def _require_kind(model: SegModel, kinds: tuple[str, ...], op: str) -> None:
    if model.kind not in kinds:
        raise ConfigError(f"{op} applies to kinds {kinds}, not {model.kind!r}")


def forward_deterministic(model: SegModel, images: torch.Tensor) -> torch.Tensor:
    _require_kind(model, DETERMINISTIC_KINDS, "forward_deterministic")
    return model(images)


def prior_net(model: SegModel, images: torch.Tensor) -> DiagGaussian:
    _require_kind(model, PROBABILISTIC_KINDS, "prior_net")
    model._check_images(images)
    return model.prior(images)


def posterior_net(model: SegModel, images: torch.Tensor, masks: torch.Tensor) -> DiagGaussian:
    _require_kind(model, PROBABILISTIC_KINDS, "posterior_net")
    model._check_images(images)
    if masks.shape != images.shape:
        raise ValueError(f"masks shape {tuple(masks.shape)} must match images {tuple(images.shape)}")
    return model.posterior(torch.cat([images, masks.to(images.dtype)], dim=1))


def forward_probabilistic(
    model: SegModel,
    images: torch.Tensor,
    masks: torch.Tensor | None = None,
    phase: str = "train",
    n_samples: int = 1,
    seed: int | None = None,
    sample_mode: str = "reparameterized",
    generator: torch.Generator | None = None,
) -> tuple[list[torch.Tensor], DiagGaussian, DiagGaussian | None]:
    """Probabilistic forward pass.

    train: one logits map from a reparameterized posterior sample, plus both
    distributions (for the KL term). infer: n_samples logits maps from prior
    samples (mode selectable); masks are forbidden.
    """
    _require_kind(model, PROBABILISTIC_KINDS, "forward_probabilistic")
    if phase not in ("train", "infer"):
        raise ValueError(f"unknown phase {phase!r}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    prior = prior_net(model, images)
    features = model.core(images)
    if phase == "train":
        if masks is None:
            raise ValueError("train phase requires ground-truth masks")
        posterior = posterior_net(model, images, masks)
        z = sample_latent(posterior, "reparameterized", generator=generator)
        return [model.combiner(features, z)], prior, posterior
    if masks is not None:
        raise ValueError("infer phase forbids masks")
    outs = [
        model.combiner(features, sample_latent(prior, sample_mode, generator=generator))
        for _ in range(n_samples)
    ]
    return outs, prior, None


__all__ = [
    "ConfigError",
    "ModelConfig",
    "config_from_dict",
    "config_hash",
    "preset_config",
    "DiagGaussian",
    "sample_latent",
    "ConvBlock",
    "PreActResBlock",
    "MultiHeadAttention",
    "TransformerEncoder",
    "UNetCore",
    "TransUNetCore",
    "LatentEncoder",
    "CombineTile",
    "CombineDeconv",
    "SegModel",
    "UNetModel",
    "TransUNetModel",
    "ProbUNetModel",
    "ProbTransUNetModel",
    "build_model",
    "parameter_count",
    "forward_deterministic",
    "prior_net",
    "posterior_net",
    "forward_probabilistic",
]
