"""The five networks: color encoder, attention U-Net segmentation map
generator, embedding encoder, decoder and quadruplet discriminator.

All modules are batch-first torch modules over (B, C, H, W) tensors with
spatial dims divisible by 4.  The color code conditions the decoder's
instance norms (scale and shift per channel) in addition to entering as
broadcast input channels: a spatially constant channel is cancelled by
plain instance normalization, so the affine route is what lets one code
recolor an image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from silicon.imagecore import H_CHANNEL_CAP, LOG_EPS, StainMatrix
from silicon.priors import DiagGaussian

# Initial weight/bias of the H-channel path into the segmentation head.
# Nuclei are H-dominant by construction, so this anchors map polarity
# (nuclei -> 1) at initialization; training refines the boundary.
H_HEAD_WEIGHT = 6.0
H_HEAD_BIAS = -2.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the five networks."""

    d_c: int = 8          # color code dimension
    c_w: int = 4          # embedding map channels
    base: int = 32        # base channel width
    h_cap: float = H_CHANNEL_CAP

    def __post_init__(self):
        if self.d_c < 1 or self.c_w < 1 or self.base < 1:
            raise ValueError("d_c, c_w and base must be >= 1")


@dataclass
class ColorCode:
    """Latent color appearance code with its diagonal-Gaussian posterior."""

    posterior: DiagGaussian
    sample: torch.Tensor


@dataclass
class EmbeddingMap:
    """Quarter-resolution embedding map posterior and sample."""

    posterior: DiagGaussian
    sample: torch.Tensor


@dataclass
class SegOutput:
    """Segmentation map: probabilities plus the logit-space posterior."""

    logits: torch.Tensor
    log_var: torch.Tensor
    probs: torch.Tensor
    attention: dict = field(default_factory=dict)

    @property
    def posterior(self) -> DiagGaussian:
        return DiagGaussian(self.logits, self.log_var)


def _check_spatial(x: torch.Tensor, what: str):
    if x.ndim != 4:
        raise ValueError(f"{what}: expected (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError(
            f"{what}: H and W must be divisible by 4 (got {x.shape[2]}x{x.shape[3]}); "
            "pad the input with edge replication first"
        )


class ConvBlock(nn.Module):
    """3x3 conv with optional instance norm and nonlinearity."""

    def __init__(self, c_in, c_out, stride=1, norm=True, act="relu", kernel=3):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm else None
        self.act = {"relu": nn.ReLU(), "lrelu": nn.LeakyReLU(0.2), "none": nn.Identity()}[act]

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class ResBlock(nn.Module):
    """Two 3x3 convs with instance norm and a residual connection."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class AttentionGate(nn.Module):
    """Additive spatial attention: a 1-channel sigmoid map scales the skip."""

    def __init__(self, ch, inter):
        super().__init__()
        self.w_gate = nn.Conv2d(ch, inter, 1)
        self.w_skip = nn.Conv2d(ch, inter, 1)
        self.psi = nn.Conv2d(inter, 1, 1)

    def forward(self, gate, skip):
        a = torch.sigmoid(self.psi(F.relu(self.w_gate(gate) + self.w_skip(skip))))
        return skip * a, a


class ColorEncoder(nn.Module):
    """Conv downsampling stack, global average pool, two linear heads.

    No instance normalization here: it would strip the per-image global
    color statistics this network exists to capture.  kernel=1 with
    downsample=False gives the permutation-invariant configuration used
    by the pooling tests.
    """

    def __init__(self, cfg: ModelConfig, kernel=3, downsample=True):
        super().__init__()
        stride = 2 if downsample else 1
        w = cfg.base
        self.stack = nn.Sequential(
            ConvBlock(3, w, stride=stride, norm=False, kernel=kernel),
            ConvBlock(w, 2 * w, stride=stride, norm=False, kernel=kernel),
            ConvBlock(2 * w, 2 * w, stride=1, norm=False, kernel=kernel),
        )
        self.fc_mean = nn.Linear(2 * w, cfg.d_c)
        self.fc_log_var = nn.Linear(2 * w, cfg.d_c)

    def forward(self, x, rng: torch.Generator | None = None,
                noise: torch.Tensor | None = None) -> ColorCode:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        h = self.stack(x).mean(dim=(2, 3))
        posterior = DiagGaussian(self.fc_mean(h), self.fc_log_var(h))
        sample = posterior.sample(rng, noise) if (rng is not None or noise is not None) \
            else posterior.mean
        return ColorCode(posterior, sample)


class SegmentationNet(nn.Module):
    """Spatial-attention U-Net over the extracted H channel.

    Three resolution levels with residual blocks; each skip passes an
    additive attention gate.  The head sees the final features together
    with the raw H channel, whose path starts positive so the map comes
    out nuclei-high.  A log-variance head over the logits provides the
    posterior used by the KL and entropy terms.
    """

    def __init__(self, cfg: ModelConfig, stain: StainMatrix | None = None):
        super().__init__()
        stain = stain or StainMatrix.default()
        w = cfg.base
        self.h_cap = cfg.h_cap
        self.register_buffer("hed_h_col", torch.tensor(stain.inverse[:, 0], dtype=torch.float64))

        self.enc1 = nn.Sequential(ConvBlock(1, w), ResBlock(w))
        self.down1 = ConvBlock(w, 2 * w, stride=2)
        self.enc2 = ResBlock(2 * w)
        self.down2 = ConvBlock(2 * w, 4 * w, stride=2)
        self.bottleneck = ResBlock(4 * w)
        self.up2 = ConvBlock(4 * w, 2 * w)
        self.att2 = AttentionGate(2 * w, max(w, 1))
        self.dec2 = nn.Sequential(ConvBlock(4 * w, 2 * w), ResBlock(2 * w))
        self.up1 = ConvBlock(2 * w, w)
        self.att1 = AttentionGate(w, max(w // 2, 1))
        self.dec1 = nn.Sequential(ConvBlock(2 * w, w), ResBlock(w))
        self.head_mean = nn.Conv2d(w + 1, 1, 1)
        self.head_log_var = nn.Conv2d(w + 1, 1, 1)
        self._init_head()

    def _init_head(self):
        with torch.no_grad():
            for head in (self.head_mean, self.head_log_var):
                head.weight.mul_(0.01)  # feature paths start quiet
                head.bias.zero_()
            self.head_mean.weight[0, -1, 0, 0] = H_HEAD_WEIGHT
            self.head_mean.bias[0] = H_HEAD_BIAS

    def extract_h(self, rgb: torch.Tensor) -> torch.Tensor:
        """Torch twin of imagecore.extract_h_channel, (B,3,H,W) -> (B,1,H,W)."""
        od = -torch.log10(torch.clamp(rgb, min=LOG_EPS))
        h = torch.einsum("bchw,c->bhw", od, self.hed_h_col.to(rgb.dtype))
        return torch.clamp(h / self.h_cap, 0.0, 1.0).unsqueeze(1)

    def forward(self, rgb: torch.Tensor) -> SegOutput:
        _check_spatial(rgb, "segmentation input")
        h_img = self.extract_h(rgb)
        e1 = self.enc1(h_img)
        e2 = self.enc2(self.down1(e1))
        b = self.bottleneck(self.down2(e2))

        g2 = self.up2(F.interpolate(b, scale_factor=2, mode="bilinear", align_corners=False))
        s2, a2 = self.att2(g2, e2)
        d2 = self.dec2(torch.cat([s2, g2], dim=1))

        g1 = self.up1(F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False))
        s1, a1 = self.att1(g1, e1)
        d1 = self.dec1(torch.cat([s1, g1], dim=1))

        feats = torch.cat([d1, h_img], dim=1)
        logits = self.head_mean(feats)
        log_var = self.head_log_var(feats)
        return SegOutput(logits, log_var, torch.sigmoid(logits),
                         {"level1": a1, "level2": a2})


class EmbeddingEncoder(nn.Module):
    """Two stride-2 conv blocks with instance norm, then mean/log-var heads
    at quarter resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base
        self.stack = nn.Sequential(
            ConvBlock(3, w, stride=2),
            ConvBlock(w, 2 * w, stride=2),
        )
        self.head_mean = nn.Conv2d(2 * w, cfg.c_w, 3, padding=1)
        self.head_log_var = nn.Conv2d(2 * w, cfg.c_w, 3, padding=1)

    def forward(self, x, rng: torch.Generator | None = None,
                noise: torch.Tensor | None = None) -> EmbeddingMap:
        _check_spatial(x, "embedding input")
        h = self.stack(x)
        posterior = DiagGaussian(self.head_mean(h), self.head_log_var(h))
        sample = posterior.sample(rng, noise) if (rng is not None or noise is not None) \
            else posterior.mean
        return EmbeddingMap(posterior, sample)


class CondInstanceNorm(nn.Module):
    """Instance norm whose affine scale/shift are functions of the color code."""

    def __init__(self, ch, d_c):
        super().__init__()
        self.gamma = nn.Linear(d_c, ch)
        self.beta = nn.Linear(d_c, ch)
        with torch.no_grad():
            self.gamma.weight.mul_(0.1)
            self.gamma.bias.zero_()
            self.beta.weight.mul_(0.1)
            self.beta.bias.zero_()

    def forward(self, x, z_c):
        h = F.instance_norm(x)
        g = self.gamma(z_c)[:, :, None, None]
        b = self.beta(z_c)[:, :, None, None]
        return h * (1.0 + g) + b


class CondResBlock(nn.Module):
    """Residual block with color-conditioned instance norms."""

    def __init__(self, ch, d_c):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = CondInstanceNorm(ch, d_c)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = CondInstanceNorm(ch, d_c)

    def forward(self, x, z_c):
        h = F.relu(self.norm1(self.conv1(x), z_c))
        h = self.norm2(self.conv2(h), z_c)
        return F.relu(x + h)


class Decoder(nn.Module):
    """Renders an image from (color code, segmentation map, embedding map).

    The code is broadcast into the input stack and drives every norm's
    affine parameters; the maps carry the spatial structure.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base
        self.d_c = cfg.d_c
        self.c_w = cfg.c_w
        self.conv_in = nn.Conv2d(cfg.d_c + 1 + cfg.c_w, w, 3, padding=1)
        self.norm_in = CondInstanceNorm(w, cfg.d_c)
        self.conv_mid = nn.Conv2d(w, w, 3, padding=1)
        self.norm_mid = CondInstanceNorm(w, cfg.d_c)
        self.res1 = CondResBlock(w, cfg.d_c)
        self.res2 = CondResBlock(w, cfg.d_c)
        self.head = nn.Sequential(ConvBlock(w, w, norm=False), nn.Conv2d(w, 3, 1))

    def forward(self, z_c: torch.Tensor, y: torch.Tensor, z_w: torch.Tensor) -> torch.Tensor:
        if z_c.ndim != 2 or z_c.shape[1] != self.d_c:
            raise ValueError(f"z_c must be (B, {self.d_c}), got {tuple(z_c.shape)}")
        if y.ndim != 4 or y.shape[1] != 1:
            raise ValueError(f"y must be (B, 1, H, W), got {tuple(y.shape)}")
        if z_w.ndim != 4 or z_w.shape[1] != self.c_w:
            raise ValueError(f"z_w must be (B, {self.c_w}, h, w), got {tuple(z_w.shape)}")
        if z_c.shape[0] != y.shape[0] or z_w.shape[0] != y.shape[0]:
            raise ValueError("batch sizes disagree")
        height, width = y.shape[2], y.shape[3]
        z_w_up = F.interpolate(z_w, size=(height, width), mode="bilinear", align_corners=False)
        z_c_map = z_c[:, :, None, None].expand(-1, -1, height, width)
        h = torch.cat([z_c_map, y, z_w_up], dim=1)
        h = F.relu(self.norm_in(self.conv_in(h), z_c))
        h = F.relu(self.norm_mid(self.conv_mid(h), z_c))
        h = self.res1(h, z_c)
        h = self.res2(h, z_c)
        return torch.sigmoid(self.head(h))


class QuadDiscriminator(nn.Module):
    """Scores a quadruplet (x, z_c, y, z_w) with an unbounded real output.

    The image and map enter at full resolution, the embedding map is
    upsampled, the code broadcast; leaky rectifier activations, instance
    norm except in the first block, identity output head.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base
        self.d_c = cfg.d_c
        self.c_w = cfg.c_w
        # Last block keeps stride 1 so the instance norms always see at
        # least a 2x2 map for any divisible-by-4 input.
        self.stack = nn.Sequential(
            ConvBlock(3 + 1 + cfg.c_w + cfg.d_c, w, stride=2, norm=False, act="lrelu"),
            ConvBlock(w, 2 * w, stride=2, act="lrelu"),
            ConvBlock(2 * w, 4 * w, stride=1, act="lrelu"),
        )
        self.head = nn.Linear(4 * w, 1)

    def forward(self, x: torch.Tensor, z_c: torch.Tensor, y: torch.Tensor,
                z_w: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"x must be (B, 3, H, W), got {tuple(x.shape)}")
        if y.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
            raise ValueError(f"y shape {tuple(y.shape)} does not match x {tuple(x.shape)}")
        height, width = x.shape[2], x.shape[3]
        z_w_up = F.interpolate(z_w, size=(height, width), mode="bilinear", align_corners=False)
        z_c_map = z_c[:, :, None, None].expand(-1, -1, height, width)
        h = self.stack(torch.cat([x, y, z_w_up, z_c_map], dim=1))
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


class SiliconModel(nn.Module):
    """Bundle of the five networks plus the shared stain basis."""

    def __init__(self, cfg: ModelConfig | None = None, stain: StainMatrix | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.stain = stain or StainMatrix.default()
        self.color_enc = ColorEncoder(self.cfg)
        self.seg_net = SegmentationNet(self.cfg, self.stain)
        self.embed_enc = EmbeddingEncoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.disc = QuadDiscriminator(self.cfg)

    @property
    def generator_modules(self):
        return [self.color_enc, self.seg_net, self.embed_enc, self.decoder]

    def generator_parameters(self):
        for m in self.generator_modules:
            yield from m.parameters()

    # numpy single-image convenience used by inference and the CLI -------

    def _to_bchw(self, img: np.ndarray) -> torch.Tensor:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
        dtype = next(self.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].to(dtype)

    @torch.no_grad()
    def infer_color_mean(self, img: np.ndarray) -> np.ndarray:
        return self.color_enc(self._to_bchw(img)).posterior.mean[0].numpy().astype(np.float64)

    @torch.no_grad()
    def infer_segmap(self, img: np.ndarray) -> np.ndarray:
        return self.seg_net(self._to_bchw(img)).probs[0, 0].numpy().astype(np.float64)

    @torch.no_grad()
    def infer_embedding_mean(self, img: np.ndarray) -> np.ndarray:
        out = self.embed_enc(self._to_bchw(img)).posterior.mean[0]
        return out.permute(1, 2, 0).numpy().astype(np.float64)

    @torch.no_grad()
    def infer_decode(self, z_c: np.ndarray, y: np.ndarray, z_w: np.ndarray) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        z_c_t = torch.from_numpy(np.asarray(z_c, dtype=np.float64)).to(dtype)[None]
        y_t = torch.from_numpy(np.asarray(y, dtype=np.float64)).to(dtype)[None, None]
        z_w_t = torch.from_numpy(
            np.ascontiguousarray(np.asarray(z_w, dtype=np.float64).transpose(2, 0, 1))
        ).to(dtype)[None]
        out = self.decoder(z_c_t, y_t, z_w_t)[0]
        return out.permute(1, 2, 0).numpy().astype(np.float64)


# Checkpoint directory format: one .npy per named parameter/buffer plus a
# plain-text manifest (name, shape, dtype per line) validated on load.

MANIFEST_NAME = "manifest.txt"


def _named_arrays(model: nn.Module):
    for name, t in model.state_dict().items():
        yield name, t


def save_model_params(model: nn.Module, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in _named_arrays(model):
        arr = t.detach().cpu().numpy()
        np.save(directory / f"{name}.npy", arr)
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"{name} {shape} {arr.dtype.name}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_model_params(model: nn.Module, directory) -> None:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no parameter manifest at {manifest}")
    state = {}
    expected = dict(_named_arrays(model))
    seen = set()
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape_s, dtype_s = line.split()
        shape = () if shape_s == "-" else tuple(int(v) for v in shape_s.split(","))
        if name not in expected:
            raise ValueError(f"manifest names unknown parameter {name}")
        arr = np.load(directory / f"{name}.npy")
        if arr.shape != shape or arr.dtype.name != dtype_s:
            raise ValueError(f"{name}: file {arr.shape}/{arr.dtype.name} "
                             f"disagrees with manifest {shape}/{dtype_s}")
        if tuple(expected[name].shape) != shape:
            raise ValueError(f"{name}: checkpoint shape {shape} does not fit model "
                             f"{tuple(expected[name].shape)}")
        state[name] = torch.from_numpy(arr)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"manifest missing parameters: {sorted(missing)}")
    model.load_state_dict(state)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
