"""Objective terms: least-squares adversarial losses, the reconstruction
bound (pixel loss, KL regularizers, posterior entropy), the SSIM structure
term, and their convex combination into the total objective.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from silicon.priors import DiagGaussian, TruncNormMixture, gaussian_entropy, \
    gaussian_kl_std, kl_vs_mixture_mc

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class DiscLabels:
    """Least-squares targets: a for real encodings, b for fake, c is what
    the decoder wants the discriminator to emit for fakes."""

    a: float = 1.0
    b: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("real and fake labels must differ")


@dataclass(frozen=True)
class LossWeights:
    """Convex combination weights for the adversarial and reconstruction
    halves of the objective."""

    lambda_adv: float = 0.5
    lambda_rec: float = 0.5

    def __post_init__(self):
        for v in (self.lambda_adv, self.lambda_rec):
            if not 0.0 <= v <= 1.0:
                raise ValueError("weights must lie in [0, 1]")
        if abs(self.lambda_adv + self.lambda_rec - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")


@dataclass(frozen=True)
class LossReport:
    """One training step's loss terms; j_rec and j_total are derived."""

    j_disc: float
    j_gen: float
    l_r: float
    r1: float
    r2: float
    entropy: float
    l_ssim: float
    j_rec: float
    j_total: float

    @staticmethod
    def from_parts(j_disc, j_gen, l_r, r1, r2, entropy, l_ssim,
                   weights: LossWeights) -> "LossReport":
        j_disc, j_gen, l_r, r1, r2, entropy, l_ssim = (
            float(v.detach()) if torch.is_tensor(v) else float(v)
            for v in (j_disc, j_gen, l_r, r1, r2, entropy, l_ssim)
        )
        j_rec = l_r - entropy + r1 + r2 + l_ssim
        j_total = weights.lambda_adv * (j_disc + j_gen) + weights.lambda_rec * j_rec
        return LossReport(j_disc, j_gen, l_r, r1, r2, entropy, l_ssim, j_rec, j_total)

    def decomposition_gap(self) -> float:
        return abs(self.j_rec - (self.l_r - self.entropy + self.r1 + self.r2 + self.l_ssim))

    def first_non_finite(self) -> str | None:
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                return f.name
        return None

    @staticmethod
    def csv_header() -> str:
        return "step," + ",".join(f.name for f in fields(LossReport))

    def csv_row(self, step: int) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [step] + [repr(getattr(self, f.name)) for f in fields(self)]
        )
        return buf.getvalue()


def _scores(values) -> torch.Tensor:
    t = values if torch.is_tensor(values) else torch.as_tensor(values, dtype=torch.float64)
    t = t.reshape(-1)
    if t.numel() == 0:
        raise ValueError("score list must be non-empty")
    return t


def disc_loss(real_scores, fake_scores, labels: DiscLabels) -> torch.Tensor:
    """Mean (s - A)^2 over real scores plus mean (s - B)^2 over fake ones."""
    real = _scores(real_scores)
    fake = _scores(fake_scores)
    return ((real - labels.a) ** 2).mean() + ((fake - labels.b) ** 2).mean()


def gen_loss(fake_scores, labels: DiscLabels) -> torch.Tensor:
    """Mean (s - C)^2 over fake scores: the decoder's adversarial target."""
    fake = _scores(fake_scores)
    return ((fake - labels.c) ** 2).mean()


def reconstruction_nll(x, x_hat, kind: str = "l1") -> torch.Tensor:
    """Pixel reconstruction loss; 'l1' (Laplace likelihood up to constants,
    the default) or 'l2' (Gaussian)."""
    x, x_hat = _as_bchw(x), _as_bchw(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if kind == "l1":
        return (x - x_hat).abs().mean()
    if kind == "l2":
        return ((x - x_hat) ** 2).mean()
    raise ValueError(f"unknown reconstruction kind {kind!r}")


def _as_bchw(arr) -> torch.Tensor:
    """(H, W) / (H, W, C) numpy or (B, C, H, W) torch -> (B, C, H, W)."""
    if torch.is_tensor(arr):
        if arr.ndim != 4:
            raise ValueError("torch inputs must be (B, C, H, W)")
        return arr
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W[, C]) array, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))[None])


def ssim(x, y, window: int = SSIM_WINDOW, c1: float | None = None,
         c2: float | None = None, data_range: float = 1.0) -> torch.Tensor:
    """Mean structural similarity over uniform sliding windows.

    Window statistics use the sample (n-1) covariance convention over
    fully-valid windows only, averaged across channels; this matches the
    reference implementation used as the test oracle.
    """
    xt, yt = _as_bchw(x), _as_bchw(y)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    if window % 2 != 1 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if window > min(xt.shape[2], xt.shape[3]):
        raise ValueError("window larger than image")
    if c1 is None:
        c1 = (SSIM_K1 * data_range) ** 2
    if c2 is None:
        c2 = (SSIM_K2 * data_range) ** 2

    def win_mean(t):
        return F.avg_pool2d(t, window, stride=1)

    mu_x, mu_y = win_mean(xt), win_mean(yt)
    n = window * window
    cov_norm = n / (n - 1)
    var_x = cov_norm * (win_mean(xt * xt) - mu_x * mu_x)
    var_y = cov_norm * (win_mean(yt * yt) - mu_y * mu_y)
    cov_xy = cov_norm * (win_mean(xt * yt) - mu_x * mu_y)
    s = ((2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return s.mean()


def ssim_loss(x, x_hat, window: int = SSIM_WINDOW) -> torch.Tensor:
    """1 - SSIM(x, x_hat); zero when the reconstruction is exact."""
    return 1.0 - ssim(x, x_hat, window=window)


def rec_objective(x, x_hat, q_zc: DiagGaussian, q_yzw: DiagGaussian,
                  prior_zc: TruncNormMixture, mc_samples: int = 8,
                  rng: torch.Generator | None = None,
                  noise: torch.Tensor | None = None,
                  recon: str = "l1") -> dict:
    """All reconstruction-module terms, as differentiable scalars.

    r1 is the Monte-Carlo KL of the color-code posterior against its
    mixture prior; r2 the closed-form KL of the joint (segmentation,
    embedding) posterior against the standard normal; the entropy of the
    full joint posterior enters j_rec with a negative sign.
    """
    l_r = reconstruction_nll(x, x_hat, kind=recon)
    r1 = kl_vs_mixture_mc(q_zc, prior_zc, mc_samples, rng, noise=noise)
    r2 = gaussian_kl_std(q_yzw)
    entropy = gaussian_entropy(DiagGaussian.concat([q_zc, q_yzw]))
    l_ssim = ssim_loss(x, x_hat)
    j_rec = l_r - entropy + r1 + r2 + l_ssim
    return {"l_r": l_r, "r1": r1, "r2": r2, "entropy": entropy,
            "l_ssim": l_ssim, "j_rec": j_rec}


def total_objective(j_adv, j_rec, w: LossWeights):
    """Convex combination of the adversarial and reconstruction halves."""
    return w.lambda_adv * j_adv + w.lambda_rec * j_rec
