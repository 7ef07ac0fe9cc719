"""Probability machinery for the latent priors and posteriors.

The color appearance code is given a mixture-of-truncated-normals prior
(one component per stain family, handling reagent overlap); the joint
(segmentation map, embedding map) prior is a standard normal over the
flattened maps.  Everything here operates on torch tensors so the KL and
entropy terms stay differentiable w.r.t. posterior parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

LOG_2PI = math.log(2.0 * math.pi)

# Density floor for Monte-Carlo samples landing outside every component
# support; keeps log-probabilities and their gradients finite.
DENSITY_FLOOR = 1e-30
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)


def _std_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mu, sigma^2) restricted to [lo, hi] and renormalized."""

    mu: float
    sigma: float
    lo: float
    hi: float
    alpha: float = field(init=False)  # (lo - mu) / sigma
    beta: float = field(init=False)   # (hi - mu) / sigma
    mass: float = field(init=False)   # Phi(beta) - Phi(alpha)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not self.lo < self.hi:
            raise ValueError("require lo < hi")
        alpha = (self.lo - self.mu) / self.sigma
        beta = (self.hi - self.mu) / self.sigma
        mass = _std_cdf(beta) - _std_cdf(alpha)
        if mass <= 1e-12:
            raise ValueError("truncation interval carries no probability mass")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mass", mass)


def tn_log_pdf(d: TruncatedNormal, x):
    """Log density of a truncated normal; -inf outside [lo, hi]."""
    scalar = not torch.is_tensor(x)
    t = torch.as_tensor(x, dtype=torch.float64 if scalar else None)
    z = (t - d.mu) / d.sigma
    log_phi = -0.5 * z * z - 0.5 * LOG_2PI
    out = log_phi - math.log(d.sigma) - math.log(d.mass)
    out = torch.where((t >= d.lo) & (t <= d.hi), out, torch.full_like(out, -math.inf))
    return out.item() if scalar else out


def tn_sample(d: TruncatedNormal, rng: torch.Generator, shape=()) -> torch.Tensor:
    """Inverse-CDF sampling: x = mu + sigma * Phi^-1(Phi(alpha) + u * mass)."""
    u = torch.rand(shape, generator=rng, dtype=torch.float64)
    cdf_alpha = _std_cdf(d.alpha)
    inner = torch.clamp(cdf_alpha + u * d.mass, 1e-15, 1.0 - 1e-15)
    x = d.mu + d.sigma * torch.special.ndtri(inner)
    return torch.clamp(x, d.lo, d.hi)


@dataclass(frozen=True)
class TruncNormMixture:
    """Finite mixture of truncated normals, applied i.i.d. per latent dim."""

    components: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("mixture needs at least one component")
        if len(self.components) != len(self.weights):
            raise ValueError("one weight per component required")
        w = torch.tensor(self.weights, dtype=torch.float64)
        if torch.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be >= 0 and sum to 1")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(x) for x in self.weights))

    @property
    def support(self):
        return (min(c.lo for c in self.components), max(c.hi for c in self.components))

    @staticmethod
    def default_zc_prior() -> "TruncNormMixture":
        """Two components, one per H&E stain family."""
        return TruncNormMixture(
            components=(
                TruncatedNormal(-1.0, 0.5, -3.0, 3.0),
                TruncatedNormal(1.0, 0.5, -3.0, 3.0),
            ),
            weights=(0.5, 0.5),
        )


def mixture_log_pdf(m: TruncNormMixture, x):
    """log sum_k w_k pdf_k(x) via log-sum-exp; -inf outside every support."""
    scalar = not torch.is_tensor(x)
    t = torch.as_tensor(x, dtype=torch.float64 if scalar else None)
    parts = torch.stack(
        [tn_log_pdf(c, t) + math.log(w) for c, w in zip(m.components, m.weights) if w > 0]
    )
    out = torch.logsumexp(parts, dim=0)
    return out.item() if scalar else out


def mixture_sample(m: TruncNormMixture, rng: torch.Generator, shape=()) -> torch.Tensor:
    """Categorical component draw followed by component-level sampling."""
    w = torch.tensor(m.weights, dtype=torch.float64)
    flat = int(torch.tensor(shape).prod()) if shape else 1
    ks = torch.multinomial(w, flat, replacement=True, generator=rng)
    draws = torch.stack([tn_sample(c, rng, (flat,)) for c in m.components])
    out = draws[ks, torch.arange(flat)]
    return out.reshape(shape) if shape else out[0]


@dataclass
class DiagGaussian:
    """Diagonal Gaussian over a flat vector, parameterized by log variance."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64) \
            if not torch.is_tensor(self.mean) else self.mean
        self.log_var = torch.as_tensor(self.log_var, dtype=torch.float64) \
            if not torch.is_tensor(self.log_var) else self.log_var
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var must share a shape")
        if self.mean.numel() < 1:
            raise ValueError("need at least one dimension")

    @property
    def dim(self) -> int:
        return self.mean.numel()

    def sample(self, rng: torch.Generator | None = None,
               noise: torch.Tensor | None = None) -> torch.Tensor:
        """Reparameterized draw mean + exp(log_var / 2) * eps."""
        if noise is None:
            noise = torch.randn(self.mean.shape, generator=rng, dtype=self.mean.dtype)
        return self.mean + torch.exp(0.5 * self.log_var) * noise

    def log_pdf(self, x: torch.Tensor) -> torch.Tensor:
        z2 = (x - self.mean) ** 2 * torch.exp(-self.log_var)
        return -0.5 * (LOG_2PI + self.log_var + z2).sum(dim=-1)

    @staticmethod
    def concat(parts) -> "DiagGaussian":
        """Joint Gaussian over the flattened concatenation of parts."""
        return DiagGaussian(
            torch.cat([p.mean.reshape(-1) for p in parts]),
            torch.cat([p.log_var.reshape(-1) for p in parts]),
        )


def gaussian_kl_std(q: DiagGaussian) -> torch.Tensor:
    """KL(q || N(0, I)) in closed form; always >= 0."""
    return 0.5 * (q.mean**2 + torch.exp(q.log_var) - 1.0 - q.log_var).sum()


def gaussian_entropy(q: DiagGaussian) -> torch.Tensor:
    """Differential entropy of a diagonal Gaussian."""
    return 0.5 * (1.0 + LOG_2PI + q.log_var).sum()


def kl_vs_mixture_mc(q: DiagGaussian, m: TruncNormMixture, n_samples: int = 8,
                     rng: torch.Generator | None = None,
                     noise: torch.Tensor | None = None) -> torch.Tensor:
    """Monte-Carlo KL(q || mixture) via reparameterized samples from q.

    The mixture density is applied per dimension (i.i.d. prior).  Samples
    that escape every component's support hit the density floor so the
    estimate and its gradients stay finite.  Passing explicit `noise`
    (shape (S, dim)) makes the estimator a deterministic function of q's
    parameters, which the finite-difference checks rely on.
    """
    if noise is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        noise = torch.randn((n_samples, q.dim), generator=rng, dtype=q.mean.dtype)
    mean = q.mean.reshape(-1)
    log_var = q.log_var.reshape(-1)
    z = mean + torch.exp(0.5 * log_var) * noise  # (S, dim)
    log_q = -0.5 * (LOG_2PI + log_var + (z - mean) ** 2 * torch.exp(-log_var)).sum(dim=1)
    log_p = torch.clamp(mixture_log_pdf(m, z), min=LOG_DENSITY_FLOOR).sum(dim=1)
    return (log_q - log_p).mean()
