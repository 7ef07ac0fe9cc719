"""Alternating optimization of the five networks.

Each step runs one discriminator update on real vs fake quadruplets,
then one generator-side update of the encoders, map generator and
decoder on the convex combination of the adversarial and reconstruction
objectives.  All randomness flows through two explicit torch generators
(one for samples/priors, one for batch composition) whose states are
checkpointed, so same-seed runs and checkpoint resumes are bit-identical
on one machine.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from silicon import losses as L
from silicon import nets, synthdata
from silicon.imagecore import make_patch_grid
from silicon.losses import DiscLabels, LossReport, LossWeights
from silicon.nets import ModelConfig, SiliconModel
from silicon.priors import DiagGaussian, TruncatedNormal, TruncNormMixture, \
    mixture_sample


class TrainingDiverged(RuntimeError):
    """A loss term went non-finite; the message names the first one."""


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; serializes to `key = value` lines."""

    dataset: str = ""
    patch: int = 256
    stride: int = 128
    batch_size: int = 16
    total_steps: int = 2000
    lr_disc: float = 2e-4
    lr_gen: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    label_a: float = 1.0
    label_b: float = 0.0
    label_c: float = 1.0
    lambda_adv: float = 0.5
    lambda_rec: float = 0.5
    prior_means: tuple = (-1.0, 1.0)
    prior_sigma: float = 0.5
    prior_lo: float = -3.0
    prior_hi: float = 3.0
    prior_weights: tuple = (0.5, 0.5)
    mc_samples: int = 8
    recon: str = "l1"
    d_c: int = 8
    c_w: int = 4
    base: int = 32
    seed: int = 0
    checkpoint_interval: int = 500
    supervised: bool = False
    supervised_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.lr_disc, self.lr_gen) <= 0:
            raise ValueError("learning rates must be positive")
        self.weights()  # validates the lambda constraint
        self.labels()

    def labels(self) -> DiscLabels:
        return DiscLabels(self.label_a, self.label_b, self.label_c)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_adv, self.lambda_rec)

    def prior(self) -> TruncNormMixture:
        comps = tuple(
            TruncatedNormal(m, self.prior_sigma, self.prior_lo, self.prior_hi)
            for m in self.prior_means
        )
        return TruncNormMixture(comps, tuple(self.prior_weights))

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_c=self.d_c, c_w=self.c_w, base=self.base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines ('#' comments allowed) over defaults."""
    cfg = base or TrainConfig()
    known = {f.name: f for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, value, getattr(cfg, key))
    return replace(cfg, **updates)


def _coerce(key: str, value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    if overrides:
        text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = parse_config(text, base=cfg)
    return cfg


class PatchSampler:
    """Uniform sampler over (image, patch-origin) pairs of a dataset."""

    def __init__(self, dataset: synthdata.Dataset, patch: int, stride: int,
                 with_masks: bool = False):
        self.images = dataset.images
        self.masks = dataset.masks if with_masks else None
        if with_masks and dataset.masks is None:
            raise ValueError("supervised training needs masks loaded")
        self.patch = patch
        self.entries = []
        for idx, img in enumerate(self.images):
            grid = make_patch_grid(img.shape[0], img.shape[1], patch, stride)
            self.entries.extend((idx, r, c) for r, c in grid.origins)

    def __len__(self):
        return len(self.entries)

    def batch(self, gen: torch.Generator, batch_size: int):
        picks = torch.randint(len(self.entries), (batch_size,), generator=gen)
        imgs, masks = [], []
        for k in picks.tolist():
            idx, r, c = self.entries[k]
            p = self.patch
            imgs.append(self.images[idx][r:r + p, c:c + p].transpose(2, 0, 1))
            if self.masks is not None:
                masks.append(self.masks[idx][r:r + p, c:c + p])
        x = torch.from_numpy(np.ascontiguousarray(np.stack(imgs))).float()
        if self.masks is None:
            return x, None
        m = torch.from_numpy(np.stack(masks).astype(np.float32))[:, None]
        return x, m


@dataclass
class TrainState:
    model: SiliconModel
    opt_disc: torch.optim.Adam
    opt_gen: torch.optim.Adam
    sample_gen: torch.Generator
    data_gen: torch.Generator
    config: TrainConfig
    prior: TruncNormMixture
    step: int = 0

    def sample_prior_zc(self, shape) -> torch.Tensor:
        return mixture_sample(self.prior, self.sample_gen, shape).float()


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = SiliconModel(config.model_config())
    opt_disc = torch.optim.Adam(model.disc.parameters(), lr=config.lr_disc,
                                betas=(config.beta1, config.beta2))
    opt_gen = torch.optim.Adam(model.generator_parameters(), lr=config.lr_gen,
                               betas=(config.beta1, config.beta2))
    sample_gen = torch.Generator().manual_seed(config.seed + 1)
    data_gen = torch.Generator().manual_seed(config.seed + 2)
    return TrainState(model, opt_disc, opt_gen, sample_gen, data_gen,
                      config, config.prior())


def train_step(state: TrainState, batch: torch.Tensor,
               masks: torch.Tensor | None = None) -> LossReport:
    """One discriminator update then one generator-side update."""
    cfg = state.config
    model = state.model
    labels = cfg.labels()
    weights = cfg.weights()
    b, _, height, width = batch.shape
    gen = state.sample_gen

    def fake_inputs():
        z_c = state.sample_prior_zc((b, cfg.d_c))
        y = torch.sigmoid(torch.randn((b, 1, height, width), generator=gen))
        z_w = torch.randn((b, cfg.c_w, height // 4, width // 4), generator=gen)
        return z_c, y, z_w

    def posterior_noise(shape):
        return torch.randn(shape, generator=gen)

    # -- discriminator phase: encoders and decoder held fixed ------------
    with torch.no_grad():
        code = model.color_enc(batch, noise=posterior_noise((b, cfg.d_c)))
        seg = model.seg_net(batch)
        emb = model.embed_enc(
            batch, noise=posterior_noise((b, cfg.c_w, height // 4, width // 4)))
        z_c_f, y_f, z_w_f = fake_inputs()
        x_f = model.decoder(z_c_f, y_f, z_w_f)
    real_scores = model.disc(batch, code.sample, seg.probs, emb.sample)
    fake_scores = model.disc(x_f, z_c_f, y_f, z_w_f)
    j_disc = L.disc_loss(real_scores, fake_scores, labels)
    state.opt_disc.zero_grad(set_to_none=True)
    state.opt_gen.zero_grad(set_to_none=True)
    j_disc.backward()
    state.opt_disc.step()

    # -- generator phase: discriminator scores feed through, only the ----
    # generator-side optimizer steps.
    state.opt_disc.zero_grad(set_to_none=True)
    state.opt_gen.zero_grad(set_to_none=True)
    code = model.color_enc(batch, noise=posterior_noise((b, cfg.d_c)))
    seg = model.seg_net(batch)
    emb = model.embed_enc(
        batch, noise=posterior_noise((b, cfg.c_w, height // 4, width // 4)))
    x_hat = model.decoder(code.sample, seg.probs, emb.sample)

    z_c_f, y_f, z_w_f = fake_inputs()
    x_f = model.decoder(z_c_f, y_f, z_w_f)
    j_gen = L.gen_loss(model.disc(x_f, z_c_f, y_f, z_w_f), labels)

    q_zc = code.posterior
    q_yzw = DiagGaussian.concat([seg.posterior, emb.posterior])
    l_r = L.reconstruction_nll(batch, x_hat, kind=cfg.recon)
    noise = torch.randn((cfg.mc_samples, q_zc.dim), generator=gen)
    # KL and entropy terms are sums over latent dims; normalize per datum.
    r1 = L.kl_vs_mixture_mc(q_zc, state.prior, noise=noise) / b
    r2 = L.gaussian_kl_std(q_yzw) / b
    entropy = L.gaussian_entropy(DiagGaussian.concat([q_zc, q_yzw])) / b
    l_ssim = L.ssim_loss(batch, x_hat)
    j_rec = l_r - entropy + r1 + r2 + l_ssim

    gen_total = L.total_objective(j_gen, j_rec, weights)
    if cfg.supervised:
        if masks is None:
            raise ValueError("supervised training requires mask batches")
        bce = F.binary_cross_entropy(seg.probs, masks)
        gen_total = gen_total + cfg.supervised_weight * bce
    gen_total.backward()
    state.opt_gen.step()

    state.step += 1
    report = LossReport.from_parts(j_disc, j_gen, l_r, r1, r2, entropy,
                                   l_ssim, weights)
    bad = report.first_non_finite()
    if bad is not None:
        raise TrainingDiverged(
            f"non-finite loss term {bad!r} at step {state.step}")
    return report


# -- checkpointing -------------------------------------------------------

def save_checkpoint(state: TrainState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets.save_model_params(state.model, directory / "params")
    _save_optimizer(state.opt_disc, directory / "optim_disc")
    _save_optimizer(state.opt_gen, directory / "optim_gen")
    np.save(directory / "rng_sample.npy", state.sample_gen.get_state().numpy())
    np.save(directory / "rng_data.npy", state.data_gen.get_state().numpy())
    meta = {"step": state.step, "fingerprint": state.config.fingerprint()}
    (directory / "meta.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in meta.items()))
    (directory / "config.cfg").write_text(state.config.to_text())
    return directory


def load_checkpoint(directory, config: TrainConfig | None = None) -> TrainState:
    directory = Path(directory)
    if not (directory / "meta.txt").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    if config is None:
        config = parse_config((directory / "config.cfg").read_text())
    meta = dict(
        line.split(" = ", 1)
        for line in (directory / "meta.txt").read_text().splitlines()
    )
    if meta["fingerprint"] != config.fingerprint():
        raise ValueError("checkpoint was written under a different config")
    state = init_state(config)
    nets.load_model_params(state.model, directory / "params")
    _load_optimizer(state.opt_disc, directory / "optim_disc")
    _load_optimizer(state.opt_gen, directory / "optim_gen")
    state.sample_gen.set_state(torch.from_numpy(np.load(directory / "rng_sample.npy")))
    state.data_gen.set_state(torch.from_numpy(np.load(directory / "rng_data.npy")))
    state.step = int(meta["step"])
    return state


def _save_optimizer(opt: torch.optim.Adam, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    sd = opt.state_dict()
    entries = []
    for pid, st in sd["state"].items():
        for key, val in st.items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            name = f"{pid}.{key}"
            np.save(directory / f"{name}.npy", t.detach().cpu().numpy())
            entries.append(name)
    (directory / "index.json").write_text(
        json.dumps({"entries": entries, "param_groups": sd["param_groups"]}))


def _load_optimizer(opt: torch.optim.Adam, directory: Path):
    index = json.loads((directory / "index.json").read_text())
    state = {}
    for name in index["entries"]:
        pid_s, key = name.split(".", 1)
        arr = np.load(directory / f"{name}.npy")
        state.setdefault(int(pid_s), {})[key] = torch.from_numpy(arr)
    opt.load_state_dict({"state": state, "param_groups": index["param_groups"]})


# -- the full loop -------------------------------------------------------

def fit(config: TrainConfig, out_dir, resume_from=None,
        progress: bool = False) -> Path:
    """Train for config.total_steps; returns the final checkpoint path.

    Writes telemetry.csv (one LossReport row per step) and periodic
    checkpoints under out_dir.  With resume_from, continues an earlier
    run bit-for-bit from its saved state.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = synthdata.load_dataset(config.dataset, load_masks=config.supervised)
    # Whole images train directly when they are smaller than the patch.
    patch = min(config.patch, dataset.images[0].shape[0], dataset.images[0].shape[1])
    sampler = PatchSampler(dataset, patch, config.stride, with_masks=config.supervised)

    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = init_state(config)

    telemetry = out_dir / "telemetry.csv"
    mode = "a" if resume_from is not None and telemetry.exists() else "w"
    with telemetry.open(mode) as fh:
        if mode == "w":
            fh.write(LossReport.csv_header() + "\n")
        while state.step < config.total_steps:
            batch, masks = sampler.batch(state.data_gen, config.batch_size)
            report = train_step(state, batch, masks)
            fh.write(report.csv_row(state.step) + "\n")
            if progress and state.step % 100 == 0:
                print(f"step {state.step}: j_total={report.j_total:.4f}", flush=True)
            if config.checkpoint_interval and \
                    state.step % config.checkpoint_interval == 0 and \
                    state.step < config.total_steps:
                save_checkpoint(state, out_dir / f"checkpoint_{state.step:06d}")
    return save_checkpoint(state, out_dir / "checkpoint_final")
