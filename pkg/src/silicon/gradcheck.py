"""Central finite-difference gradient verification.

Used by the test suite and by the `silicon gradcheck` subcommand.  All
checks run in float64; analytic gradients come from autograd and are
compared against central differences either element by element (small
parameter counts) or along random directions (networks).
"""

from __future__ import annotations

import torch


def autograd_gradients(scalar_fn, tensors):
    """Gradients of scalar_fn(*tensors) w.r.t. every tensor."""
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = scalar_fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return [torch.zeros_like(l) if g is None else g.detach() for g, l in zip(grads, leaves)]


def fd_gradient(scalar_fn, tensors, index: int, eps: float = 1e-6) -> torch.Tensor:
    """Elementwise central differences w.r.t. tensors[index]."""
    base = [t.detach().clone().contiguous() for t in tensors]
    target = base[index]
    grad = torch.zeros_like(target)
    flat = target.view(-1)  # view, so in-place edits reach scalar_fn
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(scalar_fn(*base))
        flat[i] = orig - eps
        lo = float(scalar_fn(*base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def fd_directional(scalar_fn, tensors, directions, eps: float = 1e-6) -> float:
    """Central-difference directional derivative along `directions`."""
    plus = [t.detach() + eps * v for t, v in zip(tensors, directions)]
    minus = [t.detach() - eps * v for t, v in zip(tensors, directions)]
    with torch.no_grad():
        return (float(scalar_fn(*plus)) - float(scalar_fn(*minus))) / (2.0 * eps)


def rel_error(approx: torch.Tensor, exact: torch.Tensor) -> float:
    """Max absolute deviation normalized by the gradient scale."""
    approx = torch.as_tensor(approx, dtype=torch.float64)
    exact = torch.as_tensor(exact, dtype=torch.float64)
    scale = max(float(exact.abs().max()), 1.0)
    return float((approx - exact).abs().max()) / scale


def check_full(scalar_fn, tensors, eps: float = 1e-6) -> float:
    """Worst relative error of elementwise FD vs autograd over all tensors."""
    analytic = autograd_gradients(scalar_fn, tensors)
    worst = 0.0
    for i in range(len(tensors)):
        fd = fd_gradient(scalar_fn, tensors, i, eps)
        worst = max(worst, rel_error(fd, analytic[i]))
    return worst


def module_gradcheck(module, forward_scalar, n_directions: int = 6,
                     eps: float = 1e-5, seed: int = 0) -> float:
    """FD directional derivatives w.r.t. all parameters of a module.

    forward_scalar() must evaluate the module (deterministically) and
    return a scalar tensor.  Parameters are perturbed in place for the
    finite differences and restored afterwards.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    forward_scalar().backward()
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
             for p in params]

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_directions):
        dirs = []
        for p in params:
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            dirs.append(v / max(float(v.norm()), 1e-12))
        with torch.no_grad():
            for p, v in zip(params, dirs):
                p.add_(eps * v)
            hi = float(forward_scalar())
            for p, v in zip(params, dirs):
                p.add_(-2.0 * eps * v)
            lo = float(forward_scalar())
            for p, v in zip(params, dirs):
                p.add_(eps * v)
        fd = (hi - lo) / (2.0 * eps)
        exact = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1.0))
    return worst


def check_directional(scalar_fn, tensors, n_directions: int = 8,
                      eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error of FD directional derivatives vs autograd.

    Cheaper than elementwise differences for large parameter counts while
    still exercising every parameter through random directions.
    """
    analytic = autograd_gradients(scalar_fn, tensors)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_directions):
        dirs = []
        for t in tensors:
            v = torch.randn(t.shape, generator=gen, dtype=torch.float64)
            dirs.append(v / max(float(v.norm()), 1e-12))
        fd = fd_directional(scalar_fn, tensors, dirs, eps)
        exact = sum(float((g * v).sum()) for g, v in zip(analytic, dirs))
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1.0))
    return worst


def run_gradient_suite(tol: float = 1e-4):
    """Every loss and network output against central finite differences.

    Returns printable rows (name, worst_rel_err, tol, passed); float64,
    toy shapes, shared by the CLI subcommand and the acceptance suite.
    """
    import numpy as np

    from silicon import losses as L
    from silicon import nets
    from silicon.priors import (DiagGaussian, TruncNormMixture,
                                gaussian_entropy, gaussian_kl_std,
                                kl_vs_mixture_mc)

    rows = []

    def add(name, err):
        rows.append((name, err, tol, err <= tol))

    gen = torch.Generator().manual_seed(0)

    def randn(*shape):
        return torch.randn(shape, generator=gen, dtype=torch.float64)

    mean, log_var = randn(6), 0.5 * randn(6)
    add("gaussian_kl_std", check_full(
        lambda m, lv: gaussian_kl_std(DiagGaussian(m, lv)), [mean, log_var]))
    add("gaussian_entropy", check_full(
        lambda m, lv: gaussian_entropy(DiagGaussian(m, lv)), [mean, log_var]))

    prior = TruncNormMixture.default_zc_prior()
    noise = randn(128, 3)
    add("kl_vs_mixture_mc", check_full(
        lambda m, lv: kl_vs_mixture_mc(DiagGaussian(m, lv), prior, noise=noise),
        [randn(3), 0.3 * randn(3)]))

    labels = L.DiscLabels()
    add("disc_loss", check_full(
        lambda r, f: L.disc_loss(r, f, labels), [randn(5), randn(5)]))
    add("gen_loss", check_full(lambda f: L.gen_loss(f, labels), [randn(5)]))

    x = torch.rand((1, 3, 8, 8), generator=gen, dtype=torch.float64)
    jitter = 0.05 + 0.2 * torch.rand((1, 3, 8, 8), generator=gen, dtype=torch.float64)
    sign = torch.where(torch.rand((1, 3, 8, 8), generator=gen) > 0.5, 1.0, -1.0).double()
    x_hat = torch.clamp(x + sign * jitter, 0.0, 1.0)
    add("reconstruction_nll", check_full(
        lambda a: L.reconstruction_nll(x, a), [x_hat]))
    add("ssim", check_full(lambda a: L.ssim(x, a), [x_hat]))
    add("rec_objective.j_rec", check_full(
        lambda zm, zlv, ym, ylv, xh: L.rec_objective(
            x, xh, DiagGaussian(zm, zlv), DiagGaussian(ym, ylv), prior,
            noise=noise)["j_rec"],
        [randn(3), 0.3 * randn(3), randn(4), 0.3 * randn(4), x_hat]))

    cfg = nets.ModelConfig(d_c=4, c_w=2, base=4)
    torch.manual_seed(1)
    model = nets.SiliconModel(cfg).double()
    img = torch.rand((1, 3, 8, 8), generator=gen, dtype=torch.float64)

    add("color_encoder", module_gradcheck(
        model.color_enc,
        lambda: model.color_enc(img).posterior.mean.sum()
        + model.color_enc(img).posterior.log_var.sum()))
    add("segmentation_net", module_gradcheck(
        model.seg_net, lambda: model.seg_net(img).probs.mean()))
    add("embedding_encoder", module_gradcheck(
        model.embed_enc, lambda: model.embed_enc(img).posterior.mean.sum()))

    z_c, y, z_w = randn(1, 4), torch.rand((1, 1, 8, 8), generator=gen, dtype=torch.float64), randn(1, 2, 2, 2)
    add("decoder.params", module_gradcheck(
        model.decoder, lambda: model.decoder(z_c, y, z_w).mean()))
    add("decoder.inputs", check_directional(
        lambda a, b, c: model.decoder(a, b, c).mean(), [z_c, y, z_w]))
    x_d = torch.sigmoid(randn(1, 3, 8, 8))
    add("discriminator", module_gradcheck(
        model.disc, lambda: model.disc(x_d, z_c, y, z_w).mean()))

    return rows
