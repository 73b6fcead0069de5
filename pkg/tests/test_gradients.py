"""Analytic gradients against central finite differences in float64."""
import numpy as np
import pytest
import torch

from morphdiff.backbone import BackboneConfig, UNet
from morphdiff.conditioning import Tuner, tuner_apply
from morphdiff.diffusion import make_cosine_schedule
from morphdiff.training import stage1_loss, stage2_loss

H = 1e-3
TOL = 1e-4
N_SAMPLES = 500


def rel_err(a, n):
    """Normwise relative error of the sampled gradient vector."""
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)))


def elementwise_err(a, n):
    # entries far below the gradient scale are floored: there the step-1e-3
    # truncation term, not the analytic gradient, sets the discrepancy
    floor = 1e-3 * np.abs(a).max()
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check(loss_fn, tensors, n_samples=N_SAMPLES, seed=0):
    """Compare autograd with central differences on ``n_samples`` entries drawn across ``tensors``."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    sizes = np.array([t.numel() for t in tensors])
    assert sizes.sum() >= n_samples
    flat = np.random.default_rng(seed).choice(sizes.sum(), n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    with torch.no_grad():
        for idx in flat:
            k = int(np.searchsorted(offsets, idx, side="right") - 1)
            t, j = tensors[k], int(idx - offsets[k])
            view = t.view(-1)
            orig = view[j].item()
            view[j] = orig + H
            up = loss_fn().item()
            view[j] = orig - H
            down = loss_fn().item()
            view[j] = orig
            numeric.append((up - down) / (2 * H))
            analytic.append(grads[k].reshape(-1)[j].item())
    a, n = np.array(analytic), np.array(numeric)
    assert elementwise_err(a, n).max() < 1e-3
    return rel_err(a, n)


def test_stage1_loss_gradients():
    sched = make_cosine_schedule(1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(4, 1, 16, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 1, 16, 16, generator=g, dtype=torch.float64)
    eps_hat = torch.randn(4, 1, 16, 16, generator=g, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([1, 200, 600, 999])
    err = check(lambda: stage1_loss(x0, eps, eps_hat, t, sched), [eps_hat])
    assert err < TOL


def test_stage2_loss_gradients():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 4, 16, 16, generator=g, dtype=torch.float64, requires_grad=True)
    y = torch.randint(0, 4, (2, 16, 16), generator=g)
    err = check(lambda: stage2_loss(logits, y), [logits])
    assert err < TOL


def test_tuner_apply_gradients():
    torch.manual_seed(2)
    tuner = Tuner([16, 32]).double()
    for p in tuner.parameters():
        p.data.normal_(0, 0.3)
    f = torch.randn(2, 32, 4, 4, dtype=torch.float64, requires_grad=True)
    F_ = torch.randn(2, 32, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 32, 4, 4, dtype=torch.float64)
    params = [tuner.down[1].weight, tuner.up[1].weight]
    err = check(lambda: (tuner_apply(f, F_, tuner, 2) * w).sum(), params + [f, F_])
    assert err < TOL


@pytest.mark.parametrize("role", ["diffusion", "extractor"])
def test_micro_unet_gradients(role):
    torch.manual_seed(3)
    cfg = BackboneConfig(image_size=16, base_channels=4, num_res_blocks=1).role_variant(role)
    model = UNet(cfg, role).double()
    for p in model.parameters():  # zero-initialised layers would leave some paths untested
        p.data.add_(0.05 * torch.randn_like(p))
    g = torch.Generator().manual_seed(4)
    x = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    if role == "diffusion":
        sched = make_cosine_schedule(1000)
        eps = torch.randn(2, 1, 16, 16, generator=g, dtype=torch.float64)
        t = torch.tensor([50, 700])

        def loss_fn():
            return stage1_loss(x, eps, model(x, t)[0], t, sched)
    else:
        y = torch.randint(0, 4, (2, 16, 16), generator=g)

        def loss_fn():
            return stage2_loss(model(x)[0], y)

    params = list(model.parameters())
    err = check(loss_fn, params)
    assert err < TOL, f"normwise relative error {err:.2e}"
