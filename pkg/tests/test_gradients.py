"""Autograd gradients against central finite differences on a 47-parameter net."""

import torch
import torch.nn.functional as F

from bannoise.decouple import mask_objective
from bannoise.model import ParamSelection
from bannoise.noise import init_noise, loss_and_grad

H = 1e-6


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).norm() / max(a.norm(), b.norm(), 1e-12)).item()


def central_diff(f, v: torch.Tensor) -> torch.Tensor:
    g = torch.zeros_like(v)
    for i in range(v.numel()):
        up, down = v.clone(), v.clone()
        up[i] += H
        down[i] -= H
        g[i] = (f(up) - f(down)) / (2 * H)
    return g


def test_tiny_net_is_small(tiny_net):
    assert sum(p.numel() for p in tiny_net.parameters()) <= 100


def test_delta_and_xi_gradients_match_finite_differences(tiny_net, tiny_batch):
    sel = ParamSelection()
    noise = init_noise(tiny_net, 0.3, sel, seed=5)
    _, g_delta, g_xi = loss_and_grad(tiny_net, noise.delta, noise.xi, sel, tiny_batch)

    def loss_at(delta, xi):
        with torch.no_grad():
            logits = tiny_net.perturbed_forward(tiny_batch.inputs, delta, xi, sel)
            return F.cross_entropy(logits, tiny_batch.labels).item()

    num_delta = central_diff(lambda d: loss_at(d, noise.xi), noise.delta)
    num_xi = central_diff(lambda x: loss_at(noise.delta, x), noise.xi)
    assert rel_err(g_delta, num_delta) <= 1e-3
    assert rel_err(g_xi, num_xi) <= 1e-3


def test_gradient_accumulates_over_minibatches(tiny_net, tiny_batch):
    sel = ParamSelection()
    noise = init_noise(tiny_net, 0.2, sel, seed=1)
    full = loss_and_grad(tiny_net, noise.delta, noise.xi, sel, tiny_batch, batch_size=100)
    split = loss_and_grad(tiny_net, noise.delta, noise.xi, sel, tiny_batch, batch_size=2)
    assert abs(full[0] - split[0]) < 1e-12
    assert torch.allclose(full[1], split[1], atol=1e-12)
    assert torch.allclose(full[2], split[2], atol=1e-12)


def test_mask_gradient_matches_finite_differences(tiny_net, tiny_batch):
    with torch.no_grad():
        feats = tiny_net.features(tiny_batch.inputs)
    m = torch.rand(tiny_net.latent_shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    m = (0.1 + 0.8 * m).requires_grad_(True)
    for lam in (0.0, 0.75):
        loss = mask_objective(tiny_net, feats, tiny_batch.labels, m, lam)
        (grad,) = torch.autograd.grad(loss, m)
        flat = m.detach().flatten()

        def f(v):
            with torch.no_grad():
                return mask_objective(tiny_net, feats, tiny_batch.labels, v.view_as(m), lam).item()

        assert rel_err(grad.flatten(), central_diff(f, flat)) <= 1e-3
