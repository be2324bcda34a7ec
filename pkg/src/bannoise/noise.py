"""Adversarial neuron noise: projected gradient ascent on clean-data loss."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from bannoise.errors import ConfigurationError, OptimizationError
from bannoise.model import Batch, LayeredClassifier, ParamSelection

log = logging.getLogger(__name__)

# Per-dataset radii used at paper scale.
PAPER_EPSILON = {"cifar10": 0.3, "gtsrb": 0.3, "tiny-imagenet": 0.2, "imagenet200": 0.1}


@dataclass
class NeuronNoise:
    """Multiplicative weight (``delta``) and bias (``xi``) noise, one entry per neuron."""

    delta: torch.Tensor
    xi: torch.Tensor
    epsilon: float
    selection: ParamSelection = field(default_factory=ParamSelection)
    seed: int = 0
    loss_trace: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")

    def check(self, model: LayeredClassifier) -> None:
        n_delta, n_xi = model.noise_sizes(self.selection)
        if self.delta.numel() != n_delta or self.xi.numel() != n_xi:
            raise ConfigurationError(
                f"noise sizes ({self.delta.numel()}, {self.xi.numel()}) do not match model ({n_delta}, {n_xi})")

    def in_ball(self, tol: float = 0.0) -> bool:
        bound = self.epsilon + tol
        return all(bool((v.abs() <= bound).all()) for v in (self.delta, self.xi))

    def detached(self) -> "NeuronNoise":
        return NeuronNoise(self.delta.detach().clone(), self.xi.detach().clone(), self.epsilon,
                           self.selection, self.seed, list(self.loss_trace))

    @property
    def gain(self) -> float:
        """Loss increase from the random start to the returned noise."""
        return self.loss_trace[-1] - self.loss_trace[0] if self.loss_trace else 0.0


def zero_noise(model: LayeredClassifier, selection: ParamSelection = ParamSelection(),
               epsilon: float = 0.0) -> NeuronNoise:
    n_delta, n_xi = model.noise_sizes(selection)
    dtype = next(model.parameters()).dtype
    return NeuronNoise(torch.zeros(n_delta, dtype=dtype), torch.zeros(n_xi, dtype=dtype), epsilon, selection)


def init_noise(model: LayeredClassifier, epsilon: float, selection: ParamSelection = ParamSelection(),
               seed: int = 0) -> NeuronNoise:
    """Uniform random start inside the epsilon ball."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    n_delta, n_xi = model.noise_sizes(selection)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    delta = (torch.rand(n_delta, generator=gen, dtype=dtype) * 2 - 1) * epsilon
    xi = (torch.rand(n_xi, generator=gen, dtype=dtype) * 2 - 1) * epsilon
    return NeuronNoise(delta, xi, epsilon, selection, seed)


@contextmanager
def frozen(model: LayeredClassifier):
    """Eval mode with parameter gradients disabled; restores both on exit."""
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def noise_loss(model: LayeredClassifier, noise: NeuronNoise, data: Batch, batch_size: int = 512) -> float:
    noise.check(model)
    with frozen(model), torch.no_grad():
        total = sum(
            F.cross_entropy(model.perturbed_forward(b.inputs, noise.delta, noise.xi, noise.selection),
                            b.labels, reduction="sum").item()
            for b in data.batches(batch_size))
    return total / len(data)


def loss_and_grad(model, delta, xi, selection, data: Batch, batch_size: int = 1024):
    """Gradient of the mean clean loss w.r.t. (delta, xi), accumulated over minibatches."""
    delta = delta.detach().requires_grad_(True)
    xi = xi.detach().requires_grad_(True)
    total = 0.0
    for b in data.batches(batch_size):
        logits = model.perturbed_forward(b.inputs, delta, xi, selection)
        loss = F.cross_entropy(logits, b.labels, reduction="sum") / len(data)
        loss.backward()
        total += loss.item()
    g_delta = delta.grad if delta.grad is not None else torch.zeros_like(delta)
    g_xi = xi.grad if xi.grad is not None else torch.zeros_like(xi)
    return total, g_delta, g_xi


def _run_pgd(model, data, start: NeuronNoise, steps, step_size, signed, batch_size) -> NeuronNoise:
    eps = start.epsilon
    delta, xi = start.delta.clone(), start.xi.clone()
    trace = []
    for step in range(steps):
        loss, g_delta, g_xi = loss_and_grad(model, delta, xi, start.selection, data, batch_size)
        if not (torch.isfinite(g_delta).all() and torch.isfinite(g_xi).all()) or loss != loss:
            raise OptimizationError("non-finite noise gradient", step=step)
        trace.append(loss)
        if signed:
            g_delta, g_xi = g_delta.sign(), g_xi.sign()
        delta = (delta + step_size * g_delta).clamp(-eps, eps)
        xi = (xi + step_size * g_xi).clamp(-eps, eps)
    out = NeuronNoise(delta.detach(), xi.detach(), eps, start.selection, start.seed)
    out.loss_trace = trace
    return out


def pgd_maximize(model: LayeredClassifier, clean_data: Batch, epsilon: float, steps: int = 30,
                 step_size: float | None = None, seed: int = 0,
                 selection: ParamSelection = ParamSelection(), signed: bool = True,
                 batch_size: int = 1024) -> NeuronNoise:
    """Maximise clean cross-entropy over neuron noise in the epsilon ball.

    Starts from a uniform random point and takes ``steps`` ascent steps of
    size ``step_size`` (default ``epsilon / 30``), projecting after each. With
    ``signed`` the step follows the gradient sign, otherwise the raw gradient.
    Each step uses the whole of ``clean_data``; minibatches only bound memory.

    The returned noise never has lower loss than either the random start or
    zero noise. If that fails, one retry is made from a fresh start.
    """
    if len(clean_data) == 0:
        raise ConfigurationError("clean_data is empty")
    if model.noise_sizes(selection)[0] == 0:
        raise ConfigurationError(f"selection {selection.to_dict()} picks no parameters of this model")
    if step_size is None:
        step_size = epsilon / 30
    with frozen(model):
        zero_loss = noise_loss(model, zero_noise(model, selection, epsilon), clean_data, batch_size)
        for attempt, s in enumerate((seed, seed + 1_000_003)):
            start = init_noise(model, epsilon, selection, s)
            start_loss = noise_loss(model, start, clean_data, batch_size)
            if steps <= 0:
                start.loss_trace = [start_loss]
                return start
            noise = _run_pgd(model, clean_data, start, steps, step_size, signed, batch_size)
            final_loss = noise_loss(model, noise, clean_data, batch_size)
            noise.loss_trace = [start_loss] + noise.loss_trace[1:] + [final_loss]
            if final_loss >= start_loss and final_loss >= zero_loss - 1e-12:
                return noise
            log.warning("PGD attempt %d lost ground (start %.4f, zero %.4f, final %.4f)",
                        attempt, start_loss, zero_loss, final_loss)
    raise OptimizationError(f"PGD failed to increase the loss after retry (final {final_loss:.4f})")
