"""Shared fixtures and independent numeric oracles."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from riskscene.synthgen import WorldConfig, generate


@pytest.fixture(scope="session")
def small_world() -> WorldConfig:
    return WorldConfig(seed=101, n_agents_range=(2, 6), z=3, d=48, noise_sigma=0.02)


@pytest.fixture(scope="session")
def small_episodes(small_world):
    return generate(small_world, 40)


# ---------------------------------------------------------------------------
# Independent scalar oracles (pure numpy, no torch).
# ---------------------------------------------------------------------------


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_cell_oracle(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """One LSTM step from explicit gate arithmetic (gate order i, f, g, o)."""
    x, h, c = np.atleast_1d(x), np.atleast_1d(h), np.atleast_1d(c)
    gates = w_ih @ x + b_ih + w_hh @ h + b_hh
    hs = h.shape[0]
    i = sigmoid(gates[0:hs])
    f = sigmoid(gates[hs : 2 * hs])
    g = np.tanh(gates[2 * hs : 3 * hs])
    o = sigmoid(gates[3 * hs : 4 * hs])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def softmax_oracle(logits):
    logits = np.asarray(logits, dtype=np.float64)
    ex = np.exp(logits - logits.max())
    return ex / ex.sum()


def cross_entropy_oracle(probs, label):
    return -np.log(probs[label])


# ---------------------------------------------------------------------------
# Central finite differences against autograd.
# ---------------------------------------------------------------------------


def generic_point(module, seed: int, scale: float = 0.05) -> None:
    """Nudge every parameter off exact zeros.

    Gradient checks are only meaningful where the loss is differentiable;
    zero-initialized biases put rectifier kinks exactly at the evaluation
    point, where central differences measure the half-slope instead of the
    subgradient.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))


def finite_difference_grads(loss_fn, tensors, eps=1e-4):
    """Central-difference gradient of a scalar loss for each tensor, elementwise."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                g[i] = (up - down) / (2.0 * eps)
            grads.append(g.reshape(tuple(t.shape)))
    return grads


def autograd_grads(loss_fn, tensors):
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn()
    loss.backward()
    # A parameter with no path to the loss (e.g. decoder heads when Z=1)
    # has a None grad; finite differences will measure zero there too.
    out = [
        t.grad.detach().numpy().copy() if t.grad is not None else np.zeros(tuple(t.shape))
        for t in tensors
    ]
    for t in tensors:
        t.requires_grad_(False)
        t.grad = None
    return out


def relative_gradient_error(analytic, numeric) -> float:
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _refine_coordinate(loss_fn, tensor, index, eps):
    with torch.no_grad():
        flat = tensor.view(-1)
        orig = float(flat[index])
        flat[index] = orig + eps
        up = float(loss_fn())
        flat[index] = orig - eps
        down = float(loss_fn())
        flat[index] = orig
    return (up - down) / (2.0 * eps)


def check_gradients(loss_fn, tensors, tol=1e-3, eps=1e-4) -> float:
    """Compare autograd against central differences at the given step.

    A rectifier kink within eps of the evaluation point biases the
    finite-difference estimate by O(1) even though the point itself is
    differentiable. Disagreeing coordinates are therefore re-estimated at a
    64x smaller step, where central differences converge to the true
    derivative; a genuine autograd bug persists at every step size.
    """
    analytic = autograd_grads(loss_fn, tensors)
    numeric = finite_difference_grads(loss_fn, tensors, eps=eps)
    err = relative_gradient_error(analytic, numeric)
    if err < tol:
        return err
    scale = max(np.linalg.norm(np.concatenate([x.ravel() for x in analytic])), 1.0)
    for t_idx, (a, n) in enumerate(zip(analytic, numeric)):
        gaps = np.abs(a - n).ravel()
        for flat_idx in np.nonzero(gaps > tol * scale / 10.0)[0]:
            n.ravel()[flat_idx] = _refine_coordinate(loss_fn, tensors[t_idx], int(flat_idx), eps / 64.0)
    err = relative_gradient_error(analytic, numeric)
    assert err < tol, f"gradient mismatch after kink refinement: {err:.3e} >= {tol}"
    return err
