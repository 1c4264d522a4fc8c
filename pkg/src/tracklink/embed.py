"""Shared-weight feed-forward embedding with hand-written backprop.

Both branches of the Siamese pair run through the same ``EmbeddingNet``; the
pair gradient is split into a +g contribution for the first sample and -g for
the second and pushed back through the shared parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class EmbeddingNet:
    """MLP ``d_in -> hidden... -> d_emb``; ReLU on hidden layers, linear output.

    ``layers`` is a list of ``(W, b)`` with ``W`` shaped ``(fan_out, fan_in)``.
    """

    def __init__(self, layers: Sequence[tuple]):
        if not layers:
            raise ValueError("EmbeddingNet needs at least one layer")
        self.layers = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in layers]
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} do not agree")
            if k and W.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ValueError(f"layer {k} input size {W.shape[1]} != previous output size")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite parameters")

    @classmethod
    def initialize(cls, d_in: int, d_emb: int, hidden: Sequence[int] = (128,), rng=None) -> "EmbeddingNet":
        """Scaled uniform init: W ~ U[-s, s], s = sqrt(6 / (fan_in + fan_out)); zero biases."""
        rng = np.random.default_rng(rng)
        sizes = [d_in, *hidden, d_emb]
        layers = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers)

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d_emb(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet([(W.copy(), b.copy()) for W, b in self.layers])

    def embed(self, raw: np.ndarray) -> np.ndarray:
        return forward(self, raw)[0]

    def parameters_equal(self, other: "EmbeddingNet") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )


@dataclass
class ForwardCache:
    net: EmbeddingNet
    inputs: list  # input to each layer, shape (n, fan_in)
    preacts: list  # pre-activation of each layer, shape (n, fan_out)
    single: bool


def forward(net: EmbeddingNet, raw: np.ndarray):
    """Embed one vector ``(d_in,)`` or a batch ``(n, d_in)``; returns (out, cache)."""
    x = np.asarray(raw, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.d_in:
        raise ValueError(f"expected input of dimension {net.d_in}, got shape {np.shape(raw)}")
    inputs, preacts = [], []
    last = len(net.layers) - 1
    for k, (W, b) in enumerate(net.layers):
        inputs.append(x)
        z = x @ W.T + b
        preacts.append(z)
        x = z if k == last else np.maximum(z, 0.0)
    cache = ForwardCache(net=net, inputs=inputs, preacts=preacts, single=single)
    return (x[0] if single else x), cache


def backward(net: EmbeddingNet, cache: ForwardCache, output_gradient: np.ndarray) -> list:
    """Parameter gradients ``[(dW, db), ...]`` for a loss with dL/d(output) given.

    For a batched forward pass the per-sample gradients are summed.
    """
    if cache.net is not net:
        raise ValueError("stale cache: it was produced by a different network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {cache.preacts[-1].shape}")
    grads = [None] * len(net.layers)
    last = len(net.layers) - 1
    for k in range(last, -1, -1):
        W, _ = net.layers[k]
        if k != last:
            g = g * (cache.preacts[k] > 0.0)
        grads[k] = (g.T @ cache.inputs[k], g.sum(axis=0))
        if k:
            g = g @ W
    return grads


def zero_grads(net: EmbeddingNet) -> list:
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.layers]


def add_grads(acc: list, grads: list) -> list:
    return [(aW + gW, ab + gb) for (aW, ab), (gW, gb) in zip(acc, grads)]


def sgd_step(net: EmbeddingNet, grads: list, beta: float) -> EmbeddingNet:
    """New network with every parameter moved by ``-beta * grad``."""
    if len(grads) != len(net.layers):
        raise ValueError("gradient list does not match network depth")
    layers = []
    for (W, b), (dW, db) in zip(net.layers, grads):
        if dW.shape != W.shape or db.shape != b.shape:
            raise ValueError("gradient shapes do not match network parameters")
        layers.append((W - beta * dW, b - beta * db))
    return EmbeddingNet(layers)


def hinge_value(x_i, x_j, label: int, m_tot: np.ndarray, b: float) -> float:
    """g(x_i, x_j) = b - l * (1 - (x_i - x_j)^T M (x_i - x_j))."""
    diff = np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)
    return float(b - label * (1.0 - diff @ m_tot @ diff))


def pair_input_gradient(x_i, x_j, label: int, m_tot: np.ndarray, b: float, c: float,
                        sym_tol: float = 1e-9) -> np.ndarray:
    """Pair gradient 2 C l (M + M^T)(x_i - x_j), gated by the hinge being active.

    This is the derivative of ``C * h`` along the antisymmetric perturbation
    ``(x_i + e, x_j - e)``, i.e. the sum of the two branch contributions.
    The per-branch gradients are +half and -half of it.
    """
    m_tot = np.asarray(m_tot, dtype=np.float64)
    if m_tot.shape[0] != m_tot.shape[1]:
        raise ValueError("metric must be square")
    scale = max(1.0, float(np.abs(m_tot).max(initial=0.0)))
    if np.abs(m_tot - m_tot.T).max(initial=0.0) > sym_tol * scale:
        raise ValueError("metric is not symmetric")
    diff = np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)
    if diff.shape != (m_tot.shape[0],):
        raise ValueError(f"embedding dimension {diff.shape} does not match metric {m_tot.shape}")
    if hinge_value(x_i, x_j, label, m_tot, b) <= 0.0:
        return np.zeros_like(diff)
    return 2.0 * c * label * (m_tot + m_tot.T) @ diff


def pair_parameter_gradients(net: EmbeddingNet, raw_i, raw_j, label: int,
                             m_tot: np.ndarray, b: float, c: float) -> list:
    """Gradient of ``C * h`` w.r.t. the shared parameters for one raw pair."""
    both, cache = forward(net, np.stack([raw_i, raw_j]))
    g_total = pair_input_gradient(both[0], both[1], label, m_tot, b, c)
    if not g_total.any():
        return zero_grads(net)
    half = 0.5 * g_total
    return backward(net, cache, np.stack([half, -half]))


def warm_up(net: EmbeddingNet, raw_pairs: Sequence[tuple], epochs: int, beta: float,
            b: float, c: float, batch_size: int = 16, rng=None) -> EmbeddingNet:
    """Pre-train with the single-metric loss, metric held at identity.

    ``raw_pairs`` holds ``(raw_i, raw_j, label)`` tuples.
    """
    rng = np.random.default_rng(rng)
    eye = np.eye(net.d_emb)
    for _ in range(epochs):
        order = rng.permutation(len(raw_pairs))
        acc, pending = zero_grads(net), 0
        for idx in order:
            raw_i, raw_j, label = raw_pairs[idx]
            acc = add_grads(acc, pair_parameter_gradients(net, raw_i, raw_j, label, eye, b, c))
            pending += 1
            if pending == batch_size:
                net = sgd_step(net, acc, beta)
                acc, pending = zero_grads(net), 0
        if pending:
            net = sgd_step(net, acc, beta)
    return net


def save_net(net: EmbeddingNet, path) -> None:
    arrays = {"version": np.array(CHECKPOINT_VERSION), "n_layers": np.array(len(net.layers))}
    for k, (W, b) in enumerate(net.layers):
        arrays[f"W{k}"] = np.ascontiguousarray(W)
        arrays[f"b{k}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_net(path) -> EmbeddingNet:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported net checkpoint version {version}")
        n = int(data["n_layers"])
        return EmbeddingNet([(data[f"W{k}"], data[f"b{k}"]) for k in range(n)])


def identity_net(dim: int) -> EmbeddingNet:
    """Single linear layer that returns its input unchanged."""
    return EmbeddingNet([(np.eye(dim), np.zeros(dim))])

