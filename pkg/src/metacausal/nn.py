"""Dense tanh MLPs stored as flat named arrays."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases. Keys are ``{prefix}.W{l}`` / ``{prefix}.b{l}``."""
    params = {}
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W{layer}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}.b{layer}"] = np.zeros(fan_out)
    return params


def n_layers(params: Mapping[str, object], prefix: str) -> int:
    count = 0
    while f"{prefix}.W{count}" in params:
        count += 1
    return count


def apply_mlp(
    params: Mapping[str, ad.DiffValue],
    prefix: str,
    x: ad.DiffValue,
    final_activation: bool = False,
) -> ad.DiffValue:
    """Rows of ``x`` (or a single vector) through the MLP; tanh between layers."""
    depth = n_layers(params, prefix)
    h = x
    for layer in range(depth):
        h = h @ params[f"{prefix}.W{layer}"] + params[f"{prefix}.b{layer}"]
        if layer < depth - 1 or final_activation:
            h = ad.tanh(h)
    return h


def apply_mlp_numpy(
    params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray, final_activation: bool = False
) -> np.ndarray:
    depth = n_layers(params, prefix)
    h = x
    for layer in range(depth):
        h = h @ params[f"{prefix}.W{layer}"] + params[f"{prefix}.b{layer}"]
        if layer < depth - 1 or final_activation:
            h = np.tanh(h)
    return h
