"""Straight-line float64 forward passes written independently of the autodiff engine."""

from __future__ import annotations

import numpy as np


def conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """x (C, H, W), w (O, C, k, k) -> (O, H', W') by explicit loops over output pixels."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.empty((o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
            for f in range(o):
                out[f, i, j] = np.sum(patch * w[f]) + b[f]
    return out


def maxpool(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, i, j] = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(c, 4).max(axis=1)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def lenet(t: dict[str, np.ndarray], x: np.ndarray, n_dense: int) -> float:
    h = maxpool(relu(conv(x, t["conv0.w"], t["conv0.b"])))
    h = maxpool(relu(conv(h, t["conv1.w"], t["conv1.b"]))).reshape(-1)
    for i in range(n_dense):
        h = relu(t[f"fc{i}.w"] @ h + t[f"fc{i}.b"])
    return float((t["head.w"] @ h + t["head.b"])[0])


def miniresnet_skip_only(t: dict[str, np.ndarray], x: np.ndarray, n_stages: int) -> float:
    """The network with every residual branch contributing zero: relu(skip(h)) per block."""
    h = relu(conv(x, t["stem.w"], t["stem.b"], padding=1))
    for s in range(n_stages):
        name = f"s{s}b0"
        stride = 2 if s > 0 else 1
        if f"{name}.skip.w" in t:
            h = relu(conv(h, t[f"{name}.skip.w"], t[f"{name}.skip.b"], stride=stride))
        else:
            h = relu(h)
    return float((t["head.w"] @ h.mean(axis=(1, 2)) + t["head.b"])[0])
