"""Tiny convolutional models: a channel autoencoder and a warp localizer.

Widths are chosen to land inside hard parameter budgets, checked by tests:
the autoencoder (both halves) must hold 2K-4K trainable scalars, the
localizer 10K-16K, and everything together at most 20K.
"""

from __future__ import annotations

import numpy as np

from . import autodiff, tensorio
from .autodiff import Tensor

__all__ = [
    "Conv2d",
    "Linear",
    "Encoder",
    "Decoder",
    "LocNet",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
    "init_models",
]

AE_WIDTH = 7
LOC_WIDTH = 23


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, rng=None, zero_init: bool = False):
        self.stride = stride
        self.pad = pad
        if zero_init or rng is None:
            w = np.zeros((cout, cin, k, k), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        self.weight = autodiff.parameter(w)
        self.bias = autodiff.parameter(np.zeros(cout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return autodiff.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Linear:
    def __init__(self, fin: int, fout: int, rng=None, zero_init: bool = False):
        if zero_init or rng is None:
            w = np.zeros((fout, fin), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / fin)
            w = rng.uniform(-bound, bound, size=(fout, fin)).astype(np.float32)
        self.weight = autodiff.parameter(w)
        self.bias = autodiff.parameter(np.zeros(fout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return autodiff.linear(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Encoder:
    """Channel reduction K -> 3, fully convolutional, spatial-size preserving."""

    def __init__(self, k_channels: int, rng=None):
        self.conv1 = Conv2d(k_channels, AE_WIDTH, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(AE_WIDTH, 3, 3, pad=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(autodiff.relu(self.conv1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**self.conv1.params("enc.conv1"), **self.conv2.params("enc.conv2")}


class Decoder:
    """Channel expansion 3 -> K mirroring Encoder."""

    def __init__(self, k_channels: int, rng=None):
        self.conv1 = Conv2d(3, AE_WIDTH, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(AE_WIDTH, k_channels, 3, pad=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(autodiff.relu(self.conv1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**self.conv1.params("dec.conv1"), **self.conv2.params("dec.conv2")}


class LocNet:
    """Two strided conv blocks, global average pooling, and a linear head
    predicting 8 warp coefficients.  The head starts at exactly zero so an
    untrained model emits the identity transform."""

    def __init__(self, rng=None):
        self.conv1 = Conv2d(3, LOC_WIDTH, 5, stride=2, pad=2, rng=rng)
        self.conv2 = Conv2d(LOC_WIDTH, LOC_WIDTH, 5, stride=2, pad=2, rng=rng)
        self.head = Linear(LOC_WIDTH, 8, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = autodiff.relu(self.conv1(x))
        h = autodiff.relu(self.conv2(h))
        return self.head(autodiff.global_avg_pool(h))

    def params(self) -> dict[str, Tensor]:
        return {
            **self.conv1.params("loc.conv1"),
            **self.conv2.params("loc.conv2"),
            **self.head.params("loc.head"),
        }


def count_params(model_or_params) -> int:
    params = model_or_params.params() if hasattr(model_or_params, "params") else model_or_params
    return int(sum(t.data.size for t in params.values()))


def init_models(k_channels: int, seed: int):
    """Deterministic construction of all three models from one seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    enc = Encoder(k_channels, rng)
    dec = Decoder(k_channels, rng)
    loc = LocNet(rng)
    return enc, dec, loc


def save_checkpoint(path, *models) -> None:
    named: dict[str, np.ndarray] = {}
    for m in models:
        for name, t in m.params().items():
            named[name] = t.data
    tensorio.save_tensors(path, named)


def load_checkpoint(path, *models) -> None:
    """Load named tensors into the given models in place; every model
    parameter must be present with a matching shape."""
    table = tensorio.load_tensors(path)
    for m in models:
        for name, t in m.params().items():
            if name not in table:
                raise tensorio.TensorFormatError(f"checkpoint is missing tensor {name!r}")
            arr = table[name]
            if arr.shape != t.data.shape:
                raise tensorio.TensorFormatError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.astype(np.float32)
