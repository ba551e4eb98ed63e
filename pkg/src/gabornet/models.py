"""LeNet, Gabor-LeNet and a tiny test model as sequential layer stacks."""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .gabor import GaborFamily, GaborLayerSpec, Grid, gabor_layer_forward, init_families, build_bank
from .tensor import Rng, Tensor

ARCHITECTURES = ("lenet", "lenet_gabor", "tiny_cnn")


class Layer:
    name = ""

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name, in_ch, out_ch, k, rng: Rng, padding="none", stride=1):
        self.name, self.padding, self.stride = name, padding, stride
        bound = math.sqrt(6.0 / (in_ch * k * k))
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, k, k)), True)
        self.bias = Tensor(np.zeros(out_ch), True)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x):
        return T.add_bias(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)


class Linear(Layer):
    def __init__(self, name, n_in, n_out, rng: Rng):
        self.name = name
        bound = math.sqrt(6.0 / n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_out, n_in)), True)
        self.bias = Tensor(np.zeros(n_out), True)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x):
        return T.add_bias(T.matmul(x, T.transpose(self.weight)), self.bias)


class GaborLayer(Layer):
    def __init__(self, name, spec: GaborLayerSpec, rng: Rng):
        self.name, self.spec = name, spec
        self.families, self.pw_weight, self.pw_bias = init_families(spec, rng)

    @property
    def grid(self) -> Grid:
        return Grid(self.spec.k)

    def params(self):
        out = {}
        for i, fam in enumerate(self.families):
            for key, t in fam.named_tensors().items():
                out[f"{self.name}.f{i}.{key}"] = t
        out[f"{self.name}.pointwise.weight"] = self.pw_weight
        out[f"{self.name}.pointwise.bias"] = self.pw_bias
        return out

    def bank(self) -> Tensor:
        return build_bank(self.spec, self.families)

    def forward(self, x):
        return gabor_layer_forward(x, self.spec, self.families, self.pw_weight, self.pw_bias)


class ReLU(Layer):
    def forward(self, x):
        return T.relu(x)


class MaxPool(Layer):
    def forward(self, x):
        return T.maxpool2d(x)


class Flatten(Layer):
    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))


class Model:
    """A sequential stack of layers with a flat, uniquely named parameter registry."""

    def __init__(self, arch: str, layers: list[Layer]):
        self.arch = arch
        self.layers = layers
        names = [n for layer in layers for n in layer.params()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in model")

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.params().values())

    def gabor_layers(self) -> list[GaborLayer]:
        return [l for l in self.layers if isinstance(l, GaborLayer)]

    def families(self) -> list[GaborFamily]:
        return [f for l in self.gabor_layers() for f in l.families]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name and l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}; have {[l.name for l in self.layers if l.name]}")

    def first_layer_name(self) -> str:
        return next(l.name for l in self.layers if l.name)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_from(0, x)

    def forward_from(self, start: int, x: Tensor) -> Tensor:
        for layer in self.layers[start:]:
            x = layer.forward(x)
        return x

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return self.logits(images, batch_size).argmax(axis=1)

    def logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward(Tensor(images[s:s + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, 10))

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.zero_grad()

    @contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Temporarily stop recording parameter gradients (input gradients only)."""
        params = list(self.params().values())
        saved = [(t.requires_grad, t.grad) for t in params]
        for t in params:
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, (rg, g) in zip(params, saved):
                t.requires_grad, t.grad = rg, g


def build_lenet(seed: int = 0) -> Model:
    rng = Rng(seed)
    return Model("lenet", [
        Conv2d("conv1", 1, 6, 5, rng, padding="zero_same"), ReLU(), MaxPool(),
        Conv2d("conv2", 6, 16, 5, rng), ReLU(), MaxPool(), Flatten(),
        Linear("fc1", 400, 120, rng), ReLU(),
        Linear("fc2", 120, 84, rng), ReLU(),
        Linear("fc3", 84, 10, rng),
    ])


def build_gabor_lenet(seed: int = 0, p: int = 2, r: int = 8, k: int = 5) -> Model:
    rng = Rng(seed)
    spec = GaborLayerSpec(p=p, r=r, k=k, in_channels=1, out_channels=6)
    return Model("lenet_gabor", [
        GaborLayer("gabor1", spec, rng), ReLU(), MaxPool(),
        Conv2d("conv2", 6, 16, 5, rng), ReLU(), MaxPool(), Flatten(),
        Linear("fc1", 400, 120, rng), ReLU(),
        Linear("fc2", 120, 84, rng), ReLU(),
        Linear("fc3", 84, 10, rng),
    ])


def build_tiny_cnn(seed: int = 0) -> Model:
    rng = Rng(seed)
    spec = GaborLayerSpec(p=1, r=4, k=3, in_channels=1, out_channels=4)
    return Model("tiny_cnn", [
        GaborLayer("gabor1", spec, rng), MaxPool(), Flatten(),
        Linear("fc", 4 * 14 * 14, 10, rng),
    ])


BUILDERS = {"lenet": build_lenet, "lenet_gabor": build_gabor_lenet, "tiny_cnn": build_tiny_cnn}


def build_model(arch: str, seed: int = 0) -> Model:
    try:
        return BUILDERS[arch](seed)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}") from None
