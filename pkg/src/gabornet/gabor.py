"""Learnable Gabor filter banks and the depthwise Gabor layer.

A filter is ``alpha_j * exp(-sigma^2 (x'^2 + gamma^2 y'^2)) * cos(lambda x' + psi)``
sampled on an integer-centred ``k x k`` grid rotated by ``theta_j``. Rotation
angles are fixed at ``2*pi*j/r`` for ``j = 0..r-1``; everything else is learned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class Grid:
    """Integer-centred sampling grid; ``x`` runs along columns, ``y`` along rows."""

    k: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"grid size must be a positive odd integer, got {self.k}")

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        c = (self.k - 1) // 2
        offsets = np.arange(self.k, dtype=np.float64) - c
        x, y = np.meshgrid(offsets, offsets)
        return x, y


@dataclass
class GaborFamily:
    """One learnable parameter set producing ``r`` rotated filters.

    ``sigma``, ``gamma``, ``lambda_`` and ``psi`` are 0-d tensors; ``alpha`` has
    one scale per rotation.
    """

    sigma: Tensor
    gamma: Tensor
    lambda_: Tensor
    psi: Tensor
    alpha: Tensor

    def __post_init__(self):
        if self.alpha.data.ndim != 1 or self.alpha.shape[0] < 1:
            raise ValueError(f"alpha must be a non-empty vector, got shape {self.alpha.shape}")

    @classmethod
    def from_values(cls, sigma, gamma, lambda_, psi, alpha, requires_grad=True) -> "GaborFamily":
        def t(v):
            return Tensor(np.asarray(v, dtype=np.float64), requires_grad)

        return cls(t(sigma), t(gamma), t(lambda_), t(psi), t(np.atleast_1d(alpha)))

    @property
    def r(self) -> int:
        return self.alpha.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "sigma": self.sigma,
            "gamma": self.gamma,
            "lambda": self.lambda_,
            "psi": self.psi,
            "alpha": self.alpha,
        }

    def check_finite(self) -> None:
        for name, t in self.named_tensors().items():
            if not np.isfinite(t.data).all():
                raise T.NonFiniteError(f"gabor parameter {name}", (0,))


@dataclass(frozen=True)
class GaborLayerSpec:
    p: int
    r: int
    k: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "zero_same"

    def __post_init__(self):
        for name in ("p", "r", "in_channels", "out_channels", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k % 2 == 0 or self.k < 1:
            raise ValueError(f"kernel size must be odd, got {self.k}")
        if self.padding not in T.PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding!r}")

    @property
    def bank_size(self) -> int:
        return self.r * self.p

    @property
    def stack_channels(self) -> int:
        return self.in_channels * self.r * self.p


def rotation_angles(r: int) -> np.ndarray:
    if r < 1:
        raise ValueError(f"need at least one rotation, got r={r}")
    return 2.0 * math.pi * np.arange(r) / r


def rotate_coords(grid: Grid, theta: float) -> tuple[np.ndarray, np.ndarray]:
    x, y = grid.coords
    c, s = math.cos(theta), math.sin(theta)
    return x * c - y * s, x * s + y * c


def eval_filter(family: GaborFamily, j: int, grid: Grid) -> Tensor:
    """Filter for rotation index ``j`` (0-based) as a ``[1, k, k]`` taped tensor."""
    family.check_finite()
    if not 0 <= j < family.r:
        raise IndexError(f"rotation index {j} outside [0, {family.r})")
    theta = rotation_angles(family.r)[j]
    xr, yr = rotate_coords(grid, theta)
    shape = xr.shape

    def bcast(t):
        return T.expand(t, shape)

    s2 = bcast(T.square(family.sigma))
    g2 = bcast(T.square(family.gamma))
    quad = T.add(T.Tensor(xr * xr), T.mul(g2, T.Tensor(yr * yr)))
    envelope = T.exp(T.negate(T.mul(s2, quad)))
    carrier = T.cos(T.add(T.mul(bcast(family.lambda_), T.Tensor(xr)), bcast(family.psi)))
    surface = T.mul(bcast(T.take(family.alpha, j)), T.mul(envelope, carrier))
    return T.reshape(surface, (1,) + shape)


def build_bank(spec: GaborLayerSpec, families: list[GaborFamily]) -> Tensor:
    """All ``r*p`` filters as ``[rp, 1, k, k]``, family-major then rotation."""
    if len(families) != spec.p:
        raise ValueError(f"expected {spec.p} families, got {len(families)}")
    for i, fam in enumerate(families):
        if fam.r != spec.r:
            raise ValueError(f"family {i} has {fam.r} scales, layer expects r={spec.r}")
    grid = Grid(spec.k)
    return T.stack([eval_filter(fam, j, grid) for fam in families for j in range(spec.r)])


def gabor_layer_forward(
    x: Tensor,
    spec: GaborLayerSpec,
    families: list[GaborFamily],
    pointwise_weight: Tensor,
    pointwise_bias: Tensor,
) -> Tensor:
    """Depthwise Gabor filtering, ReLU, then a 1x1 convolution to ``n`` channels."""
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise T.ShapeError(f"Gabor layer expects [N, {spec.in_channels}, H, W], got {x.shape}")
    bank = build_bank(spec, families)
    responses = T.relu(T.channelwise_conv2d(x, bank, spec.stride, spec.padding))
    return T.pointwise_conv(responses, pointwise_weight, pointwise_bias)


def init_families(spec: GaborLayerSpec, rng: Rng) -> tuple[list[GaborFamily], Tensor, Tensor]:
    """Random families plus Glorot-style uniform 1x1 weights and zero bias."""
    a = math.sqrt(6.0 / (spec.r * spec.p * spec.k ** 2))
    families = []
    for _ in range(spec.p):
        families.append(GaborFamily.from_values(
            sigma=rng.uniform(0.5, 1.5),
            gamma=rng.uniform(0.5, 1.5),
            lambda_=rng.uniform(0.5, math.pi),
            psi=rng.uniform(0.0, 2.0 * math.pi),
            alpha=rng.uniform(-a, a, spec.r),
        ))
    b = math.sqrt(6.0 / (spec.stack_channels + spec.out_channels))
    weight = Tensor(rng.uniform(-b, b, (spec.out_channels, spec.stack_channels)), True)
    bias = Tensor(np.zeros(spec.out_channels), True)
    return families, weight, bias


def bank_values(spec: GaborLayerSpec, families: list[GaborFamily]) -> np.ndarray:
    """Filter bank as a plain array, without recording on the tape."""
    with T.no_grad():
        return build_bank(spec, families).data
