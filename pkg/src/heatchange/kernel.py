"""Compactly supported product kernels and their tile rescalings.

The default profile is the C^2 bump ``psi(u) = (1 - 4u^2)^3`` on ``[-1/2, 1/2]``.
The kernel ``K(x) = c * prod_i psi(x_i)`` is normalized in L^2(R^d), and the
measurement function attached to tile ``alpha`` is

    K_{delta,alpha}(y) = delta^{-d/2} K((y - x_alpha) / delta),

which is supported on the tile and keeps unit L^2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .geometry import TileGrid

Array = np.ndarray


@dataclass(frozen=True)
class Profile:
    """A one-dimensional even bump on [-1/2, 1/2] with two continuous derivatives."""

    name: str
    psi: Callable[[Array], Array]
    dpsi: Callable[[Array], Array]
    ddpsi: Callable[[Array], Array]


def _inside(u: Array) -> Array:
    return np.abs(u) <= 0.5


def _bump3(u: Array) -> Array:
    u = np.asarray(u, dtype=float)
    return np.where(_inside(u), (1.0 - 4.0 * u * u) ** 3, 0.0)


def _bump3_d1(u: Array) -> Array:
    u = np.asarray(u, dtype=float)
    return np.where(_inside(u), -24.0 * u * (1.0 - 4.0 * u * u) ** 2, 0.0)


def _bump3_d2(u: Array) -> Array:
    u = np.asarray(u, dtype=float)
    w = 1.0 - 4.0 * u * u
    return np.where(_inside(u), w * (480.0 * u * u - 24.0), 0.0)


BUMP3 = Profile("bump3", _bump3, _bump3_d1, _bump3_d2)
PROFILES = {"bump3": BUMP3}


def _integral(f: Callable[[float], float]) -> float:
    val, _ = quad(f, -0.5, 0.5, epsabs=0.0, epsrel=1e-12, limit=200)
    return float(val)


@dataclass(frozen=True)
class Kernel:
    d: int
    profile: Profile = field(default=BUMP3)

    @classmethod
    def from_config(cls, data: dict) -> "Kernel":
        return cls(d=int(data["d"]), profile=PROFILES[data.get("profile", "bump3")])

    # -- one-dimensional integrals (cached) -----------------------------------
    @cached_property
    def psi_sq(self) -> float:
        """Integral of psi^2."""
        return _integral(lambda u: float(self.profile.psi(u)) ** 2)

    @cached_property
    def dpsi_sq(self) -> float:
        return _integral(lambda u: float(self.profile.dpsi(u)) ** 2)

    @cached_property
    def ddpsi_sq(self) -> float:
        return _integral(lambda u: float(self.profile.ddpsi(u)) ** 2)

    @cached_property
    def c(self) -> float:
        """Normalization constant making the L^2 norm one."""
        return self.psi_sq ** (-self.d / 2)

    @cached_property
    def norm(self) -> float:
        return self.c * self.psi_sq ** (self.d / 2)

    @cached_property
    def grad_norm_squared(self) -> float:
        """Squared L^2 norm of the gradient, ``d c^2 (int psi'^2)(int psi^2)^(d-1)``."""
        return self.d * self.c**2 * self.dpsi_sq * self.psi_sq ** (self.d - 1)

    @cached_property
    def laplacian_norm_squared(self) -> float:
        # |sum_i f_i''|^2 integrates to d terms of psi''^2 and d(d-1) cross terms of psi'^2 psi'^2
        a, b, e = self.psi_sq, self.dpsi_sq, self.ddpsi_sq
        return self.c**2 * (self.d * e * a ** (self.d - 1) + self.d * (self.d - 1) * b * b * a ** (self.d - 2))

    def norms(self) -> dict:
        return {
            "profile": self.profile.name,
            "d": self.d,
            "c": self.c,
            "norm": self.norm,
            "grad_norm_squared": self.grad_norm_squared,
            "laplacian_norm_squared": self.laplacian_norm_squared,
        }

    # -- pointwise evaluations --------------------------------------------------
    def _factors(self, x: Array) -> tuple[Array, Array, Array]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"points must have trailing dimension {self.d}")
        return self.profile.psi(x), self.profile.dpsi(x), self.profile.ddpsi(x)

    def eval(self, x: Array) -> Array:
        p, _, _ = self._factors(x)
        return self.c * np.prod(p, axis=-1)

    def gradient(self, x: Array) -> Array:
        p, dp, _ = self._factors(x)
        out = np.empty(np.shape(x), dtype=float)
        for i in range(self.d):
            out[..., i] = self.c * dp[..., i] * np.prod(np.delete(p, i, axis=-1), axis=-1)
        return out

    def laplacian(self, x: Array) -> Array:
        p, _, ddp = self._factors(x)
        total = np.zeros(np.shape(x)[:-1])
        for i in range(self.d):
            total = total + ddp[..., i] * np.prod(np.delete(p, i, axis=-1), axis=-1)
        return self.c * total

    # -- rescaled to a tile -------------------------------------------------------
    def _local(self, grid: TileGrid, alpha, y: Array) -> Array:
        center = (np.asarray(alpha, dtype=float) - 0.5) * grid.delta
        return (np.asarray(y, dtype=float) - center) / grid.delta

    def eval_scaled(self, grid: TileGrid, alpha, y: Array) -> Array:
        """``K_{delta,alpha}(y)`` for a 1-based tile multi-index ``alpha``."""
        return grid.delta ** (-self.d / 2) * self.eval(self._local(grid, alpha, y))

    def gradient_scaled(self, grid: TileGrid, alpha, y: Array) -> Array:
        return grid.delta ** (-self.d / 2 - 1) * self.gradient(self._local(grid, alpha, y))

    def laplacian_scaled(self, grid: TileGrid, alpha, y: Array) -> Array:
        return grid.delta ** (-self.d / 2 - 2) * self.laplacian(self._local(grid, alpha, y))

    def tile_profile_1d(self, grid: TileGrid, nodes: Array) -> Array:
        """Rows ``j``: ``psi((x - center_j) / delta)`` at 1-D node positions, one row per tile index."""
        centers = (np.arange(grid.n) + 0.5) * grid.delta
        return self.profile.psi((np.asarray(nodes)[None, :] - centers[:, None]) / grid.delta)
