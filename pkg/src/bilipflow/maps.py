"""Synthetic bi-Lipschitz maps with known constants, used by rate studies
and tests as ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SinShear", "RandomPerturbedIdentity", "builtin_map"]


@dataclass(frozen=True, eq=False)
class SinShear:
    """F(x) = (x1 + a sin(pi x2), x2 + a x1) on R^2, default a = 0.3.

    Globally invertible: solving for x2 is a fixed-point contraction with
    rate a^2 pi < 1.  The Lipschitz constants below are Frobenius-type safe
    upper bounds, valid everywhere.
    """

    a: float = 0.3
    d: int = 2

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[..., 0] += self.a * np.sin(np.pi * x[..., 1])
        out[..., 1] += self.a * x[..., 0]
        return out

    def inverse(self, y, tol: float = 1e-14, max_iter: int = 200):
        y = np.asarray(y, dtype=float)
        x2 = y[..., 1].copy()
        for _ in range(max_iter):
            nxt = y[..., 1] - self.a * (y[..., 0] - self.a * np.sin(np.pi * x2))
            if np.max(np.abs(nxt - x2)) < tol:
                x2 = nxt
                break
            x2 = nxt
        x1 = y[..., 0] - self.a * np.sin(np.pi * x2)
        return np.stack([x1, x2], axis=-1)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.array(
            [[1.0, self.a * np.pi * np.cos(np.pi * x[1])], [self.a, 1.0]]
        )

    @property
    def lip_f(self) -> float:
        # ||J||_2 <= ||J||_F = sqrt(2 + a^2 pi^2 cos^2 + a^2) <= this.
        return float(np.sqrt(2.0 + self.a**2 * np.pi**2 + self.a**2))

    @property
    def lip_f_inv(self) -> float:
        # ||J^-1|| <= ||J||_F / min det, det = 1 - a^2 pi cos >= 1 - a^2 pi.
        return self.lip_f / (1.0 - self.a**2 * np.pi)


@dataclass(frozen=True, eq=False)
class RandomPerturbedIdentity:
    """F(x) = x + (gamma/pi) sin(pi B x + phase) with ||B||_2 = 1.

    The Jacobian is I + gamma diag(cos) B, so Lip(F) <= 1 + gamma and
    Lip(F^-1) <= 1/(1 - gamma); the inverse is a Banach iteration.
    """

    d: int
    seed: int
    gamma: float = 0.4
    mix: np.ndarray = field(init=False, repr=False)
    phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        mix = rng.standard_normal((self.d, self.d))
        mix /= np.linalg.norm(mix, 2)
        object.__setattr__(self, "mix", mix)
        object.__setattr__(self, "phase", rng.uniform(0.0, 2.0 * np.pi, self.d))

    def _bump(self, x):
        return (self.gamma / np.pi) * np.sin(np.pi * (x @ self.mix.T) + self.phase)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x + self._bump(x)

    def inverse(self, y, tol: float = 1e-14, max_iter: int = 300):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(max_iter):
            nxt = y - self._bump(x)
            if np.max(np.abs(nxt - x)) < tol:
                return nxt
            x = nxt
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        cos = np.cos(np.pi * (self.mix @ x) + self.phase)
        return np.eye(self.d) + self.gamma * cos[:, None] * self.mix

    @property
    def lip_f(self) -> float:
        return 1.0 + self.gamma

    @property
    def lip_f_inv(self) -> float:
        return 1.0 / (1.0 - self.gamma)


def builtin_map(name: str, d: int = 2, seed: int = 0):
    if name == "sin-shear":
        if d != 2:
            raise ValueError("sin-shear is two-dimensional")
        return SinShear()
    if name == "random-bilip":
        return RandomPerturbedIdentity(d=d, seed=seed)
    raise ValueError(f"unknown built-in map {name!r}")
