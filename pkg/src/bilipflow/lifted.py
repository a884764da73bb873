"""Exact-interpolation construction in the lifted space R^{2d+2}.

The input is lifted to (x, 0_{d+1}, x_d), sheared so the last coordinate
separates the grid images, translated so the leading block carries the
targets, duplicated into the second block, and finally the last coordinate
is killed by a gate that recognizes the duplicated target block.  Projecting
back to R^d reproduces every target exactly (not just to eps).

Evaluated away from the grid the pre-projection state keeps a nonzero last
coordinate; the exact inverse therefore runs through the full lifted state,
while the strict inverse from R^d (re-lifting with a zero last coordinate)
is exact at the grid images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constructor import (
    ConstructionError,
    GridDataset,
    StageBound,
    estimate_grid_lipschitz,
)
from .flows import (
    LocalizedTranslate,
    ShiftLast,
    dumps_json17,
    layer_from_dict,
    layer_to_dict,
    register_layer_variant,
    relu,
    relu_prime,
)

__all__ = [
    "Lift",
    "Project",
    "CopyBlock",
    "KillLast",
    "LiftedMap",
    "construct_f_nn_lifted",
    "lifted_layer_accounting",
]

PROJECT_TOL = 1e-9

# (weight layers, added layers) for the coupling realization of each stage.
LIFTED_ACCOUNTING = {
    "shift_last": (1, 1),
    "localized_translate": (6, 2),
    "lifted.copy_block": (1, 1),
    "lifted.kill_last": (8, 2),
}


def _ell1(t):
    # relu(1 - relu(t/2)): 1 below 0, 1 - t/2 on [0,2], 0 beyond.
    t = np.asarray(t, dtype=float)
    return relu(1.0 - relu(0.5 * t))


def _ell1_prime(t):
    t = np.asarray(t, dtype=float)
    return np.where((t >= 0.0) & (t < 2.0), -0.5, 0.0)


def _ell2(t):
    # -relu(1 - relu(t)): -1 below 0, t - 1 on [0,1], 0 beyond.
    t = np.asarray(t, dtype=float)
    return -relu(1.0 - relu(t))


def _ell2_prime(t):
    t = np.asarray(t, dtype=float)
    return np.where((t >= 0.0) & (t < 1.0), 1.0, 0.0)


@dataclass(frozen=True, eq=False)
class Lift:
    """x in R^d  ->  (x, 0_{d+1}, x_d) in R^{2d+2}."""

    d: int

    @property
    def dim(self) -> int:
        return 2 * self.d + 2

    @property
    def variant(self) -> str:
        return "lifted.lift"

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected last axis {self.d}, got {x.shape[-1]}")
        out = np.zeros(x.shape[:-1] + (self.dim,))
        out[..., : self.d] = x
        out[..., -1] = x[..., self.d - 1]
        return out

    def inverse(self, z):
        z = np.asarray(z, dtype=float)
        off = np.max(np.abs(z[..., self.d : self.dim - 1]))
        off = max(off, np.max(np.abs(z[..., -1] - z[..., self.d - 1])))
        if off > PROJECT_TOL:
            raise ConstructionError(f"point off the lift image by {off:.3e}")
        return z[..., : self.d].copy()

    def jacobian(self, x):
        jac = np.zeros((self.dim, self.d))
        jac[: self.d, : self.d] = np.eye(self.d)
        jac[-1, self.d - 1] = 1.0
        return jac

    def jacobian_norm_bound(self) -> float:
        return 2.0

    def params_dict(self) -> dict:
        return {"d": self.d}


@dataclass(frozen=True, eq=False)
class Project:
    """Drop the trailing d+2 coordinates after checking the invariants the
    forward pass guarantees everywhere: coordinate d vanishes and the two
    d-blocks agree.  The last coordinate is the carried remainder; it is
    zero exactly at the grid images.
    """

    d: int

    @property
    def dim(self) -> int:
        return 2 * self.d + 2

    @property
    def variant(self) -> str:
        return "lifted.project"

    def check(self, z) -> float:
        z = np.asarray(z, dtype=float)
        off = np.max(np.abs(z[..., self.d]))
        off = max(
            off,
            np.max(np.abs(z[..., : self.d] - z[..., self.d + 1 : 2 * self.d + 1])),
        )
        return float(off)

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        off = self.check(z)
        if off > PROJECT_TOL:
            raise ConstructionError(f"projection input off-manifold by {off:.3e}")
        return z[..., : self.d].copy()

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim,))
        out[..., : self.d] = x
        out[..., self.d + 1 : 2 * self.d + 1] = x
        return out

    def jacobian(self, z):
        jac = np.zeros((self.d, self.dim))
        jac[:, : self.d] = np.eye(self.d)
        return jac

    def jacobian_norm_bound(self) -> float:
        return 1.0

    def params_dict(self) -> dict:
        return {"d": self.d}


@dataclass(frozen=True, eq=False)
class CopyBlock:
    """Adds the leading d coordinates onto coordinates d+1 .. 2d."""

    d: int

    @property
    def dim(self) -> int:
        return 2 * self.d + 2

    @property
    def variant(self) -> str:
        return "lifted.copy_block"

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        out = z.copy()
        out[..., self.d + 1 : 2 * self.d + 1] += z[..., : self.d]
        return out

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        out = y.copy()
        out[..., self.d + 1 : 2 * self.d + 1] -= y[..., : self.d]
        return out

    def jacobian(self, z):
        jac = np.eye(self.dim)
        jac[self.d + 1 : 2 * self.d + 1, : self.d] += np.eye(self.d)
        return jac

    def jacobian_norm_bound(self) -> float:
        return 1.0 + np.sqrt(self.d)

    def params_dict(self) -> dict:
        return {"d": self.d}


@dataclass(frozen=True, eq=False)
class KillLast:
    """Subtracts 2*anchor*gate(z) from the last coordinate, where the gate
    recognizes the duplicated target block stored in ``center``.

    gate(z) = relu( sum_j [ ell1(2 (z_j - c_j)/delta + 1)
                          + ell2(2 (z_{j+d+1} - c_{j+d+1})/delta + 1) ]
                    - (d-1)/2 )

    equals 1/2 exactly at the center (each bracket contributes 1/2) and 0
    whenever the duplicated block sits delta/2 away from the center in some
    coordinate, so at the center the last coordinate maps to zero.

    Two norm bounds are recorded: ``jacobian_norm_bound`` is the stated
    per-layer value 1 + 6 sqrt(d) delta, and
    ``jacobian_norm_bound_derived`` = 1 + 2 |anchor| sqrt(5 d) / delta is
    the one the gate's slopes actually satisfy; see the package notes on
    certificate validity.
    """

    d: int
    center: np.ndarray
    delta: float
    anchor: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.d + 2

    @property
    def variant(self) -> str:
        return "lifted.kill_last"

    def _brackets(self, z):
        d = self.d
        c = self.center
        a1 = 2.0 * (z[..., :d] - c[:d]) / self.delta + 1.0
        a2 = 2.0 * (z[..., d + 1 : 2 * d + 1] - c[d + 1 : 2 * d + 1]) / self.delta + 1.0
        return a1, a2

    def gate(self, z):
        a1, a2 = self._brackets(np.asarray(z, dtype=float))
        s = np.sum(_ell1(a1) + _ell2(a2), axis=-1) - 0.5 * (self.d - 1)
        return relu(s)

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        out = z.copy()
        out[..., -1] -= 2.0 * self.anchor * self.gate(z)
        return out

    def inverse(self, y):
        # The gate never reads the last coordinate.
        y = np.asarray(y, dtype=float)
        out = y.copy()
        out[..., -1] += 2.0 * self.anchor * self.gate(y)
        return out

    def jacobian(self, z):
        z = np.asarray(z, dtype=float)
        a1, a2 = self._brackets(z)
        s = np.sum(_ell1(a1) + _ell2(a2), axis=-1) - 0.5 * (self.d - 1)
        outer = relu_prime(s)
        jac = np.eye(self.dim)
        scale = -2.0 * self.anchor * outer * 2.0 / self.delta
        jac[-1, : self.d] += scale * _ell1_prime(a1)
        jac[-1, self.d + 1 : 2 * self.d + 1] += scale * _ell2_prime(a2)
        return jac

    def jacobian_norm_bound(self) -> float:
        # Stated form 1 + 6 Lip(F^-1)^{-1} / n rewritten via
        # delta = 1/(sqrt(d) Lip(F^-1) n).
        return 1.0 + 6.0 * np.sqrt(self.d) * self.delta

    def jacobian_norm_bound_derived(self) -> float:
        return 1.0 + 2.0 * abs(self.anchor) * np.sqrt(5.0 * self.d) / self.delta

    def params_dict(self) -> dict:
        return {
            "d": self.d,
            "center": self.center.tolist(),
            "delta": self.delta,
            "anchor": self.anchor,
        }


register_layer_variant("lifted.lift", lambda p: Lift(d=p["d"]))
register_layer_variant("lifted.project", lambda p: Project(d=p["d"]))
register_layer_variant("lifted.copy_block", lambda p: CopyBlock(d=p["d"]))
register_layer_variant(
    "lifted.kill_last",
    lambda p: KillLast(
        d=p["d"], center=np.array(p["center"]), delta=p["delta"], anchor=p["anchor"]
    ),
)


def lifted_layer_accounting(layers: Sequence) -> dict:
    counts: dict[str, int] = {}
    weight_layers = 0
    added_layers = 0
    for layer in layers:
        counts[layer.variant] = counts.get(layer.variant, 0) + 1
        if layer.variant in ("lifted.lift", "lifted.project"):
            continue
        w, a = LIFTED_ACCOUNTING[layer.variant]
        weight_layers += w
        added_layers += a
    return {
        "per_variant": counts,
        "total": len(layers),
        "weight_layers": weight_layers,
        "added_layers": added_layers,
    }


@dataclass(frozen=True, eq=False)
class LiftedMap:
    """The six-stage lifted construction with exact grid interpolation."""

    layers: tuple
    certificate_product: float
    per_stage: tuple[StageBound, ...]
    metadata: dict

    @property
    def lift(self) -> Lift:
        return self.layers[0]

    @property
    def project(self) -> Project:
        return self.layers[-1]

    def forward_full(self, x):
        """All stages except the final projection; returns the lifted state."""
        z = self.lift.forward(x)
        for layer in self.layers[1:-1]:
            z = layer.forward(z)
        return z

    def forward(self, x):
        return self.project.forward(self.forward_full(x))

    def inverse_full(self, z):
        """Exact inverse from the pre-projection lifted state."""
        for layer in reversed(self.layers[1:-1]):
            z = layer.inverse(z)
        return self.lift.inverse(z)

    def inverse(self, y):
        """Strict inverse from R^d; exact at grid images, where the killed
        last coordinate really is zero."""
        return self.inverse_full(self.project.inverse(y))

    def round_trip(self, x):
        return self.inverse_full(self.forward_full(x))

    def layer_counts(self) -> dict:
        return lifted_layer_accounting(self.layers)

    def to_json(self) -> str:
        obj = {
            "kind": "lifted_map",
            "metadata": self.metadata,
            "certificate_product": self.certificate_product,
            "per_stage": [
                {"name": s.name, "forward": s.forward, "inverse": s.inverse}
                for s in self.per_stage
            ],
            "layers": [layer_to_dict(l) for l in self.layers],
        }
        return dumps_json17(obj)

    @classmethod
    def from_json(cls, text: str) -> "LiftedMap":
        obj = json.loads(text)
        if obj.get("kind") != "lifted_map":
            raise ConstructionError("not a lifted-map document")
        return cls(
            layers=tuple(layer_from_dict(l) for l in obj["layers"]),
            certificate_product=obj["certificate_product"],
            per_stage=tuple(
                StageBound(s["name"], s["forward"], s["inverse"])
                for s in obj["per_stage"]
            ),
            metadata=obj["metadata"],
        )


def construct_f_nn_lifted(data: GridDataset) -> LiftedMap:
    """Build the lifted construction; interpolation is exact at grid points.

    The gate width delta comes from the data's inverse-Lipschitz estimate:
    any two targets separate by at least delta in some coordinate, which
    keeps the kill gates disjoint.
    """
    n, d, npts = data.n, data.d, data.size
    x, y = data.x, data.y
    dt = 2 * d + 2

    lip_f, lip_f_inv = estimate_grid_lipschitz(x, y)
    if not np.isfinite(lip_f_inv) or lip_f_inv <= 0.0:
        raise ConstructionError("coincident targets: no separation available")
    delta = 1.0 / (np.sqrt(d) * lip_f_inv * n)

    lift = Lift(d=d)
    p0 = lift.forward(x)
    if np.max(np.abs(p0[:, d : dt - 1])) > 1e-12:
        raise ConstructionError("lift produced nonzero padding")

    eta = ShiftLast(dim=dt, n=n, n_read=d - 1)
    p1 = eta.forward(p0)

    gap = float(np.min(np.diff(np.sort(p1[:, -1]))))
    if gap <= 1e-12:
        raise ConstructionError("lifted shear failed to separate last coordinate")
    phi_layers = [
        LocalizedTranslate(
            dim=dt,
            center=p1[i],
            width_scale=1.0 / gap,
            displacement=y[i] - x[i],
            gate_coord=dt - 1,
        )
        for i in range(npts)
    ]
    p2 = p1
    for layer in phi_layers:
        p2 = layer.forward(p2)

    copy = CopyBlock(d=d)
    p3 = copy.forward(p2)
    if np.max(np.abs(p3[:, : d] - p3[:, d + 1 : 2 * d + 1])) > 1e-10:
        raise ConstructionError("duplicated-block structure violated")

    kill_layers = [
        KillLast(d=d, center=p3[i], delta=delta, anchor=float(p3[i, -1]))
        for i in range(npts)
    ]
    p4 = p3
    for layer in kill_layers:
        p4 = layer.forward(p4)

    project = Project(d=d)
    out = project.forward(p4)
    residual = float(np.max(np.linalg.norm(out - y, axis=1)))
    if residual > 1e-10:
        raise ConstructionError(f"lifted interpolation residual {residual:.3e}")

    c = float(np.max(np.linalg.norm(y - x, axis=1)))
    b_eta = n / (n - 1.0)
    b_phi = 1.0 + 6.0 * npts * c
    b_copy = 1.0 + np.sqrt(d)
    b_kill = 1.0 + 6.0 / (lip_f_inv * n)
    per_stage = (
        StageBound("lift", 2.0, 2.0),
        StageBound("shear_last", b_eta, b_eta),
        StageBound("translate_block", b_phi, b_phi),
        StageBound("copy_block", b_copy, b_copy),
        StageBound("kill_last", b_kill, b_kill),
        StageBound("project", 1.0, 1.0),
    )
    product = float(4.0 * n / (n - 1.0) * np.sqrt(d) * (1.0 + 6.0 * npts * c) * b_kill)

    layers = (lift, eta, *phi_layers, copy, *kill_layers, project)
    metadata = {
        "n": n,
        "d": d,
        "lifted_dim": dt,
        "grid_points": npts,
        "delta": delta,
        "lip_f_estimate": lip_f,
        "lip_f_inv_estimate": lip_f_inv,
        "max_interpolation_residual": residual,
        "kill_bound_derived": max(
            layer.jacobian_norm_bound_derived() for layer in kill_layers
        ),
    }
    return LiftedMap(
        layers=layers,
        certificate_product=product,
        per_stage=per_stage,
        metadata=metadata,
    )
