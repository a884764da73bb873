"""Closed-form invertible layer primitives.

Every layer here is an exact bijection: the forward map, its algebraic
inverse, and the analytic Jacobian are all available in closed form.  Each
layer also knows the vector field whose unit-time (or scaled-time) flow it
realizes, so a fixed-step RK4 integrator can serve as an independent oracle
for the closed forms.

Conventions
-----------
* Points are numpy arrays of shape ``(..., dim)``; all maps are vectorized
  over leading axes.
* Piecewise derivatives are right-continuous (``relu_prime(0) == 1``), so
  Jacobians are deterministic at kinks.
* Layers are immutable after construction; ``forward``/``inverse``/
  ``jacobian`` are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "relu",
    "relu_prime",
    "hat",
    "hat_prime",
    "GridSnap",
    "ShiftLast",
    "LocalizedTranslate",
    "LocalizedShift",
    "LocalizedLast",
    "PerCoordinatePwl",
    "FlowOracleSpec",
    "ode_flow_oracle",
    "defining_flows",
    "localized_shift_for_pair",
    "layer_to_dict",
    "layer_from_dict",
    "dumps_json17",
    "register_layer_variant",
]

# Coordinates closer than this are treated as coincident when checking
# distinctness of grid data.
DISTINCTNESS_TOL = 1e-12


def relu(x):
    return np.maximum(x, 0.0)


def relu_prime(x):
    # Right-continuous convention: derivative 1 at the kink.
    return (np.asarray(x) >= 0.0).astype(float)


def hat(x):
    """Piecewise-linear bump supported on [0, 2], peak value 1/2 at x = 1.

    Equals relu(-relu(x/2) + 1) - relu(-relu(x) + 1): branches 0, x/2,
    1 - x/2 on (-inf,0) | [0,1] | [1,2] and 0 beyond 2.
    """
    x = np.asarray(x, dtype=float)
    return np.where(
        (x < 0.0) | (x > 2.0), 0.0, np.where(x <= 1.0, 0.5 * x, 1.0 - 0.5 * x)
    )


def hat_prime(x):
    """Right-continuous derivative of :func:`hat`."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    out = np.where((x >= 0.0) & (x < 1.0), 0.5, out)
    out = np.where((x >= 1.0) & (x < 2.0), -0.5, out)
    return out


# ---------------------------------------------------------------------------
# Scalar piecewise-linear grid snap and its exact two-layer ReLU realization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridSnap:
    """Strictly increasing piecewise-linear map on the line.

    With n cells on [0, 1] and sharpness r in (0, 1), the map interpolates
    the node pairs (j/n, j/n) and ((j+r)/n, (j+1-r)/n), is linear between
    them, and is the identity outside [0, 1].  As r -> 1 it flattens each
    cell onto its left node.  The same function is exactly representable by
    a two-layer ReLU net with 2(n+1) hidden units; see :meth:`relu_weights`.
    """

    n: int
    r: float
    breakpoints: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"cell count must be >= 1, got {self.n}")
        if not (0.0 < self.r < 1.0):
            raise ValueError(f"sharpness must lie in (0, 1), got {self.r}")
        n, r = self.n, self.r
        # Interleaved knots a_0 < p_1 < a_1 < ... < p_n < a_n.
        xs = np.empty(2 * n + 1)
        ys = np.empty(2 * n + 1)
        xs[0::2] = np.arange(n + 1) / n
        ys[0::2] = np.arange(n + 1) / n
        xs[1::2] = (np.arange(1, n + 1) - 1.0 + r) / n
        ys[1::2] = (np.arange(1, n + 1) - r) / n
        object.__setattr__(self, "breakpoints", xs)
        object.__setattr__(self, "values", ys)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= 0.0) & (x <= 1.0)
        return np.where(inside, np.interp(x, self.breakpoints, self.values), x)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        inside = (y >= 0.0) & (y <= 1.0)
        return np.where(inside, np.interp(y, self.values, self.breakpoints), y)

    def slope(self, x):
        """Right-continuous slope at x (1 outside [0, 1])."""
        x = np.asarray(x, dtype=float)
        seg = np.searchsorted(self.breakpoints, x, side="right") - 1
        seg = np.clip(seg, 0, len(self.breakpoints) - 2)
        dx = self.breakpoints[seg + 1] - self.breakpoints[seg]
        dy = self.values[seg + 1] - self.values[seg]
        inside = (x >= 0.0) & (x < 1.0)
        return np.where(inside, dy / dx, 1.0)

    def relu_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact two-layer ReLU weights (W1, W0, b0) with 2(n+1) units.

        The realized function is W1 @ relu(W0 * x + b0):
        -relu(-x) + (1-r)/r * relu(x - a_0) - c_r * sum relu(x - a_i)
        - (2r-1)/(1-r) * relu(x - a_n) + c_r * sum relu(x - p_i),
        c_r = (2r-1) / (r (1-r)).
        """
        n, r = self.n, self.r
        c_r = (2.0 * r - 1.0) / (r * (1.0 - r))
        a = np.arange(n + 1) / n
        p = (np.arange(1, n + 1) - 1.0 + r) / n
        w1 = np.concatenate(
            [
                [-1.0, (1.0 - r) / r],
                -c_r * np.ones(n - 1),
                [-(2.0 * r - 1.0) / (1.0 - r)],
                c_r * np.ones(n),
            ]
        )[None, :]
        w0 = np.concatenate([[-1.0], np.ones(2 * n + 1)])[:, None]
        b0 = -np.concatenate([[0.0], a, p])
        return w1, w0, b0

    def eval_relu(self, x):
        """Evaluate through the explicit ReLU net (oracle for __call__)."""
        w1, w0, b0 = self.relu_weights()
        x = np.asarray(x, dtype=float)
        z = relu(x[..., None] * w0[:, 0] + b0)
        return z @ w1[0]


# ---------------------------------------------------------------------------
# Flow layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShiftLast:
    """Adds sum_j n^{-j} relu(x_j) over the first ``n_read`` coordinates to
    the last coordinate; everything else passes through.

    On the uniform grid with points alpha/n this turns the last coordinate
    into distinct values i/N, i = 0..N-1, with exact gap 1/N.  Unit Jacobian
    determinant; spectral norm at most n/(n-1) in both directions.
    """

    dim: int
    n: int
    n_read: int | None = None

    def __post_init__(self):
        k = self.reads
        if not (1 <= k <= self.dim - 1):
            raise ValueError(f"read count {k} out of range for dim {self.dim}")

    @property
    def reads(self) -> int:
        return self.dim - 1 if self.n_read is None else self.n_read

    @property
    def variant(self) -> str:
        return "shift_last"

    def _shift(self, pts):
        k = self.reads
        scales = float(self.n) ** -np.arange(1, k + 1)
        return relu(pts[..., :k]) @ scales

    def forward(self, x):
        x = _check_dim(x, self.dim)
        y = x.copy()
        y[..., -1] += self._shift(x)
        return y

    def inverse(self, y):
        y = _check_dim(y, self.dim)
        x = y.copy()
        x[..., -1] -= self._shift(y)
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        k = self.reads
        jac = np.eye(self.dim)
        jac[-1, :k] = float(self.n) ** -np.arange(1, k + 1) * relu_prime(x[:k])
        return jac

    def jacobian_norm_bound(self) -> float:
        return self.n / (self.n - 1.0)

    def params_dict(self) -> dict:
        return {"dim": self.dim, "n": self.n, "n_read": self.n_read}


@dataclass(frozen=True, eq=False)
class LocalizedTranslate:
    """Translates the first ``len(displacement)`` coordinates by a hat-gated
    multiple of a fixed displacement; the gate reads one frozen coordinate.

    gate(t) = 2 * hat(2 * width_scale * (t - center[gate_coord]) + 1), which
    equals 1 at the center and vanishes once |t - center| >= 1/(2 width_scale).
    The gate coordinate is never written, so the inverse is explicit.
    """

    dim: int
    center: np.ndarray
    width_scale: float
    displacement: np.ndarray
    gate_coord: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(
            self, "displacement", np.asarray(self.displacement, dtype=float)
        )
        if self.gate_coord < len(self.displacement):
            raise ValueError("gate coordinate must not be displaced")
        if self.width_scale <= 0.0:
            raise ValueError("width_scale must be positive")

    @property
    def variant(self) -> str:
        return "localized_translate"

    def gate(self, t):
        c = self.center[self.gate_coord]
        return 2.0 * hat(2.0 * self.width_scale * (np.asarray(t) - c) + 1.0)

    def gate_prime(self, t):
        c = self.center[self.gate_coord]
        arg = 2.0 * self.width_scale * (np.asarray(t) - c) + 1.0
        return 2.0 * hat_prime(arg) * 2.0 * self.width_scale

    def forward(self, x):
        x = _check_dim(x, self.dim)
        y = x.copy()
        k = len(self.displacement)
        y[..., :k] += self.gate(x[..., self.gate_coord])[..., None] * self.displacement
        return y

    def inverse(self, y):
        y = _check_dim(y, self.dim)
        x = y.copy()
        k = len(self.displacement)
        x[..., :k] -= self.gate(y[..., self.gate_coord])[..., None] * self.displacement
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        k = len(self.displacement)
        jac = np.eye(self.dim)
        jac[:k, self.gate_coord] += (
            float(self.gate_prime(x[self.gate_coord])) * self.displacement
        )
        return jac

    def jacobian_norm_bound(self) -> float:
        # |gate'| <= 6 * width_scale by the triangle inequality over the two
        # ReLU branches of the hat.
        return 1.0 + 6.0 * self.width_scale * float(
            np.linalg.norm(self.displacement)
        )

    def params_dict(self) -> dict:
        return {
            "dim": self.dim,
            "center": self.center.tolist(),
            "width_scale": self.width_scale,
            "displacement": self.displacement.tolist(),
            "gate_coord": self.gate_coord,
        }


@dataclass(frozen=True, eq=False)
class LocalizedShift:
    """Adds 2*shift*hat((t - anchor_value)/delta + 1) to one target
    coordinate, gated on a distinct frozen anchor coordinate.

    At the anchor the hat equals 1/2, so the target moves by exactly
    ``shift``; the layer is the identity once |t - anchor_value| >= delta.
    """

    dim: int
    target_coord: int
    anchor_coord: int
    anchor_value: float
    delta: float
    shift: float

    def __post_init__(self):
        if self.target_coord == self.anchor_coord:
            raise ValueError("target and anchor coordinates must differ")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")

    @property
    def variant(self) -> str:
        return "localized_shift"

    def gate(self, t):
        return hat((np.asarray(t) - self.anchor_value) / self.delta + 1.0)

    def gate_prime(self, t):
        arg = (np.asarray(t) - self.anchor_value) / self.delta + 1.0
        return hat_prime(arg) / self.delta

    def forward(self, x):
        x = _check_dim(x, self.dim)
        y = x.copy()
        y[..., self.target_coord] += 2.0 * self.shift * self.gate(
            x[..., self.anchor_coord]
        )
        return y

    def inverse(self, y):
        y = _check_dim(y, self.dim)
        x = y.copy()
        x[..., self.target_coord] -= 2.0 * self.shift * self.gate(
            y[..., self.anchor_coord]
        )
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        jac = np.eye(self.dim)
        jac[self.target_coord, self.anchor_coord] = (
            2.0 * self.shift * float(self.gate_prime(x[self.anchor_coord]))
        )
        return jac

    def jacobian_norm_bound(self) -> float:
        # |gate'| <= 1/(2 delta).
        return 1.0 + abs(self.shift) / self.delta

    def params_dict(self) -> dict:
        return {
            "dim": self.dim,
            "target_coord": self.target_coord,
            "anchor_coord": self.anchor_coord,
            "anchor_value": self.anchor_value,
            "delta": self.delta,
            "shift": self.shift,
        }


@dataclass(frozen=True, eq=False)
class LocalizedLast:
    """Moves the last coordinate by displacement * 2*hat(2(t - c)/delta + 1),
    gated on coordinate ``gate_coord`` (never the last one).

    The gate equals 1 at the stored center and vanishes once
    |t - center[gate_coord]| >= delta/2.
    """

    dim: int
    gate_coord: int
    delta: float
    center: np.ndarray
    displacement: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.gate_coord == self.dim - 1:
            raise ValueError("gate coordinate must differ from the last coordinate")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")

    @property
    def variant(self) -> str:
        return "localized_last"

    def gate(self, t):
        c = self.center[self.gate_coord]
        return 2.0 * hat(2.0 * (np.asarray(t) - c) / self.delta + 1.0)

    def gate_prime(self, t):
        c = self.center[self.gate_coord]
        arg = 2.0 * (np.asarray(t) - c) / self.delta + 1.0
        return 2.0 * hat_prime(arg) * 2.0 / self.delta

    def forward(self, x):
        x = _check_dim(x, self.dim)
        y = x.copy()
        y[..., -1] += self.displacement * self.gate(x[..., self.gate_coord])
        return y

    def inverse(self, y):
        y = _check_dim(y, self.dim)
        x = y.copy()
        x[..., -1] -= self.displacement * self.gate(y[..., self.gate_coord])
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        jac = np.eye(self.dim)
        jac[-1, self.gate_coord] = self.displacement * float(
            self.gate_prime(x[self.gate_coord])
        )
        return jac

    def jacobian_norm_bound(self) -> float:
        return 1.0 + 6.0 / self.delta * abs(self.displacement)

    def params_dict(self) -> dict:
        return {
            "dim": self.dim,
            "gate_coord": self.gate_coord,
            "delta": self.delta,
            "center": self.center.tolist(),
            "displacement": self.displacement,
        }


@dataclass(frozen=True, eq=False)
class PerCoordinatePwl:
    """Applies the same scalar :class:`GridSnap` to every coordinate."""

    dim: int
    snap: GridSnap

    @property
    def variant(self) -> str:
        return "per_coordinate_pwl"

    def forward(self, x):
        x = _check_dim(x, self.dim)
        return self.snap(x)

    def inverse(self, y):
        y = _check_dim(y, self.dim)
        return self.snap.inverse(y)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.diag(self.snap.slope(x))

    def jacobian_norm_bound(self) -> float:
        r = self.snap.r
        return max((1.0 - r) / r, r / (1.0 - r))

    def params_dict(self) -> dict:
        return {"dim": self.dim, "n": self.snap.n, "r": self.snap.r}


def _check_dim(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected last axis {dim}, got {x.shape[-1]}")
    return x


# ---------------------------------------------------------------------------
# RK4 flow oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowOracleSpec:
    """One autonomous vector field integrated to a fixed horizon."""

    f: Callable[[np.ndarray], np.ndarray]
    tau: float
    steps: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if self.tau < 0.0:
            raise ValueError("horizon must be nonnegative")


def ode_flow_oracle(spec: FlowOracleSpec, x: np.ndarray) -> np.ndarray:
    """Classical fixed-step RK4 integration of dy/dt = f(y) to time tau."""
    if spec.steps < 16:
        raise ValueError("oracle requires at least 16 steps")
    y = np.asarray(x, dtype=float).copy()
    if spec.tau == 0.0:
        return y
    h = spec.tau / spec.steps
    for _ in range(spec.steps):
        k1 = spec.f(y)
        k2 = spec.f(y + 0.5 * h * k1)
        k3 = spec.f(y + 0.5 * h * k2)
        k4 = spec.f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def defining_flows(layer, steps: int = 64) -> list[FlowOracleSpec]:
    """The sequence of flow maps whose composition equals ``layer.forward``.

    Used only by tests: the production path is always the closed form.
    """
    if isinstance(layer, ShiftLast):
        specs = []
        for j in range(1, layer.reads + 1):
            def f(y, j=j):
                out = np.zeros_like(y)
                out[..., -1] = relu(y[..., j - 1])
                return out

            specs.append(FlowOracleSpec(f, float(layer.n) ** -j, steps))
        return specs
    if isinstance(layer, LocalizedTranslate):
        k = len(layer.displacement)

        def f(y):
            out = np.zeros_like(y)
            out[..., :k] = layer.gate(y[..., layer.gate_coord])[..., None] * (
                layer.displacement
            )
            return out

        return [FlowOracleSpec(f, 1.0, steps)]
    if isinstance(layer, LocalizedShift):
        sign = 1.0 if layer.shift >= 0.0 else -1.0

        def f(y):
            out = np.zeros_like(y)
            out[..., layer.target_coord] = sign * layer.gate(
                y[..., layer.anchor_coord]
            )
            return out

        return [FlowOracleSpec(f, 2.0 * abs(layer.shift), steps)]
    if isinstance(layer, LocalizedLast):
        def f(y):
            out = np.zeros_like(y)
            out[..., -1] = layer.displacement * layer.gate(y[..., layer.gate_coord])
            return out

        return [FlowOracleSpec(f, 1.0, steps)]
    extra = getattr(layer, "defining_flows", None)
    if extra is not None:
        return extra(steps)
    raise TypeError(f"no defining flow registered for {type(layer).__name__}")


def localized_shift_for_pair(
    z1: np.ndarray, z2: np.ndarray, target_value: float
) -> LocalizedShift:
    """Shift layer moving coordinate 0 of z1 to ``target_value`` while fixing
    z2 and all points separated from z1 at the anchor coordinate.

    Anchor selection: coordinate 1 when z1 and z2 differ there, otherwise the
    smallest coordinate index with separation at least the tolerance.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != z2.shape or z1.ndim != 1:
        raise ValueError("z1 and z2 must be equal-length vectors")
    gaps = np.abs(z1 - z2)
    if gaps.max() <= DISTINCTNESS_TOL:
        raise ValueError("points coincide; no anchor coordinate available")
    if gaps[1] > DISTINCTNESS_TOL:
        anchor = 1
    else:
        anchor = int(np.argmax(gaps > DISTINCTNESS_TOL))
    return LocalizedShift(
        dim=len(z1),
        target_coord=0,
        anchor_coord=anchor,
        anchor_value=float(z1[anchor]),
        delta=float(gaps[anchor]),
        shift=float(target_value - z1[0]),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_VARIANTS: dict[str, Callable[[dict], object]] = {}


def register_layer_variant(tag: str, builder: Callable[[dict], object]) -> None:
    _VARIANTS[tag] = builder


def layer_to_dict(layer) -> dict:
    return {"variant": layer.variant, "params": layer.params_dict()}


def layer_from_dict(obj: dict):
    tag = obj["variant"]
    if tag not in _VARIANTS:
        raise ValueError(f"unknown layer variant {tag!r}")
    return _VARIANTS[tag](obj["params"])


register_layer_variant(
    "shift_last", lambda p: ShiftLast(dim=p["dim"], n=p["n"], n_read=p["n_read"])
)
register_layer_variant(
    "localized_translate",
    lambda p: LocalizedTranslate(
        dim=p["dim"],
        center=np.array(p["center"]),
        width_scale=p["width_scale"],
        displacement=np.array(p["displacement"]),
        gate_coord=p["gate_coord"],
    ),
)
register_layer_variant(
    "localized_shift",
    lambda p: LocalizedShift(
        dim=p["dim"],
        target_coord=p["target_coord"],
        anchor_coord=p["anchor_coord"],
        anchor_value=p["anchor_value"],
        delta=p["delta"],
        shift=p["shift"],
    ),
)
register_layer_variant(
    "localized_last",
    lambda p: LocalizedLast(
        dim=p["dim"],
        gate_coord=p["gate_coord"],
        delta=p["delta"],
        center=np.array(p["center"]),
        displacement=p["displacement"],
    ),
)
register_layer_variant(
    "per_coordinate_pwl",
    lambda p: PerCoordinatePwl(dim=p["dim"], snap=GridSnap(n=p["n"], r=p["r"])),
)


def dumps_json17(obj, indent: int = 0) -> str:
    """Deterministic JSON with every real printed at 17 significant digits."""
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f'{pad}  "{k}": {dumps_json17(v, indent + 2)}' for k, v in obj.items()
        )
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        body = ", ".join(dumps_json17(v, indent) for v in obj)
        return "[" + body + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            raise ValueError("refusing to serialize non-finite real")
        return format(v, ".17g")
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps_json17(obj.tolist(), indent)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
