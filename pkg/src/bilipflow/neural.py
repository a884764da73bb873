"""Trainable affine-coupling invertible network with hand-derived gradients.

Each block splits the input into odd and even positions, rescales and shifts
the odd half conditioned on the even half, then mirrors the step on the even
half conditioned on the updated odd half, and re-interleaves.  One scale
subnet and one shift subnet are shared by both half-steps of a block.  The
scale exponent is soft-clamped (s -> s_max tanh(s/s_max)) identically in the
forward and inverse passes, so invertibility is exact for any parameters.

The weighted bidirectional loss is

    c0/2 sum |(u - model^{-1}(y)) . w_u|^2  +  1/2 sum |(y - model(u)) . w_y|^2

and its gradient backpropagates through BOTH passes (the inverse-direction
term differentiates through the algebraic inverse).  Training uses Adam.

Because the scale and shift subnets of a block always read the same input,
their weights are stored stacked along a leading axis of size 2 and each
layer is evaluated as one batched matmul; slice 0 is the scale net, slice 1
the shift net.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .flows import dumps_json17

__all__ = [
    "Mlp",
    "SubnetPair",
    "CouplingINN",
    "TrainConfig",
    "Metrics",
    "TrainingDivergence",
    "TrainResult",
    "init_model",
    "loss",
    "grad",
    "adam_step",
    "AdamState",
    "train",
    "relative_errors",
    "save_checkpoint",
    "load_checkpoint",
    "FnnModel",
    "init_fnn",
    "train_fnn",
]


class SubnetPair:
    """Scale and shift ReLU subnets of one coupling block, weights stacked.

    params: list of (W, b) with W of shape (2, fan_out, fan_in) and b of
    shape (2, fan_out); index 0 is the scale net, 1 the shift net.  Hidden
    layers use ReLU, the output layer is linear.
    """

    def __init__(self, widths: list[int], params=None):
        self.widths = list(widths)
        self.params = params if params is not None else []

    @staticmethod
    def glorot_init(widths: list[int], rng: np.random.Generator) -> "SubnetPair":
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(
                (rng.uniform(-bound, bound, (2, fan_out, fan_in)), np.zeros((2, fan_out)))
            )
        return SubnetPair(widths, params)

    def forward(self, x: np.ndarray):
        """x: (B, fan_in) shared input; returns (scale_raw, shift) (B, out)."""
        a = np.broadcast_to(x, (2,) + x.shape)
        last = len(self.params) - 1
        for k, (w, b) in enumerate(self.params):
            a = np.matmul(a, w.transpose(0, 2, 1)) + b[:, None, :]
            if k != last:
                a = np.maximum(a, 0.0)
        return a[0], a[1]

    def forward_cached(self, x: np.ndarray):
        acts = [np.broadcast_to(x, (2,) + x.shape)]
        pre = []
        a = acts[0]
        last = len(self.params) - 1
        for k, (w, b) in enumerate(self.params):
            z = np.matmul(a, w.transpose(0, 2, 1)) + b[:, None, :]
            pre.append(z)
            a = np.maximum(z, 0.0) if k != last else z
            acts.append(a)
        return a[0], a[1], (acts, pre)

    def backward(self, cache, d_scale: np.ndarray, d_shift: np.ndarray, grads):
        """Accumulates parameter grads into ``grads`` (same shapes as params)
        and returns the gradient w.r.t. the shared input."""
        acts, pre = cache
        da = np.stack([d_scale, d_shift])
        for k in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[k]
            dz = da if k == len(self.params) - 1 else da * (pre[k] > 0.0)
            gw, gb = grads[k]
            gw += np.matmul(dz.transpose(0, 2, 1), acts[k])
            gb += dz.sum(axis=1)
            da = np.matmul(dz, w)
        return da[0] + da[1]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params)


def _clamp(s_raw, s_max: float):
    return s_max * np.tanh(s_raw / s_max)


def _clamp_prime(s_raw, s_max: float):
    t = np.tanh(s_raw / s_max)
    return 1.0 - t * t


@dataclass
class CouplingINN:
    """Stack of affine-coupling blocks on an even-dimensional input."""

    dim: int
    blocks: list[SubnetPair]
    s_max: float = 5.0

    def __post_init__(self):
        if self.dim % 2 != 0:
            raise ValueError("input dimension must be even")

    @property
    def half(self) -> int:
        return self.dim // 2

    def _combine(self, odd, even):
        out = np.empty(odd.shape[:-1] + (self.dim,))
        out[..., 0::2] = odd
        out[..., 1::2] = even
        return out

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected last axis {self.dim}, got {u.shape[-1]}")
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite input")
        return np.atleast_2d(u)

    def forward(self, u: np.ndarray) -> np.ndarray:
        squeeze = np.asarray(u).ndim == 1
        x = self._check(u)
        u_o, u_e = x[..., 0::2], x[..., 1::2]
        for pair in self.blocks:
            s1, t1 = pair.forward(u_e)
            v_o = u_o * np.exp(_clamp(s1, self.s_max)) + t1
            s2, t2 = pair.forward(v_o)
            v_e = u_e * np.exp(_clamp(s2, self.s_max)) + t2
            u_o, u_e = v_o, v_e
        out = self._combine(u_o, u_e)
        return out[0] if squeeze else out

    def inverse(self, y: np.ndarray) -> np.ndarray:
        squeeze = np.asarray(y).ndim == 1
        x = self._check(y)
        v_o, v_e = x[..., 0::2], x[..., 1::2]
        for pair in reversed(self.blocks):
            s2, t2 = pair.forward(v_o)
            u_e = (v_e - t2) * np.exp(-_clamp(s2, self.s_max))
            s1, t1 = pair.forward(u_e)
            u_o = (v_o - t1) * np.exp(-_clamp(s1, self.s_max))
            v_o, v_e = u_o, u_e
        out = self._combine(v_o, v_e)
        return out[0] if squeeze else out

    # -- flattened parameter view ------------------------------------------

    def param_arrays(self) -> list[np.ndarray]:
        arrays = []
        for pair in self.blocks:
            for w, b in pair.params:
                arrays.extend([w, b])
        return arrays

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for a in self.param_arrays():
            a[...] = flat[offset : offset + a.size].reshape(a.shape)
            offset += a.size
        if offset != flat.size:
            raise ValueError("flat vector size mismatch")

    def param_count(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def copy(self) -> "CouplingINN":
        blocks = [
            SubnetPair(p.widths, [(w.copy(), b.copy()) for w, b in p.params])
            for p in self.blocks
        ]
        return CouplingINN(dim=self.dim, blocks=blocks, s_max=self.s_max)

    def zero_subnet_outputs(self) -> None:
        """Zero every subnet's final layer: the network becomes the identity."""
        for pair in self.blocks:
            w, b = pair.params[-1]
            w[...] = 0.0
            b[...] = 0.0

    # -- hand-derived reverse mode -----------------------------------------

    def _forward_caches(self, u):
        u_o, u_e = u[..., 0::2], u[..., 1::2]
        caches = []
        for pair in self.blocks:
            s1_raw, t1, c1 = pair.forward_cached(u_e)
            e1 = np.exp(_clamp(s1_raw, self.s_max))
            v_o = u_o * e1 + t1
            s2_raw, t2, c2 = pair.forward_cached(v_o)
            e2 = np.exp(_clamp(s2_raw, self.s_max))
            v_e = u_e * e2 + t2
            caches.append((u_o, u_e, s1_raw, c1, e1, v_o, s2_raw, c2, e2))
            u_o, u_e = v_o, v_e
        return self._combine(u_o, u_e), caches

    def _forward_backward(self, caches, dy, grads):
        dv_o, dv_e = dy[..., 0::2].copy(), dy[..., 1::2]
        for b in range(len(self.blocks) - 1, -1, -1):
            pair = self.blocks[b]
            u_o, u_e, s1_raw, c1, e1, v_o, s2_raw, c2, e2 = caches[b]
            # v_e = u_e e2 + t2, with (s2, t2) = pair(v_o).
            du_e = dv_e * e2
            ds2_raw = dv_e * u_e * e2 * _clamp_prime(s2_raw, self.s_max)
            dv_o += pair.backward(c2, ds2_raw, dv_e, grads[b])
            # v_o = u_o e1 + t1, with (s1, t1) = pair(u_e).
            du_o = dv_o * e1
            ds1_raw = dv_o * u_o * e1 * _clamp_prime(s1_raw, self.s_max)
            du_e += pair.backward(c1, ds1_raw, dv_o, grads[b])
            dv_o, dv_e = du_o.copy(), du_e
        return self._combine(dv_o, dv_e)

    def _inverse_caches(self, y):
        v_o, v_e = y[..., 0::2], y[..., 1::2]
        caches = []
        for pair in reversed(self.blocks):
            s2_raw, t2, c2 = pair.forward_cached(v_o)
            e2m = np.exp(-_clamp(s2_raw, self.s_max))
            u_e = (v_e - t2) * e2m
            s1_raw, t1, c1 = pair.forward_cached(u_e)
            e1m = np.exp(-_clamp(s1_raw, self.s_max))
            u_o = (v_o - t1) * e1m
            caches.append((s2_raw, c2, e2m, u_e, s1_raw, c1, e1m, u_o))
            v_o, v_e = u_o, u_e
        return self._combine(v_o, v_e), caches

    def _inverse_backward(self, caches, du, grads):
        du_o, du_e = du[..., 0::2], du[..., 1::2].copy()
        # caches[k] belongs to block index len(blocks)-1-k.
        for k in range(len(caches) - 1, -1, -1):
            b = len(self.blocks) - 1 - k
            pair = self.blocks[b]
            s2_raw, c2, e2m, u_e, s1_raw, c1, e1m, u_o = caches[k]
            # u_o = (v_o - t1) exp(-s1), with (s1, t1) = pair(u_e).
            dv_o = du_o * e1m
            ds1_raw = -du_o * u_o * _clamp_prime(s1_raw, self.s_max)
            du_e += pair.backward(c1, ds1_raw, -du_o * e1m, grads[b])
            # u_e = (v_e - t2) exp(-s2), with (s2, t2) = pair(v_o).
            dv_e = du_e * e2m
            ds2_raw = -du_e * u_e * _clamp_prime(s2_raw, self.s_max)
            dv_o += pair.backward(c2, ds2_raw, -du_e * e2m, grads[b])
            du_o, du_e = dv_o, dv_e.copy()
        return self._combine(du_o, du_e)


def _zero_grads(model: CouplingINN):
    return [
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in pair.params]
        for pair in model.blocks
    ]


def _flatten_grads(grads) -> np.ndarray:
    parts = []
    for block in grads:
        for gw, gb in block:
            parts.append(gw.ravel())
            parts.append(gb.ravel())
    return np.concatenate(parts)


def init_model(
    dim: int = 10, hidden: int = 32, n_blocks: int = 3, s_max: float = 5.0, seed: int = 0
) -> CouplingINN:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    widths = [dim // 2, hidden, hidden, hidden, dim // 2]
    blocks = [SubnetPair.glorot_init(widths, rng) for _ in range(n_blocks)]
    return CouplingINN(dim=dim, blocks=blocks, s_max=s_max)


def loss(
    model: CouplingINN,
    batch_u: np.ndarray,
    batch_y: np.ndarray,
    c0: float,
    w_u: np.ndarray,
    w_y: np.ndarray,
) -> float:
    w_u = np.asarray(w_u, dtype=float)
    w_y = np.asarray(w_y, dtype=float)
    if np.any(w_u < 0.0) or np.any(w_y < 0.0):
        raise ValueError("weights must be nonnegative")
    fwd = model.forward(batch_u)
    inv = model.inverse(batch_y)
    term_fwd = 0.5 * np.sum(((batch_y - fwd) * w_y) ** 2)
    term_inv = 0.5 * c0 * np.sum(((batch_u - inv) * w_u) ** 2)
    return float(term_fwd + term_inv)


def grad(
    model: CouplingINN,
    batch_u: np.ndarray,
    batch_y: np.ndarray,
    c0: float,
    w_u: np.ndarray,
    w_y: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Loss value and exact gradient w.r.t. the flattened parameters."""
    batch_u = np.atleast_2d(np.asarray(batch_u, dtype=float))
    batch_y = np.atleast_2d(np.asarray(batch_y, dtype=float))
    if len(batch_u) == 0:
        raise ValueError("batch must be nonempty")
    w_u = np.asarray(w_u, dtype=float)
    w_y = np.asarray(w_y, dtype=float)
    grads = _zero_grads(model)

    fwd, f_caches = model._forward_caches(batch_u)
    diff_fwd = (fwd - batch_y) * w_y**2
    term_fwd = 0.5 * np.sum(((batch_y - fwd) * w_y) ** 2)
    model._forward_backward(f_caches, diff_fwd, grads)

    inv, i_caches = model._inverse_caches(batch_y)
    diff_inv = c0 * (inv - batch_u) * w_u**2
    term_inv = 0.5 * c0 * np.sum(((batch_u - inv) * w_u) ** 2)
    model._inverse_backward(i_caches, diff_inv, grads)

    return float(term_fwd + term_inv), _flatten_grads(grads)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    theta: np.ndarray,
    g: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class TrainConfig:
    c0: float = 1e-3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 20000
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    eval_every: int = 100
    early_stop_window: int | None = None

    def __post_init__(self):
        if self.c0 <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("c0 and learning rate must be positive")


@dataclass
class Metrics:
    """Per-evaluation history plus trajectory minima of the relative errors."""

    history: list = field(default_factory=list)

    def record(self, step, loss_val, e_a_fwd, e_g_fwd, e_a_inv, e_g_inv):
        self.history.append(
            {
                "step": step,
                "loss": loss_val,
                "e_a_fwd": e_a_fwd,
                "e_g_fwd": e_g_fwd,
                "e_a_inv": e_a_inv,
                "e_g_inv": e_g_inv,
            }
        )

    def best(self, key: str) -> float:
        return min(rec[key] for rec in self.history)

    def series(self, key: str) -> np.ndarray:
        return np.array([rec[key] for rec in self.history])

    def to_csv(self) -> str:
        lines = ["step,loss,e_a_fwd,e_g_fwd,e_a_inv,e_g_inv"]
        for rec in self.history:
            lines.append(
                f"{rec['step']},{rec['loss']:.17g},{rec['e_a_fwd']:.17g},"
                f"{rec['e_g_fwd']:.17g},{rec['e_a_inv']:.17g},{rec['e_g_inv']:.17g}"
            )
        return "\n".join(lines) + "\n"


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def relative_errors(
    model,
    data_u: np.ndarray,
    data_y: np.ndarray,
    w_u: np.ndarray,
    w_y: np.ndarray,
) -> tuple[float, float]:
    """(forward, inverse) weighted relative L2 errors on one split."""
    denom_y = float(np.sum((data_y * w_y) ** 2))
    denom_u = float(np.sum((data_u * w_u) ** 2))
    if denom_y == 0.0 or denom_u == 0.0:
        raise ValueError("zero-norm targets")
    e_fwd = np.sqrt(float(np.sum(((data_y - model.forward(data_u)) * w_y) ** 2)) / denom_y)
    e_inv = np.sqrt(float(np.sum(((data_u - model.inverse(data_y)) * w_u) ** 2)) / denom_u)
    return float(e_fwd), float(e_inv)


@dataclass
class TrainResult:
    model: CouplingINN        # final parameters
    best_model: CouplingINN   # snapshot at the smallest combined e_g
    metrics: Metrics
    steps_run: int


def train(
    model: CouplingINN,
    train_u: np.ndarray,
    train_y: np.ndarray,
    test_u: np.ndarray,
    test_y: np.ndarray,
    cfg: TrainConfig,
    w_u: np.ndarray,
    w_y: np.ndarray,
) -> TrainResult:
    """Adam on the bidirectional weighted loss; tracks e_a/e_g histories.

    The best snapshot minimizes e_g_fwd + e_g_inv over the evaluation grid
    (trajectory minima per direction are available from the metrics).
    """
    theta = model.get_flat()
    state = AdamState(m=np.zeros_like(theta), v=np.zeros_like(theta))
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    metrics = Metrics()
    best_score = np.inf
    best_model = model.copy()
    stale_rounds = 0
    n_train = len(train_u)

    def evaluate(step, loss_val):
        nonlocal best_score, best_model, stale_rounds
        e_a_fwd, e_a_inv = relative_errors(model, train_u, train_y, w_u, w_y)
        e_g_fwd, e_g_inv = relative_errors(model, test_u, test_y, w_u, w_y)
        metrics.record(step, loss_val, e_a_fwd, e_g_fwd, e_a_inv, e_g_inv)
        score = e_g_fwd + e_g_inv
        if score < best_score:
            best_score = score
            best_model = model.copy()
            stale_rounds = 0
        else:
            stale_rounds += 1

    step = 0
    evaluate(0, loss(model, train_u, train_y, cfg.c0, w_u, w_y))
    for step in range(1, cfg.max_steps + 1):
        if cfg.batch_size is not None and cfg.batch_size < n_train:
            idx = rng.choice(n_train, size=cfg.batch_size, replace=False)
            bu, by = train_u[idx], train_y[idx]
        else:
            bu, by = train_u, train_y
        loss_val, g = grad(model, bu, by, cfg.c0, w_u, w_y)
        if not np.isfinite(loss_val):
            raise TrainingDivergence(step)
        theta = adam_step(theta, g, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        model.set_flat(theta)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            evaluate(step, loss_val)
            if (
                cfg.early_stop_window is not None
                and stale_rounds >= cfg.early_stop_window
            ):
                break
    return TrainResult(model=model, best_model=best_model, metrics=metrics, steps_run=step)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CouplingINN, prefix: str, cfg: TrainConfig | None = None, step: int = 0) -> None:
    manifest = {
        "kind": "coupling_checkpoint",
        "dim": model.dim,
        "hidden": model.blocks[0].widths[1],
        "n_blocks": len(model.blocks),
        "s_max": model.s_max,
        "step": step,
        "param_count": model.param_count(),
        "dtype": "f64le",
        "params_file": os.path.basename(prefix) + ".bin",
        "config": None if cfg is None else {
            "c0": cfg.c0,
            "learning_rate": cfg.learning_rate,
            "max_steps": cfg.max_steps,
            "seed": cfg.seed,
        },
    }
    with open(prefix + ".json", "w") as fh:
        fh.write(dumps_json17(manifest))
    with open(prefix + ".bin", "wb") as fh:
        fh.write(np.ascontiguousarray(model.get_flat(), dtype="<f8").tobytes())


def load_checkpoint(prefix: str) -> CouplingINN:
    with open(prefix + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "coupling_checkpoint":
        raise ValueError("not a coupling checkpoint")
    model = init_model(
        dim=manifest["dim"],
        hidden=manifest["hidden"],
        n_blocks=manifest["n_blocks"],
        s_max=manifest["s_max"],
        seed=0,
    )
    path = os.path.join(os.path.dirname(prefix) or ".", manifest["params_file"])
    flat = np.fromfile(path, dtype="<f8")
    if flat.size != manifest["param_count"]:
        raise ValueError("parameter blob size mismatch")
    model.set_flat(flat)
    return model


# ---------------------------------------------------------------------------
# Fully connected baseline (one net per direction)
# ---------------------------------------------------------------------------


class Mlp:
    """Plain fully connected ReLU net with a linear output layer."""

    def __init__(self, widths: list[int], params=None):
        self.widths = list(widths)
        self.params = params if params is not None else []

    @staticmethod
    def glorot_init(widths: list[int], rng: np.random.Generator) -> "Mlp":
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(
                (rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out))
            )
        return Mlp(widths, params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = x
        last = len(self.params) - 1
        for k, (w, b) in enumerate(self.params):
            a = a @ w.T + b
            if k != last:
                a = np.maximum(a, 0.0)
        return a

    def forward_cached(self, x: np.ndarray):
        acts = [x]
        pre = []
        a = x
        last = len(self.params) - 1
        for k, (w, b) in enumerate(self.params):
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if k != last else z
            acts.append(a)
        return a, (acts, pre)

    def backward(self, cache, dout: np.ndarray):
        acts, pre = cache
        grads = [None] * len(self.params)
        da = dout
        for k in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[k]
            dz = da if k == len(self.params) - 1 else da * (pre[k] > 0.0)
            grads[k] = (dz.T @ acts[k], dz.sum(axis=0))
            da = dz @ w
        return grads, da

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params)


@dataclass
class FnnModel:
    net: Mlp

    def forward(self, x):
        return self.net.forward(np.atleast_2d(np.asarray(x, dtype=float)))


def init_fnn(dim: int = 10, hidden: int = 32, seed: int = 0) -> FnnModel:
    """Five weight layers, matching the comparison baseline."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    widths = [dim, hidden, hidden, hidden, hidden, dim]
    return FnnModel(net=Mlp.glorot_init(widths, rng))


def train_fnn(
    fnn: FnnModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    steps: int,
    lr: float = 1e-3,
) -> FnnModel:
    """Adam on 1/2 sum |(target - net(input)) . weights|^2."""
    params = fnn.net.params
    flats = [p for pair in params for p in pair]
    theta = np.concatenate([p.ravel() for p in flats])
    state = AdamState(m=np.zeros_like(theta), v=np.zeros_like(theta))
    for _ in range(steps):
        out, cache = fnn.net.forward_cached(inputs)
        dout = (out - targets) * weights**2
        grads, _ = fnn.net.backward(cache, dout)
        g = np.concatenate([q.ravel() for pair in grads for q in pair])
        theta = adam_step(theta, g, state, lr)
        offset = 0
        for p in flats:
            p[...] = theta[offset : offset + p.size].reshape(p.shape)
            offset += p.size
    return fnn
