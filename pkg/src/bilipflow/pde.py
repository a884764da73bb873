"""Dataset generation for the elliptic surrogate experiment.

Samples diffusion coefficients from a cosine expansion with independent
standard-normal amplitudes, solves -div(u grad y) = 1 on the unit square
with homogeneous Dirichlet data on a structured grid, and packages the
(amplitudes, solution) pairs into a binary dataset.

The discretization is a 5-point flux scheme with face coefficients given by
the harmonic mean of the nodal coefficient values: symmetric positive
definite and second-order, solved by Jacobi-preconditioned conjugate
gradients.  Sampling uses a counter-based generator keyed by (seed, record,
attempt) so datasets are byte-identical regardless of generation order or
thread count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .flows import dumps_json17

__all__ = [
    "KL_MODES",
    "kl_weight_matrix",
    "KLCoefficient",
    "sample_xi",
    "SolveSpec",
    "SolveReport",
    "solve",
    "series_oracle",
    "generate",
    "load_dataset",
    "weighted_inputs",
]

KL_MODES = 20


def kl_weight_matrix(modes: int = KL_MODES) -> np.ndarray:
    i = np.arange(1, modes + 1, dtype=float)
    return 1.0 / (i[:, None] ** 3 + i[None, :] ** 3)


@dataclass(frozen=True, eq=False)
class KLCoefficient:
    """Coefficient field u(x) = 2 + sum_ij xi_ij/(i^3+j^3) cos(i pi x1) cos(j pi x2)."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (KL_MODES, KL_MODES):
            raise ValueError(f"xi must be {KL_MODES} x {KL_MODES}, got {xi.shape}")
        object.__setattr__(self, "xi", xi)

    def field_at(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        i = np.arange(1, KL_MODES + 1)
        c1 = np.cos(np.pi * np.multiply.outer(x1, i))
        c2 = np.cos(np.pi * np.multiply.outer(x2, i))
        amp = self.xi * kl_weight_matrix()
        return 2.0 + np.einsum("...i,ij,...j->...", c1, amp, c2)

    def field_on_grid(self, m: int) -> np.ndarray:
        nodes = np.arange(m + 1) / m
        i = np.arange(1, KL_MODES + 1)
        c1 = np.cos(np.pi * np.outer(i, nodes))
        amp = self.xi * kl_weight_matrix()
        return 2.0 + c1.T @ amp @ c1


def _philox_key(seed: int, index: int, attempt: int = 0) -> int:
    if not (0 <= index < 2**48 and 0 <= attempt < 2**16):
        raise ValueError("record index or attempt out of range")
    return (int(seed) << 64) | (int(index) << 16) | int(attempt)


def sample_xi(seed: int, index: int, attempt: int = 0) -> KLCoefficient:
    """400 iid standard-normal amplitudes, reproducible per (seed, index)."""
    rng = np.random.Generator(np.random.Philox(key=_philox_key(seed, index, attempt)))
    return KLCoefficient(xi=rng.standard_normal((KL_MODES, KL_MODES)))


@dataclass(frozen=True)
class SolveSpec:
    h: float = 1.0 / 50.0
    cg_tol: float = 1e-10
    cg_max_iter: int = 20000
    u_min: float = 1e-3

    def __post_init__(self):
        m = 1.0 / self.h
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"1/h must be an integer, got h = {self.h}")
        if self.cg_tol <= 0.0:
            raise ValueError("tolerance must be positive")

    @property
    def m(self) -> int:
        return int(round(1.0 / self.h))

    @property
    def nodes_per_side(self) -> int:
        return self.m + 1


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    rel_residual: float


class EllipticityError(ValueError):
    pass


def _face_coefficients(u_nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ax = 2.0 / (1.0 / u_nodes[:-1, :] + 1.0 / u_nodes[1:, :])
    ay = 2.0 / (1.0 / u_nodes[:, :-1] + 1.0 / u_nodes[:, 1:])
    return ax, ay


def _apply_operator(ax, ay, y_full, out_full):
    # 5-point flux form on interior nodes; boundary of y_full is zero.
    diag = ax[1:, 1:-1] + ax[:-1, 1:-1] + ay[1:-1, 1:] + ay[1:-1, :-1]
    out_full[1:-1, 1:-1] = (
        diag * y_full[1:-1, 1:-1]
        - ax[1:, 1:-1] * y_full[2:, 1:-1]
        - ax[:-1, 1:-1] * y_full[:-2, 1:-1]
        - ay[1:-1, 1:] * y_full[1:-1, 2:]
        - ay[1:-1, :-1] * y_full[1:-1, :-2]
    )
    return out_full


def solve(coef: KLCoefficient | np.ndarray, spec: SolveSpec) -> tuple[np.ndarray, SolveReport]:
    """Solve -div(u grad y) = 1 with zero boundary values.

    ``coef`` is either a KL coefficient object or a nodal field array.
    Returns the full (m+1) x (m+1) solution grid (boundary exactly zero)
    and the CG report.
    """
    m = spec.m
    if isinstance(coef, KLCoefficient):
        u_nodes = coef.field_on_grid(m)
    else:
        u_nodes = np.asarray(coef, dtype=float)
        if u_nodes.shape != (m + 1, m + 1):
            raise ValueError(f"field must be {(m + 1, m + 1)}, got {u_nodes.shape}")
    if np.min(u_nodes) < spec.u_min:
        raise EllipticityError(
            f"coefficient minimum {np.min(u_nodes):.3e} below floor {spec.u_min:.1e}"
        )
    ax, ay = _face_coefficients(u_nodes)
    diag = ax[1:, 1:-1] + ax[:-1, 1:-1] + ay[1:-1, 1:] + ay[1:-1, :-1]

    b = np.zeros((m + 1, m + 1))
    b[1:-1, 1:-1] = spec.h**2
    b_norm = float(np.linalg.norm(b[1:-1, 1:-1]))

    y = np.zeros((m + 1, m + 1))
    work = np.zeros_like(y)
    r = b.copy()
    z = np.zeros_like(y)
    z[1:-1, 1:-1] = r[1:-1, 1:-1] / diag
    p = z.copy()
    rz = float(np.sum(r[1:-1, 1:-1] * z[1:-1, 1:-1]))

    iterations = 0
    rel = float(np.linalg.norm(r[1:-1, 1:-1])) / b_norm
    while rel > spec.cg_tol and iterations < spec.cg_max_iter:
        _apply_operator(ax, ay, p, work)
        alpha = rz / float(np.sum(p[1:-1, 1:-1] * work[1:-1, 1:-1]))
        y[1:-1, 1:-1] += alpha * p[1:-1, 1:-1]
        r[1:-1, 1:-1] -= alpha * work[1:-1, 1:-1]
        z[1:-1, 1:-1] = r[1:-1, 1:-1] / diag
        rz_next = float(np.sum(r[1:-1, 1:-1] * z[1:-1, 1:-1]))
        p[1:-1, 1:-1] = z[1:-1, 1:-1] + (rz_next / rz) * p[1:-1, 1:-1]
        rz = rz_next
        iterations += 1
        rel = float(np.linalg.norm(r[1:-1, 1:-1])) / b_norm
    if rel > spec.cg_tol:
        raise RuntimeError(f"CG failed to converge: residual {rel:.3e}")
    return y, SolveReport(iterations=iterations, rel_residual=rel)


def series_oracle(x1: float, x2: float, terms: int = 200) -> float:
    """Double sine series for -lap y = 1 on the unit square, zero boundary.

    y = sum over odd m, n of 16 / (pi^4 m n (m^2 + n^2)) sin(m pi x1) sin(n pi x2),
    truncated at the first ``terms`` odd modes per direction.
    """
    if terms < 50:
        raise ValueError("need at least 50 modes per direction")
    modes = np.arange(1, 2 * terms, 2, dtype=float)
    sx = np.sin(modes * np.pi * x1) / modes
    sy = np.sin(modes * np.pi * x2) / modes
    denom = modes[:, None] ** 2 + modes[None, :] ** 2
    return float(16.0 / np.pi**4 * sx @ (1.0 / denom) @ sy)


_MAX_ATTEMPTS = 64


def _make_record(seed: int, index: int, spec: SolveSpec):
    m = spec.m
    for attempt in range(_MAX_ATTEMPTS):
        coef = sample_xi(seed, index, attempt)
        u_nodes = coef.field_on_grid(m)
        if np.min(u_nodes) < spec.u_min:
            continue
        y, report = solve(u_nodes, spec)
        return coef.xi.ravel(), y.ravel(), attempt, report
    raise EllipticityError(f"record {index}: no admissible coefficient found")


def generate(
    m_records: int,
    seed: int,
    spec: SolveSpec,
    out_prefix: str,
    threads: int = 1,
) -> dict:
    """Generate and write the dataset; returns the manifest (with rejection count)."""
    if m_records < 1:
        raise ValueError("need at least one record")
    indices = range(m_records)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda k: _make_record(seed, k, spec), indices))
    else:
        results = [_make_record(seed, k, spec) for k in indices]

    d_in = KL_MODES * KL_MODES
    d_out = spec.nodes_per_side**2
    rejections = sum(res[2] for res in results)
    manifest = {
        "kind": "pde_dataset",
        "M": m_records,
        "d_in": d_in,
        "d_out": d_out,
        "seed": seed,
        "h": spec.h,
        "dtype": "f64le",
        "rejections": rejections,
        "u_min": spec.u_min,
        "data_file": os.path.basename(out_prefix) + ".bin",
    }
    with open(out_prefix + ".json", "w") as fh:
        fh.write(dumps_json17(manifest))
    with open(out_prefix + ".bin", "wb") as fh:
        for xi_flat, y_flat, _, _ in results:
            fh.write(np.ascontiguousarray(xi_flat, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(y_flat, dtype="<f8").tobytes())
    return manifest


def load_dataset(prefix: str) -> tuple[np.ndarray, np.ndarray, dict]:
    with open(prefix + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "pde_dataset":
        raise ValueError("not a pde-dataset manifest")
    path = os.path.join(os.path.dirname(prefix) or ".", manifest["data_file"])
    raw = np.fromfile(path, dtype="<f8")
    m, d_in, d_out = manifest["M"], manifest["d_in"], manifest["d_out"]
    if raw.size != m * (d_in + d_out):
        raise ValueError("dataset file size does not match manifest")
    raw = raw.reshape(m, d_in + d_out)
    return raw[:, :d_in].copy(), raw[:, d_in:].copy(), manifest


def weighted_inputs(xi_flat: np.ndarray) -> np.ndarray:
    """Map raw amplitude records to the coefficient-space representation
    (amplitudes scaled by the expansion weights) used by the reduction
    pipeline; invertible by dividing the weights back out."""
    xi_flat = np.asarray(xi_flat, dtype=float)
    return xi_flat * kl_weight_matrix().ravel()
