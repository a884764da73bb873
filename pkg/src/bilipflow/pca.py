"""Non-centered PCA encoder/decoder with tail-sum error accounting.

The basis diagonalizes the empirical second-moment matrix (1/N) sum u u^t
without mean subtraction.  When the ambient dimension exceeds the sample
count the nonzero spectrum is recovered from the N x N Gram matrix instead.
Eigenvectors follow a fixed sign convention (first nonzero component
positive) so serialized bases are reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .flows import dumps_json17

__all__ = ["PCABasis", "fit", "tail_bound_report", "inn_rate_constants"]

# Relative floor below which an eigenvalue is considered a rounding artifact.
_EIG_CLIP_REL = 1e-12


@dataclass(frozen=True, eq=False)
class PCABasis:
    """Top-d_u eigenpairs of the empirical non-centered covariance.

    ``eigvals`` carries the full computable spectrum (min(N, dim) values,
    nonincreasing) so tail sums are exact; ``vectors`` holds only the top
    d_u eigenvectors, one per row.  ``c_nu`` is the plug-in empirical
    estimate of the fourth-moment deviation (the true quantity is an
    expectation under the sampling measure).
    """

    dim: int
    n_samples: int
    d_u: int
    eigvals: np.ndarray
    vectors: np.ndarray
    c_nu: float

    def __post_init__(self):
        object.__setattr__(self, "eigvals", np.asarray(self.eigvals, dtype=float))
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=float))

    def encode(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected last axis {self.dim}, got {u.shape[-1]}")
        return u @ self.vectors.T

    def decode(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.d_u:
            raise ValueError(f"expected last axis {self.d_u}, got {v.shape[-1]}")
        return v @ self.vectors

    def reconstruct(self, u: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(u))

    def tail_sum(self) -> float:
        return float(np.sum(self.eigvals[self.d_u :]))

    def energy_fraction(self) -> float:
        total = float(np.sum(self.eigvals))
        if total <= 0.0:
            raise ValueError("zero spectrum")
        return float(np.sum(self.eigvals[: self.d_u])) / total

    def weight_vector(self) -> np.ndarray:
        """Top-d_u eigenvalues normalized to unit l1 norm."""
        top = self.eigvals[: self.d_u]
        total = float(np.sum(top))
        if total <= 0.0:
            raise ValueError("zero spectrum")
        return top / total

    def save(self, prefix: str) -> None:
        manifest = {
            "kind": "pca_basis",
            "dim": self.dim,
            "n_samples": self.n_samples,
            "d_u": self.d_u,
            "c_nu": self.c_nu,
            "eigvals": self.eigvals,
            "dtype": "f64le",
            "vectors_file": os.path.basename(prefix) + ".bin",
        }
        with open(prefix + ".json", "w") as fh:
            fh.write(dumps_json17(manifest))
        with open(prefix + ".bin", "wb") as fh:
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def load(cls, prefix: str) -> "PCABasis":
        with open(prefix + ".json") as fh:
            manifest = json.load(fh)
        if manifest.get("kind") != "pca_basis":
            raise ValueError("not a pca-basis manifest")
        vecs_path = os.path.join(
            os.path.dirname(prefix) or ".", manifest["vectors_file"]
        )
        raw = np.fromfile(vecs_path, dtype="<f8")
        d_u, dim = manifest["d_u"], manifest["dim"]
        return cls(
            dim=dim,
            n_samples=manifest["n_samples"],
            d_u=d_u,
            eigvals=np.asarray(manifest["eigvals"], dtype=float),
            vectors=raw.reshape(d_u, dim),
            c_nu=manifest["c_nu"],
        )


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for row in out:
        scale = np.max(np.abs(row))
        if scale == 0.0:
            continue
        nz = np.nonzero(np.abs(row) > 1e-12 * scale)[0]
        if len(nz) and row[nz[0]] < 0.0:
            row *= -1.0
    return out


def _clip_spectrum(vals: np.ndarray) -> np.ndarray:
    floor = -_EIG_CLIP_REL * max(1.0, float(vals.max(initial=0.0)))
    if np.any(vals < floor):
        raise ValueError(f"covariance spectrum has negative value {vals.min():.3e}")
    return np.clip(vals, 0.0, None)


def _c_nu_empirical(gram: np.ndarray) -> float:
    # (1/N) sum ||u u^t - C||_F^2 = mean(diag(G)^2) - ||G||_F^2 / N^2.
    n = gram.shape[0]
    val = float(np.mean(np.diag(gram) ** 2) - np.sum(gram**2) / n**2)
    return float(np.sqrt(max(val, 0.0)))


def fit(samples: np.ndarray, d_u: int, method: str = "auto") -> PCABasis:
    """Eigenpairs of (1/N) sum u u^t, truncated at d_u.

    method: "direct" diagonalizes the dim x dim matrix, "gram" the N x N
    Gram matrix (same nonzero spectrum), "auto" picks the smaller problem.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or len(samples) < 1:
        raise ValueError("samples must be a nonempty (N, dim) array")
    n, dim = samples.shape
    if not (1 <= d_u <= min(n, dim)):
        raise ValueError(f"truncation {d_u} out of range for {n} x {dim} data")
    if method == "auto":
        method = "gram" if dim > n else "direct"

    gram = samples @ samples.T / n
    c_nu = _c_nu_empirical(gram)

    if method == "direct":
        cov = samples.T @ samples / n
        vals, vecs = np.linalg.eigh(cov)
        vals = _clip_spectrum(vals[::-1])[: min(n, dim)]
        vecs = vecs[:, ::-1][:, :d_u].T
    elif method == "gram":
        gvals, gvecs = np.linalg.eigh(gram)
        vals = _clip_spectrum(gvals[::-1])
        top = vals[:d_u]
        if np.any(top <= _EIG_CLIP_REL * max(1.0, vals[0])):
            raise ValueError("truncation exceeds numerical rank of the data")
        u = gvecs[:, ::-1][:, :d_u]
        vecs = (samples.T @ u / np.sqrt(n * top)).T
    else:
        raise ValueError(f"unknown method {method!r}")

    return PCABasis(
        dim=dim,
        n_samples=n,
        d_u=d_u,
        eigvals=vals,
        vectors=_sign_fix(vecs),
        c_nu=c_nu,
    )


def inn_rate_constants(lip_f: float, lip_f_inv: float, d: int, c_eps: float) -> tuple[float, float]:
    """Constants multiplying N^{-2/d} in the full error bounds."""
    c_nn = 2.0 * ((3.0 + lip_f**2) * d + 3.0 * c_eps**2)
    c_nn_prime = (
        2.0
        * lip_f**d
        * ((2.0 * (2.0 + lip_f) ** 2 + 1.0) * d + 2.0 * lip_f_inv * c_eps + 6.0)
    )
    return c_nn, c_nn_prime


def tail_bound_report(
    basis_x: PCABasis,
    basis_y: PCABasis,
    lip_f: float,
    lip_f_inv: float,
    n_samples: int,
    c_eps: float = 1.0,
) -> dict:
    """Evaluate the PCA-only and full (PCA + coupling-network) error bounds.

    PCA-only, forward:
        2 (lip_f^2 c_nu_x + c_nu_y) sqrt(d) / sqrt(N)
        + 2 (lip_f^2 tail_x + tail_y)
    Full bounds add 2 c_nn N^{-2/d} and double the PCA part.
    """
    if basis_x.d_u != basis_y.d_u:
        raise ValueError("bases must share the truncation level")
    d = basis_x.d_u
    root = np.sqrt(d) / np.sqrt(n_samples)
    tail_x, tail_y = basis_x.tail_sum(), basis_y.tail_sum()
    pca_fwd = 2.0 * (lip_f**2 * basis_x.c_nu + basis_y.c_nu) * root + 2.0 * (
        lip_f**2 * tail_x + tail_y
    )
    pca_inv = 2.0 * (lip_f_inv**2 * basis_y.c_nu + basis_x.c_nu) * root + 2.0 * (
        lip_f_inv**2 * tail_y + tail_x
    )
    c_nn, c_nn_prime = inn_rate_constants(lip_f, lip_f_inv, d, c_eps)
    rate = float(n_samples) ** (-2.0 / d)
    return {
        "d": d,
        "n_samples": n_samples,
        "tail_x": tail_x,
        "tail_y": tail_y,
        "c_nu_x": basis_x.c_nu,
        "c_nu_y": basis_y.c_nu,
        "pca_forward": pca_fwd,
        "pca_inverse": pca_inv,
        "c_nn": c_nn,
        "c_nn_prime": c_nn_prime,
        "full_forward": 2.0 * c_nn * rate + 2.0 * pca_fwd,
        "full_inverse": 2.0 * c_nn_prime * rate + 2.0 * pca_inv,
    }
