"""Closed-form linear maps from image-embedding space to text-embedding space.

The map ``L`` acts on column vectors (``L @ v``).  With the pairs stacked
as rows ``V`` (n, d) and ``E`` (n, d) the least-squares problem is
``min ||V L^T - E||_F^2 + lam ||L||_F^2``, solved through the normal
equations ``(V^T V + lam I) L^T = V^T E``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .embedio import PreprocessStats
from .errors import DegenerateInputError, DimensionError, FormatError, SingularSystemError

logger = logging.getLogger(__name__)

METHODS = ("ols", "ridge", "procrustes")
_METHOD_TAG = {"ols": 0, "ridge": 1, "procrustes": 2}
_TAG_METHOD = {v: k for k, v in _METHOD_TAG.items()}
MAP_MAGIC = b"MAP1"

COND_WARN = 1e8
# above this the Gram matrix is treated as numerically rank deficient
COND_FALLBACK = 1e12


@dataclass(frozen=True)
class MappingModel:
    matrix: np.ndarray
    method: str
    lam: float
    stats: PreprocessStats | None = None

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_params(self) -> int:
        return self.dim * self.dim

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown mapping method {self.method!r}")
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"mapping matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("mapping matrix has non-finite entries")


def _as_matrices(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Accept a (V, E) tuple of arrays or a sequence of (v, e) pairs."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray) \
            and pairs[0].ndim == 2:
        v, e = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            return np.zeros((0, 0)), np.zeros((0, 0))
        v = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        e = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    v = np.asarray(v, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if v.shape != e.shape:
        raise DimensionError(f"input shape {v.shape} != target shape {e.shape}")
    return v, e


def _min_norm_solve(v: np.ndarray, e: np.ndarray) -> np.ndarray:
    # pseudoinverse through the SVD of V: L^T = W S^+ U^T E
    u, s, wt = np.linalg.svd(v, full_matrices=False)
    cutoff = s.max() * max(v.shape) * np.finfo(np.float64).eps if s.size else 0.0
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (wt.T * inv) @ (u.T @ e)


def fit_ols(pairs, lam: float = 0.0, *, allow_pinv: bool = True,
            stats: PreprocessStats | None = None) -> MappingModel:
    """Least-squares (``lam == 0``) or ridge (``lam > 0``) map in closed form.

    Uses a Cholesky factorisation of the regularised Gram matrix; when
    ``lam == 0`` and the Gram matrix is rank deficient it falls back to the
    minimum-Frobenius-norm solution, or raises ``SingularSystemError`` if
    ``allow_pinv`` is False.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be a non-negative real, got {lam}")
    v, e = _as_matrices(pairs)
    if v.shape[0] == 0:
        raise DegenerateInputError("fit needs at least one pair")
    d = v.shape[1]
    gram = v.T @ v
    if lam > 0:
        gram[np.diag_indices(d)] += lam
    rhs = v.T @ e

    eig = np.linalg.eigvalsh(gram)
    top = eig[-1]
    cond = np.inf if eig[0] <= 0 else top / eig[0]
    if cond > COND_WARN:
        logger.warning("normal equations are ill-conditioned (cond=%.3g)", cond)

    lt = None
    if top > 0 and cond <= COND_FALLBACK:
        try:
            lt = linalg.cho_solve(linalg.cho_factor(gram, lower=False), rhs)
        except linalg.LinAlgError:
            lt = None
    if lt is None:
        if lam > 0:
            # regularised Gram is positive definite in exact arithmetic
            lt = linalg.solve(gram, rhs, assume_a="sym")
        elif allow_pinv:
            lt = _min_norm_solve(v, e)
        else:
            raise SingularSystemError(f"rank-deficient design (cond={cond:.3g})")
    return MappingModel(np.ascontiguousarray(lt.T), "ridge" if lam > 0 else "ols", float(lam),
                        stats)


def fit_procrustes(pairs, *, stats: PreprocessStats | None = None) -> MappingModel:
    """Orthogonal map minimising the summed squared residual.

    With ``M = E^T V`` (sum of ``e v^T``) and ``M = U S W^T``, the optimum
    is ``U W^T``.
    """
    v, e = _as_matrices(pairs)
    if v.shape[0] == 0:
        raise DegenerateInputError("fit needs at least one pair")
    cross = e.T @ v
    if not np.any(cross):
        raise DegenerateInputError("cross-covariance is identically zero")
    u, _, wt = np.linalg.svd(cross)
    return MappingModel(np.ascontiguousarray(u @ wt), "procrustes", 0.0, stats)


def fit(pairs, method: str = "ols", lam: float = 0.0, **kw) -> MappingModel:
    if method == "procrustes":
        return fit_procrustes(pairs, stats=kw.get("stats"))
    if method == "ols":
        return fit_ols(pairs, 0.0 if lam is None else lam, **kw)
    if method == "ridge":
        if lam <= 0:
            raise ValueError("ridge needs lambda > 0")
        return fit_ols(pairs, lam, **kw)
    raise ValueError(f"unknown mapping method {method!r}")


def apply_map(model: MappingModel, v) -> np.ndarray:
    """``L @ v`` for one vector or ``V @ L^T`` for a row matrix."""
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if v.shape[-1] != model.dim:
        raise DimensionError(f"vector dim {v.shape[-1]} != map dim {model.dim}")
    if v.ndim == 1:
        return model.matrix @ v
    return v @ model.matrix.T


def residual(model: MappingModel, pairs) -> float:
    v, e = _as_matrices(pairs)
    if v.shape[0] == 0:
        return 0.0
    if v.shape[1] != model.dim:
        raise DimensionError(f"pair dim {v.shape[1]} != map dim {model.dim}")
    diff = v @ model.matrix.T - e
    return float(np.sum(diff * diff))


def orthogonality_error(model: MappingModel) -> float:
    """max |L^T L - I| entrywise."""
    m = model.matrix
    return float(np.max(np.abs(m.T @ m - np.eye(model.dim))))


# -- persistence -------------------------------------------------------------

def save_model(path, model: MappingModel) -> None:
    """``MAP1 | u32 d | u8 tag | f64 lam | d*d f64 | 2*d f64 means | u8 center | u8 normalize``."""
    d = model.dim
    stats = model.stats or PreprocessStats(np.zeros(d), np.zeros(d), False, False)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIBd", MAP_MAGIC, d, _METHOD_TAG[model.method], model.lam))
        fh.write(np.ascontiguousarray(model.matrix, dtype="<f8").tobytes())
        fh.write(np.asarray(stats.image_mean, dtype="<f8").tobytes())
        fh.write(np.asarray(stats.text_mean, dtype="<f8").tobytes())
        fh.write(struct.pack("<BB", int(stats.center), int(stats.normalize)))


def load_model(path) -> MappingModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sIBd")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated header")
    magic, d, tag, lam = head.unpack_from(raw)
    if magic != MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if tag not in _TAG_METHOD:
        raise FormatError(f"{path}: unknown method tag {tag}")
    expected = head.size + 8 * (d * d + 2 * d) + 2
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    off = head.size
    matrix = np.frombuffer(raw, "<f8", d * d, off).reshape(d, d).astype(np.float64)
    off += 8 * d * d
    image_mean = np.frombuffer(raw, "<f8", d, off).astype(np.float64)
    off += 8 * d
    text_mean = np.frombuffer(raw, "<f8", d, off).astype(np.float64)
    off += 8 * d
    center, normalize = struct.unpack_from("<BB", raw, off)
    stats = PreprocessStats(image_mean, text_mean, bool(center), bool(normalize))
    return MappingModel(matrix, _TAG_METHOD[tag], float(lam), stats)

