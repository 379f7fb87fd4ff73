"""Neural anisotropy directions.

The input-gradient covariance of a network at initialization is estimated by
Monte Carlo over fresh initializations and evaluation points, then
eigendecomposed; its eigenvectors sorted by decreasing eigenvalue are the NADs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import models
from .seeding import derived_seed, rng as derive_rng

INPUT_LAWS = ("normal", "zero")


class NadError(ValueError):
    pass


class EigenConvergenceError(ArithmeticError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(f"Jacobi did not converge in {sweeps} sweeps (relative off-diagonal norm {residual:.3e})")
        self.sweeps = sweeps
        self.residual = residual


@dataclass(frozen=True)
class NadEstimationConfig:
    n_inits: int = 512
    n_inputs_per_init: int = 4
    input_law: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if self.n_inits < 1 or self.n_inputs_per_init < 1:
            raise NadError("n_inits and n_inputs_per_init must be at least 1")
        if self.input_law not in INPUT_LAWS:
            raise NadError(f"input_law must be one of {INPUT_LAWS}, got {self.input_law!r}")

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class GradientCovariance:
    matrix: np.ndarray
    height: int
    width: int
    spec_hash: str = ""
    cfg_digest: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class NadBasis:
    vectors: np.ndarray  # (d, d), column k-1 is NAD k
    eigenvalues: np.ndarray  # descending
    height: int
    width: int
    spec_hash: str = ""
    cfg_digest: str = ""

    @property
    def d(self) -> int:
        return self.eigenvalues.size


# ---------------------------------------------------------------------------
# covariance estimation


def _evaluation_points(spec: models.ModelSpec, cfg: NadEstimationConfig, init_index: int) -> np.ndarray:
    shape = (cfg.n_inputs_per_init, *spec.input_shape)
    if cfg.input_law == "zero":
        return np.zeros(shape, dtype=np.float32)
    return derive_rng(cfg.seed, "nad:input", init_index).standard_normal(shape).astype(np.float32)


def init_seed(cfg: NadEstimationConfig, init_index: int) -> int:
    return derived_seed(cfg.seed, "nad:init", init_index)


def gradient_samples(spec: models.ModelSpec, cfg: NadEstimationConfig, init_index: int,
                     dtype=np.float32) -> np.ndarray:
    """The (n_inputs_per_init, d) input gradients contributed by one initialization."""
    params = models.build(spec, models.InitScheme(seed=init_seed(cfg, init_index)), dtype=dtype)
    x = _evaluation_points(spec, cfg, init_index)
    g = models.input_gradients(spec, params, x).reshape(cfg.n_inputs_per_init, -1)
    if not np.all(np.isfinite(g)):
        raise NadError(f"non-finite input gradient at init {init_index} (seed {init_seed(cfg, init_index)})")
    return g


def estimate_covariance(spec: models.ModelSpec, cfg: NadEstimationConfig | None = None,
                        threads: int = 1, chunk: int = 32, dtype=np.float32) -> GradientCovariance:
    """Monte Carlo estimate of E[∇x f ∇x fᵀ] over initializations (and evaluation points).

    Gradients are computed in ``dtype`` and accumulated in float64, chunk by
    chunk in init-index order, so the result does not depend on ``threads``.
    """
    cfg = cfg or NadEstimationConfig()
    if spec.input_shape[0] != 1:
        raise NadError(f"NADs are estimated on a single-channel input, got {spec.input_shape[0]} channels")
    _, h, w = spec.input_shape
    d = h * w
    acc = np.zeros((d, d), dtype=np.float64)

    def work(k: int) -> np.ndarray:
        return gradient_samples(spec, cfg, k, dtype=dtype)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for lo in range(0, cfg.n_inits, chunk):
            grads = list(pool.map(work, range(lo, min(lo + chunk, cfg.n_inits))))
            block = np.concatenate(grads).astype(np.float64)
            acc += block.T @ block
    n = cfg.n_inits * cfg.n_inputs_per_init
    c = acc / n
    c = (c + c.T) / 2
    meta = {"n_inits": cfg.n_inits, "n_inputs_per_init": cfg.n_inputs_per_init,
            "input_law": cfg.input_law, "seed": cfg.seed, "family": spec.family}
    return GradientCovariance(c, h, w, spec.hash, cfg.digest, meta)


# ---------------------------------------------------------------------------
# symmetric eigensolver


def round_robin_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair schedule of a round-robin tournament on n indices.

    Returns (ps, qs) of shape (rounds, n_pairs); row r lists the disjoint
    pairs (p < q) of round r, padded with -1 when n is odd. Every pair
    appears in exactly one round.
    """
    m = n + (n % 2)
    players = list(range(m))
    ps = np.full((max(m - 1, 1), m // 2), -1, dtype=np.int64)
    qs = np.full_like(ps, -1)
    for r in range(m - 1):
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps[r, i], qs[r, i] = min(a, b), max(a, b)
        players = [players[0], players[-1], *players[1:-1]]
    return ps, qs


@numba.njit(cache=True)
def _jacobi_sweep(a, vt, ps, qs):
    """One cyclic sweep in round-robin order, updating ``a`` and ``vt`` in place.

    The pairs of a round are disjoint, so their rotations commute and are
    applied together: one row-major pass for the column updates, then the
    row updates. ``vt`` holds eigenvectors as rows.
    """
    n = a.shape[0]
    rounds, k_pairs = ps.shape
    cs = np.empty(k_pairs)
    sn = np.empty(k_pairs)
    for r in range(rounds):
        for i in range(k_pairs):
            p = ps[r, i]
            q = qs[r, i]
            cs[i] = 1.0
            sn[i] = 0.0
            if p < 0:
                continue
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            sign = 1.0 if theta >= 0.0 else -1.0
            t = sign / (abs(theta) + math.hypot(theta, 1.0))
            cs[i] = 1.0 / math.sqrt(t * t + 1.0)
            sn[i] = t * cs[i]
        for k in range(n):
            for i in range(k_pairs):
                s = sn[i]
                if s == 0.0:
                    continue
                c = cs[i]
                p = ps[r, i]
                q = qs[r, i]
                akp = a[k, p]
                akq = a[k, q]
                a[k, p] = c * akp - s * akq
                a[k, q] = s * akp + c * akq
        for i in range(k_pairs):
            s = sn[i]
            if s == 0.0:
                continue
            c = cs[i]
            p = ps[r, i]
            q = qs[r, i]
            for k in range(n):
                apk = a[p, k]
                aqk = a[q, k]
                a[p, k] = c * apk - s * aqk
                a[q, k] = s * apk + c * aqk
            a[p, q] = 0.0
            a[q, p] = 0.0
            for k in range(n):
                vp = vt[p, k]
                vq = vt[q, k]
                vt[p, k] = c * vp - s * vq
                vt[q, k] = s * vp + c * vq


def _off_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def jacobi_eigh(c: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Each sweep visits every (p, q) once in round-robin order; iteration stops
    once the off-diagonal Frobenius norm is at most ``tol * ||C||_F``.
    Returns (eigenvalues, V) sorted by descending eigenvalue, ties kept in
    original index order, with each column's largest-magnitude entry made
    positive.
    """
    a = np.array(c, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NadError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = float(np.linalg.norm(a))
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(scale, 1e-300)):
        raise NadError("matrix is not symmetric")
    a = np.ascontiguousarray((a + a.T) / 2)
    vt = np.eye(n)
    ps, qs = round_robin_pairs(n)
    target = tol * scale
    off = _off_norm(a)
    sweeps = 0
    while off > target:
        if sweeps == max_sweeps:
            raise EigenConvergenceError(sweeps, off / scale)
        _jacobi_sweep(a, vt, ps, qs)
        a = (a + a.T) / 2
        sweeps += 1
        off = _off_norm(a)

    lam = np.diag(a).copy()
    order = np.lexsort((np.arange(n), -lam))
    return lam[order], _canonical_signs(vt[order].T.copy())


def _canonical_signs(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    # first entry within rounding of the column maximum decides the sign
    lead = np.argmax(mag >= mag.max(axis=0) * (1 - 1e-12), axis=0)
    signs = np.where(v[lead, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return v * signs


def eigendecompose(cov: GradientCovariance, tol: float = 1e-12, max_sweeps: int = 100) -> NadBasis:
    lam, v = jacobi_eigh(cov.matrix, tol=tol, max_sweeps=max_sweeps)
    return NadBasis(v, lam, cov.height, cov.width, cov.spec_hash, cov.cfg_digest)


def _check_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1) > 1e-6:
        raise NadError(f"direction must be a unit vector, got norm {norm:.9g}")
    return v


def alignment(cov: GradientCovariance | np.ndarray, v) -> float:
    """vᵀ C v for a unit vector v."""
    m = cov.matrix if isinstance(cov, GradientCovariance) else np.asarray(cov, dtype=np.float64)
    v = _check_unit(v)
    if v.size != m.shape[0]:
        raise NadError(f"direction has {v.size} entries, covariance is {m.shape[0]}x{m.shape[0]}")
    return float(v @ m @ v)


def nad_vector(basis: NadBasis, index: int) -> np.ndarray:
    """NAD ``index`` (1-based, 1 = largest eigenvalue) as a (1, H, W) array."""
    if not 1 <= index <= basis.d:
        raise IndexError(f"NAD index {index} out of range 1..{basis.d}")
    return basis.vectors[:, index - 1].reshape(1, basis.height, basis.width).copy()


# ---------------------------------------------------------------------------
# basis file

_NAD_MAGIC = b"ANISONAD"
_NAD_VERSION = 1
_NAD_HEADER = struct.Struct("<8sIIII32s32s")


def _hex32(h: str) -> bytes:
    return bytes.fromhex(h) if h else bytes(32)


def save_basis(path, basis: NadBasis) -> None:
    header = _NAD_HEADER.pack(_NAD_MAGIC, _NAD_VERSION, basis.d, basis.height, basis.width,
                              _hex32(basis.spec_hash), _hex32(basis.cfg_digest))
    body = np.asarray(basis.eigenvalues, dtype="<f8").tobytes() + \
        np.asarray(basis.vectors, dtype="<f8").tobytes(order="F")
    Path(path).write_bytes(header + body)


def load_basis(path) -> NadBasis:
    blob = Path(path).read_bytes()
    if len(blob) < _NAD_HEADER.size:
        raise NadError(f"{path}: truncated header")
    magic, version, d, h, w, spec_hash, cfg_digest = _NAD_HEADER.unpack_from(blob)
    if magic != _NAD_MAGIC:
        raise NadError(f"{path}: bad magic {magic!r}")
    if version != _NAD_VERSION:
        raise NadError(f"{path}: unsupported version {version}")
    if d != h * w:
        raise NadError(f"{path}: d={d} does not match {h}x{w}")
    off = _NAD_HEADER.size
    if len(blob) != off + 8 * (d + d * d):
        raise NadError(f"{path}: expected {off + 8 * (d + d * d)} bytes, found {len(blob)}")
    lam = np.frombuffer(blob, dtype="<f8", count=d, offset=off).astype(np.float64)
    vecs = np.frombuffer(blob, dtype="<f8", offset=off + 8 * d).reshape((d, d), order="F").astype(np.float64)
    return NadBasis(vecs, lam, h, w, spec_hash.hex(), cfg_digest.hex())
