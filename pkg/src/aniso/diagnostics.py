"""Channel-ablation accuracy and decision-boundary cross-sections."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .datagen import DatasetHandle, channel_blocks
from .training import evaluate_accuracy


class NoBoundaryError(ValueError):
    """The model's sign is constant over the whole cross-section window."""


@dataclass
class AblationReport:
    acc_both: float
    acc_block1: float
    acc_block2: float
    blocks: list[list[int]]
    provenance: dict = field(default_factory=dict)

    def row(self, run_id: str, nad_idx_1, nad_idx_2, seed) -> list:
        return [run_id, nad_idx_1, nad_idx_2, seed, _fmt(self.acc_both), _fmt(self.acc_block1), _fmt(self.acc_block2)]


ABLATION_HEADER = ["run_id", "nad_idx_1", "nad_idx_2", "seed", "acc_both", "acc_b1", "acc_b2"]


def _fmt(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.6f}"


def ablation_eval(spec: models.ModelSpec, params: models.ParamVector, data: DatasetHandle,
                  blocks: Sequence[Sequence[int]] | None = None) -> AblationReport:
    """Accuracy with all channels, with only block 1 kept, and with only block 2 kept."""
    blocks = [list(b) for b in (blocks if blocks is not None else channel_blocks(data))]
    if len(blocks) != 2:
        raise ValueError(f"expected two channel blocks, got {len(blocks)}")
    flat = sorted(c for b in blocks for c in b)
    if flat != list(range(data.channels)):
        raise ValueError(f"blocks {blocks} do not partition channels 0..{data.channels - 1}")
    return AblationReport(
        acc_both=evaluate_accuracy(spec, params, data),
        acc_block1=evaluate_accuracy(spec, params, data, keep_channels=blocks[0]),
        acc_block2=evaluate_accuracy(spec, params, data, keep_channels=blocks[1]),
        blocks=blocks,
        provenance=dict(data.provenance),
    )


# ---------------------------------------------------------------------------
# cross-sections


@dataclass(frozen=True, eq=False)
class PlaneSpec:
    u1: np.ndarray
    u2: np.ndarray
    base: np.ndarray | None = None
    half_range: float = 2.5
    resolution: int = 201

    def __post_init__(self):
        u1 = np.asarray(self.u1, dtype=np.float64)
        u2 = np.asarray(self.u2, dtype=np.float64)
        if u1.shape != u2.shape:
            raise ValueError(f"plane directions have different shapes {u1.shape} and {u2.shape}")
        for name, u in (("u1", u1), ("u2", u2)):
            if abs(np.linalg.norm(u) - 1) > 1e-6:
                raise ValueError(f"{name} must have unit norm, got {np.linalg.norm(u):.9g}")
        if abs(float(np.vdot(u1, u2))) > 1e-6:
            raise ValueError(f"plane directions are not orthogonal (u1.u2 = {np.vdot(u1, u2):.3g})")
        if self.resolution < 2 or not self.half_range > 0:
            raise ValueError("resolution must be >= 2 and half_range positive")
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)
        base = np.zeros_like(u1) if self.base is None else np.asarray(self.base, dtype=np.float64)
        if base.shape != u1.shape:
            raise ValueError(f"base point shape {base.shape} != direction shape {u1.shape}")
        object.__setattr__(self, "base", base)

    @classmethod
    def for_channels(cls, v1: np.ndarray, v2: np.ndarray, eps1: float, eps2: float,
                     resolution: int = 201) -> PlaneSpec:
        """The plane spanned by v1 in channel 0 and v2 in channel 1 of a two-channel input."""
        v1 = np.asarray(v1, dtype=np.float64).reshape(1, *np.shape(v1)[-2:])
        v2 = np.asarray(v2, dtype=np.float64).reshape(1, *np.shape(v2)[-2:])
        zeros = np.zeros_like(v1)
        return cls(np.concatenate([v1, zeros]), np.concatenate([zeros, v2]),
                   half_range=2.5 * max(eps1, eps2), resolution=resolution)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_range, self.half_range, self.resolution)


@dataclass(frozen=True, eq=False)
class CrossSection:
    a: np.ndarray  # coordinates along u1, one per grid column
    b: np.ndarray  # coordinates along u2, one per grid row
    logits: np.ndarray  # (len(b), len(a))
    boundary: np.ndarray  # (M, 2) points (a, b) on the zero level set

    @property
    def signs(self) -> np.ndarray:
        return models.classify(self.logits)

    @property
    def tilt_deg(self) -> float:
        return tilt_angle(self)


def cross_section(spec: models.ModelSpec, params: models.ParamVector, plane: PlaneSpec,
                  rows_per_batch: int | None = None) -> CrossSection:
    """Evaluate the logit on base + a*u1 + b*u2 over the plane grid (in float64)."""
    if plane.u1.shape != spec.input_shape:
        raise ValueError(f"plane lives in shape {plane.u1.shape}, model input is {spec.input_shape}")
    p64 = params.astype(np.float64)
    axis = plane.axis
    res = plane.resolution
    if rows_per_batch is None:
        rows_per_batch = max(1, 2_000_000 // (res * spec.input_dim))
    logits = np.empty((res, res))
    for lo in range(0, res, rows_per_batch):
        bs = axis[lo:lo + rows_per_batch]
        pts = (plane.base[None, None]
               + axis[None, :, None, None, None] * plane.u1[None, None]
               + bs[:, None, None, None, None] * plane.u2[None, None])
        logits[lo:lo + bs.size] = models.predict(spec, p64, pts.reshape(-1, *spec.input_shape)).reshape(bs.size, res)
    return CrossSection(axis.copy(), axis.copy(), logits, boundary_points(axis, axis, logits))


def _crossings(coord: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated zero crossings along the last axis; returns (line index, coordinate)."""
    pos = values >= 0
    line, k = np.nonzero(pos[..., :-1] != pos[..., 1:])
    f0, f1 = values[line, k], values[line, k + 1]
    frac = f0 / (f0 - f1)
    return line, coord[k] + frac * (coord[k + 1] - coord[k])


def boundary_points(a: np.ndarray, b: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Sign-change points scanned along each column (in b) and each row (in a)."""
    col, b_at = _crossings(b, logits.T)
    row, a_at = _crossings(a, logits)
    pts = np.concatenate([np.stack([a[col], b_at], axis=1), np.stack([a_at, b[row]], axis=1)])
    if pts.size == 0:
        return np.zeros((0, 2))
    return np.unique(pts, axis=0)


def tilt_angle(cs: CrossSection | np.ndarray) -> float:
    """Angle in [0, 180) of the total-least-squares line through the boundary, from the u1 axis."""
    if isinstance(cs, CrossSection):
        if np.all(cs.signs == cs.signs.flat[0]):
            raise NoBoundaryError("the sign of the logit is constant over the window")
        pts = cs.boundary
    else:
        pts = np.asarray(cs, dtype=np.float64)
    if len(pts) < 2:
        raise NoBoundaryError(f"need at least 2 boundary points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    dx, dy = vt[0]
    angle = math.degrees(math.atan2(dy, dx)) % 180.0
    return 0.0 if angle >= 180.0 - 1e-12 else angle


def boundary_normal(spec: models.ModelSpec, params: models.ParamVector, plane: PlaneSpec) -> tuple[float, float]:
    """In-plane gradient (df/da, df/db) at the plane's base point."""
    g = models.input_gradients(spec, params.astype(np.float64), plane.base[None])[0]
    return float(np.vdot(g, plane.u1)), float(np.vdot(g, plane.u2))


def linear_tilt(w: np.ndarray, plane: PlaneSpec) -> float:
    """Closed-form boundary angle for a linear model with weights ``w``."""
    w1, w2 = float(np.vdot(w, plane.u1)), float(np.vdot(w, plane.u2))
    return math.degrees(math.atan2(w1, -w2)) % 180.0


# ---------------------------------------------------------------------------
# export


def write_cross_section_csv(path, cs: CrossSection) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "b", "logit"])
        for j, bj in enumerate(cs.b):
            for i, ai in enumerate(cs.a):
                w.writerow([f"{ai:.6f}", f"{bj:.6f}", repr(float(cs.logits[j, i]))])


def write_pgm(path, cs: CrossSection) -> None:
    """Binary PGM of the sign grid: 255 positive, 0 negative; the top row is the largest b."""
    write_pgm_image(path, np.where(cs.signs[::-1] > 0, 255, 0).astype(np.uint8))


def write_pgm_image(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(blob, dtype=np.uint8, offset=m.end()).reshape(h, w)


def write_ablation_csv(path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER + ["status"])
        w.writerows(rows)
