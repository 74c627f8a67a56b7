"""Spherical projection of LiDAR clouds to range images, overlap ground
truth between scan pairs, and training-tuple mining.

A point cloud is an (N, 3) or (N, 4) float array in the sensor frame
(columns x, y, z[, intensity]).  Pixels of a range image hold the nearest
return in meters, or the sentinel -1.0 where no point landed.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError

SENTINEL = -1.0


@dataclass(frozen=True)
class ProjectionConfig:
    """Sensor image geometry: width/height in pixels, vertical field of view
    split into an upward and a downward half (radians), and the range cap."""

    w: int
    h: int
    f_up: float
    f_down: float
    r_max: float

    def __post_init__(self):
        if self.w < 2 or self.h < 2:
            raise ConfigError(f"image extents must be >= 2, got {self.w}x{self.h}")
        if self.f_up < 0 or self.f_down < 0 or self.f_up + self.f_down <= 0:
            raise ConfigError(
                f"vertical field of view must be positive, got up={self.f_up} down={self.f_down}"
            )
        if self.r_max <= 0:
            raise ConfigError(f"r_max must be positive, got {self.r_max}")

    @property
    def f(self) -> float:
        return self.f_up + self.f_down


_PROJECTION_KEYS = {
    "w": int, "h": int, "f_up": float, "f_down": float, "r_max": float,
}


def projection_from_kv(entries) -> ProjectionConfig:
    fields = {}
    for key, val in entries.items():
        if key not in _PROJECTION_KEYS:
            raise ContractError(f"unknown projection key {key!r}")
        try:
            fields[key] = _PROJECTION_KEYS[key](val)
        except ValueError:
            raise ContractError(f"bad value for {key}: {val!r}")
    missing = sorted(set(_PROJECTION_KEYS) - set(fields))
    if missing:
        raise ContractError(f"projection config is missing keys: {missing}")
    return ProjectionConfig(**fields)


def projection_pairs(cfg: ProjectionConfig):
    return [(key, getattr(cfg, key)) for key in _PROJECTION_KEYS]


@dataclass
class RangeImage:
    ranges: np.ndarray  # (h, w), meters, SENTINEL where no return
    r_max: float
    config: Optional[ProjectionConfig] = None

    @property
    def h(self) -> int:
        return self.ranges.shape[0]

    @property
    def w(self) -> int:
        return self.ranges.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.ranges > 0.0

    def network_input(self, scale: bool = True) -> np.ndarray:
        """(1, h, w) array for the model: sentinel pixels become 0, and
        ranges are divided by r_max when scaling is on."""
        x = np.where(self.ranges > 0.0, self.ranges, 0.0)
        if scale:
            x = x / self.r_max
        return x[None, :, :]


@dataclass(frozen=True)
class Pose:
    """Rigid transform from sensor frame to world frame."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ContractError(
                f"pose needs a 3x3 rotation and 3-vector, got {r.shape} and {t.shape}"
            )
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ContractError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractError("pose rotation is not proper (det != +1)")

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return points[:, :3] @ self.rotation.T + self.translation

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return (world - self.translation) @ self.rotation


@dataclass(frozen=True)
class OverlapLabel:
    query: int
    cand: int
    overlap: float


@dataclass(frozen=True)
class TrainingTuple:
    """One mined training unit: a query with sampled positives/negatives."""

    query: int
    positives: tuple
    negatives: tuple

    def __post_init__(self):
        if not self.positives or not self.negatives:
            raise ContractError(
                f"tuple for query {self.query} needs >=1 positive and >=1 negative"
            )
        if self.query in self.positives or self.query in self.negatives:
            raise ContractError(f"query {self.query} appears among its own candidates")


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a cloud about the sensor's vertical axis (counterclockwise)."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = points.copy()
    out[:, :3] = points[:, :3] @ rot.T
    return out


def project_points(points: np.ndarray, cfg: ProjectionConfig):
    """Vectorized image-plane projection.

    Returns (u, v, r, valid): pixel columns, pixel rows, ranges, and the mask
    of points that land inside the image within the range cap.  Column u wraps
    at the azimuth seam; row v is rejected outside [0, h).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        z = np.zeros(0)
        return z.astype(int), z.astype(int), z, z.astype(bool)
    x, y, zc = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.sqrt(x * x + y * y + zc * zc)
    hit = (r > 0.0) & (r <= cfg.r_max)
    safe_r = np.where(hit, r, 1.0)

    u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.w).astype(np.int64)
    u[u == cfg.w] = 0
    u = np.clip(u, 0, cfg.w - 1)

    pitch = np.arcsin(np.clip(zc / safe_r, -1.0, 1.0))
    v = np.floor((1.0 - (pitch + cfg.f_up) / cfg.f) * cfg.h).astype(np.int64)
    valid = hit & (v >= 0) & (v < cfg.h)
    return u, v, r, valid


def project_point(p, cfg: ProjectionConfig):
    """Single-point projection; None when the point is rejected."""
    u, v, r, valid = project_points(np.asarray(p, dtype=np.float64)[None, :], cfg)
    if not valid[0]:
        return None
    return int(u[0]), int(v[0]), float(r[0])


def build_range_image(points: np.ndarray, cfg: ProjectionConfig) -> RangeImage:
    """Project a cloud; pixel collisions keep the smallest range."""
    img = np.full((cfg.h, cfg.w), np.inf)
    u, v, r, valid = project_points(points, cfg)
    np.minimum.at(img, (v[valid], u[valid]), r[valid])
    img[~np.isfinite(img)] = SENTINEL
    return RangeImage(ranges=img, r_max=cfg.r_max, config=cfg)


def compute_overlap(
    ri_a: RangeImage,
    pose_a: Pose,
    points_b: np.ndarray,
    pose_b: Pose,
    eps_rel: float = 0.05,
) -> float:
    """Fraction of scan a's returns that scan b re-observes.

    Cloud b is moved into a's frame through the two poses and projected with
    a's sensor geometry; a pixel of a counts as overlapping when b's image
    holds a return there within a relative range tolerance.  Anchored on the
    query: overlap(a, b) and overlap(b, a) may differ.
    """
    if ri_a.config is None:
        raise ContractError("overlap needs the query image's projection config")
    valid_a = ri_a.valid
    n_valid = int(valid_a.sum())
    if n_valid == 0:
        return 0.0
    pts = np.asarray(points_b, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    local_a = pose_a.to_local(pose_b.to_world(pts))
    proj = build_range_image(local_a, ri_a.config)
    close = np.abs(proj.ranges - ri_a.ranges) <= eps_rel * ri_a.ranges
    agree = valid_a & proj.valid & close
    return float(agree.sum()) / n_valid


def build_tuples(labels, threshold: float, k_p: int, k_n: int, seed: int):
    """Mine training tuples from overlap labels.

    Labels store each unordered pair once; both directions feed the candidate
    pools.  Candidates above the threshold are positives, the rest negatives;
    up to k_p / k_n of each are kept by a seeded draw.  Queries lacking either
    kind of candidate are skipped.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    if k_p < 1 or k_n < 1:
        raise ContractError(f"k_p and k_n must be >= 1, got {k_p}, {k_n}")
    pools = defaultdict(dict)
    for lab in sorted(labels, key=lambda l: (l.query, l.cand)):
        if lab.query != lab.cand:
            pools[lab.query].setdefault(lab.cand, lab.overlap)
            pools[lab.cand].setdefault(lab.query, lab.overlap)

    rng = np.random.default_rng(seed)
    tuples = []
    for q in sorted(pools):
        pos = sorted(c for c, o in pools[q].items() if o > threshold)
        neg = sorted(c for c, o in pools[q].items() if o <= threshold)
        if not pos or not neg:
            continue
        pos_pick = [pos[i] for i in rng.permutation(len(pos))[:k_p]]
        neg_pick = [neg[i] for i in rng.permutation(len(neg))[:k_n]]
        tuples.append(
            TrainingTuple(query=q, positives=tuple(pos_pick), negatives=tuple(neg_pick))
        )
    return tuples
