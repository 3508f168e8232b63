"""Seeded synthetic scene pairs with known ground-truth pose.

A scene is a few meters across and built from planes, boxes and cylinders so
that the usual 0.1 / 0.2 distance thresholds are meaningful without
rescaling. Points are sampled once; source and target are two overlapping
slabs of that sample, and the target is moved by a random rigid transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, ParameterError
from .geom import RigidTransform, apply_transform, random_rotation

STRUCTURES = ("room", "corridor", "boxes")
MAX_CROP_RETRIES = 50
OVERLAP_TOL = 0.05


@dataclass
class SyntheticScene:
    source: np.ndarray
    target: np.ndarray
    gt: RigidTransform
    overlap: float
    noise_sigma: float


def _rect(origin, u, v):
    origin, u, v = (np.asarray(x, dtype=np.float64) for x in (origin, u, v))
    area = float(np.linalg.norm(np.cross(u, v)))

    def sample(rng, n):
        a, b = rng.random((2, n, 1))
        return origin + a * u + b * v

    return area, sample


def _box(center, size, yaw):
    cx, cy, cz = center
    sx, sy, sz = size
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0]) * sx
    ey = np.array([-s, c, 0.0]) * sy
    ez = np.array([0.0, 0.0, sz])
    o = np.array([cx, cy, cz]) - ex / 2 - ey / 2
    return [
        _rect(o + ez, ex, ey),
        _rect(o, ex, ez), _rect(o + ey, ex, ez),
        _rect(o, ey, ez), _rect(o + ex, ey, ez),
    ]


def _cylinder(center, radius, height):
    center = np.asarray(center, dtype=np.float64)

    def side(rng, n):
        th = rng.random(n) * 2 * np.pi
        z = rng.random(n) * height
        return center + np.stack([radius * np.cos(th), radius * np.sin(th), z], 1)

    def top(rng, n):
        th = rng.random(n) * 2 * np.pi
        r = radius * np.sqrt(rng.random(n))
        return center + np.stack([r * np.cos(th), r * np.sin(th), np.full(n, height)], 1)

    return [(2 * np.pi * radius * height, side), (np.pi * radius ** 2, top)]


def _layout(structure: str, rng: np.random.Generator):
    if structure == "room":
        w, d, h = 3.0, 3.0, 1.5
        parts = [_rect([0, 0, 0], [w, 0, 0], [0, d, 0]),
                 _rect([0, 0, 0], [w, 0, 0], [0, 0, h]),
                 _rect([0, 0, 0], [0, d, 0], [0, 0, h])]
        n_boxes, n_cyl = 5, 2
    elif structure == "corridor":
        w, d, h = 4.0, 1.6, 1.2
        parts = [_rect([0, 0, 0], [w, 0, 0], [0, d, 0]),
                 _rect([0, 0, 0], [w, 0, 0], [0, 0, h]),
                 _rect([0, d, 0], [w, 0, 0], [0, 0, h])]
        n_boxes, n_cyl = 4, 2
    elif structure == "boxes":
        w, d, h = 3.0, 3.0, 1.0
        parts = [_rect([0, 0, 0], [w, 0, 0], [0, d, 0])]
        n_boxes, n_cyl = 8, 1
    else:
        raise ParameterError(f"unknown structure {structure!r}; choose from {STRUCTURES}")
    margin = 0.35
    for _ in range(n_boxes):
        size = rng.uniform([0.25, 0.25, 0.2], [0.7, 0.7, 0.9])
        cx, cy = rng.uniform(margin, [w - margin, d - margin])
        parts += _box([cx, cy, 0.0], size, rng.uniform(0, np.pi / 2))
    for _ in range(n_cyl):
        cx, cy = rng.uniform(margin, [w - margin, d - margin])
        parts += _cylinder([cx, cy, 0.0], rng.uniform(0.08, 0.2), rng.uniform(0.4, 1.1))
    return parts


def sample_surfaces(parts, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array([a for a, _ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([fn(rng, c) for (_, fn), c in zip(parts, counts) if c])


def measure_overlap(source, target, gt: RigidTransform, radius: float) -> float:
    """Fraction of source points with a target point within ``radius`` under ``gt``."""
    if len(source) == 0 or len(target) == 0:
        return 0.0
    d, _ = cKDTree(target).query(apply_transform(gt, source), k=1)
    return float((d <= radius).mean())


def synth_scene(seed: int, n_points: int = 5000, overlap_target: float = 0.6,
                noise_sigma: float = 0.005, structure: str = "room",
                base_voxel: float = 0.03) -> SyntheticScene:
    """Generate a deterministic scene pair whose measured overlap is within 0.05 of the target.

    Overlap is the fraction of source points with a target point within
    ``2 * base_voxel`` under the ground-truth motion.
    """
    if not 0.1 < overlap_target <= 1.0:
        raise ParameterError("overlap_target must lie in (0.1, 1]")
    if n_points < 200:
        raise ParameterError("n_points must be >= 200")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    pts = sample_surfaces(_layout(structure, rng), n_points, rng)
    pts -= pts.mean(0)
    gt = RigidTransform(random_rotation(rng), rng.uniform(-1.0, 1.0, 3))
    if noise_sigma > 0:
        src_noise = rng.normal(0.0, noise_sigma, pts.shape)
        noise = rng.normal(0.0, noise_sigma, pts.shape)
    else:
        src_noise = noise = np.zeros_like(pts)
    radius = 2.0 * base_voxel

    if overlap_target >= 1.0:
        source = pts + src_noise
        target = apply_transform(gt, pts) + noise
        return SyntheticScene(source, target, gt, measure_overlap(source, target, gt, radius), noise_sigma)

    frac_src = (1.0 + overlap_target) / 2.0
    for _ in range(MAX_CROP_RETRIES):
        axis = rng.standard_normal(3)
        axis[2] *= 0.3  # favor near-horizontal cuts so each slab keeps floor and walls
        axis /= np.linalg.norm(axis)
        proj = pts @ axis
        order = np.argsort(proj, kind="stable")
        n = len(pts)
        src_idx = np.sort(order[: int(round(frac_src * n))])
        source = pts[src_idx] + src_noise[src_idx]
        # shrink the target start until the measured overlap reaches the target
        lo, hi = 0.0, frac_src
        for _ in range(30):
            mid = (lo + hi) / 2.0
            tgt_idx = np.sort(order[int(round(mid * n)):])
            target = apply_transform(gt, pts[tgt_idx]) + noise[tgt_idx]
            overlap = measure_overlap(source, target, gt, radius)
            if abs(overlap - overlap_target) <= OVERLAP_TOL / 2:
                break
            if overlap > overlap_target:
                lo = mid
            else:
                hi = mid
        if abs(overlap - overlap_target) <= OVERLAP_TOL:
            return SyntheticScene(source, target, gt, overlap, noise_sigma)
    raise DegenerateInputError(f"could not reach overlap {overlap_target} in {MAX_CROP_RETRIES} crops")
