"""Synthetic cortical-like cohorts with known atlas and deformations.

Geometric channels are smooth stripe patterns, functional channels are sums
of blobs. Each subject is drawn from the generative model: a large joint
field shared by both modalities, composed with small per-modality fields.
"""

import logging
from dataclasses import dataclass, field
from multiprocessing.dummy import Pool as ThreadPool
from typing import List

import numpy as np

from .deform import (
    DEFAULT_STEPS,
    VelocityField,
    compose,
    integrate,
    random_velocity,
    smooth_on_sphere,
    warp,
)
from .model import Atlas, DegenerateChannelError, SubjectRecord, standardize
from .sphere_grid import GridSpec, make_grid

logger = logging.getLogger("josa.synth")


@dataclass
class SynthConfig:
    grid: GridSpec = field(default_factory=lambda: make_grid(64, 128))
    n_subjects: int = 16
    geom_channels: int = 2
    func_channels: int = 1
    joint_scale: float = 6.0
    geom_scale: float = 1.5
    func_scale: float = 1.5
    smooth_px: float = 8.0
    geom_noise: float = 0.1
    func_noise: float = 0.3
    n_blobs: int = 6
    blob_size_px: float = 5.0
    offset_fraction: float = 1.0
    harmonics: int = 4
    steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.geom_channels < 1 or self.func_channels < 1:
            raise ValueError("at least one geometric and one functional channel")
        small = max(self.geom_scale, self.func_scale)
        if small > 0 and self.joint_scale <= small:
            raise ValueError("joint_scale must exceed the modality scales")
        if not 0 <= self.offset_fraction <= 1:
            raise ValueError("offset_fraction must be in [0, 1]")

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "grid"}
        out["grid"] = self.grid.to_dict()
        return out


@dataclass
class GroundTruth:
    id: str
    v_j: VelocityField
    v_g: VelocityField
    v_f: VelocityField
    offset: bool


@dataclass
class Cohort:
    atlas: Atlas
    subjects: List[SubjectRecord]
    truths: List[GroundTruth]
    config: SynthConfig


def _stripes(grid: GridSpec, rng, harmonics: int) -> np.ndarray:
    theta = grid.theta[:, None]
    phi = grid.phi[None, :]
    image = np.zeros(grid.shape)
    for _ in range(harmonics):
        m = rng.integers(1, harmonics + 2)
        n = rng.integers(0, harmonics + 1)
        amp = rng.uniform(0.5, 1.5)
        image += amp * np.cos(m * theta + rng.uniform(0, 2 * np.pi)) * np.cos(
            n * phi + rng.uniform(0, 2 * np.pi)
        )
    noise = smooth_on_sphere(rng.standard_normal(grid.shape), 3)
    return image + 0.3 * noise / max(noise.std(), 1e-12)


def _blobs(grid: GridSpec, rng, n_blobs: int, size_px: float) -> np.ndarray:
    theta = grid.theta[:, None]
    phi = grid.phi[None, :]
    width = size_px * grid.d_theta
    image = np.zeros(grid.shape)
    for _ in range(n_blobs):
        center_theta = rng.uniform(np.pi / 4, 3 * np.pi / 4)
        center_phi = rng.uniform(0, 2 * np.pi)
        cos_d = np.cos(theta) * np.cos(center_theta) + np.sin(theta) * np.sin(
            center_theta
        ) * np.cos(phi - center_phi)
        d = np.arccos(np.clip(cos_d, -1.0, 1.0))
        image += rng.uniform(0.5, 1.5) * np.exp(-np.square(d) / (2 * width ** 2))
    return image


def make_atlas(cfg: SynthConfig) -> Atlas:
    rng = np.random.default_rng([cfg.seed, 0])
    grid = cfg.grid
    geom = np.stack(
        [_stripes(grid, rng, cfg.harmonics) for _ in range(cfg.geom_channels)], axis=-1
    )
    func = np.stack(
        [_blobs(grid, rng, cfg.n_blobs, cfg.blob_size_px) for _ in range(cfg.func_channels)],
        axis=-1,
    )
    try:
        func = standardize(func)
    except DegenerateChannelError:
        # Without blobs there is nothing to standardize; fall back to a ramp.
        logger.warning("Functional atlas is constant, substituting a latitude ramp")
        ramp = 1e-3 * np.repeat(grid.theta[:, None], grid.width, axis=1)
        func = standardize(np.repeat(ramp[..., None], cfg.func_channels, axis=-1))
    return Atlas(standardize(geom), func, grid)


def subject_seed(cfg: SynthConfig, index: int) -> List[int]:
    return [cfg.seed, index + 1]


def sample_subject(atlas: Atlas, cfg: SynthConfig, seed, subject_id: str = "subject"):
    """Draw one subject from the forward model. Returns (record, ground truth);
    the record's velocities are left at zero for estimation."""
    rng = np.random.default_rng(seed)
    grid = atlas.grid

    v_j = random_velocity(grid, rng, cfg.joint_scale, cfg.smooth_px, cfg.steps)
    v_g = random_velocity(grid, rng, cfg.geom_scale, cfg.smooth_px, cfg.steps)
    offset = bool(rng.random() < cfg.offset_fraction)
    if offset:
        v_f = random_velocity(grid, rng, cfg.func_scale, cfg.smooth_px, cfg.steps)
    else:
        v_f = VelocityField(v_g.v.copy(), grid)

    phi_j = integrate(v_j, cfg.steps)
    geom = warp(atlas.geom, compose(integrate(v_g, cfg.steps), phi_j))
    func = warp(atlas.func, compose(integrate(v_f, cfg.steps), phi_j))
    if cfg.geom_noise > 0:
        geom = geom + cfg.geom_noise * rng.standard_normal(geom.shape)
    if cfg.func_noise > 0:
        func = func + cfg.func_noise * rng.standard_normal(func.shape)

    record = SubjectRecord(subject_id, geom, grid, func)
    return record, GroundTruth(subject_id, v_j, v_g, v_f, offset)


def make_cohort(cfg: SynthConfig, threads: int = 1) -> Cohort:
    atlas = make_atlas(cfg)

    def draw(index):
        return sample_subject(atlas, cfg, subject_seed(cfg, index), f"sub-{index:03d}")

    with ThreadPool(max(1, threads)) as pool:
        drawn = pool.map(draw, range(cfg.n_subjects))
    logger.info(
        "Generated %d subjects on a %dx%d grid", cfg.n_subjects, *cfg.grid.shape
    )
    return Cohort(atlas, [d[0] for d in drawn], [d[1] for d in drawn], cfg)
