"""Generative model: atlas, subjects, and the terms of the objective.

A subject's geometric image is the atlas warped by the joint field φ_j and
then by the geometric field φ_g; the functional image likewise through φ_f.
The objective is the negative log-likelihood of that model plus the
deformation priors.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Optional

import numpy as np

from .deform import (
    DEFAULT_STEPS,
    DeformationField,
    VelocityField,
    compose,
    integrate,
    random_velocity,
    spatial_gradient,
    warp,
)
from .sphere_grid import (
    AreaWeights,
    GridSpec,
    ShapeMismatchError,
    area_weights,
    make_grid,
    weighted_norm_sq,
)

logger = logging.getLogger("josa.model")

TERMS = ("geom", "func", "reg_j", "reg_g", "reg_f", "centrality")


class DegenerateChannelError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


def _channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image[..., None] if image.ndim == 2 else image


@dataclass
class Atlas:
    geom: np.ndarray
    func: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.geom = _channels(self.geom)
        self.func = _channels(self.func)
        for name in ("geom", "func"):
            image = getattr(self, name)
            if image.shape[:2] != self.grid.shape:
                raise ShapeMismatchError(
                    f"Atlas {name} shape {image.shape} does not match {self.grid.shape}"
                )
            if not np.all(np.isfinite(image)):
                raise ValueError(f"Atlas {name} channels contain non-finite values")

    def copy(self) -> "Atlas":
        return Atlas(self.geom.copy(), self.func.copy(), self.grid)


@dataclass
class SubjectRecord:
    id: str
    geom: np.ndarray
    grid: GridSpec
    func: Optional[np.ndarray] = None
    v_j: Optional[VelocityField] = None
    v_g: Optional[VelocityField] = None
    v_f: Optional[VelocityField] = None

    def __post_init__(self):
        self.geom = _channels(self.geom)
        if self.func is not None:
            self.func = _channels(self.func)
        for image in (self.geom, self.func):
            if image is not None and image.shape[:2] != self.grid.shape:
                raise ShapeMismatchError(
                    f"Subject {self.id} image shape {image.shape} does not match "
                    f"{self.grid.shape}"
                )
        for name in ("v_j", "v_g", "v_f"):
            if getattr(self, name) is None:
                setattr(self, name, VelocityField.zeros(self.grid))

    @property
    def has_func(self) -> bool:
        return self.func is not None

    def with_velocities(self, v_j, v_g, v_f) -> "SubjectRecord":
        return replace(self, v_j=v_j, v_g=v_g, v_f=v_f)

    def check_compatible(self, atlas: Atlas):
        if self.grid != atlas.grid:
            raise ShapeMismatchError(f"Subject {self.id} is on a different grid")
        if self.geom.shape[-1] != atlas.geom.shape[-1]:
            raise ShapeMismatchError(
                f"Subject {self.id} has {self.geom.shape[-1]} geometric channels, "
                f"atlas has {atlas.geom.shape[-1]}"
            )
        if self.has_func and self.func.shape[-1] != atlas.func.shape[-1]:
            raise ShapeMismatchError(
                f"Subject {self.id} has {self.func.shape[-1]} functional channels, "
                f"atlas has {atlas.func.shape[-1]}"
            )


def _param(default, help):
    return field(default=default, metadata={"help": help})


@dataclass
class Hyperparams:
    lambda_j: float = _param(0.1, "gradient penalty on the joint field")
    lambda_g: float = _param(0.2, "gradient penalty on the geometric field")
    lambda_f: float = _param(0.2, "gradient penalty on the functional field")
    alpha_j: float = _param(0.01, "centrality weight on the mean joint displacement")
    w_func: float = _param(0.7, "weight of the functional data term")
    w_geom: float = _param(0.3, "weight of the geometric data term")
    sigma_aug_deform: float = _param(4.0, "augmentation displacement RMS (px)")
    sigma_noise_geom: float = _param(1.0, "augmentation noise on geometric channels")
    sigma_noise_func: float = _param(6.0, "augmentation noise on functional channels")
    aug_smooth_px: float = _param(8.0, "smoothing width of augmentation fields (px)")
    steps: int = _param(DEFAULT_STEPS, "scaling-and-squaring steps")
    lr0: float = _param(1e-3, "initial learning rate")
    lr_floor: float = _param(1e-4, "learning rate at the end of the linear decay")
    decay_epochs: int = _param(500, "epochs of linear learning-rate decay")
    plateau_factor: float = _param(0.9, "learning-rate factor per plateau")
    plateau_patience: int = _param(100, "epochs without improvement per plateau")

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if abs(self.w_func + self.w_geom - 1.0) > 1e-9:
            raise ValueError("w_func and w_geom must sum to 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def standardize(features: np.ndarray) -> np.ndarray:
    """Subtract each channel's median, then divide by its standard deviation."""
    x = np.asarray(features, dtype=float)
    squeeze = x.ndim == 2
    x = _channels(x)
    out = np.empty_like(x)
    for ch in range(x.shape[-1]):
        channel = x[..., ch]
        std = channel.std()
        if std < 1e-12:
            raise DegenerateChannelError(f"Channel {ch} has zero standard deviation")
        out[..., ch] = (channel - np.median(channel)) / std
    return out[..., 0] if squeeze else out


def gradient_energy(u: np.ndarray, weights: AreaWeights) -> float:
    return weighted_norm_sq(spatial_gradient(u), weights)


def data_loss(
    subject_img: np.ndarray,
    atlas_img: np.ndarray,
    phi_modality: DeformationField,
    phi_j: DeformationField,
    weights: AreaWeights,
) -> float:
    """Mismatch evaluated both in subject space and in atlas space."""
    psi = compose(phi_modality, phi_j)
    psi_inv = compose(phi_j.inverse(), phi_modality.inverse())
    return _data_term(subject_img, atlas_img, psi, psi_inv, weights)


def _data_term(subject_img, atlas_img, psi, psi_inv, weights) -> float:
    in_subject = subject_img - warp(atlas_img, psi)
    in_atlas = warp(subject_img, psi_inv) - atlas_img
    return 0.5 * (weighted_norm_sq(in_subject, weights) + weighted_norm_sq(in_atlas, weights))


def reg_loss(u_j, u_g, u_f, hp: Hyperparams, weights: AreaWeights) -> float:
    return (
        hp.lambda_j * gradient_energy(u_j, weights)
        + hp.lambda_g * gradient_energy(u_g, weights)
        + hp.lambda_f * gradient_energy(u_f, weights)
    )


def centrality_loss(u_j_all: List[np.ndarray], alpha_j: float, weights) -> float:
    if not len(u_j_all):
        raise EmptyBatchError("Centrality needs at least one subject")
    mean = np.mean(np.stack(u_j_all), axis=0)
    return alpha_j * weighted_norm_sq(mean, weights)


@dataclass
class SubjectFlows:
    j: DeformationField
    g: DeformationField
    f: DeformationField

    def modality(self, name: str) -> DeformationField:
        return self.g if name == "geom" else self.f


def subject_flows(
    record: SubjectRecord, hp: Hyperparams, modality_fields: bool = True
) -> SubjectFlows:
    phi_j = integrate(record.v_j, hp.steps)
    if not modality_fields:
        identity = DeformationField.identity(record.grid)
        return SubjectFlows(phi_j, identity, identity)
    return SubjectFlows(
        phi_j, integrate(record.v_g, hp.steps), integrate(record.v_f, hp.steps)
    )


@dataclass
class LossBreakdown:
    total: float
    terms: Dict[str, float]

    def to_dict(self):
        return {"total": self.total, **self.terms}


def total_loss(
    batch: List[SubjectRecord],
    atlas: Atlas,
    hp: Hyperparams,
    modality_fields: bool = True,
) -> LossBreakdown:
    if not batch:
        raise EmptyBatchError("Cannot evaluate the loss of an empty batch")
    weights = area_weights(atlas.grid)
    terms = dict.fromkeys(TERMS, 0.0)
    u_j_all = []
    for record in batch:
        record.check_compatible(atlas)
        flows = subject_flows(record, hp, modality_fields)
        u_j_all.append(flows.j.u)
        terms["geom"] += hp.w_geom * data_loss(
            record.geom, atlas.geom, flows.g, flows.j, weights
        )
        if record.has_func:
            terms["func"] += hp.w_func * data_loss(
                record.func, atlas.func, flows.f, flows.j, weights
            )
        terms["reg_j"] += hp.lambda_j * gradient_energy(flows.j.u, weights)
        if modality_fields:
            terms["reg_g"] += hp.lambda_g * gradient_energy(flows.g.u, weights)
            terms["reg_f"] += hp.lambda_f * gradient_energy(flows.f.u, weights)
    terms["centrality"] = centrality_loss(u_j_all, hp.alpha_j, weights)
    return LossBreakdown(sum(terms.values()), terms)


def augment(subject: SubjectRecord, seed, hp: Hyperparams) -> SubjectRecord:
    """Random smooth deformation of every present channel, then additive noise.

    The deformation is isotropic on the sphere: its physical displacement RMS,
    measured with sin(θ) area weights, is ``sigma_aug_deform`` pixels.
    """
    rng = np.random.default_rng(seed)
    geom = subject.geom.copy()
    func = None if subject.func is None else subject.func.copy()

    if hp.sigma_aug_deform > 0:
        v = random_velocity(
            subject.grid,
            rng,
            hp.sigma_aug_deform,
            hp.aug_smooth_px,
            hp.steps,
            physical=True,
        )
        phi = integrate(v, hp.steps)
        geom = warp(geom, phi)
        if func is not None:
            func = warp(func, phi)

    if hp.sigma_noise_geom > 0:
        geom = geom + rng.normal(0.0, hp.sigma_noise_geom, geom.shape)
    if func is not None and hp.sigma_noise_func > 0:
        func = func + rng.normal(0.0, hp.sigma_noise_func, func.shape)
    return replace(subject, geom=geom, func=func)


@dataclass
class LikelihoodReport:
    sigma: float
    trials: int
    expected_variance: float
    empirical_variance: float
    relative_error: float

    def to_dict(self):
        return dict(self.__dict__)


def verify_marginal_likelihood(
    sigma: float,
    trials: int,
    seed,
    grid: Optional[GridSpec] = None,
    phi_j: Optional[DeformationField] = None,
    chunk: int = 10000,
) -> LikelihoodReport:
    """Monte-Carlo check that chaining the latent joint image and the geometric
    observation gives a composite variance of 2σ² about φ_j∘A (φ_g = Id)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if trials < 1000:
        raise ValueError("at least 1000 trials are required")
    grid = grid or make_grid(4, 8)
    rng = np.random.default_rng(seed)
    phi_j = phi_j or DeformationField.identity(grid)
    phi_g = DeformationField.identity(grid)
    mean = warp(rng.standard_normal(grid.shape), phi_j)[..., None]

    sum_sq = np.zeros(grid.shape)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        joint = mean + sigma * rng.standard_normal(grid.shape + (n,))
        observed = warp(joint, phi_g) + sigma * rng.standard_normal(grid.shape + (n,))
        sum_sq += np.sum(np.square(observed - mean), axis=-1)
        done += n

    expected = 2 * sigma ** 2
    empirical = float(np.mean(sum_sq / trials))
    report = LikelihoodReport(
        sigma, trials, expected, empirical, abs(empirical - expected) / expected
    )
    logger.info(
        "Composite variance %.6f vs expected %.6f (%d trials)",
        empirical,
        expected,
        trials,
    )
    return report


def mean_images(images: Iterable[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(list(images)), axis=0)
