"""Gradients of the objective, Adam, the learning-rate schedule and the fit loop.

Velocities are optimized directly per subject; the atlas is updated from every
training batch. Gradients are exact: each stage (integration, composition,
warp, finite differences) has its adjoint applied in reverse order.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from multiprocessing.dummy import Pool as ThreadPool
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .deform import (
    DeformationField,
    Flow,
    VelocityField,
    compose,
    compose_adjoint,
    integrate,
    jacobian_negative_fraction,
    spatial_gradient,
    spatial_gradient_adjoint,
    warp,
    warp_adjoint,
)
from .model import (
    TERMS,
    Atlas,
    EmptyBatchError,
    Hyperparams,
    LossBreakdown,
    SubjectRecord,
    augment,
    centrality_loss,
    gradient_energy,
    total_loss,
)
from .sphere_grid import (
    AreaWeights,
    GridSpec,
    ShapeMismatchError,
    area_weights,
    broadcast_weights,
    make_grid,
    weighted_norm_sq,
)

logger = logging.getLogger("josa.optim")

VARIANTS = ("josa", "shared", "fixed-atlas")
VELOCITIES = ("v_j", "v_g", "v_f")
PARAMETER_CLASSES = VELOCITIES + ("atlas_geom", "atlas_func")


class DivergenceError(RuntimeError):
    pass


class UnidentifiableError(ValueError):
    pass


# Optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states: Dict[str, OptimizerState] = {}

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float):
        """Update ``param`` in place."""
        state = self.states.get(key)
        if state is None:
            state = OptimizerState(np.zeros_like(param), np.zeros_like(param))
            self.states[key] = state
        if state.m.shape != param.shape or grad.shape != param.shape:
            raise ShapeMismatchError(f"Parameter {key} changed shape")
        state.t += 1
        state.m = self.beta1 * state.m + (1 - self.beta1) * grad
        state.v = self.beta2 * state.v + (1 - self.beta2) * np.square(grad)
        m_hat = state.m / (1 - self.beta1 ** state.t)
        v_hat = state.v / (1 - self.beta2 ** state.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param


@dataclass(frozen=True)
class Schedule:
    lr0: float = 1e-3
    lr_floor: float = 1e-4
    decay_epochs: int = 500
    plateau_factor: float = 0.9
    plateau_patience: int = 100

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams) -> "Schedule":
        return cls(
            hp.lr0, hp.lr_floor, hp.decay_epochs, hp.plateau_factor, hp.plateau_patience
        )

    def lr_at(self, epoch: int, plateau_events: int = 0) -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        if epoch <= self.decay_epochs and self.decay_epochs > 0:
            t = epoch / self.decay_epochs
            return self.lr0 * (1 - t) + self.lr_floor * t
        return self.lr_floor * self.plateau_factor ** plateau_events


def lr_at(epoch: int, plateau_events: int = 0, schedule: Schedule = Schedule()) -> float:
    return schedule.lr_at(epoch, plateau_events)


class PlateauTracker:
    """Counts windows of ``patience`` epochs without improvement after the
    linear decay. The window restarts after each reduction."""

    def __init__(self, patience: int, start_epoch: int):
        self.patience = patience
        self.start_epoch = start_epoch
        self.best = np.inf
        self.since = 0
        self.events = 0

    def update(self, epoch: int, loss: float) -> bool:
        improved = loss < self.best
        if improved:
            self.best = loss
        if epoch <= self.start_epoch:
            return False
        self.since = 0 if improved else self.since + 1
        if self.patience and self.since >= self.patience:
            self.events += 1
            self.since = 0
            return True
        return False


# Gradients


@dataclass
class Gradients:
    loss: LossBreakdown
    velocities: Dict[str, Dict[str, np.ndarray]]
    atlas_geom: np.ndarray
    atlas_func: np.ndarray


@dataclass
class _SubjectGrad:
    terms: Dict[str, float]
    velocities: Dict[str, np.ndarray]
    atlas: Dict[str, np.ndarray]


def _forward_flows(record: SubjectRecord, hp: Hyperparams, modality_fields: bool):
    flows = {"j": Flow(record.v_j, hp.steps), "j_inv": Flow(-record.v_j, hp.steps)}
    if modality_fields:
        for short, v in (("g", record.v_g), ("f", record.v_f)):
            flows[short] = Flow(v, hp.steps)
            flows[short + "_inv"] = Flow(-v, hp.steps)
    return flows


def _data_term_grad(subject_img, atlas_img, phi_m, phi_j, phi_m_inv, phi_j_inv, weights, scale):
    w = broadcast_weights(weights, subject_img)

    psi = compose(phi_m, phi_j)
    in_subject = subject_img - warp(atlas_img, psi)
    psi_inv = compose(phi_j_inv, phi_m_inv)
    in_atlas = warp(subject_img, psi_inv) - atlas_img
    value = 0.5 * (
        weighted_norm_sq(in_subject, weights) + weighted_norm_sq(in_atlas, weights)
    )

    g_subject = -scale * w * in_subject
    g_atlas, g_psi = warp_adjoint(atlas_img, psi, g_subject)
    g_m, g_j = compose_adjoint(phi_m, phi_j, g_psi)

    g_atlas_space = scale * w * in_atlas
    _, g_psi_inv = warp_adjoint(subject_img, psi_inv, g_atlas_space, image_grad=False)
    g_j_inv, g_m_inv = compose_adjoint(phi_j_inv, phi_m_inv, g_psi_inv)

    grads = {"m": g_m, "j": g_j, "m_inv": g_m_inv, "j_inv": g_j_inv}
    return value, g_atlas - g_atlas_space, grads


def _subject_grad(
    record: SubjectRecord,
    flows: Dict[str, Flow],
    atlas: Atlas,
    hp: Hyperparams,
    weights: AreaWeights,
    centrality_grad: np.ndarray,
    use_func: bool,
) -> _SubjectGrad:
    identity = DeformationField.identity(record.grid)

    def field_of(name):
        return flows[name].field if name in flows else identity

    grad_u = {name: np.zeros(record.grid.shape + (2,)) for name in flows}
    terms = dict.fromkeys(TERMS, 0.0)
    atlas_grads = {"geom": np.zeros_like(atlas.geom), "func": np.zeros_like(atlas.func)}

    data = (
        ("geom", "g", hp.w_geom, record.geom, atlas.geom),
        ("func", "f", hp.w_func, record.func if use_func else None, atlas.func),
    )
    for modality, short, scale, subject_img, atlas_img in data:
        if subject_img is None:
            continue
        value, g_atlas, g = _data_term_grad(
            subject_img,
            atlas_img,
            field_of(short),
            field_of("j"),
            field_of(short + "_inv"),
            field_of("j_inv"),
            weights,
            scale,
        )
        terms[modality] = scale * value
        atlas_grads[modality] = g_atlas
        grad_u["j"] += g["j"]
        grad_u["j_inv"] += g["j_inv"]
        if short in flows:
            grad_u[short] += g["m"]
            grad_u[short + "_inv"] += g["m_inv"]

    w = weights.w[..., None, None]
    for short, lam in (("j", hp.lambda_j), ("g", hp.lambda_g), ("f", hp.lambda_f)):
        if short not in flows:
            continue
        u = flows[short].field.u
        terms["reg_" + short] = lam * gradient_energy(u, weights)
        grad_u[short] += 2 * lam * spatial_gradient_adjoint(w * spatial_gradient(u))
    grad_u["j"] += centrality_grad

    velocities = {}
    for short in ("j", "g", "f"):
        if short in flows:
            velocities["v_" + short] = flows[short].backward(grad_u[short]) - flows[
                short + "_inv"
            ].backward(grad_u[short + "_inv"])
        else:
            velocities["v_" + short] = np.zeros(record.grid.shape + (2,))
    return _SubjectGrad(terms, velocities, atlas_grads)


def loss_and_grad(
    batch: List[SubjectRecord],
    atlas: Atlas,
    hp: Hyperparams,
    modality_fields: bool = True,
    use_func: bool = True,
    pool: Optional[ThreadPool] = None,
) -> Gradients:
    """Objective over ``batch`` and its gradient with respect to every
    subject's velocities and every atlas channel."""
    if not batch:
        raise EmptyBatchError("Cannot differentiate the loss of an empty batch")
    for record in batch:
        record.check_compatible(atlas)
    weights = area_weights(atlas.grid)
    mapper = pool.map if pool is not None else lambda fn, items: list(map(fn, items))

    flows = mapper(lambda r: _forward_flows(r, hp, modality_fields), batch)
    u_j = [f["j"].field.u for f in flows]
    centrality = centrality_loss(u_j, hp.alpha_j, weights)
    mean_u = np.mean(np.stack(u_j), axis=0)
    centrality_grad = 2 * hp.alpha_j * weights.w[..., None] * mean_u / len(batch)

    results = mapper(
        lambda pair: _subject_grad(
            pair[0], pair[1], atlas, hp, weights, centrality_grad, use_func
        ),
        list(zip(batch, flows)),
    )

    terms = dict.fromkeys(TERMS, 0.0)
    atlas_geom = np.zeros_like(atlas.geom)
    atlas_func = np.zeros_like(atlas.func)
    for result in results:
        for name in TERMS:
            terms[name] += result.terms[name]
        atlas_geom += result.atlas["geom"]
        atlas_func += result.atlas["func"]
    terms["centrality"] = centrality
    total = sum(terms.values())
    if not np.isfinite(total):
        raise DivergenceError(f"Loss became non-finite: {terms}")

    return Gradients(
        LossBreakdown(total, terms),
        {record.id: result.velocities for record, result in zip(batch, results)},
        atlas_geom,
        atlas_func,
    )


# Fitting


@dataclass
class FitConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    grid: Optional[GridSpec] = None
    batch_size: int = 8
    epochs: int = 300
    seed: int = 0
    # Fresh random deformation and noise on every batch. The reported and
    # validation losses are always computed on the data itself.
    augment: bool = False
    atlas_init: str = "noise"
    atlas_init_std: float = 0.01
    variant: str = "josa"
    validation_fraction: float = 0.2
    lr_scale: float = 100.0
    coarse_to_fine: bool = False
    coarse_epochs: int = 100
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.atlas_init not in ("noise", "mean"):
            raise ValueError('atlas_init must be "noise" or "mean"')
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: Dict[str, float]
    lr: float
    validation: Optional[float]
    wall_time: float
    level: str = "fine"

    def to_dict(self, include_timing=True):
        out = {
            "epoch": self.epoch,
            "level": self.level,
            "total": self.total,
            "terms": dict(self.terms),
            "lr": self.lr,
            "validation": self.validation,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class FitReport:
    variant: str
    seed: int
    n_subjects: int
    train_ids: List[str]
    validation_ids: List[str]
    epochs: List[EpochRecord] = field(default_factory=list)
    plateau_events: int = 0
    runtime: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.epochs[0].total

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].total

    def to_dict(self, include_timing=True):
        out = {
            "variant": self.variant,
            "seed": self.seed,
            "n_subjects": self.n_subjects,
            "train_ids": list(self.train_ids),
            "validation_ids": list(self.validation_ids),
            "plateau_events": self.plateau_events,
            "epochs": [e.to_dict(include_timing) for e in self.epochs],
        }
        if include_timing:
            out["runtime"] = self.runtime
        return out


@dataclass
class FitResult:
    atlas: Atlas
    subjects: List[SubjectRecord]
    report: FitReport

    @property
    def velocities(self) -> Dict[str, Tuple[VelocityField, VelocityField, VelocityField]]:
        return {s.id: (s.v_j, s.v_g, s.v_f) for s in self.subjects}


Checkpoint = Callable[[int, Atlas, List[SubjectRecord]], None]


def _own_copy(record: SubjectRecord) -> SubjectRecord:
    return record.with_velocities(
        *(VelocityField(getattr(record, name).v.copy(), record.grid) for name in VELOCITIES)
    )


def group_mean_atlas(subjects: List[SubjectRecord]) -> Atlas:
    """Average of the cohort in its input (rigidly aligned) space."""
    geom = np.mean(np.stack([s.geom for s in subjects]), axis=0)
    func = np.mean(np.stack([s.func for s in subjects if s.has_func]), axis=0)
    return Atlas(geom, func, subjects[0].grid)


def _initial_atlas(subjects, cfg: FitConfig, rng) -> Atlas:
    if cfg.atlas_init == "mean" or cfg.variant == "fixed-atlas":
        return group_mean_atlas(subjects)
    grid = subjects[0].grid
    n_func = next(s.func.shape[-1] for s in subjects if s.has_func)
    geom = rng.normal(0.0, cfg.atlas_init_std, grid.shape + (subjects[0].geom.shape[-1],))
    func = rng.normal(0.0, cfg.atlas_init_std, grid.shape + (n_func,))
    return Atlas(geom, func, grid)


def _split(n: int, cfg: FitConfig, rng) -> Tuple[List[int], List[int]]:
    order = rng.permutation(n)
    n_val = int(n * cfg.validation_fraction)
    if n - n_val < 2:
        n_val = 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _check_cohort(subjects: List[SubjectRecord], cfg: FitConfig) -> GridSpec:
    if len(subjects) < 2:
        raise UnidentifiableError("Fitting an atlas needs at least two subjects")
    if not any(s.has_func for s in subjects):
        raise UnidentifiableError(
            "No subject has functional data, the functional atlas is unidentifiable"
        )
    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("Subject ids must be unique")
    grid = subjects[0].grid
    if any(s.grid != grid for s in subjects) or (cfg.grid and cfg.grid != grid):
        raise ShapeMismatchError("All subjects must share the configured grid")
    return grid


def fit(
    subjects: List[SubjectRecord],
    cfg: FitConfig,
    checkpoint: Optional[Checkpoint] = None,
) -> FitResult:
    """Estimate the atlas and every subject's velocities."""
    _check_cohort(subjects, cfg)
    start = time.time()
    if cfg.coarse_to_fine:
        result = _fit_coarse_to_fine(subjects, cfg, checkpoint)
    else:
        result = _fit(subjects, cfg, checkpoint)
    result.report.runtime = time.time() - start
    return result


def _fit(
    subjects: List[SubjectRecord],
    cfg: FitConfig,
    checkpoint: Optional[Checkpoint] = None,
    atlas: Optional[Atlas] = None,
    epoch_offset: int = 0,
    level: str = "fine",
) -> FitResult:
    hp = cfg.hp
    rng = np.random.default_rng(cfg.seed)
    schedule = Schedule.from_hyperparams(hp)
    records = [_own_copy(s) for s in subjects]
    train_idx, val_idx = _split(len(records), cfg, rng)
    if not any(records[i].has_func for i in train_idx):
        raise UnidentifiableError("No training subject has functional data")

    atlas = atlas.copy() if atlas is not None else _initial_atlas(
        [records[i] for i in train_idx], cfg, rng
    )
    modality_fields = cfg.variant != "shared"
    update_atlas = cfg.variant != "fixed-atlas"
    names = VELOCITIES if modality_fields else ("v_j",)

    adam = Adam()
    tracker = PlateauTracker(hp.plateau_patience, hp.decay_epochs)
    report = FitReport(
        cfg.variant,
        cfg.seed,
        len(records),
        [records[i].id for i in train_idx],
        [records[i].id for i in val_idx],
    )

    def apply(batch_idx, grads, lr):
        for i in batch_idx:
            record = records[i]
            for name in names:
                adam.step(
                    f"{record.id}/{name}",
                    getattr(record, name).v,
                    grads.velocities[record.id][name],
                    lr,
                )

    logger.info(
        "Fitting %s: %d training, %d validation subjects, %d epochs on %dx%d",
        cfg.variant,
        len(train_idx),
        len(val_idx),
        cfg.epochs,
        *records[0].grid.shape,
    )
    with ThreadPool(max(1, cfg.threads)) as pool:
        for epoch in range(cfg.epochs):
            tic = time.time()
            global_epoch = epoch_offset + epoch
            lr = schedule.lr_at(global_epoch, tracker.events) * cfg.lr_scale
            terms = dict.fromkeys(TERMS, 0.0)

            order = rng.permutation(train_idx).tolist()
            for b in range(0, len(order), cfg.batch_size):
                batch_idx = order[b : b + cfg.batch_size]
                batch = [records[i] for i in batch_idx]
                if cfg.augment:
                    seeds = rng.integers(0, 2 ** 63, size=len(batch))
                    seen = [augment(r, int(s), hp) for r, s in zip(batch, seeds)]
                    grads = loss_and_grad(seen, atlas, hp, modality_fields, pool=pool)
                    # Report the objective on the data itself, before the step.
                    loss = total_loss(batch, atlas, hp, modality_fields)
                else:
                    grads = loss_and_grad(batch, atlas, hp, modality_fields, pool=pool)
                    loss = grads.loss
                for name in TERMS:
                    terms[name] += loss.terms[name]
                apply(batch_idx, grads, lr)
                if update_atlas:
                    adam.step("atlas/geom", atlas.geom, grads.atlas_geom, lr)
                    adam.step("atlas/func", atlas.func, grads.atlas_func, lr)

            validation = None
            if val_idx:
                grads = loss_and_grad(
                    [records[i] for i in val_idx], atlas, hp, modality_fields, pool=pool
                )
                validation = grads.loss.total
                apply(val_idx, grads, lr)

            total = sum(terms.values())
            if tracker.update(global_epoch, total if validation is None else validation):
                logger.info("Loss plateau at epoch %d, reducing learning rate", global_epoch)
            report.epochs.append(
                EpochRecord(global_epoch, total, terms, lr, validation, time.time() - tic, level)
            )
            logger.info(
                "epoch %d loss %.6g lr %.3g validation %s",
                global_epoch,
                total,
                lr,
                "-" if validation is None else f"{validation:.6g}",
            )
            if checkpoint and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint(global_epoch, atlas, records)

    report.plateau_events = tracker.events
    return FitResult(atlas, records, report)


def _downsample(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    return image.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def _upsample(image: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(image, 2, axis=0), 2, axis=1)


def _fit_coarse_to_fine(subjects, cfg: FitConfig, checkpoint) -> FitResult:
    grid = subjects[0].grid
    if grid.height % 2 or (grid.width // 2) % 2:
        raise ValueError(f"Grid {grid.height}x{grid.width} cannot be halved")
    coarse_grid = make_grid(grid.height // 2, grid.width // 2)
    coarse_subjects = [
        SubjectRecord(
            s.id,
            _downsample(s.geom),
            coarse_grid,
            _downsample(s.func) if s.has_func else None,
        )
        for s in subjects
    ]
    coarse = _fit(
        coarse_subjects, replace(cfg, epochs=cfg.coarse_epochs, grid=None), level="coarse"
    )

    def lift(v: VelocityField) -> VelocityField:
        return VelocityField(2 * _upsample(v.v), grid)

    by_id = {s.id: s for s in coarse.subjects}
    fine_subjects = [
        s.with_velocities(*(lift(getattr(by_id[s.id], name)) for name in VELOCITIES))
        for s in subjects
    ]
    atlas = Atlas(_upsample(coarse.atlas.geom), _upsample(coarse.atlas.func), grid)
    fine = _fit(fine_subjects, cfg, checkpoint, atlas=atlas, epoch_offset=cfg.coarse_epochs)
    fine.report.epochs = coarse.report.epochs + fine.report.epochs
    fine.report.plateau_events += coarse.report.plateau_events
    return fine


# Inference


@dataclass
class RegisterConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    iterations: int = 200
    lr: float = 0.05
    modality_fields: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class RegistrationResult:
    phi_j: DeformationField
    phi_g: DeformationField
    phi_f: DeformationField
    diagnostics: Dict[str, float]


def register(
    subject_geom: np.ndarray,
    atlas: Atlas,
    cfg: Optional[RegisterConfig] = None,
    subject_id: str = "subject",
) -> RegistrationResult:
    """Register a held-out subject from its geometric features alone.

    The functional term is absent; φ_f is still returned so functional data
    can be carried into atlas space afterwards.
    """
    cfg = cfg or RegisterConfig()
    hp = cfg.hp
    record = SubjectRecord(subject_id, np.array(subject_geom, dtype=float), atlas.grid)
    names = VELOCITIES if cfg.modality_fields else ("v_j",)
    adam = Adam()
    initial = None
    for _ in range(cfg.iterations):
        grads = loss_and_grad([record], atlas, hp, cfg.modality_fields, use_func=False)
        if initial is None:
            initial = grads.loss
        for name in names:
            adam.step(name, getattr(record, name).v, grads.velocities[record.id][name], cfg.lr)

    final = total_loss([record], atlas, hp, cfg.modality_fields)
    phi_j = integrate(record.v_j, hp.steps)
    phi_g = integrate(record.v_g, hp.steps)
    phi_f = integrate(record.v_f, hp.steps)
    diagnostics = {
        "iterations": cfg.iterations,
        "initial_loss": initial.total,
        "final_loss": final.total,
        "initial_geom_loss": initial.terms["geom"],
        "final_geom_loss": final.terms["geom"],
        "negative_jacobian_j": jacobian_negative_fraction(phi_j),
        "negative_jacobian_g": jacobian_negative_fraction(phi_g),
        "negative_jacobian_f": jacobian_negative_fraction(phi_f),
    }
    logger.info(
        "Registered %s: loss %.6g -> %.6g", subject_id, initial.total, final.total
    )
    return RegistrationResult(phi_j, phi_g, phi_f, diagnostics)


# Gradient check


@dataclass
class GradCheckReport:
    grid: GridSpec
    seed: int
    per_class: Dict[str, float]
    checked: int

    @property
    def max_rel_error(self) -> float:
        return max(self.per_class.values())

    def to_dict(self):
        return {
            "grid": self.grid.to_dict(),
            "seed": self.seed,
            "per_class": dict(self.per_class),
            "checked": self.checked,
            "max_rel_error": self.max_rel_error,
        }


def _check_problem(grid: GridSpec, rng, n_subjects: int):
    """Random instance whose sample coordinates stay clear of grid lines, where
    bilinear interpolation has kinks."""
    atlas = Atlas(
        rng.standard_normal(grid.shape + (1,)), rng.standard_normal(grid.shape + (1,)), grid
    )
    batch = []
    for i in range(n_subjects):
        batch.append(
            SubjectRecord(
                f"s{i}",
                rng.standard_normal(grid.shape + (1,)),
                grid,
                rng.standard_normal(grid.shape + (1,)),
                VelocityField(rng.uniform(0.15, 0.35, grid.shape + (2,)), grid),
                VelocityField(rng.uniform(0.05, 0.15, grid.shape + (2,)), grid),
                VelocityField(rng.uniform(0.05, 0.15, grid.shape + (2,)), grid),
            )
        )
    return atlas, batch


def check_gradients(
    grid: GridSpec,
    seed: int = 0,
    n_subjects: int = 2,
    h: float = 1e-4,
    max_components: Optional[int] = None,
    hp: Optional[Hyperparams] = None,
    atol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Errors are relative to the larger magnitude, or to ``atol`` for components
    below it, where round-off in the difference quotient dominates.
    """
    hp = hp or Hyperparams()
    rng = np.random.default_rng(seed)
    atlas, batch = _check_problem(grid, rng, n_subjects)
    analytic = loss_and_grad(batch, atlas, hp)

    def loss():
        return total_loss(batch, atlas, hp).total

    targets = {}
    for name in VELOCITIES:
        targets[name] = [
            (getattr(r, name).v, analytic.velocities[r.id][name]) for r in batch
        ]
    targets["atlas_geom"] = [(atlas.geom, analytic.atlas_geom)]
    targets["atlas_func"] = [(atlas.func, analytic.atlas_func)]

    per_class = {}
    checked = 0
    for name, pairs in targets.items():
        candidates = [(k, i) for k, (p, _) in enumerate(pairs) for i in range(p.size)]
        if max_components and len(candidates) > max_components:
            picks = rng.choice(len(candidates), max_components, replace=False)
            candidates = [candidates[i] for i in sorted(picks)]
        worst = 0.0
        for k, i in candidates:
            param, grad = pairs[k]
            flat = param.reshape(-1)
            original = flat[i]
            flat[i] = original + h
            plus = loss()
            flat[i] = original - h
            minus = loss()
            flat[i] = original
            fd = (plus - minus) / (2 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), atol))
        per_class[name] = worst
        checked += len(candidates)
        logger.info("Gradient check %s: max relative error %.3g", name, worst)
    return GradCheckReport(grid, seed, per_class, checked)
