"""Alignment quality: correlation to the group mean before and after
registration, paired one-tailed Wilcoxon tests, and the variant ablation."""

import logging
from dataclasses import dataclass, field, replace
from multiprocessing.dummy import Pool as ThreadPool
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .deform import DeformationField, compose, integrate, jacobian_negative_fraction, warp
from .model import Hyperparams, SubjectRecord, mean_images
from .optim import VARIANTS, FitConfig, FitResult, fit
from .sphere_grid import AreaWeights, broadcast_weights

logger = logging.getLogger("josa.evaluation")

EXACT_MAX_N = 20


@dataclass
class EvalConfig:
    weighted: bool = True
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"Unknown variants {unknown}")


class ZeroVarianceError(ValueError):
    pass


class IdMismatchError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


def weighted_corr(a: np.ndarray, b: np.ndarray, weights: Optional[AreaWeights] = None) -> float:
    """Pearson correlation with optional sin(θ) area weighting, pooled over
    channels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"Cannot correlate shapes {a.shape} and {b.shape}")
    if weights is None:
        w = np.ones(a.size)
    else:
        w = np.broadcast_to(broadcast_weights(weights, a), a.shape).ravel()
    a = a.ravel()
    b = b.ravel()
    total = w.sum()
    da = a - np.dot(w, a) / total
    db = b - np.dot(w, b) / total
    var_a = np.dot(w, da * da) / total
    var_b = np.dot(w, db * db) / total
    if var_a <= 1e-24 or var_b <= 1e-24:
        raise ZeroVarianceError("Correlation is undefined for a constant image")
    r = np.dot(w, da * db) / total / np.sqrt(var_a * var_b)
    return float(np.clip(r, -1.0, 1.0))


def corr_to_group_mean(
    images: Sequence[np.ndarray], weights: Optional[AreaWeights] = None
) -> np.ndarray:
    """Correlation of every image with the mean of all of them."""
    if len(images) < 2:
        raise TooFewSamplesError("Need at least two images for a group mean")
    mean = mean_images(images)
    return np.array([weighted_corr(image, mean, weights) for image in images])


def improvement(
    before: Sequence[float],
    after: Sequence[float],
    before_ids: Optional[Sequence[str]] = None,
    after_ids: Optional[Sequence[str]] = None,
) -> np.ndarray:
    if before_ids is not None or after_ids is not None:
        if list(before_ids or []) != list(after_ids or []):
            raise IdMismatchError("Before and after scores are for different subjects")
    before = np.asarray(before, dtype=float)
    after = np.asarray(after, dtype=float)
    if before.shape != after.shape:
        raise IdMismatchError(f"{before.size} scores before, {after.size} after")
    return after - before


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str

    def to_dict(self):
        return dict(self.__dict__)


def _exact_upper_tail(ranks: np.ndarray, statistic: float) -> float:
    # Ranks may be half-integers after ties; count sign assignments on doubled ranks.
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts += shifted
    threshold = int(np.rint(2 * statistic))
    return float(counts[threshold:].sum() / 2.0 ** len(ranks))


def _normal_upper_tail(ranks, abs_d, statistic) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, ties = np.unique(abs_d, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(ties ** 3 - ties) / 48
    z = (statistic - mean - 0.5) / np.sqrt(var)
    return float(stats.norm.sf(z))


def wilcoxon_one_tailed(deltas: Iterable[float], method: str = "auto") -> WilcoxonResult:
    """Signed-rank test of H1: median(delta) > 0. Zero differences are dropped."""
    d = np.asarray(list(deltas), dtype=float)
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise TooFewSamplesError(f"Wilcoxon test needs 5 non-zero differences, got {n}")
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    abs_d = np.abs(d)
    ranks = stats.rankdata(abs_d)
    statistic = float(ranks[d > 0].sum())
    if method == "exact":
        p = _exact_upper_tail(ranks, statistic)
    elif method == "normal":
        p = _normal_upper_tail(ranks, abs_d, statistic)
    else:
        raise ValueError(f'method must be "auto", "exact" or "normal", got {method}')
    return WilcoxonResult(statistic, p, n, method)


# Transforms into atlas space


@dataclass
class SubjectTransforms:
    """Fields that pull each modality of one subject into atlas space, plus the
    fields whose folding is reported."""

    geom: DeformationField
    func: DeformationField
    components: Dict[str, DeformationField] = field(default_factory=dict)


def to_atlas_space(
    image: np.ndarray, phi_m: DeformationField, phi_j: DeformationField
) -> np.ndarray:
    return warp(image, compose(phi_j.inverse(), phi_m.inverse()))


def transforms_from_velocities(
    subjects: Iterable[SubjectRecord], hp: Hyperparams, modality_fields: bool = True
) -> Dict[str, SubjectTransforms]:
    out = {}
    for record in subjects:
        phi_j = integrate(record.v_j, hp.steps)
        phi_g = integrate(record.v_g, hp.steps)
        phi_f = integrate(record.v_f, hp.steps)
        if not modality_fields:
            phi_g = phi_f = DeformationField.identity(record.grid)
        j_inv = phi_j.inverse()
        out[record.id] = SubjectTransforms(
            compose(j_inv, phi_g.inverse()),
            compose(j_inv, phi_f.inverse()),
            {"j": phi_j, "g": phi_g, "f": phi_f},
        )
    return out


def transforms_from_fields(
    fields: Mapping[str, Mapping[str, np.ndarray]], grid
) -> Dict[str, SubjectTransforms]:
    """Wrap externally computed subject-to-atlas displacements."""
    out = {}
    for subject_id, pair in fields.items():
        geom = DeformationField(np.asarray(pair["geom"], dtype=float), grid)
        func = DeformationField(np.asarray(pair.get("func", pair["geom"]), dtype=float), grid)
        out[subject_id] = SubjectTransforms(geom, func, {"geom": geom, "func": func})
    return out


def centrality_ratio(u_j_all: Sequence[np.ndarray], weights: AreaWeights) -> float:
    """‖mean u_j‖ over mean ‖u_j‖, both area weighted."""
    norms = [np.sqrt(np.sum(weights.w[..., None] * np.square(u))) for u in u_j_all]
    mean = np.mean(np.stack(u_j_all), axis=0)
    denom = float(np.mean(norms))
    if denom == 0:
        return 0.0
    return float(np.sqrt(np.sum(weights.w[..., None] * np.square(mean)))) / denom


@dataclass
class ModalityScores:
    ids: List[str]
    before: np.ndarray
    after: np.ndarray
    mean_before: np.ndarray
    mean_after: np.ndarray
    test: Optional[WilcoxonResult]

    @property
    def improvement(self) -> np.ndarray:
        return improvement(self.before, self.after)

    def to_dict(self):
        return {
            "ids": list(self.ids),
            "before": self.before.tolist(),
            "after": self.after.tolist(),
            "improvement": self.improvement.tolist(),
            "median_improvement": float(np.median(self.improvement)),
            "wilcoxon": None if self.test is None else self.test.to_dict(),
        }


@dataclass
class EvalReport:
    label: str
    geom: ModalityScores
    func: Optional[ModalityScores]
    negative_jacobian: Dict[str, Dict[str, float]]
    centrality_ratio: Optional[float] = None
    runtime: float = 0.0

    def to_dict(self, include_timing=True):
        out = {
            "label": self.label,
            "geom": self.geom.to_dict(),
            "func": None if self.func is None else self.func.to_dict(),
            "negative_jacobian": self.negative_jacobian,
            "centrality_ratio": self.centrality_ratio,
        }
        if include_timing:
            out["runtime"] = self.runtime
        return out

    def rows(self):
        """Per-subject table rows: id, modality, before, after, improvement."""
        for name, scores in (("geom", self.geom), ("func", self.func)):
            if scores is None:
                continue
            for i, subject_id in enumerate(scores.ids):
                yield [
                    subject_id,
                    name,
                    scores.before[i],
                    scores.after[i],
                    scores.after[i] - scores.before[i],
                ]


def _test_or_none(deltas) -> Optional[WilcoxonResult]:
    try:
        return wilcoxon_one_tailed(deltas)
    except TooFewSamplesError as e:
        logger.warning("Skipping significance test: %s", e)
        return None


def _score(ids, images_before, images_after, weights) -> ModalityScores:
    before = corr_to_group_mean(images_before, weights)
    after = corr_to_group_mean(images_after, weights)
    return ModalityScores(
        list(ids),
        before,
        after,
        mean_images(images_before),
        mean_images(images_after),
        _test_or_none(after - before),
    )


def evaluate(
    subjects: Sequence[SubjectRecord],
    transforms: Mapping[str, SubjectTransforms],
    weights: Optional[AreaWeights] = None,
    label: str = "josa",
    runtime: float = 0.0,
) -> EvalReport:
    """Score a set of subject-to-atlas transforms on the cohort's observations."""
    missing = [s.id for s in subjects if s.id not in transforms]
    if missing:
        raise IdMismatchError(f"No transforms for subjects {missing}")

    ids = [s.id for s in subjects]
    geom = _score(
        ids,
        [s.geom for s in subjects],
        [warp(s.geom, transforms[s.id].geom) for s in subjects],
        weights,
    )
    with_func = [s for s in subjects if s.has_func]
    func = None
    if len(with_func) >= 2:
        func = _score(
            [s.id for s in with_func],
            [s.func for s in with_func],
            [warp(s.func, transforms[s.id].func) for s in with_func],
            weights,
        )

    negative = {
        subject_id: {
            name: jacobian_negative_fraction(phi)
            for name, phi in transforms[subject_id].components.items()
        }
        for subject_id in ids
    }
    ratio = None
    if weights is not None and all("j" in transforms[i].components for i in ids):
        ratio = centrality_ratio([transforms[i].components["j"].u for i in ids], weights)
    report = EvalReport(label, geom, func, negative, ratio, runtime)
    logger.info(
        "%s: median geometric improvement %.4f, functional %s",
        label,
        np.median(geom.improvement),
        "-" if func is None else f"{np.median(func.improvement):.4f}",
    )
    return report


def evaluate_fit(
    result: FitResult,
    subjects: Sequence[SubjectRecord],
    hp: Hyperparams,
    weights: Optional[AreaWeights] = None,
) -> EvalReport:
    """Score a fit on the observations it was estimated from."""
    variant = result.report.variant
    transforms = transforms_from_velocities(result.subjects, hp, variant != "shared")
    return evaluate(subjects, transforms, weights, variant, result.report.runtime)


# Ablation


@dataclass
class Comparison:
    name: str
    modality: str
    better: str
    worse: str
    median_difference: float
    test: Optional[WilcoxonResult]

    def to_dict(self):
        return {
            "name": self.name,
            "modality": self.modality,
            "better": self.better,
            "worse": self.worse,
            "median_difference": self.median_difference,
            "wilcoxon": None if self.test is None else self.test.to_dict(),
        }


@dataclass
class AblationReport:
    reports: Dict[str, EvalReport]
    comparisons: List[Comparison]

    def to_dict(self, include_timing=True):
        return {
            "variants": {k: v.to_dict(include_timing) for k, v in self.reports.items()},
            "comparisons": [c.to_dict() for c in self.comparisons],
        }


COMPARISONS = (
    ("func", "josa", "shared"),
    ("geom", "josa", "fixed-atlas"),
)


def _compare(reports: Dict[str, EvalReport], modality, better, worse) -> Optional[Comparison]:
    if better not in reports or worse not in reports:
        return None
    a = getattr(reports[better], modality)
    b = getattr(reports[worse], modality)
    if a is None or b is None:
        return None
    deltas = improvement(b.improvement, a.improvement, b.ids, a.ids)
    return Comparison(
        f"{modality}: {better} > {worse}",
        modality,
        better,
        worse,
        float(np.median(deltas)),
        _test_or_none(deltas),
    )


def ablate(
    subjects: Sequence[SubjectRecord],
    cfg: FitConfig,
    variants: Sequence[str] = VARIANTS,
    weights: Optional[AreaWeights] = None,
    threads: int = 1,
) -> AblationReport:
    """Fit each model variant on the same cohort and seed, then compare the
    per-subject improvements pairwise."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"Unknown variants {unknown}")
    if not all(s.has_func for s in subjects):
        raise ValueError("Ablation needs functional data for every subject")

    def run(variant):
        result = fit(subjects, replace(cfg, variant=variant))
        return evaluate_fit(result, subjects, cfg.hp, weights)

    with ThreadPool(max(1, min(threads, len(variants)))) as pool:
        reports = dict(zip(variants, pool.map(run, list(variants))))

    comparisons = [
        c for c in (_compare(reports, *entry) for entry in COMPARISONS) if c is not None
    ]
    for c in comparisons:
        logger.info(
            "%s: median difference %.4f, p %s",
            c.name,
            c.median_difference,
            "-" if c.test is None else f"{c.test.p_value:.3g}",
        )
    return AblationReport(reports, comparisons)
