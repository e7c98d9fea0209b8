"""Linear pair scoring, exhaustive pair inference and structured-SVM training.

A training instance is the feature tensor ``phi[i, j]`` of every
(segmentation, parse) pair together with the joint task loss of each pair.
Training minimises

    1/2 ||w||^2 + C * sum_n sum_{ij != oracle} L_ij * max(0, 1 - w.(phi* - phi_ij))

by seeded stochastic subgradient descent.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .features import FeatureLayout, SimilarityTable, pair_features
from .parser import ParseHypothesis, PrepAttachment, attachment_accuracy
from .segmenter import SegmentationHypothesis, jaccard


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        super().__init__(f"training objective became {value} at epoch {epoch}; lower the step size")


class LayoutMismatchError(ValueError):
    pass


class PairIndex(NamedTuple):
    i: int  # 1-based segmentation index
    j: int  # 1-based parse index


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    alpha: float = 0.5
    epochs: int = 30
    eta0: float | None = None  # None: 1/C
    seed: int = 0
    mask: tuple[str, ...] = ()
    standardize: bool = False
    rescaling: str = "slack"  # or "margin"

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.rescaling not in ("slack", "margin"):
            raise ValueError(f"unknown rescaling {self.rescaling!r}")
        object.__setattr__(self, "mask", tuple(self.mask))

    @property
    def step0(self) -> float:
        if self.eta0 is not None:
            return self.eta0
        return 1.0 / self.C if self.C > 0 else 1.0


@dataclass
class MediatorModel:
    w: np.ndarray
    layout: FeatureLayout | None = None
    cfg: TrainConfig = field(default_factory=TrainConfig)
    trace: list[float] = field(default_factory=list)

    def mask_vector(self) -> np.ndarray:
        return mask_vector(len(self.w), self.layout, self.cfg.mask)


@dataclass
class Instance:
    """Pair features ``phi`` (My, Mz, D) and pair losses ``loss`` (My, Mz)."""

    phi: np.ndarray
    loss: np.ndarray
    id: str = ""

    def truncate(self, my: int, mz: int) -> Instance:
        return Instance(self.phi[:my, :mz], self.loss[:my, :mz], self.id)


@dataclass
class FeatureContext:
    layout: FeatureLayout
    sims: SimilarityTable


def mask_vector(dim: int, layout: FeatureLayout | None, mask: Sequence[str]) -> np.ndarray:
    """1.0 on kept dimensions, 0.0 on those covered by the named groups/slices."""
    m = np.ones(dim)
    if not mask:
        return m
    if layout is None:
        raise ValueError("a feature mask needs a layout to resolve group names")
    for name in mask:
        sl = layout.slices.get(name)
        if sl is not None:
            m[sl] = 0.0
        else:
            m[layout.group_indices(name)] = 0.0
    return m


# -- scoring and inference -------------------------------------------------


def pair_score(model: MediatorModel, phi) -> float:
    values = getattr(phi, "values", phi)
    if getattr(phi, "layout", None) is not None and model.layout is not None and phi.layout != model.layout:
        raise LayoutMismatchError("feature vector and model use different layouts")
    values = np.asarray(values, dtype=float)
    if values.shape != model.w.shape:
        raise LayoutMismatchError(f"feature length {values.shape} vs weight length {model.w.shape}")
    return float(np.dot(model.w, values * model.mask_vector()))


def score_matrix(model: MediatorModel, phi: np.ndarray) -> np.ndarray:
    return (phi * model.mask_vector()) @ model.w


def argmax_pair(scores: np.ndarray) -> PairIndex:
    """Argmax with ties going to the smallest i, then the smallest j."""
    if scores.size == 0:
        raise ValueError("empty hypothesis set")
    flat = int(np.argmax(scores))  # first maximum in row-major order
    i, j = divmod(flat, scores.shape[1])
    return PairIndex(i + 1, j + 1)


def infer_phi(model: MediatorModel, phi: np.ndarray) -> PairIndex:
    return argmax_pair(score_matrix(model, phi))


def infer(model: MediatorModel, Ys: Sequence[SegmentationHypothesis], Zs: Sequence[ParseHypothesis],
          context: FeatureContext) -> PairIndex:
    if not Ys or not Zs:
        raise ValueError("empty hypothesis set")
    if model.layout is not None and model.layout != context.layout:
        raise LayoutMismatchError("model and context layouts differ")
    return infer_phi(model, pair_features(Ys, Zs, context.layout, context.sims))


# -- losses and oracle -----------------------------------------------------


def joint_loss(alpha: float, seg_loss, parse_loss):
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * seg_loss + (1 - alpha) * parse_loss


def module_losses(Ys: Sequence[SegmentationHypothesis], Zs: Sequence[ParseHypothesis],
                  gt_labels: np.ndarray, gt_attachments: Sequence[PrepAttachment]):
    seg = np.array([1.0 - jaccard(y.labels, gt_labels) for y in Ys])
    parse = np.array([1.0 - attachment_accuracy(z.attachments, gt_attachments) for z in Zs])
    return seg, parse


def loss_matrix(alpha: float, seg_losses: np.ndarray, parse_losses: np.ndarray) -> np.ndarray:
    return joint_loss(alpha, np.asarray(seg_losses)[:, None], np.asarray(parse_losses)[None, :])


def argmin_pair(losses: np.ndarray) -> PairIndex:
    if losses.size == 0:
        raise ValueError("empty hypothesis set")
    flat = int(np.argmin(losses))
    i, j = divmod(flat, losses.shape[1])
    return PairIndex(i + 1, j + 1)


def oracle_pair(Ys, Zs, gt: tuple[np.ndarray, Sequence[PrepAttachment]], alpha: float) -> PairIndex:
    """Pair with the lowest joint loss against ground truth ``(labels, attachments)``."""
    if not Ys or not Zs:
        raise ValueError("empty hypothesis set")
    seg, parse = module_losses(Ys, Zs, *gt)
    return argmin_pair(loss_matrix(alpha, seg, parse))


# -- training --------------------------------------------------------------


@dataclass
class _Prepared:
    diffs: list[np.ndarray]  # per instance: (n_other, D) of phi* - phi_ij, masked and scaled
    weights: list[np.ndarray]  # per instance: losses of the non-oracle pairs
    scale: np.ndarray
    mask: np.ndarray


def _prepare(instances: Sequence[Instance], dim: int, mask: np.ndarray, standardize: bool) -> _Prepared:
    scale = np.ones(dim)
    if standardize and instances:
        allphi = np.concatenate([inst.phi.reshape(-1, dim) for inst in instances])
        sd = allphi.std(axis=0)
        scale = np.where(sd > 1e-12, sd, 1.0)
    diffs, weights = [], []
    for inst in instances:
        if inst.phi.shape[:2] != inst.loss.shape or inst.loss.size == 0:
            raise ValueError(f"instance {inst.id!r} has mismatched or empty pair arrays")
        flat_phi = inst.phi.reshape(-1, dim)
        flat_loss = inst.loss.ravel()
        star = int(np.argmin(flat_loss))
        keep = np.arange(flat_loss.size) != star
        diffs.append((flat_phi[star] - flat_phi[keep]) / scale * mask)
        weights.append(flat_loss[keep])
    return _Prepared(diffs, weights, scale, mask)


def _hinge(margins: np.ndarray, losses: np.ndarray, rescaling: str) -> np.ndarray:
    if rescaling == "slack":
        return losses * np.maximum(0.0, 1.0 - margins)
    return np.maximum(0.0, losses - margins)


def _objective(w: np.ndarray, prep: _Prepared, C: float, rescaling: str) -> float:
    total = 0.0
    for d, L in zip(prep.diffs, prep.weights):
        if L.size:
            total += float(_hinge(d @ w, L, rescaling).sum())
    return 0.5 * float(w @ w) + C * total


def objective(w: np.ndarray, instances: Sequence[Instance], cfg: TrainConfig,
              layout: FeatureLayout | None = None) -> float:
    """Training objective of a raw-space weight vector, in the trainer's own parametrisation."""
    dim = len(w)
    mask = mask_vector(dim, layout, cfg.mask)
    prep = _prepare(instances, dim, mask, cfg.standardize)
    return _objective(np.asarray(w) * prep.scale * mask, prep, cfg.C, cfg.rescaling)


def hinge_terms(w: np.ndarray, instance: Instance, rescaling: str = "slack") -> np.ndarray:
    """Hinge contribution of every pair of one instance (0 at the oracle pair)."""
    flat_phi = instance.phi.reshape(-1, instance.phi.shape[-1])
    flat_loss = instance.loss.ravel()
    star = int(np.argmin(flat_loss))
    margins = (flat_phi[star] - flat_phi) @ w
    out = _hinge(margins, flat_loss, rescaling)
    out[star] = 0.0
    return out.reshape(instance.loss.shape)


def train(instances: Sequence[Instance], layout: FeatureLayout | None, cfg: TrainConfig,
          w0: np.ndarray | None = None) -> MediatorModel:
    if not instances:
        raise ValueError("no training instances")
    dim = instances[0].phi.shape[-1]
    if layout is not None and layout.dim != dim:
        raise LayoutMismatchError(f"features have {dim} dims, layout expects {layout.dim}")
    mask = mask_vector(dim, layout, cfg.mask)
    prep = _prepare(instances, dim, mask, cfg.standardize)
    n = len(instances)
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(dim) if w0 is None else np.asarray(w0, dtype=float) * prep.scale * mask
    eta0 = cfg.step0
    trace = []
    for epoch in range(cfg.epochs):
        eta = eta0 / (1 + epoch)
        for idx in rng.permutation(n):
            d, L = prep.diffs[idx], prep.weights[idx]
            g = w / n
            if L.size and cfg.C > 0:
                m = d @ w
                if cfg.rescaling == "slack":
                    active = m < 1.0
                else:
                    active = L - m > 0.0
                if active.any():
                    g = g - cfg.C * (L[active] @ d[active])
            w = w - eta * g
        value = _objective(w, prep, cfg.C, cfg.rescaling)
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        trace.append(value)
    return MediatorModel(w / prep.scale * mask, layout, cfg, trace)


# -- baselines -------------------------------------------------------------


def predict_indep(Ys, Zs) -> PairIndex:
    if len(Ys) == 0 or len(Zs) == 0:
        raise ValueError("empty hypothesis set")
    return PairIndex(1, 1)


def predict_cascade(model_y: MediatorModel, model_z: MediatorModel, Ys, Zs, context: FeatureContext) -> PairIndex:
    if not Ys or not Zs:
        raise ValueError("empty hypothesis set")
    i = infer(model_y, Ys, Zs[:1], context).i
    j = infer(model_z, Ys[:1], Zs, context).j
    return PairIndex(i, j)


def cascade_phi(model_y: MediatorModel, model_z: MediatorModel, phi: np.ndarray) -> PairIndex:
    i = infer_phi(model_y, phi[:, :1]).i
    j = infer_phi(model_z, phi[:1, :]).j
    return PairIndex(i, j)


def train_cascade(instances: Sequence[Instance], layout, cfg: TrainConfig) -> tuple[MediatorModel, MediatorModel]:
    """Segmentation reranker against z^1 and parse reranker against y^1."""
    model_y = train([inst.truncate(inst.phi.shape[0], 1) for inst in instances], layout, cfg)
    model_z = train([inst.truncate(1, inst.phi.shape[1]) for inst in instances], layout, cfg)
    return model_y, model_z


DOMAIN_ADAPTATION_MASK = ("seg_score", "consistency", "category_presence")


def train_domain_adaptation(instances: Sequence[Instance], layout: FeatureLayout, cfg: TrainConfig) -> MediatorModel:
    """Parse-only reranker: every slice except the parse-score features is masked."""
    cfg = replace(cfg, mask=tuple(dict.fromkeys(cfg.mask + DOMAIN_ADAPTATION_MASK)))
    return train([inst.truncate(1, inst.phi.shape[1]) for inst in instances], layout, cfg)


def predict_domain_adaptation(model: MediatorModel, phi: np.ndarray) -> PairIndex:
    return PairIndex(1, infer_phi(model, phi[:1, :]).j)


# -- files -----------------------------------------------------------------


def save_model(path, model: MediatorModel) -> None:
    cfg = asdict(model.cfg)
    cfg["mask"] = list(model.cfg.mask)
    doc = {"layout_fingerprint": model.layout.fingerprint() if model.layout is not None else None,
           "w": [float(v) for v in model.w], "cfg": cfg, "trace": [float(v) for v in model.trace]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_model(path, layout: FeatureLayout | None) -> MediatorModel:
    with open(path) as f:
        doc = json.load(f)
    fp = layout.fingerprint() if layout is not None else None
    if doc.get("layout_fingerprint") != fp:
        raise LayoutMismatchError(f"model layout fingerprint {doc.get('layout_fingerprint')} does not match {fp}")
    cfg = doc.get("cfg", {})
    cfg["mask"] = tuple(cfg.get("mask", ()))
    w = np.asarray(doc["w"], dtype=float)
    if layout is not None and len(w) != layout.dim:
        raise LayoutMismatchError("weight length does not match layout")
    return MediatorModel(w, layout, TrainConfig(**cfg), list(doc.get("trace", [])))
