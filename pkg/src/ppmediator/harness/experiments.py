"""Cross-validation, ablations, alpha sweep, per-preposition report, heat maps."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..features import ALL_CONSISTENCY, FEATURE_GROUPS, PRESENCE_GROUP, FeatureLayout, distance_slots
from ..mediator import (MediatorModel, PairIndex, TrainConfig, argmin_pair, cascade_phi, infer_phi,
                        predict_domain_adaptation, train, train_cascade, train_domain_adaptation)
from .data import SceneRecord

N_FOLDS = 10
METHODS = ("indep", "domain_adaptation", "cascade", "mediator", "oracle")
ABLATION_GROUPS = {
    "drop_all_consistency": ALL_CONSISTENCY,
    "drop_euclidean": "euclidean",
    "drop_directional": "directional",
    "drop_size_ratio": "size_ratio",
    "drop_word2vec": "word2vec",
    "drop_category_presence": PRESENCE_GROUP,
}


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    my: tuple[int, ...] = (1, 2, 5, 10)
    mz: tuple[int, ...] = (1, 3, 5, 10)
    C: tuple[float, ...] = (0.1, 1.0, 10.0)

    def points(self):
        return list(itertools.product(sorted(self.my), sorted(self.mz), sorted(self.C)))


@dataclass(frozen=True)
class CVConfig:
    alpha: float = 0.5
    epochs: int = 20
    seed: int = 0
    mask: tuple[str, ...] = ()
    standardize: bool = False
    rescaling: str = "slack"

    def train_config(self, C: float) -> TrainConfig:
        return TrainConfig(C=C, alpha=self.alpha, epochs=self.epochs, seed=self.seed, mask=self.mask,
                           standardize=self.standardize, rescaling=self.rescaling)


@dataclass
class MetricsRow:
    method: str
    fold: int | str
    seg: float
    parse: float
    my: int | None = None
    mz: int | None = None
    C: float | None = None

    @property
    def average(self) -> float:
        return (self.seg + self.parse) / 2


@dataclass
class Outcome:
    """Selection made by one method on one test scene."""

    fold: int
    scene_id: str
    method: str
    pair: PairIndex
    seg: float
    parse: float
    hits: list[bool]
    preps: list[str]


@dataclass
class CVResult:
    rows: list[MetricsRow]
    surface: list[dict]
    outcomes: list[Outcome]
    audit: list[dict] = field(default_factory=list)

    def mean_row(self, method: str) -> MetricsRow:
        rs = [r for r in self.rows if r.method == method and r.fold != "mean"]
        return MetricsRow(method, "mean", float(np.mean([r.seg for r in rs])), float(np.mean([r.parse for r in rs])))

    def fold_rows(self, method: str) -> list[MetricsRow]:
        return [r for r in self.rows if r.method == method and r.fold != "mean"]


def make_folds(ids: Sequence[str], n_folds: int = N_FOLDS, seed: int = 0) -> list[list[int]]:
    """Partition record positions into ``n_folds`` folds by a seeded shuffle."""
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} instances, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(int(p) for p in perm[f::n_folds]) for f in range(n_folds)]


def _check_grid(records: Sequence[SceneRecord], grid: Grid) -> None:
    max_y = min(r.stored_y for r in records)
    max_z = min(r.stored_z for r in records)
    if max(grid.my) > max_y:
        raise GridError(f"grid asks for M_y={max(grid.my)} but only {max_y} segmentations are stored")
    if max(grid.mz) > max_z:
        raise GridError(f"grid asks for M_z={max(grid.mz)} but only {max_z} parses are stored")


def _evaluate(records: Sequence[SceneRecord], pairs: Sequence[PairIndex]) -> tuple[float, float]:
    seg = float(np.mean([r.seg_metric[p.i - 1] for r, p in zip(records, pairs)]))
    parse = float(np.mean([r.parse_metric[p.j - 1] for r, p in zip(records, pairs)]))
    return seg, parse


def _select(model: MediatorModel, records: Sequence[SceneRecord], my: int, mz: int) -> list[PairIndex]:
    return [infer_phi(model, r.phi[:my, :mz]) for r in records]


def _oracle(records: Sequence[SceneRecord], alpha: float, my: int, mz: int) -> list[PairIndex]:
    return [argmin_pair(r.instance(alpha, my, mz).loss) for r in records]


def cross_validate(records: Sequence[SceneRecord], grid: Grid, cfg: CVConfig, layout: FeatureLayout,
                   folds: int = N_FOLDS) -> CVResult:
    """Rotate test/val folds, pick (M_y, M_z, C) on val, report every method on test."""
    _check_grid(records, grid)
    fold_ids = make_folds([r.id for r in records], folds, cfg.seed)
    rows, surface, outcomes, audit = [], [], [], []
    max_y, max_z = max(grid.my), max(grid.mz)
    for f in range(folds):
        test_idx = fold_ids[f]
        val_idx = fold_ids[(f + 1) % folds]
        train_idx = sorted(set(range(len(records))) - set(test_idx) - set(val_idx))
        tr = [records[k] for k in train_idx]
        va = [records[k] for k in val_idx]
        te = [records[k] for k in test_idx]
        audit.append({"fold": f, "train": [r.id for r in tr], "val": [r.id for r in va], "test": [r.id for r in te]})

        models = {}
        best = None
        for my, mz, C in grid.points():
            model = train([r.instance(cfg.alpha, my, mz) for r in tr], layout, cfg.train_config(C))
            models[my, mz, C] = model
            seg, parse = _evaluate(va, _select(model, va, my, mz))
            avg = (seg + parse) / 2
            surface.append({"fold": f, "my": my, "mz": mz, "C": C, "seg": seg, "parse": parse, "average": avg})
            key = (-avg, my, mz, C)
            if best is None or key < best[0]:
                best = (key, (my, mz, C))
        my, mz, C = best[1]

        # domain adaptation picks its own (M_z, C) on the val parse metric
        da_best = None
        for mz_da, C_da in itertools.product(sorted(grid.mz), sorted(grid.C)):
            da = train_domain_adaptation([r.instance(cfg.alpha, 1, mz_da) for r in tr], layout,
                                         cfg.train_config(C_da))
            _, parse = _evaluate(va, [predict_domain_adaptation(da, r.phi[:1, :mz_da]) for r in va])
            key = (-parse, mz_da, C_da)
            if da_best is None or key < da_best[0]:
                da_best = (key, (mz_da, C_da), da)
        (mz_da, C_da), da_model = da_best[1], da_best[2]

        cy, cz = train_cascade([r.instance(cfg.alpha, my, mz) for r in tr], layout, cfg.train_config(C))

        selections = {
            "indep": ([PairIndex(1, 1)] * len(te), (1, 1, None)),
            "domain_adaptation": ([predict_domain_adaptation(da_model, r.phi[:1, :mz_da]) for r in te],
                                  (1, mz_da, C_da)),
            "cascade": ([cascade_phi(cy, cz, r.phi[:my, :mz]) for r in te], (my, mz, C)),
            "mediator": (_select(models[my, mz, C], te, my, mz), (my, mz, C)),
            "oracle": (_oracle(te, cfg.alpha, max_y, max_z), (max_y, max_z, None)),
        }
        for method in METHODS:
            pairs, (sy, sz, sc) = selections[method]
            seg, parse = _evaluate(te, pairs)
            rows.append(MetricsRow(method, f, seg, parse, sy, sz, sc))
            for r, p in zip(te, pairs):
                outcomes.append(Outcome(f, r.id, method, p, float(r.seg_metric[p.i - 1]),
                                        float(r.parse_metric[p.j - 1]), list(r.parse_hits[p.j - 1]),
                                        list(r.gt_preps)))
    result = CVResult(rows, surface, outcomes, audit)
    result.rows += [result.mean_row(m) for m in METHODS]
    return result


def ablate_features(records: Sequence[SceneRecord], groups: Iterable[str], grid: Grid, cfg: CVConfig,
                    layout: FeatureLayout, folds: int = N_FOLDS) -> list[tuple[str, MetricsRow]]:
    """Cross-validated mediator metrics with the full feature set and with each group masked."""
    groups = list(groups)
    for g in groups:
        if g not in ABLATION_GROUPS:
            raise KeyError(f"unknown ablation {g!r}; choose from {sorted(ABLATION_GROUPS)}")
    out = [("all_features", cross_validate(records, grid, cfg, layout, folds).mean_row("mediator"))]
    for g in groups:
        masked = replace(cfg, mask=tuple(cfg.mask) + (ABLATION_GROUPS[g],))
        out.append((g, cross_validate(records, grid, masked, layout, folds).mean_row("mediator")))
    return out


def sweep_alpha(records: Sequence[SceneRecord], alphas: Iterable[float], grid: Grid, cfg: CVConfig,
                layout: FeatureLayout, folds: int = N_FOLDS) -> list[dict]:
    out = []
    for a in alphas:
        if not 0 <= a <= 1:
            raise ValueError(f"alpha {a} outside [0, 1]")
        res = cross_validate(records, grid, replace(cfg, alpha=a), layout, folds)
        row = res.mean_row("mediator")
        out.append({"alpha": a, "seg": row.seg, "parse": row.parse})
    return out


@dataclass
class PrepRow:
    preposition: str
    count: int
    accuracy: float
    indep_accuracy: float

    @property
    def gain(self) -> float:
        return self.accuracy - self.indep_accuracy


def report_per_preposition(outcomes: Sequence[Outcome], prepositions: Sequence[str] | None = None,
                           method: str = "mediator", baseline: str = "indep") -> tuple[list[PrepRow], list[str]]:
    """Per-preposition accuracy of ``method`` and its gain over ``baseline``.

    Returns the rows and notes for prepositions that have no ground-truth
    attachments (those rows are omitted).
    """
    hits = {method: {}, baseline: {}}
    for o in outcomes:
        if o.method not in hits:
            continue
        for prep, h in zip(o.preps, o.hits):
            c = hits[o.method].setdefault(prep, [0, 0])
            c[0] += int(h)
            c[1] += 1
    seen = sorted(hits[method]) if prepositions is None else list(prepositions)
    rows, notes = [], []
    for p in seen:
        m = hits[method].get(p)
        b = hits[baseline].get(p)
        if not m or m[1] == 0:
            notes.append(f"{p}: no ground-truth attachments, row omitted")
            continue
        rows.append(PrepRow(p, m[1], m[0] / m[1], b[0] / b[1] if b and b[1] else 0.0))
    return rows, notes


def viz_preposition(model: MediatorModel, prep: str, grid: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Score of the learned distance weights for a point object at each cell vs one at the center."""
    layout = model.layout
    if layout is None or prep not in layout.prepositions:
        raise KeyError(f"preposition {prep!r} is not in the model layout")
    start = layout.block(prep).start
    w = model.w[start:start + 5] * model.mask_vector()[start:start + 5]
    H, W = grid
    center = ((H - 1) / 2, (W - 1) / 2)
    out = np.zeros(grid)
    for r in range(H):
        for c in range(W):
            out[r, c] = float(np.dot(w, distance_slots((r, c), center, grid)))
    return out


def paired_differences(result: CVResult, a: str = "mediator", b: str = "indep") -> list[dict]:
    """Mean paired difference and t statistic per metric, at fold and at image granularity."""
    out = []
    for metric in ("seg", "parse"):
        fa = np.array([getattr(r, metric) for r in result.fold_rows(a)])
        fb = np.array([getattr(r, metric) for r in result.fold_rows(b)])
        ia = {(o.fold, o.scene_id): getattr(o, metric) for o in result.outcomes if o.method == a}
        ib = {(o.fold, o.scene_id): getattr(o, metric) for o in result.outcomes if o.method == b}
        keys = sorted(ia)
        img = np.array([ia[k] - ib[k] for k in keys])
        for gran, d in (("fold", fa - fb), ("image", img)):
            sd = d.std(ddof=1) if len(d) > 1 else 0.0
            t = d.mean() / (sd / math.sqrt(len(d))) if sd > 0 else (math.inf if d.mean() > 0 else 0.0)
            out.append({"granularity": gran, "metric": metric, "n": len(d), "mean_diff": float(d.mean()),
                        "t_stat": float(t)})
    return out


# -- csv -------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(result: CVResult) -> str:
    return rows_to_csv(["fold", "method", "my", "mz", "C", "jaccard", "ppar_acc", "average"],
                       [(r.fold, r.method, r.my, r.mz, r.C, r.seg, r.parse, r.average) for r in result.rows])


def surface_csv(result: CVResult) -> str:
    return rows_to_csv(["fold", "my", "mz", "C", "jaccard", "ppar_acc", "average"],
                       [(s["fold"], s["my"], s["mz"], s["C"], s["seg"], s["parse"], s["average"])
                        for s in result.surface])
