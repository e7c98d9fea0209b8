"""Score and consistency features for (segmentation, parse) hypothesis pairs.

The joint feature vector is laid out as::

    [seg rank, seg score | parse rank, log prob, preposition indicators |
     per-preposition consistency blocks | category presence]

Each consistency block holds, for the attachments using that preposition,
the normalized centroid distance, four clipped directional displacements,
the smaller/larger area ratio and the two noun-to-category similarities.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .parser import ParseHypothesis, PrepAttachment
from .scenegen import Category
from .segmenter import SegmentationHypothesis

SLOT_NAMES = ("euclidean", "above", "below", "left", "right", "size_ratio", "sim_governor", "sim_dependent")
DISTANCE_SLOTS = 5

FEATURE_GROUPS = {
    "euclidean": (0,),
    "directional": (1, 2, 3, 4),
    "size_ratio": (5,),
    "word2vec": (6, 7),
}
PRESENCE_GROUP = "category_presence"
ALL_CONSISTENCY = "all_consistency"


@dataclass(frozen=True)
class FeatureLayout:
    prepositions: tuple[str, ...]
    categories: tuple[str, ...]  # non-background, in category-id order starting at 1
    use_category_presence: bool = True
    distance_only_consistency: bool = False

    def __post_init__(self):
        object.__setattr__(self, "prepositions", tuple(self.prepositions))
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.prepositions)) != len(self.prepositions):
            raise ValueError("duplicate preposition in layout")

    @property
    def n_preps(self) -> int:
        return len(self.prepositions)

    @property
    def block_size(self) -> int:
        return DISTANCE_SLOTS if self.distance_only_consistency else len(SLOT_NAMES)

    @property
    def slices(self) -> dict[str, slice]:
        P = self.n_preps
        seg = slice(0, 2)
        parse = slice(2, 4 + P)
        cons = slice(parse.stop, parse.stop + self.block_size * P)
        pres = slice(cons.stop, cons.stop + (len(self.categories) if self.use_category_presence else 0))
        return {"seg_score": seg, "parse_score": parse, "consistency": cons, "category_presence": pres}

    @property
    def dim(self) -> int:
        return self.slices["category_presence"].stop

    def block(self, prep: str) -> slice:
        start = self.slices["consistency"].start + self.prepositions.index(prep) * self.block_size
        return slice(start, start + self.block_size)

    def slot_index(self, prep: str, slot: str) -> int:
        k = SLOT_NAMES.index(slot)
        if k >= self.block_size:
            raise KeyError(f"slot {slot} is not in a distance-only layout")
        return self.block(prep).start + k

    def group_indices(self, group: str) -> np.ndarray:
        """Feature indices of a named consistency group; empty if absent from this layout."""
        if group == PRESENCE_GROUP:
            s = self.slices["category_presence"]
            return np.arange(s.start, s.stop)
        if group == ALL_CONSISTENCY:
            s = self.slices["consistency"]
            p = self.slices["category_presence"]
            return np.concatenate([np.arange(s.start, s.stop), np.arange(p.start, p.stop)])
        if group not in FEATURE_GROUPS:
            raise KeyError(f"unknown feature group {group!r}")
        slots = [k for k in FEATURE_GROUPS[group] if k < self.block_size]
        cons = self.slices["consistency"].start
        return np.array([cons + b * self.block_size + k for b in range(self.n_preps) for k in slots], dtype=int)

    def names(self) -> list[str]:
        out = ["seg_rank", "seg_score", "parse_rank", "parse_logprob"]
        out += [f"has_{p}" for p in self.prepositions]
        for p in self.prepositions:
            out += [f"{p}:{s}" for s in SLOT_NAMES[: self.block_size]]
        if self.use_category_presence:
            out += [f"present:{c}" for c in self.categories]
        return out

    def to_json(self) -> dict:
        return {"prepositions": list(self.prepositions), "categories": list(self.categories),
                "flags": {"use_category_presence": self.use_category_presence,
                          "distance_only_consistency": self.distance_only_consistency}}

    @classmethod
    def from_json(cls, d: dict) -> FeatureLayout:
        flags = d.get("flags", {})
        return cls(tuple(d["prepositions"]), tuple(d["categories"]),
                   bool(flags.get("use_category_presence", True)),
                   bool(flags.get("distance_only_consistency", False)))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        if self.values.shape != (self.layout.dim,):
            raise ValueError(f"feature length {self.values.shape} does not match layout dim {self.layout.dim}")


@dataclass
class SimilarityTable:
    """Noun-to-category similarities; missing pairs read as 0."""

    table: dict[tuple[str, str], float] = field(default_factory=dict)

    def __call__(self, noun: str, category: str) -> float:
        if noun == category:
            return 1.0
        return self.table.get((noun, category), 0.0)

    @classmethod
    def from_categories(cls, categories: Iterable[Category], synonym_sim: float = 0.8) -> SimilarityTable:
        t = {}
        for c in categories:
            if c.id == 0:
                continue
            t[(c.name, c.name)] = 1.0
            for s in c.synonyms:
                t[(s, c.name)] = synonym_sim
        return cls(t)

    def best_category(self, noun: str, categories: Sequence[str]) -> int | None:
        """Index of the most similar category (first on ties), None if all are 0."""
        best, best_sim = None, 0.0
        for idx, cat in enumerate(categories):
            s = self(noun, cat)
            if s > best_sim:
                best, best_sim = idx, s
        return best

    def write(self, path) -> None:
        with open(path, "w") as f:
            for (noun, cat), s in sorted(self.table.items()):
                f.write(f"{noun}\t{cat}\t{s!r}\n")

    @classmethod
    def read(cls, path) -> SimilarityTable:
        t = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                noun, cat, val = line.rstrip("\n").split("\t")
                s = float(val)
                if not 0 <= s <= 1:
                    raise ValueError(f"{path}:{lineno}: similarity {s} outside [0, 1]")
                t[(noun, cat)] = s
        return cls(t)


# -- per-hypothesis geometry -----------------------------------------------


@dataclass(frozen=True)
class SegStats:
    """Centroid (row, col) and area of every category in one label grid."""

    shape: tuple[int, int]
    centroid: dict[int, tuple[float, float]]
    area: dict[int, int]

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> SegStats:
        labels = np.asarray(labels)
        rows, cols = np.indices(labels.shape)
        flat = labels.ravel()
        n = int(flat.max()) + 1
        area = np.bincount(flat, minlength=n)
        rsum = np.bincount(flat, weights=rows.ravel(), minlength=n)
        csum = np.bincount(flat, weights=cols.ravel(), minlength=n)
        cen, ar = {}, {}
        for c in np.nonzero(area)[0]:
            c = int(c)
            ar[c] = int(area[c])
            cen[c] = (rsum[c] / area[c], csum[c] / area[c])
        return cls(labels.shape, cen, ar)


def distance_slots(gov: tuple[float, float], dep: tuple[float, float], shape: tuple[int, int]) -> list[float]:
    """Euclidean and clipped directional displacement of governor relative to dependent."""
    H, W = shape
    dr = dep[0] - gov[0]  # > 0 when the governor is above
    dc = dep[1] - gov[1]  # > 0 when the governor is to the left
    return [math.hypot(dr, dc) / math.hypot(H, W),
            max(0.0, dr / H), max(0.0, -dr / H),
            max(0.0, dc / W), max(0.0, -dc / W)]


def seg_score_features(h: SegmentationHypothesis) -> np.ndarray:
    return np.array([float(h.rank), float(h.score)])


def parse_score_features(h: ParseHypothesis, layout: FeatureLayout) -> np.ndarray:
    out = np.zeros(2 + layout.n_preps)
    out[0] = h.rank
    out[1] = h.score
    for a in h.attachments:
        try:
            out[2 + layout.prepositions.index(a.preposition)] = 1.0
        except ValueError:
            raise ValueError(f"preposition {a.preposition!r} is not in the layout inventory") from None
    return out


def _stats(seg) -> SegStats:
    if isinstance(seg, SegStats):
        return seg
    labels = seg.labels if isinstance(seg, SegmentationHypothesis) else seg
    return SegStats.from_labels(labels)


def consistency_features(seg, attachments: Sequence[PrepAttachment], layout: FeatureLayout,
                         sims: SimilarityTable, dims: tuple[int, int] | None = None) -> np.ndarray:
    """Per-preposition consistency blocks of one segmentation against one parse.

    ``seg`` may be a hypothesis, a label grid or precomputed ``SegStats``.
    """
    st = _stats(seg)
    if dims is not None and tuple(dims) != tuple(st.shape):
        raise ValueError(f"segmentation shape {st.shape} does not match {dims}")
    B = layout.block_size
    out = np.zeros(B * layout.n_preps)
    for a in attachments:
        if a.preposition not in layout.prepositions:
            continue
        base = layout.prepositions.index(a.preposition) * B
        c1 = sims.best_category(a.governor[1], layout.categories)
        c2 = sims.best_category(a.dependent[1], layout.categories)
        # category ids are layout positions + 1
        g = st.centroid.get(c1 + 1) if c1 is not None else None
        d = st.centroid.get(c2 + 1) if c2 is not None else None
        if g is not None and d is not None:
            out[base:base + DISTANCE_SLOTS] += distance_slots(g, d, st.shape)
            if B > DISTANCE_SLOTS:
                a1, a2 = st.area[c1 + 1], st.area[c2 + 1]
                out[base + 5] += min(a1, a2) / max(a1, a2)
        if B > DISTANCE_SLOTS:
            if g is not None:
                out[base + 6] += sims(a.governor[1], layout.categories[c1])
            if d is not None:
                out[base + 7] += sims(a.dependent[1], layout.categories[c2])
    return out


def attachment_nouns(attachments: Iterable[PrepAttachment]) -> list[str]:
    """Distinct nouns (by token position) taking part in the attachments."""
    seen: dict[int, str] = {}
    for a in attachments:
        seen.setdefault(a.governor[0], a.governor[1])
        seen.setdefault(a.dependent[0], a.dependent[1])
    return [seen[k] for k in sorted(seen)]


def category_presence_features(seg, attachments: Sequence[PrepAttachment], layout: FeatureLayout,
                               sims: SimilarityTable) -> np.ndarray:
    st = _stats(seg)
    nouns = attachment_nouns(attachments)
    out = np.zeros(len(layout.categories))
    for k, cat in enumerate(layout.categories):
        s = sum(sims(n, cat) for n in nouns)
        out[k] = s if (k + 1) in st.area else -s
    return out


def assemble_phi(seg_h: SegmentationHypothesis | None, parse_h: ParseHypothesis | None,
                 layout: FeatureLayout, sims: SimilarityTable, dims: tuple[int, int] | None = None,
                 seg_stats: SegStats | None = None) -> FeatureVector:
    """Joint feature vector of one pair; a missing hypothesis leaves its slices at zero."""
    sl = layout.slices
    out = np.zeros(layout.dim)
    if seg_h is not None:
        out[sl["seg_score"]] = seg_score_features(seg_h)
    if parse_h is not None:
        out[sl["parse_score"]] = parse_score_features(parse_h, layout)
    if seg_h is not None and parse_h is not None:
        st = seg_stats if seg_stats is not None else _stats(seg_h)
        out[sl["consistency"]] = consistency_features(st, parse_h.attachments, layout, sims, dims)
        if layout.use_category_presence:
            out[sl["category_presence"]] = category_presence_features(st, parse_h.attachments, layout, sims)
    return FeatureVector(out, layout)


def pair_features(Ys: Sequence[SegmentationHypothesis], Zs: Sequence[ParseHypothesis],
                  layout: FeatureLayout, sims: SimilarityTable) -> np.ndarray:
    """Feature tensor of shape (len(Ys), len(Zs), dim) for every pair."""
    stats = [SegStats.from_labels(y.labels) for y in Ys]
    out = np.zeros((len(Ys), len(Zs), layout.dim))
    for i, y in enumerate(Ys):
        for j, z in enumerate(Zs):
            out[i, j] = assemble_phi(y, z, layout, sims, seg_stats=stats[i]).values
    return out


def layout_for(categories: Sequence[Category], prepositions: Sequence[str], **flags) -> FeatureLayout:
    return FeatureLayout(tuple(prepositions), tuple(c.name for c in categories if c.id != 0), **flags)
