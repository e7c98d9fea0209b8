"""Synthetic captioned scenes with known segmentations and PP attachments.

A scene is a grid world of axis-aligned boxes, one per caption noun, plus a
caption drawn from the grammar's templates.  The generator picks one reading
of the caption and lays the boxes out so that this reading, and no competing
reading, satisfies the preposition semantics below.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .parser import Grammar, ParseHypothesis, PrepAttachment, default_grammar, parse_kbest

BACKGROUND = 0

SPATIAL_PREPOSITIONS = ("on", "under", "next_to", "by", "near", "in_front_of", "behind", "with")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class SceneObject:
    category: int
    box: tuple[int, int, int, int]  # col, row, width, height
    draw_order: int

    @property
    def cells(self) -> tuple[slice, slice]:
        col, row, w, h = self.box
        return slice(row, row + h), slice(col, col + w)


@dataclass
class CaptionedScene:
    id: str
    grid: tuple[int, int]
    objects: list[SceneObject]
    gt_labels: np.ndarray
    caption: list[str]
    gt_attachments: list[PrepAttachment]


DEFAULT_CATEGORIES = (
    Category(0, "background"),
    Category(1, "person", ("woman", "man")),
    Category(2, "dog", ("puppy",)),
    Category(3, "cat", ("kitty",)),
    Category(4, "couch", ("sofa",)),
    Category(5, "table", ("desk",)),
    Category(6, "chair", ("stool",)),
    Category(7, "bike", ("bicycle",)),
    Category(8, "ball", ()),
    Category(9, "bird", ("parrot",)),
    Category(10, "car", ("truck",)),
)

DEFAULT_PREPOSITIONS = ("on", "with", "next_to", "in_front_of", "by", "near", "under")


@dataclass
class GenConfig:
    categories: Sequence[Category] = DEFAULT_CATEGORIES
    prepositions: Sequence[str] = DEFAULT_PREPOSITIONS
    grid: tuple[int, int] = (32, 32)
    grammar: Grammar | None = None
    # preterminal sequences with weights; None means the grammar's %template lines
    templates: Sequence[tuple[Sequence[str], float]] | None = None
    synonym_noise: float = 0.0
    size_range: tuple[int, int] = (3, 7)
    min_visible: int = 4
    max_tries: int = 2000

    def get_grammar(self) -> Grammar:
        if self.grammar is None:
            self.grammar = default_grammar()
        return self.grammar

    def get_templates(self) -> list[tuple[tuple[str, ...], float]]:
        src = self.templates if self.templates is not None else self.get_grammar().templates
        return [(tuple(seq), float(w)) for seq, w in src if w > 0]


def validate_categories(categories: Sequence[Category]) -> None:
    ids = [c.id for c in categories]
    if ids != list(range(len(categories))):
        raise ValueError("category ids must be dense 0..K-1 in order")
    if categories[0].name != "background":
        raise ValueError("category 0 must be background")
    seen: set[str] = set()
    for c in categories:
        for word in (c.name, *c.synonyms):
            if word in seen:
                raise ValueError(f"category word {word!r} is not unique")
            seen.add(word)


def _validate_config(cfg: GenConfig) -> None:
    validate_categories(cfg.categories)
    if len(cfg.categories) - 1 < 3:
        raise ValueError("need at least 3 non-background categories")
    if len(cfg.prepositions) < 2:
        raise ValueError("need at least 2 prepositions")
    H, W = cfg.grid
    if H < 8 or W < 8:
        raise ValueError("grid must be at least 8x8")
    lo, hi = cfg.size_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad size range {cfg.size_range}")
    if hi > min(H, W):
        raise GenerationError(f"object size {hi} does not fit a {H}x{W} grid")
    unknown = [p for p in cfg.prepositions if p not in SPATIAL_PREPOSITIONS]
    if unknown:
        raise GenerationError(f"no spatial semantics for preposition {unknown[0]!r}")
    g = cfg.get_grammar()
    missing = [p for p in cfg.prepositions if p not in g.words("P")]
    if missing:
        raise ValueError(f"preposition {missing[0]!r} is not a P terminal of the grammar")
    words = set(g.words("N"))
    for c in cfg.categories[1:]:
        absent = [w for w in (c.name, *c.synonyms) if w not in words]
        if absent:
            raise ValueError(f"noun {absent[0]!r} is not an N terminal of the grammar")
    if not cfg.get_templates():
        raise ValueError("no templates with positive weight")


# -- rasterization and geometry ------------------------------------------


def render_segmentation(objects: Iterable[SceneObject], grid: tuple[int, int]) -> np.ndarray:
    """Label grid with each cell taking the category of its topmost covering object."""
    labels = np.zeros(grid, dtype=np.int64)
    for obj in sorted(objects, key=lambda o: o.draw_order):
        labels[obj.cells] = obj.category
    return labels


def mask_centroid(mask: np.ndarray) -> tuple[float, float] | None:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(rows.mean()), float(cols.mean())


def _touch_vertical(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.any(a[:-1] & b[1:]) or np.any(b[:-1] & a[1:]))


def _boxes_overlap(a: SceneObject, b: SceneObject) -> bool:
    ac, ar, aw, ah = a.box
    bc, br, bw, bh = b.box
    return ac < bc + bw and bc < ac + aw and ar < br + bh and br < ar + ah


def relation_holds(prep: str, gov: SceneObject, dep: SceneObject, labels: np.ndarray) -> bool:
    """Evaluate the generator's preposition semantics on a rendered scene."""
    H, W = labels.shape
    gmask = labels == gov.category
    dmask = labels == dep.category
    gc = mask_centroid(gmask)
    dc = mask_centroid(dmask)
    if gc is None or dc is None:
        return False
    if prep == "on":
        return gc[0] < dc[0] and _touch_vertical(gmask, dmask)
    if prep == "under":
        return gc[0] > dc[0] and _touch_vertical(gmask, dmask)
    if prep in ("next_to", "by", "near"):
        return abs(gc[1] - dc[1]) <= 0.25 * W and abs(gc[0] - dc[0]) <= 0.10 * H
    if prep == "in_front_of":
        return gov.draw_order > dep.draw_order and _boxes_overlap(gov, dep)
    if prep == "behind":
        return gov.draw_order < dep.draw_order and _boxes_overlap(gov, dep)
    if prep == "with":
        return math.dist(gc, dc) <= 0.30 * math.hypot(H, W)
    raise ValueError(f"no semantics for preposition {prep!r}")


def consistent_readings(readings: Sequence[Sequence[PrepAttachment]], objects_by_token: dict[int, SceneObject],
                        labels: np.ndarray) -> list[int]:
    """Indices of readings whose every attachment holds on ``labels``."""
    out = []
    for idx, atts in enumerate(readings):
        if all(relation_holds(a.preposition, objects_by_token[a.governor[0]],
                              objects_by_token[a.dependent[0]], labels) for a in atts):
            out.append(idx)
    return out


# -- generation ------------------------------------------------------------


def _box_at(rng, center_r: float, center_c: float, w: int, h: int) -> tuple[int, int, int, int]:
    return (int(round(center_c - (w - 1) / 2)), int(round(center_r - (h - 1) / 2)), w, h)


def _center(box) -> tuple[float, float]:
    col, row, w, h = box
    return row + (h - 1) / 2, col + (w - 1) / 2


def _propose(rng, prep: str, gbox, w: int, h: int, grid) -> tuple[int, int, int, int]:
    H, W = grid
    gcol, grow, gw, gh = gbox
    gr, gc = _center(gbox)
    if prep in ("on", "under"):
        overlap = int(rng.integers(0, 2))
        row = grow + gh - overlap if prep == "on" else grow - h + overlap
        span = max((gw + w) / 2 - 1.5, 0)
        cc = gc + rng.uniform(-span, span)
        return (int(round(cc - (w - 1) / 2)), row, w, h)
    if prep in ("next_to", "by", "near"):
        hi = 0.25 * W - 0.5
        lo = min((gw + w) / 2, hi)
        dx = rng.uniform(lo, hi) * rng.choice([-1, 1])
        dy = rng.uniform(-0.1 * H + 0.5, 0.1 * H - 0.5)
        return _box_at(rng, gr + dy, gc + dx, w, h)
    if prep in ("in_front_of", "behind"):
        sx = max((gw + w) / 2 - 1.5, 0)
        sy = max((gh + h) / 2 - 1.5, 0)
        return _box_at(rng, gr + rng.uniform(-sy, sy), gc + rng.uniform(-sx, sx), w, h)
    if prep == "with":
        hi = 0.3 * math.hypot(H, W) - 1
        lo = min((max(gw, gh) + max(w, h)) / 2, hi)
        d = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * math.pi)
        return _box_at(rng, gr + d * math.sin(ang), gc + d * math.cos(ang), w, h)
    raise ValueError(prep)


def _inside(box, grid) -> bool:
    col, row, w, h = box
    H, W = grid
    return col >= 0 and row >= 0 and col + w <= W and row + h <= H


def _draw_orders(rng, n: int, before: list[tuple[int, int]]) -> list[int]:
    """Random topological order where each (a, b) in ``before`` draws a before b."""
    prio = rng.permutation(n)
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, b in before:
        succ[a].append(b)
        indeg[b] += 1
    order = [0] * n
    ready = sorted((i for i in range(n) if indeg[i] == 0), key=lambda i: prio[i])
    rank = 1
    while ready:
        i = ready.pop(0)
        order[i] = rank
        rank += 1
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
        ready.sort(key=lambda i: prio[i])
    if rank != n + 1:
        raise GenerationError("cyclic draw-order constraints")
    return order


def _readings(g: Grammar, tokens: Sequence[str]) -> list[list[PrepAttachment]]:
    seen: dict[tuple, list[PrepAttachment]] = {}
    for hyp in parse_kbest(g, tokens, 10_000):
        seen.setdefault(tuple(hyp.attachments), hyp.attachments)
    return list(seen.values())


def _fill_template(rng, cfg: GenConfig, template: Sequence[str]):
    g = cfg.get_grammar()
    cats = list(cfg.categories[1:])
    n_nouns = sum(1 for s in template if s == "N")
    if n_nouns > len(cats):
        raise GenerationError(f"template needs {n_nouns} distinct categories, only {len(cats)} configured")
    chosen = [cats[i] for i in rng.permutation(len(cats))[:n_nouns]]
    tokens: list[str] = []
    noun_cat: dict[int, int] = {}
    for sym in template:
        if sym == "N":
            cat = chosen[len(noun_cat)]
            word = cat.name
            if cat.synonyms and rng.random() < cfg.synonym_noise:
                word = cat.synonyms[int(rng.integers(len(cat.synonyms)))]
            noun_cat[len(tokens)] = cat.id
            tokens.append(word)
        elif sym == "P":
            tokens.append(cfg.prepositions[int(rng.integers(len(cfg.prepositions)))])
        else:
            words = g.words(sym)
            tokens.append(words[int(rng.integers(len(words)))])
    return tokens, noun_cat


def generate_scene(config: GenConfig, seed: int, scene_id: str | None = None) -> CaptionedScene:
    """Generate one scene; identical (config, seed) gives an identical scene."""
    _validate_config(config)
    rng = np.random.default_rng(seed)
    g = config.get_grammar()
    templates = config.get_templates()
    weights = np.array([w for _, w in templates])
    template = templates[int(rng.choice(len(templates), p=weights / weights.sum()))][0]
    tokens, noun_cat = _fill_template(rng, config, template)
    readings = _readings(g, tokens)
    gt = readings[int(rng.integers(len(readings)))]

    # every governor any reading proposes for each preposition token
    rivals: dict[int, set[int]] = {}
    for atts in readings:
        for a in atts:
            rivals.setdefault(a.dependent[0], set()).add(a.governor[0])

    objects, labels = _layout(rng, config, noun_cat, gt, rivals)
    return CaptionedScene(scene_id or f"scene-{seed}", tuple(config.grid), objects, labels, tokens, list(gt))


def _layout(rng, cfg: GenConfig, noun_cat: dict[int, int], gt: list[PrepAttachment],
            rivals: dict[int, set[int]]):
    grid = tuple(cfg.grid)
    lo, hi = cfg.size_range
    nouns = sorted(noun_cat)
    governor_of = {a.dependent[0]: a for a in gt}
    failures: Counter = Counter()
    for _ in range(cfg.max_tries):
        boxes: dict[int, tuple] = {}
        for tok in nouns:
            w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
            att = governor_of.get(tok)
            if att is None:
                col = int(rng.integers(0, grid[1] - w + 1))
                row = int(rng.integers(0, grid[0] - h + 1))
                boxes[tok] = (col, row, w, h)
            else:
                boxes[tok] = _propose(rng, att.preposition, boxes[att.governor[0]], w, h, grid)
        if not all(_inside(b, grid) for b in boxes.values()):
            failures["object outside grid"] += 1
            continue
        index = {tok: i for i, tok in enumerate(nouns)}
        before = []
        for a in gt:
            gi, di = index[a.governor[0]], index[a.dependent[0]]
            if a.preposition == "in_front_of":
                before.append((di, gi))
            elif a.preposition == "behind":
                before.append((gi, di))
        orders = _draw_orders(rng, len(nouns), before)
        objs = {tok: SceneObject(noun_cat[tok], boxes[tok], orders[index[tok]]) for tok in nouns}
        labels = render_segmentation(objs.values(), grid)
        problem = _check(cfg, objs, labels, gt, rivals)
        if problem is None:
            return [objs[t] for t in nouns], labels
        failures[problem] += 1
    worst = failures.most_common(1)[0][0] if failures else "unknown"
    raise GenerationError(f"no layout found in {cfg.max_tries} tries; most frequent failure: {worst}")


def _check(cfg, objs, labels, gt, rivals) -> str | None:
    for tok, obj in objs.items():
        col, row, w, h = obj.box
        visible = int(np.count_nonzero(labels == obj.category))
        if visible < max(cfg.min_visible, 0.3 * w * h):
            return f"noun {tok} mostly occluded"
    for a in gt:
        dep = objs[a.dependent[0]]
        if not relation_holds(a.preposition, objs[a.governor[0]], dep, labels):
            return f"{a.preposition} does not hold for the true governor"
        for other in rivals.get(a.dependent[0], ()):
            if other != a.governor[0] and relation_holds(a.preposition, objs[other], dep, labels):
                return f"{a.preposition} also holds for a rival governor"
    return None


def generate_dataset(config: GenConfig, n: int, seed: int) -> list[CaptionedScene]:
    return [generate_scene(config, seed + i, scene_id=f"s{i:05d}") for i in range(n)]


# -- ambiguity filtering ---------------------------------------------------


@dataclass
class AmbiguityStats:
    total_prepositions: int = 0
    ambiguous_prepositions: int = 0
    multi_ambiguous_sentences: int = 0
    sentences: int = 0

    @property
    def ambiguity_rate(self) -> float:
        if self.total_prepositions == 0:
            return 0.0
        return round(self.ambiguous_prepositions / self.total_prepositions, 4)

    def as_dict(self) -> dict:
        return {"sentences": self.sentences, "total_prepositions": self.total_prepositions,
                "ambiguous_prepositions": self.ambiguous_prepositions,
                "ambiguity_rate": self.ambiguity_rate,
                "multi_ambiguous_sentences": self.multi_ambiguous_sentences}


def ambiguous_prepositions(parses: Sequence[ParseHypothesis]) -> set[int]:
    """Token positions of prepositions whose attachment varies across the parses.

    A preposition is ambiguous when two parses share one of its objects but
    differ on the other.
    """
    pairs: dict[int, set[tuple[int, int]]] = {}
    for hyp in parses:
        for a in hyp.attachments:
            pairs.setdefault(a.prep_idx, set()).add((a.governor[0], a.dependent[0]))
    out = set()
    for pos, ps in pairs.items():
        ps = sorted(ps)
        if any((p[0] == q[0]) != (p[1] == q[1]) for i, p in enumerate(ps) for q in ps[i + 1:]):
            out.add(pos)
    return out


def filter_ambiguous(scenes: Sequence[CaptionedScene], parser: Grammar | Callable, k: int,
                     prepositions: Iterable[str] | None = None):
    """Keep scenes whose caption has at least one ambiguous preposition among its k-best parses.

    Returns ``(kept, stats)`` with statistics over the kept scenes.
    """
    parse = parser if callable(parser) else (lambda toks, kk: parse_kbest(parser, toks, kk))
    preps = set(prepositions) if prepositions is not None else None
    kept = []
    stats = AmbiguityStats()
    for scene in scenes:
        try:
            hyps = parse(scene.caption, k)
        except ValueError as err:
            raise ValueError(f"caption of {scene.id} is unparseable: {' '.join(scene.caption)!r} ({err})") from err
        amb = ambiguous_prepositions(hyps)
        if not amb:
            continue
        kept.append(scene)
        stats.sentences += 1
        n_preps = sum(1 for a in hyps[0].attachments if preps is None or a.preposition in preps)
        stats.total_prepositions += n_preps
        stats.ambiguous_prepositions += len(amb)
        if len(amb) > 1:
            stats.multi_ambiguous_sentences += 1
    return kept, stats


# -- files -----------------------------------------------------------------


def scene_to_json(scene: CaptionedScene) -> dict:
    H, W = scene.grid
    return {
        "id": scene.id, "H": H, "W": W,
        "objects": [{"cat": o.category, "col": o.box[0], "row": o.box[1], "w": o.box[2], "h": o.box[3],
                     "order": o.draw_order} for o in scene.objects],
        "labels": [int(v) for v in scene.gt_labels.ravel()],
        "caption": list(scene.caption),
        "gt_attachments": [attachment_to_json(a) for a in scene.gt_attachments],
    }


def attachment_from_json(d: dict) -> PrepAttachment:
    return PrepAttachment(d["prep"], (int(d["gov_idx"]), d["gov"]), (int(d["dep_idx"]), d["dep"]),
                          d.get("prep_idx"))


def attachment_to_json(a: PrepAttachment) -> dict:
    d = {"prep": a.preposition, "gov_idx": a.governor[0], "gov": a.governor[1],
         "dep_idx": a.dependent[0], "dep": a.dependent[1]}
    if a.prep_idx is not None:
        d["prep_idx"] = a.prep_idx
    return d


def scene_from_json(d: dict) -> CaptionedScene:
    H, W = int(d["H"]), int(d["W"])
    objects = [SceneObject(int(o["cat"]), (int(o["col"]), int(o["row"]), int(o["w"]), int(o["h"])), int(o["order"]))
               for o in d["objects"]]
    labels = np.asarray(d["labels"], dtype=np.int64).reshape(H, W)
    return CaptionedScene(d["id"], (H, W), objects, labels, list(d["caption"]),
                          [attachment_from_json(a) for a in d["gt_attachments"]])


def write_scenes(path, scenes: Iterable[CaptionedScene]) -> None:
    with open(path, "w") as f:
        for s in scenes:
            f.write(json.dumps(scene_to_json(s), separators=(",", ":")) + "\n")


def read_scenes(path) -> list[CaptionedScene]:
    with open(path) as f:
        return [scene_from_json(json.loads(line)) for line in f if line.strip()]


def write_categories(path, categories: Sequence[Category]) -> None:
    with open(path, "w") as f:
        for c in categories:
            f.write(f"{c.id}\t{c.name}\t{','.join(c.synonyms)}\n")


def read_categories(path) -> list[Category]:
    cats = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            syn = tuple(s for s in (parts[2].split(",") if len(parts) > 2 else []) if s)
            cats.append(Category(int(parts[0]), parts[1], syn))
    validate_categories(cats)
    return cats
