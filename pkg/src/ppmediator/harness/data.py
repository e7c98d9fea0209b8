"""Hypothesis files and the per-scene records the experiments run on."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import FeatureLayout, SimilarityTable, pair_features
from ..mediator import Instance, loss_matrix
from ..parser import Grammar, ParseHypothesis, attachment_hits, parse_kbest, tree_from_bracketed
from ..scenegen import CaptionedScene, attachment_from_json, attachment_to_json
from ..segmenter import SegmentationHypothesis, divmbest, jaccard, unary_from_scene


@dataclass
class HypConfig:
    k: int = 10
    M: int = 10
    noise: float = 0.3
    lam: float = 0.5
    potts: float = 0.6
    seed: int = 0


def seg_hypotheses(scene: CaptionedScene, n_labels: int, cfg: HypConfig, index: int) -> list[SegmentationHypothesis]:
    crf = unary_from_scene(scene.gt_labels, n_labels, cfg.noise, cfg.seed + index, cfg.potts)
    return divmbest(crf, cfg.M, cfg.lam)


def parse_hypotheses(scene: CaptionedScene, grammar: Grammar, k: int) -> list[ParseHypothesis]:
    return parse_kbest(grammar, scene.caption, k)


def parses_to_json(scene_id: str, k: int, hyps: Sequence[ParseHypothesis]) -> dict:
    return {"scene_id": scene_id, "k": k,
            "hypotheses": [{"rank": h.rank, "log_prob": h.score, "tree": str(h.tree),
                            "attachments": [attachment_to_json(a) for a in h.attachments]} for h in hyps]}


def parses_from_json(d: dict) -> list[ParseHypothesis]:
    return [ParseHypothesis(tree_from_bracketed(h["tree"]), int(h["rank"]), float(h["log_prob"]),
                            [attachment_from_json(a) for a in h["attachments"]]) for h in d["hypotheses"]]


def segs_to_json(scene_id: str, M: int, lam: float, hyps: Sequence[SegmentationHypothesis]) -> dict:
    return {"scene_id": scene_id, "M": M, "lambda": lam,
            "hypotheses": [{"rank": h.rank, "score": h.score, "labels": [int(v) for v in h.labels.ravel()]}
                           for h in hyps]}


def segs_from_json(d: dict, shape: tuple[int, int]) -> list[SegmentationHypothesis]:
    return [SegmentationHypothesis(np.asarray(h["labels"], dtype=np.int64).reshape(shape), float(h["score"]),
                                   int(h["rank"])) for h in d["hypotheses"]]


def _write_jsonl(path, docs) -> None:
    with open(path, "w") as f:
        for d in docs:
            f.write(json.dumps(d, separators=(",", ":")) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def generate_hypotheses(scenes: Sequence[CaptionedScene], grammar: Grammar, n_labels: int, cfg: HypConfig,
                        out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parses, segs = [], []
    for idx, scene in enumerate(scenes):
        parses.append(parses_to_json(scene.id, cfg.k, parse_hypotheses(scene, grammar, cfg.k)))
        segs.append(segs_to_json(scene.id, cfg.M, cfg.lam, seg_hypotheses(scene, n_labels, cfg, idx)))
    _write_jsonl(out / "parses.jsonl", parses)
    _write_jsonl(out / "seg_hyps.jsonl", segs)
    return out / "parses.jsonl", out / "seg_hyps.jsonl"


@dataclass
class SceneRecord:
    """Everything the rerankers need about one scene, computed once."""

    id: str
    phi: np.ndarray  # (My, Mz, D)
    seg_metric: np.ndarray  # jaccard of each segmentation hypothesis
    parse_metric: np.ndarray  # attachment accuracy of each parse hypothesis
    parse_hits: list[list[bool]]  # per parse, per gt attachment
    gt_preps: list[str]
    stored_y: int
    stored_z: int

    def instance(self, alpha: float, my: int | None = None, mz: int | None = None) -> Instance:
        loss = loss_matrix(alpha, 1.0 - self.seg_metric, 1.0 - self.parse_metric)
        inst = Instance(self.phi, loss, self.id)
        if my is not None or mz is not None:
            inst = inst.truncate(my or self.phi.shape[0], mz or self.phi.shape[1])
        return inst


def build_record(scene: CaptionedScene, Ys: Sequence[SegmentationHypothesis], Zs: Sequence[ParseHypothesis],
                 layout: FeatureLayout, sims: SimilarityTable, stored_y: int, stored_z: int) -> SceneRecord:
    phi = pair_features(Ys, Zs, layout, sims)
    seg = np.array([jaccard(y.labels, scene.gt_labels) for y in Ys])
    hits = [attachment_hits(z.attachments, scene.gt_attachments) for z in Zs]
    par = np.array([sum(h) / len(h) for h in hits])
    return SceneRecord(scene.id, phi, seg, par, hits, [a.preposition for a in scene.gt_attachments],
                       stored_y, stored_z)


def build_records(scenes: Sequence[CaptionedScene], parses_path, segs_path, layout: FeatureLayout,
                  sims: SimilarityTable) -> list[SceneRecord]:
    parses = {d["scene_id"]: d for d in _read_jsonl(parses_path)}
    segs = {d["scene_id"]: d for d in _read_jsonl(segs_path)}
    out = []
    for scene in scenes:
        if not scene.gt_attachments:
            continue
        p, s = parses.get(scene.id), segs.get(scene.id)
        if p is None or s is None:
            raise KeyError(f"no hypotheses stored for scene {scene.id}")
        out.append(build_record(scene, segs_from_json(s, scene.grid), parses_from_json(p), layout, sims,
                                int(s["M"]), int(p["k"])))
    return out


def records_in_memory(scenes: Sequence[CaptionedScene], grammar: Grammar, layout: FeatureLayout,
                      sims: SimilarityTable, cfg: HypConfig) -> list[SceneRecord]:
    """Same records as the file round trip, without touching disk."""
    n_labels = len(layout.categories) + 1
    out = []
    for idx, scene in enumerate(scenes):
        if not scene.gt_attachments:
            continue
        Ys = seg_hypotheses(scene, n_labels, cfg, idx)
        Zs = parse_hypotheses(scene, grammar, cfg.k)
        out.append(build_record(scene, Ys, Zs, layout, sims, cfg.M, cfg.k))
    return out
