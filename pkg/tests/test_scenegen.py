import numpy as np
import pytest

from ppmediator.parser import PrepAttachment, parse_kbest
from ppmediator.scenegen import (DEFAULT_CATEGORIES, AmbiguityStats, Category, GenConfig, GenerationError,
                                 SceneObject, consistent_readings, filter_ambiguous, generate_dataset,
                                 generate_scene, read_categories, read_scenes, relation_holds,
                                 render_segmentation, write_categories, write_scenes)

CAT = {c.name: c.id for c in DEFAULT_CATEGORIES}


def noun_category(noun):
    for c in DEFAULT_CATEGORIES:
        if noun == c.name or noun in c.synonyms:
            return c.id
    raise KeyError(noun)


def objects_by_token(scene, grammar):
    by_cat = {o.category: o for o in scene.objects}
    nouns = set(grammar.words("N"))
    return {i: by_cat[noun_category(t)] for i, t in enumerate(scene.caption) if t in nouns}


def readings(grammar, caption):
    seen = []
    for h in parse_kbest(grammar, caption, 10000):
        key = sorted(h.attachments, key=lambda a: a.prep_idx)
        if key not in seen:
            seen.append(key)
    return seen


class TestRender:
    def test_empty_world(self):
        assert not render_segmentation([], (5, 6)).any()

    def test_occlusion_by_order(self):
        a = SceneObject(1, (0, 0, 3, 3), 1)
        b = SceneObject(2, (1, 1, 3, 3), 2)
        labels = render_segmentation([b, a], (5, 5))
        assert labels[1, 1] == 2 and labels[0, 0] == 1

    def test_cell_count(self):
        labels = render_segmentation([SceneObject(3, (1, 1, 2, 2), 1)], (4, 4))
        assert np.count_nonzero(labels == 3) == 4
        assert np.count_nonzero(labels == 0) == 12
        assert labels[1:3, 1:3].tolist() == [[3, 3], [3, 3]]


class TestSemantics:
    def test_woman_on_couch_reading(self, grammar):
        # woman sits directly on the couch, the dog stands to her left with a gap above the couch
        dog = SceneObject(CAT["dog"], (6, 11, 5, 4), 1)
        woman = SceneObject(CAT["person"], (14, 10, 5, 6), 2)
        couch = SceneObject(CAT["couch"], (12, 16, 9, 4), 1)
        labels = render_segmentation([dog, woman, couch], (32, 32))
        caption = "a dog is standing next_to a woman on a couch".split()
        rs = readings(grammar, caption)
        ok = consistent_readings(rs, {1: dog, 6: woman, 9: couch}, labels)
        assert len(ok) == 1
        lem = {a.lemmas() for a in rs[ok[0]]}
        assert ("on", "woman", "couch") in lem
        assert ("on", "dog", "couch") not in lem

    def test_on_needs_contact(self):
        top = SceneObject(1, (0, 0, 3, 3), 1)
        below_touching = SceneObject(2, (0, 3, 3, 3), 1)
        below_gap = SceneObject(2, (0, 4, 3, 3), 1)
        assert relation_holds("on", top, below_touching, render_segmentation([top, below_touching], (10, 10)))
        assert not relation_holds("on", top, below_gap, render_segmentation([top, below_gap], (10, 10)))
        assert relation_holds("under", below_touching, top, render_segmentation([top, below_touching], (10, 10)))

    def test_unknown_preposition(self):
        o = SceneObject(1, (0, 0, 2, 2), 1)
        with pytest.raises(ValueError):
            relation_holds("across", o, o, render_segmentation([o], (4, 4)))


class TestGenerate:
    def test_deterministic(self):
        cfg = GenConfig(prepositions=("on", "next_to"))
        a = generate_scene(cfg, 7)
        b = generate_scene(cfg, 7)
        assert a.caption == b.caption
        assert np.array_equal(a.gt_labels, b.gt_labels)
        assert a.gt_attachments == b.gt_attachments

    def test_zero_prepositions(self):
        cfg = GenConfig(templates=[(("Det", "N", "Aux", "VBI"), 1.0)])
        s = generate_scene(cfg, 0)
        assert s.gt_attachments == []
        assert len(s.objects) == 1

    def test_scene_invariants(self, grammar):
        cfg = GenConfig(synonym_noise=0.3)
        for s in generate_dataset(cfg, 25, seed=11):
            assert np.array_equal(render_segmentation(s.objects, s.grid), s.gt_labels)
            rs = readings(grammar, s.caption)
            ok = consistent_readings(rs, objects_by_token(s, grammar), s.gt_labels)
            assert len(ok) == 1
            assert {a.lemmas() for a in rs[ok[0]]} == {a.lemmas() for a in s.gt_attachments}
            assert {a.preposition for a in s.gt_attachments} <= set(cfg.prepositions)

    def test_bad_config(self):
        with pytest.raises((ValueError, GenerationError)):
            generate_scene(GenConfig(prepositions=("across",)), 0)

    def test_duplicate_category_names(self):
        cats = (Category(0, "background"), Category(1, "dog"), Category(2, "dog"))
        with pytest.raises(ValueError):
            generate_scene(GenConfig(categories=cats), 0)


class TestFilter:
    def test_dog_woman_couch_kept(self, grammar):
        s = generate_scene(GenConfig(), 3)
        s.caption = "a dog is standing next_to a woman on a couch".split()
        kept, stats = filter_ambiguous([s], grammar, 10)
        assert kept == [s]
        assert stats.ambiguous_prepositions == 1 and stats.total_prepositions == 2

    def test_no_pp_excluded(self, grammar):
        s = generate_scene(GenConfig(templates=[(("Det", "N", "Aux", "VBI"), 1.0)]), 0)
        kept, stats = filter_ambiguous([s], grammar, 10)
        assert kept == [] and stats.ambiguity_rate == 0.0

    def test_single_parse_everywhere(self):
        scenes = generate_dataset(GenConfig(), 3, 0)
        kept, stats = filter_ambiguous(scenes, lambda toks, k: [], 10)
        assert kept == [] and stats.ambiguity_rate == 0.0

    def test_stats(self, grammar):
        kept, stats = filter_ambiguous(generate_dataset(GenConfig(), 30, 5), grammar, 10)
        assert stats.ambiguous_prepositions <= stats.total_prepositions
        assert stats.ambiguity_rate == round(stats.ambiguous_prepositions / stats.total_prepositions, 4)
        assert AmbiguityStats().ambiguity_rate == 0.0


def test_file_round_trip(tmp_path):
    scenes = generate_dataset(GenConfig(synonym_noise=0.5), 4, 2)
    write_scenes(tmp_path / "scenes.jsonl", scenes)
    back = read_scenes(tmp_path / "scenes.jsonl")
    for a, b in zip(scenes, back):
        assert a.caption == b.caption and a.objects == b.objects
        assert np.array_equal(a.gt_labels, b.gt_labels)
        assert a.gt_attachments == b.gt_attachments
    write_categories(tmp_path / "categories.tsv", DEFAULT_CATEGORIES)
    assert tuple(read_categories(tmp_path / "categories.tsv")) == DEFAULT_CATEGORIES
    assert isinstance(scenes[0].gt_attachments[0], PrepAttachment)
