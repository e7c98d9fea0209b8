import numpy as np
import pytest

from cases import LAYOUT, SIMS, planted_instances, random_case
from oracles import brute_force_argmax, brute_force_argmin
from ppmediator.mediator import (DOMAIN_ADAPTATION_MASK, FeatureContext, Instance, LayoutMismatchError,
                                 MediatorModel, PairIndex, TrainConfig, TrainingDivergedError, argmax_pair, argmin_pair,
                                 hinge_terms, infer, infer_phi, joint_loss, load_model, loss_matrix, objective,
                                 oracle_pair, pair_score, predict_cascade, predict_domain_adaptation,
                                 predict_indep, save_model, train, train_cascade, train_domain_adaptation)
from ppmediator.parser import ParseHypothesis, parse_kbest, tree_from_bracketed
from ppmediator.scenegen import GenConfig, generate_scene
from ppmediator.segmenter import SegmentationHypothesis

TREE = tree_from_bracketed("(S (NP (Det a) (N dog)) (VP (Aux is) (VBI lying)))")


def hyps(rng, my, mz):
    Ys, Zs = [], []
    for i in range(my):
        labels, _ = random_case(rng)
        Ys.append(SegmentationHypothesis(labels[:12, :12], -float(i), i + 1))
    for j in range(mz):
        _, atts = random_case(rng)
        Zs.append(ParseHypothesis(TREE, j + 1, -float(j) - 1, atts))
    return Ys, Zs


class TestScoring:
    def test_zero_weights(self):
        assert pair_score(MediatorModel(np.zeros(5)), np.arange(5.0)) == 0.0

    def test_unit_projection(self):
        w = np.zeros(5)
        w[3] = 1
        phi = np.zeros(5)
        phi[3] = 0.25
        assert pair_score(MediatorModel(w), phi) == 0.25

    def test_random_dot(self, rng):
        w, phi = rng.normal(size=5), rng.normal(size=5)
        assert pair_score(MediatorModel(w), phi) == pytest.approx(sum(a * b for a, b in zip(w, phi)))

    def test_length_mismatch(self):
        with pytest.raises(LayoutMismatchError):
            pair_score(MediatorModel(np.zeros(3)), np.zeros(4))


class TestInference:
    def test_worked_matrix(self):
        assert argmax_pair(np.array([[1.0, 0.3], [0.2, 2.5]])) == PairIndex(2, 2)

    def test_all_equal(self):
        assert argmax_pair(np.zeros((3, 4))) == PairIndex(1, 1)

    def test_singleton(self, rng):
        Ys, Zs = hyps(rng, 1, 1)
        model = MediatorModel(rng.normal(size=LAYOUT.dim), LAYOUT)
        assert infer(model, Ys, Zs, FeatureContext(LAYOUT, SIMS)) == PairIndex(1, 1)

    def test_matches_enumeration(self, rng):
        for _ in range(200):
            w = rng.integers(-2, 3, size=4).astype(float)
            phi = rng.integers(-1, 2, size=(5, 5, 4)).astype(float)
            assert tuple(infer_phi(MediatorModel(w), phi)) == brute_force_argmax(w, phi)

    def test_shift_invariance(self, rng):
        w = rng.normal(size=4)
        phi = rng.normal(size=(4, 4, 4))
        base = infer_phi(MediatorModel(np.append(w, 0.0)), np.concatenate([phi, np.zeros((4, 4, 1))], axis=2))
        shifted = infer_phi(MediatorModel(np.append(w, 1.0)), np.concatenate([phi, np.full((4, 4, 1), 7.0)], axis=2))
        assert base == shifted

    def test_layout_mismatch(self, rng):
        Ys, Zs = hyps(rng, 1, 1)
        other = LAYOUT.__class__(("on",), ("dog",))
        with pytest.raises(LayoutMismatchError):
            infer(MediatorModel(np.zeros(other.dim), other), Ys, Zs, FeatureContext(LAYOUT, SIMS))


class TestLosses:
    def test_joint_loss(self):
        assert joint_loss(0.0, 0.4, 0.2) == 0.2
        assert joint_loss(1.0, 0.4, 0.2) == 0.4
        assert joint_loss(0.5, 0.4, 0.2) == pytest.approx(0.3)
        with pytest.raises(ValueError):
            joint_loss(1.5, 0.1, 0.1)

    def test_oracle_zero_loss_witness(self, grammar):
        s = generate_scene(GenConfig(), 4)
        Ys = [SegmentationHypothesis(np.zeros_like(s.gt_labels), 0.0, 1),
              SegmentationHypothesis(s.gt_labels.copy(), -1.0, 2)]
        Zs = parse_kbest(grammar, s.caption, 10)
        p = oracle_pair(Ys, Zs, (s.gt_labels, s.gt_attachments), 0.5)
        assert p.i == 2
        assert {a.lemmas() for a in Zs[p.j - 1].attachments} == {a.lemmas() for a in s.gt_attachments}

    def test_oracle_brute_force(self, rng):
        for _ in range(100):
            seg = rng.integers(0, 4, size=rng.integers(1, 5)) / 4
            par = rng.integers(0, 3, size=rng.integers(1, 5)) / 2
            L = loss_matrix(0.5, seg, par)
            assert tuple(argmin_pair(L)) == brute_force_argmin(L)

    def test_oracle_empty(self):
        with pytest.raises(ValueError):
            oracle_pair([], [], (np.zeros((2, 2)), []), 0.5)


class TestTraining:
    def test_hinge_hand_case(self):
        # oracle pair scores 0.5, the other pair 0.2, loss 0.5
        phi = np.array([[[0.5], [0.2]]])
        loss = np.array([[0.0, 0.5]])
        h = hinge_terms(np.array([1.0]), Instance(phi, loss))
        assert h[0, 0] == 0.0
        assert h[0, 1] == pytest.approx(0.35)

    def test_separated_start(self):
        phi = np.array([[[3.0], [0.0]], [[1.0], [-1.0]]])
        loss = np.array([[0.0, 0.5], [0.3, 1.0]])
        w0 = np.array([2.0])
        assert objective(w0, [Instance(phi, loss)], TrainConfig(C=1.0), None) == pytest.approx(0.5 * 4.0)

    def test_planted(self, rng):
        data = planted_instances(rng, 120)
        model = train(data[:100], None, TrainConfig(C=1.0, epochs=30))
        assert all(infer_phi(model, d.phi) == argmin_pair(d.loss) for d in data[:100])
        held = np.mean([infer_phi(model, d.phi) == argmin_pair(d.loss) for d in data[100:]])
        assert held >= 0.95
        cfg = TrainConfig(C=1.0)
        assert objective(model.w, data[:100], cfg, None) < objective(np.zeros(6), data[:100], cfg, None)

    def test_c_zero_shrinks_to_zero(self, rng):
        data = planted_instances(rng, 10)
        short = train(data, None, TrainConfig(C=0.0, epochs=20), w0=np.ones(6))
        long = train(data, None, TrainConfig(C=0.0, epochs=200), w0=np.ones(6))
        # objective is 0.5*|w|^2 alone, so the trace falls every epoch
        assert all(b < a for a, b in zip(long.trace, long.trace[1:]))
        assert np.linalg.norm(long.w) < np.linalg.norm(short.w) < 0.1 * np.linalg.norm(np.ones(6))
        assert np.linalg.norm(long.w) < 0.01 * np.linalg.norm(np.ones(6))

    def test_descends_from_zero(self, rng):
        data = planted_instances(rng, 30, dim=4)
        for C in (0.1, 1.0, 10.0):
            cfg = TrainConfig(C=C, epochs=10)
            m = train(data, None, cfg)
            assert objective(m.w, data, cfg, None) <= objective(np.zeros(4), data, cfg, None) + 1e-6
            assert len(m.trace) == 10

    def test_deterministic(self, rng):
        data = planted_instances(rng, 20)
        a = train(data, None, TrainConfig(seed=3, epochs=5))
        b = train(data, None, TrainConfig(seed=3, epochs=5))
        assert np.array_equal(a.w, b.w)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        phi = np.array([[[1e300], [0.0]]])
        loss = np.array([[0.0, 1.0]])
        with pytest.raises(TrainingDivergedError) as err:
            train([Instance(-phi, loss)], None, TrainConfig(C=1e10, epochs=3, eta0=1e10))
        assert err.value.epoch == 0

    def test_mask_zeroes_weights(self, rng):
        data = [Instance(rng.normal(size=(3, 3, LAYOUT.dim)), rng.uniform(size=(3, 3))) for _ in range(10)]
        m = train_domain_adaptation(data, LAYOUT, TrainConfig(epochs=5))
        ps = LAYOUT.slices["parse_score"]
        keep = np.zeros(LAYOUT.dim, bool)
        keep[ps] = True
        assert not m.w[~keep].any()
        assert set(DOMAIN_ADAPTATION_MASK) <= set(m.cfg.mask)

    def test_standardized_training_learns_planted(self, rng):
        data = planted_instances(rng, 60)
        for d in data:
            d.phi[..., 1:] *= 1000.0
        m = train(data, None, TrainConfig(C=1.0, epochs=30, standardize=True))
        assert np.mean([infer_phi(m, d.phi) == argmin_pair(d.loss) for d in data]) >= 0.95


class TestBaselines:
    def test_indep(self, rng):
        Ys, Zs = hyps(rng, 3, 2)
        assert predict_indep(Ys, Zs) == PairIndex(1, 1)
        with pytest.raises(ValueError):
            predict_indep([], Zs)

    def test_indep_is_mediator_one_one(self, rng):
        for _ in range(20):
            phi = rng.normal(size=(4, 4, 5))
            assert infer_phi(MediatorModel(rng.normal(size=5)), phi[:1, :1]) == PairIndex(1, 1)

    def test_cascade_components(self, rng):
        Ys, Zs = hyps(rng, 3, 3)
        ctx = FeatureContext(LAYOUT, SIMS)
        my = MediatorModel(rng.normal(size=LAYOUT.dim), LAYOUT)
        mz = MediatorModel(rng.normal(size=LAYOUT.dim), LAYOUT)
        p = predict_cascade(my, mz, Ys, Zs, ctx)
        assert p.i == infer(my, Ys, Zs[:1], ctx).i
        assert p.j == infer(mz, Ys[:1], Zs, ctx).j
        assert predict_cascade(my, mz, Ys[:1], Zs, ctx).i == 1

    def test_train_cascade_shapes(self, rng):
        data = planted_instances(rng, 20)
        cy, cz = train_cascade(data, None, TrainConfig(epochs=3))
        assert cy.w.shape == cz.w.shape == (6,)

    def test_domain_adaptation_one_parse(self, rng):
        phi = rng.normal(size=(3, 1, 5))
        assert predict_domain_adaptation(MediatorModel(rng.normal(size=5)), phi) == PairIndex(1, 1)


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        m = MediatorModel(rng.normal(size=LAYOUT.dim), LAYOUT, TrainConfig(C=2.0, mask=("word2vec",)), [1.0, 0.5])
        save_model(tmp_path / "model.json", m)
        back = load_model(tmp_path / "model.json", LAYOUT)
        assert np.array_equal(back.w, m.w)
        assert back.cfg == m.cfg

    def test_fingerprint_mismatch(self, tmp_path, rng):
        save_model(tmp_path / "model.json", MediatorModel(np.zeros(LAYOUT.dim), LAYOUT))
        with pytest.raises(LayoutMismatchError):
            load_model(tmp_path / "model.json", LAYOUT.__class__(("on",), ("dog",)))
