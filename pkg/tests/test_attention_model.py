"""Attention pooling, classification, and the joint objective."""

import math

import numpy as np
import pytest
from conftest import path_of, toy_model, underflow_setup

from ugre import numerics as nm
from ugre.attention_model import (
    EmptyBagError,
    ModelConfig,
    ModelError,
    bag_attention,
    build_model,
    classify,
    complexity_guided_reps,
    forward_bag,
    joint_loss,
    make_loss_fn,
)
from ugre.data_io import Bag, SentenceEvidence
from ugre.encoders import Vocab
from ugre.numerics import ParamSlot, Tape, Tensor


def attn_params(rng, kg_dim, filters):
    w = ParamSlot("attn_w", Tensor(rng.normal(size=(kg_dim, filters))), "net")
    b = ParamSlot("attn_b", Tensor(rng.normal(size=kg_dim)), "net")
    return w, b


class TestBagAttention:
    def test_single_item_identity(self):
        rng = np.random.default_rng(0)
        w, b = attn_params(rng, 4, 3)
        item = Tensor(rng.normal(size=3))
        out, weights = bag_attention(None, [item], Tensor(rng.normal(size=4)), w, b)
        assert weights.data.tolist() == [1.0]
        assert np.array_equal(out.data, item.data)

    def test_identical_items_split_evenly(self):
        rng = np.random.default_rng(1)
        w, b = attn_params(rng, 4, 3)
        vec = rng.normal(size=3)
        out, weights = bag_attention(
            None, [Tensor(vec), Tensor(vec.copy())], Tensor(rng.normal(size=4)), w, b
        )
        assert weights.data.tolist() == [0.5, 0.5]
        assert np.allclose(out.data, vec, atol=1e-15)

    def test_three_items_match_direct_oracle(self):
        rng = np.random.default_rng(2)
        w, b = attn_params(rng, 4, 3)
        items = [rng.normal(size=3) for _ in range(3)]
        rht = rng.normal(size=4)
        out, weights = bag_attention(None, [Tensor(v) for v in items], Tensor(rht), w, b)
        logits = [
            rht @ np.tanh(w.value.data @ v + b.value.data) for v in items
        ]
        e = np.exp(np.array(logits) - max(logits))
        expect_w = e / e.sum()
        expect_out = sum(wi * v for wi, v in zip(expect_w, items))
        assert np.allclose(weights.data, expect_w, atol=1e-12)
        assert np.allclose(out.data, expect_out, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        w, b = attn_params(rng, 4, 3)
        items = [rng.normal(size=3) for _ in range(5)]
        rht = Tensor(rng.normal(size=4))
        _, w1 = bag_attention(None, [Tensor(v) for v in items], rht, w, b)
        perm = [3, 1, 4, 0, 2]
        _, w2 = bag_attention(None, [Tensor(items[i]) for i in perm], rht, w, b)
        assert np.allclose(w2.data, w1.data[perm], atol=1e-12)

    def test_weights_normalized(self):
        rng = np.random.default_rng(4)
        w, b = attn_params(rng, 4, 3)
        for _ in range(200):
            m = rng.integers(1, 8)
            items = [Tensor(rng.normal(size=3)) for _ in range(int(m))]
            _, weights = bag_attention(None, items, Tensor(rng.normal(size=4)), w, b)
            assert (weights.data >= 0).all()
            assert abs(weights.data.sum() - 1.0) <= 1e-9

    def test_empty_bag_rejected(self):
        rng = np.random.default_rng(5)
        w, b = attn_params(rng, 4, 3)
        with pytest.raises(EmptyBagError):
            bag_attention(None, [], Tensor(np.zeros(4)), w, b)


class TestGroupedAttention:
    def test_group_of_one_is_verbatim(self):
        rng = np.random.default_rng(6)
        w, b = attn_params(rng, 4, 3)
        vecs = [Tensor(rng.normal(size=3)) for _ in range(3)]
        p_c, p_s, w_c, w_s = complexity_guided_reps(
            None, vecs, ([2], [0]), Tensor(rng.normal(size=4)), w, b
        )
        assert np.array_equal(p_c.data, vecs[2].data)
        assert np.array_equal(p_s.data, vecs[0].data)
        assert w_c.data.tolist() == [1.0]

    def test_whole_bag_groups_recompute_pooled_rep(self):
        rng = np.random.default_rng(7)
        w, b = attn_params(rng, 4, 3)
        vecs = [Tensor(rng.normal(size=3)) for _ in range(2)]
        rht = Tensor(rng.normal(size=4))
        p_all, _ = bag_attention(None, vecs, rht, w, b)
        everything = list(range(2))
        p_c, p_s, _, _ = complexity_guided_reps(
            None, vecs, (everything, everything), rht, w, b
        )
        assert np.array_equal(p_c.data, p_all.data)
        assert np.array_equal(p_s.data, p_all.data)

    def test_within_group_softmax_oracle(self):
        rng = np.random.default_rng(8)
        w, b = attn_params(rng, 4, 3)
        vecs = [rng.normal(size=3) for _ in range(4)]
        rht = rng.normal(size=4)
        groups = ([0, 3], [1, 2])
        _, _, w_c, w_s = complexity_guided_reps(
            None, [Tensor(v) for v in vecs], groups, Tensor(rht), w, b
        )
        for got, idx in ((w_c, groups[0]), (w_s, groups[1])):
            logits = np.array(
                [rht @ np.tanh(w.value.data @ vecs[i] + b.value.data) for i in idx]
            )
            e = np.exp(logits - logits.max())
            assert np.allclose(got.data, e / e.sum(), atol=1e-12)

    def test_empty_group_rejected(self):
        rng = np.random.default_rng(9)
        w, b = attn_params(rng, 4, 3)
        with pytest.raises(EmptyBagError):
            complexity_guided_reps(
                None, [Tensor(np.zeros(3))], ([], [0]), Tensor(np.zeros(4)), w, b
            )


class TestClassify:
    def test_zero_classifier_is_uniform(self):
        n_r, width = 5, 6
        w = ParamSlot("class_w", Tensor(np.zeros((n_r, width))), "net")
        b = ParamSlot("class_b", Tensor(np.zeros(n_r)), "net")
        scores = classify(None, [Tensor(np.ones(width))], w, b)
        probs = nm.softmax(None, scores).data
        assert np.allclose(probs, np.full(n_r, 1.0 / n_r), atol=1e-15)

    def test_two_relation_hand_oracle(self):
        w = ParamSlot("class_w", Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])), "net")
        b = ParamSlot("class_b", Tensor(np.array([0.1, -0.1])), "net")
        x = Tensor(np.array([0.5, 0.25]))
        scores = classify(None, [x], w, b)
        assert np.allclose(scores.data, [0.6, 0.4], atol=1e-15)
        probs = nm.softmax(None, scores).data
        e = np.exp(np.array([0.6, 0.4]))
        assert np.allclose(probs, e / e.sum(), atol=1e-12)

    def test_dimension_mismatch_names_widths(self):
        w = ParamSlot("class_w", Tensor(np.zeros((3, 4))), "net")
        b = ParamSlot("class_b", Tensor(np.zeros(3)), "net")
        with pytest.raises(nm.ShapeError, match="width 4"):
            classify(None, [Tensor(np.ones(5))], w, b)


def simple_bag(label="linked", sentences=1, paths=2):
    sents = [SentenceEvidence(("s1", "s2"), 0, 1) for _ in range(sentences)]
    pool = [("ps",), ("m1", "m2"), ("c1", "c2", "c3")]
    pts = [path_of(pool[i % 3], ("KG", "Textual", "Hybrid")[i % 3]) for i in range(paths)]
    return Bag(e1="A", e2="B", label=label, sentences=sents, paths=pts)


class TestForward:
    @pytest.mark.parametrize("mode", ["base", "ranking"])
    def test_probability_normalization(self, mode):
        model = toy_model(mode=mode, seed=1)
        fwd = forward_bag(None, model, simple_bag(paths=3))
        assert abs(fwd.class_probs.sum() - 1.0) <= 1e-9
        assert abs(fwd.sentence_weights.sum() - 1.0) <= 1e-9
        assert abs(fwd.path_weights.sum() - 1.0) <= 1e-9
        assert abs(np.exp(fwd.kg_log_probs.data).sum() - 1.0) <= 1e-9

    def test_empty_sentence_bag_uses_zero_block(self):
        model = toy_model(seed=2)
        fwd = forward_bag(None, model, simple_bag(sentences=0, paths=2))
        assert np.array_equal(fwd.sentence_rep.data, np.zeros(model.cfg.filters))
        assert fwd.sentence_weights is None

    def test_empty_path_bag_in_ranking_mode(self):
        model = toy_model(mode="ranking", seed=2)
        fwd = forward_bag(None, model, simple_bag(paths=0))
        for block in (fwd.path_rep, fwd.complex_rep, fwd.simple_rep):
            assert np.array_equal(block.data, np.zeros(model.cfg.filters))
        assert abs(fwd.class_probs.sum() - 1.0) <= 1e-9

    def test_ranking_groups_recorded(self):
        model = toy_model(mode="ranking", seed=4, j=1)
        fwd = forward_bag(None, model, simple_bag(paths=3))
        assert fwd.complex_group is not None and len(fwd.complex_group) == 1
        assert abs(fwd.complex_weights.sum() - 1.0) <= 1e-9
        assert abs(fwd.simple_weights.sum() - 1.0) <= 1e-9

    def test_dropout_is_seed_deterministic_and_off_at_eval(self):
        model = toy_model(seed=5, dropout=0.5)
        bag = simple_bag(paths=2)

        def loss_with(rng):
            tape = Tape()
            loss, _ = joint_loss(tape, [bag], model, dropout_rng=rng)
            return loss.item()

        a = loss_with(np.random.default_rng(7))
        b = loss_with(np.random.default_rng(7))
        c = loss_with(np.random.default_rng(8))
        eval_loss = loss_with(None)
        assert a == b
        assert a != c or a != eval_loss


class TestJointLoss:
    def test_uniform_model_hand_value(self):
        model = toy_model(seed=6)
        model.kg.entity_emb.value.data[:] = 0.25
        model.kg.relation_emb.value.data[:] = -0.5
        model.net.class_w.value.data[:] = 0.0
        model.net.class_b.value.data[:] = 0.0
        n_r = len(model.relations)
        loss, _ = joint_loss(None, [simple_bag(), simple_bag(label="NA")], model)
        assert loss.item() == pytest.approx(2.0 * math.log(n_r), abs=1e-12)

    def test_label_outside_vocabulary(self):
        model = toy_model(seed=6)
        with pytest.raises(ModelError, match="mystery"):
            joint_loss(None, [simple_bag(label="mystery")], model)

    def test_loss_decreases_on_separable_toy(self):
        model = toy_model(seed=7, dropout=0.0)
        bags = [
            simple_bag(label="linked", paths=2),
            Bag("B", "A", "NA", [SentenceEvidence(("x1", "x2"), 0, 1)], [path_of(("x1",))]),
        ]
        fn = make_loss_fn(model, bags)
        initial = fn()
        for _ in range(50):
            tape = Tape()
            loss, _ = joint_loss(tape, bags, model)
            tape.backward(loss)
            nm.sgd_step(model.slots(), 0.05, 0.02)
        assert fn() < initial

    @pytest.mark.parametrize("mode", ["base", "ranking"])
    def test_gradients_pass_fd(self, mode):
        model = toy_model(mode=mode, seed=8, rht_grad=True)
        bags = [simple_bag(paths=3), simple_bag(label="NA", paths=1)]
        report = nm.finite_difference_check(
            make_loss_fn(model, bags),
            model.slots(),
            coords_per_param=6,
            rng=np.random.default_rng(0),
        )
        assert report.passed, report.summary()

    def test_detached_query_gets_kg_gradient_only(self):
        """Entity embeddings see only the KG term unless rht_grad is on."""
        bags = [simple_bag(paths=2)]

        def entity_grad(rht_grad):
            model = toy_model(seed=9, rht_grad=rht_grad)
            tape = Tape()
            loss, _ = joint_loss(tape, bags, model)
            tape.backward(loss)
            return model.kg.entity_emb.grad.copy(), model

        g_detached, model = entity_grad(False)
        # Oracle: gradient of the KG term alone, same parameters.
        from ugre import encoders as enc

        nm.zero_grads(model.slots())
        tape = Tape()
        rht = enc.latent_relation_node(tape, "A", "B", model.kg)
        lp = enc.kg_log_probs_node(tape, rht, model.kg)
        picked = nm.pick(tape, lp, model.relation_idx("linked"))
        loss = nm.scale(tape, picked, -1.0)
        tape.backward(loss)
        assert np.allclose(g_detached, model.kg.entity_emb.grad, atol=1e-12)

        g_full, _ = entity_grad(True)
        assert not np.allclose(g_detached, g_full, atol=1e-12)


class TestUnderflowReachability:
    def test_global_weight_underflows(self):
        model, bag, _ = underflow_setup("ranking")
        fwd = forward_bag(None, model, bag)
        assert fwd.path_weights[2] < 1e-30
        assert fwd.complex_group == [2]

    def test_ranking_mode_reaches_the_starved_path(self):
        model, bag, rows = underflow_setup("ranking")
        tape = Tape()
        loss, _ = joint_loss(tape, [bag], model)
        tape.backward(loss)
        norm = np.linalg.norm(model.net.word_emb.grad[rows])
        assert norm > 1e-10

    def test_base_mode_gradient_is_dead(self):
        model, bag, rows = underflow_setup("base")
        fwd = forward_bag(None, model, bag)
        assert fwd.path_weights[2] < 1e-30
        tape = Tape()
        loss, _ = joint_loss(tape, [bag], model)
        tape.backward(loss)
        norm = np.linalg.norm(model.net.word_emb.grad[rows])
        assert norm < 1e-20


class TestModelConfig:
    def test_mode_validation(self):
        with pytest.raises(ModelError):
            ModelConfig(mode="fancy")

    def test_block_count(self):
        assert ModelConfig(mode="base").blocks == 2
        assert ModelConfig(mode="ranking").blocks == 4

    def test_classifier_width_follows_mode(self):
        vocab = Vocab(["a"])
        rng = np.random.default_rng(0)
        m_base = build_model(ModelConfig(mode="base", filters=7), ["A"], ["NA", "r"], vocab, rng)
        m_rank = build_model(
            ModelConfig(mode="ranking", filters=7), ["A"], ["NA", "r"], vocab,
            np.random.default_rng(0),
        )
        assert m_base.net.class_w.value.shape == (2, 14)
        assert m_rank.net.class_w.value.shape == (2, 28)
