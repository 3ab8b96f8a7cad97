import math

import numpy as np
import pytest

from conftest import kg_gradient_probes, random_kg_triples, random_state_for
from deckg.domain import DataError, Hyperparams, NumericalError
from deckg.kgstore import KnowledgeGraph
from deckg.pretrain import (EmbeddingState, KGPretrainer, init_state, kg_loss_and_grad, load_checkpoint,
                            propagate, pretrain, sample_negative, sample_negative_tails, save_checkpoint, score,
                            triple_auc)
from oracles import auc_counting, dense_propagate


def _identity():
    return lambda x: x


def test_zero_layers_returns_base(rng):
    kg = KnowledgeGraph([(0, 0, 1)], 3, 1)
    emb = init_state(3, 1, 4, 4, 2, rng)
    np.testing.assert_array_equal(propagate(kg, emb, layers=0), emb.entity)
    with pytest.raises(DataError):
        propagate(kg, emb, layers=-1)


def test_isolated_entity_identity_fixed_point(rng):
    kg = KnowledgeGraph([(1, 0, 2)], 3, 1)
    emb = init_state(3, 1, 4, 4, 1, rng)
    out = propagate(kg, emb, activation="identity")
    np.testing.assert_allclose(out[0], emb.entity[0])


def test_two_node_hand_example():
    kg = KnowledgeGraph([(0, 0, 1)], 2, 1)
    w = np.array([[1.0, 2.0], [0.5, -1.0]])
    emb = EmbeddingState(np.array([[1.0, 0.0], [0.0, 2.0]]), np.zeros((1, 2)), np.eye(2)[None],
                         w[None], np.array([[0.1, 0.2]]))
    out = propagate(kg, emb, activation="identity")
    # both degree 1, so the weight is 1 and a sees W^T (e_a + e_b) + b
    np.testing.assert_allclose(out[0], w.T @ np.array([1.0, 2.0]) + [0.1, 0.2])
    np.testing.assert_allclose(out[0], [2.1, 0.2])


def test_eta_for_degrees_four_and_nine():
    assert 1 / math.sqrt(4 * 9) == 1 / 6


def test_propagation_matches_loop_oracle(rng):
    for act_name, act in (("logistic", lambda x: 1 / (1 + np.exp(-x))), ("tanh", np.tanh),
                          ("identity", _identity())):
        n = 12
        triples = random_kg_triples(rng, n, 20)
        kg = KnowledgeGraph(triples, n, 3)
        emb = random_state_for(n, 3, 3, 3, 2, rng)
        want = dense_propagate(emb.entity, triples, emb.layer_weight, emb.layer_bias, act)
        np.testing.assert_allclose(propagate(kg, emb, activation=act_name), want, atol=1e-12)


def test_score_examples():
    emb = EmbeddingState(np.zeros((2, 1)), np.array([[0.5]]), np.ones((1, 1, 1)), np.zeros((0, 1, 1)),
                         np.zeros((0, 1)))
    layered = np.array([[1.0], [0.0]])
    assert score(emb, layered, 0, 0, 1) == pytest.approx(2.25)
    emb.relation[:] = 0
    assert score(emb, layered, 0, 0, 0) == 0.0
    with pytest.raises(DataError):
        score(emb, layered, 0, 0, 5)
    with pytest.raises(DataError):
        score(emb, layered, 0, 3, 1)


def test_score_swap_symmetry_when_relation_zero(rng):
    emb = random_state_for(4, 2, 3, 3, 1, rng)
    layered = rng.normal(size=(4, 3))
    emb.relation[0] = 0
    assert score(emb, layered, 1, 0, 2) == pytest.approx(score(emb, layered, 2, 0, 1))
    assert score(emb, layered, 1, 1, 2) != pytest.approx(score(emb, layered, 2, 1, 1))


def test_equal_scores_give_ln2():
    kg = KnowledgeGraph([(0, 0, 1)], 3, 1)
    emb = init_state(3, 1, 2, 2, 0, np.random.default_rng(0))
    emb.entity[:] = 0.3
    loss, _ = kg_loss_and_grad(emb, kg.normalized_adjacency(), kg.triples, np.array([2]))
    assert loss == pytest.approx(math.log(2))


@pytest.mark.parametrize("activation", ["logistic", "tanh", "identity"])
def test_kg_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(7)
    for _ in range(3):
        assert kg_gradient_probes(rng, 20, activation).max() < 1e-4


def test_sample_negative_small_case(rng):
    kg = KnowledgeGraph([(0, 0, 1)], 3, 1)
    for _ in range(50):
        h, r, t = sample_negative(kg, (0, 0, 1), rng)
        assert (h, r) == (0, 0) and t in (0, 2)


def test_sample_negative_rejects_non_member(rng):
    kg = KnowledgeGraph([(0, 0, 1)], 3, 1)
    with pytest.raises(DataError):
        sample_negative(kg, (1, 0, 0), rng)


def test_sample_negative_exhaustion(rng):
    kg = KnowledgeGraph([(0, 0, 0), (0, 0, 1)], 2, 1)
    with pytest.raises(DataError, match="no negative available"):
        sample_negative(kg, (0, 0, 1), rng)
    with pytest.raises(DataError, match="no negative available"):
        sample_negative_tails(kg, kg.triples[1:], rng)


def test_sample_negative_uniform(rng):
    kg = KnowledgeGraph([(0, 0, 1), (0, 0, 4), (2, 1, 3)], 10, 2)
    admissible = [t for t in range(10) if t not in (1, 4)]
    counts = np.zeros(10)
    for _ in range(10000):
        counts[sample_negative(kg, (0, 0, 1), rng)[2]] += 1
    assert counts[[1, 4]].sum() == 0
    p = 1 / len(admissible)
    sigma = math.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts[admissible] - 10000 * p) < 3 * sigma + 1)


def test_vectorised_tails_never_positive(rng):
    triples = random_kg_triples(rng, 15, 40)
    kg = KnowledgeGraph(triples, 15, 3)
    tails = sample_negative_tails(kg, kg.triples, rng)
    for (h, r, t), n in zip(kg.triples.tolist(), tails.tolist()):
        assert n != t and (h, r, n) not in kg


def test_auc_matches_counting_oracle(rng):
    emb = random_state_for(8, 2, 3, 3, 1, rng)
    layered = rng.normal(size=(8, 3))
    pos = np.column_stack([rng.integers(8, size=15), rng.integers(2, size=15), rng.integers(8, size=15)])
    neg = np.column_stack([rng.integers(8, size=11), rng.integers(2, size=11), rng.integers(8, size=11)])
    sp_ = [score(emb, layered, *row) for row in pos.tolist()]
    sn = [score(emb, layered, *row) for row in neg.tolist()]
    assert triple_auc(emb, layered, pos, neg) == pytest.approx(auc_counting(sp_, sn), abs=1e-12)
    assert triple_auc(emb, layered, pos, pos) == pytest.approx(0.5)


def test_training_is_bitwise_reproducible():
    rng = np.random.default_rng(3)
    kg = KnowledgeGraph(random_kg_triples(rng, 30, 80, 4), 30, 4)
    hp = Hyperparams(dim_entity=6, dim_relation=6, epochs_pretrain=4, batch_size=16)
    a, ta = pretrain(kg, hp)
    b, tb = pretrain(kg, hp)
    assert ta == tb
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()


def test_training_reduces_loss():
    rng = np.random.default_rng(4)
    kg = KnowledgeGraph(random_kg_triples(rng, 40, 150, 4), 40, 4)
    _, trace = pretrain(kg, Hyperparams(dim_entity=8, dim_relation=8, epochs_pretrain=30, batch_size=32))
    assert trace[-1] < trace[0]
    assert all(np.isfinite(trace))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    kg = KnowledgeGraph([(0, 0, 1), (1, 0, 2)], 3, 1)
    with pytest.raises(NumericalError, match=r"diverged at epoch \d+"):
        pretrain(kg, Hyperparams(dim_entity=2, dim_relation=2, epochs_pretrain=3, pretrain_lr=1e300))


def test_empty_kg_rejected():
    with pytest.raises(DataError):
        pretrain(KnowledgeGraph([], 2, 1), Hyperparams(epochs_pretrain=1))


def test_checkpoint_roundtrip(tmp_path, rng):
    emb = random_state_for(5, 2, 3, 2, 2, rng)
    save_checkpoint(emb, tmp_path / "c.bin", Hyperparams(dim_entity=3, dim_relation=2, layers=2))
    back, side = load_checkpoint(tmp_path / "c.bin")
    for x, y in zip(emb.arrays(), back.arrays()):
        np.testing.assert_array_equal(x, y)
    assert side["hyperparams"]["layers"] == 2


def test_checkpoint_corruption(tmp_path, rng):
    emb = random_state_for(5, 2, 3, 2, 1, rng)
    save_checkpoint(emb, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "short.bin")


def test_estimator(rng):
    kg = KnowledgeGraph(random_kg_triples(rng, 20, 40, 3), 20, 3)
    est = KGPretrainer(dim_entity=4, dim_relation=4, epochs=2, random_state=1).fit(kg)
    assert est.transform().shape == (20, 4)
    assert len(est.loss_trace_) == 2
    assert (est.score_triples(kg.triples[:5]) >= 0).all()
    assert est.get_params()["lr"] == 1.0
