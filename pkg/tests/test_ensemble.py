import threading
from collections import Counter

import numpy as np
import pytest

from keyvote.ensemble import (
    KeyedVotingEnsemble,
    build_ensemble,
    load_manifest,
    majority_vote,
    oracle,
    predict_frontend,
    predict_label,
    save_manifest,
)
from keyvote.errors import DataError
from keyvote.keying import SecretKey
from keyvote.nn import TrainConfig
from keyvote.transform import _shuffle_batch


def make_keys(n, tag=0):
    return [SecretKey(bytes([tag, i]) + bytes(14), f"K{i+1}") for i in range(n)]


def tiny_data(n=60, n_classes=3, dims=(1, 4, 4), seed=0):
    rng = np.random.default_rng(seed)
    c, w, h = dims
    templates = rng.random((n_classes, c, w, h))
    y = np.arange(n) % n_classes
    X = np.clip(templates[y] + 0.05 * rng.standard_normal((n, c, w, h)), 0, 1)
    return X, y


def fit_tiny(keys, block_sizes, seed=0, **kw):
    X, y = tiny_data()
    e = KeyedVotingEnsemble(
        keys=keys, block_sizes=block_sizes, hidden_units=16, epochs=30,
        batch_size=16, learning_rate=0.05, seed=seed, **kw
    )
    return e.fit(X, y), X, y


def vote_oracle(votes, n_classes, frontend_vote):
    """Brute-force counting reference for the documented tie-break."""
    counts = Counter(votes)
    top = max(counts.values())
    tied = sorted(k for k, v in counts.items() if v == top)
    if frontend_vote in tied:
        return frontend_vote
    return tied[0]


class TestMajorityVote:
    def test_unanimous(self):
        assert majority_vote([3, 3, 3], 10) == 3

    def test_plurality(self):
        assert majority_vote([2, 2, 2, 5, 5, 7, 7, 7, 7], 10) == 7

    def test_tie_frontend_wins_when_tied(self):
        assert majority_vote([1, 1, 2, 2, 3], 10, frontend_vote=2) == 2

    def test_tie_smallest_index_otherwise(self):
        assert majority_vote([3, 1, 1, 2, 2], 10, frontend_vote=3) == 1

    def test_single_vote(self):
        assert majority_vote([4], 10) == 4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([], 10)

    def test_agrees_with_counting_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(2000):
            n = int(rng.choice([1, 3, 5, 7, 9]))
            votes = rng.integers(0, 10, n).tolist()
            assert majority_vote(votes, 10) == vote_oracle(votes, 10, votes[0])


class TestBuildValidation:
    def test_length_mismatch_rejected(self):
        X, y = tiny_data()
        e = KeyedVotingEnsemble(keys=make_keys(3), block_sizes=[2, 2])
        with pytest.raises(ValueError, match="lengths must match"):
            e.fit(X, y)

    def test_duplicate_keys_rejected(self):
        X, y = tiny_data()
        k = make_keys(1)[0]
        e = KeyedVotingEnsemble(keys=[k, k], block_sizes=[2, 2])
        with pytest.raises(ValueError, match="pairwise distinct"):
            e.fit(X, y)

    def test_indivisible_block_size_rejected(self):
        X, y = tiny_data()
        e = KeyedVotingEnsemble(keys=make_keys(1), block_sizes=[3])
        with pytest.raises(ValueError, match="divide"):
            e.fit(X, y)

    def test_empty_training_set_rejected(self):
        e = KeyedVotingEnsemble(keys=make_keys(1), block_sizes=[2])
        with pytest.raises(ValueError):
            e.fit(np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=int))

    def test_missing_member_plan_rejected(self):
        X, y = tiny_data()
        with pytest.raises(ValueError, match="at least one member"):
            KeyedVotingEnsemble().fit(X, y)

    def test_build_ensemble_function(self):
        X, y = tiny_data()
        cfg = TrainConfig(epochs=5, batch_size=16, learning_rate=0.05)
        e = build_ensemble(make_keys(2), [2, 2], (X, y), cfg, seed=3)
        assert len(e.members_) == 2
        assert e.n_classes_ == 3

    def test_deterministic_given_seeds(self):
        a, X, _ = fit_tiny(make_keys(3), [4, 2, 2], seed=5)
        b, _, _ = fit_tiny(make_keys(3), [4, 2, 2], seed=5)
        for ma, mb in zip(a.members_, b.members_):
            assert np.array_equal(ma.model.W1, mb.model.W1)
        assert np.array_equal(a.predict(X), b.predict(X))


class TestPrediction:
    def test_single_member_frontend_argmax_equals_vote(self):
        e, X, _ = fit_tiny(make_keys(1), [2])
        probs = e.predict_proba(X)
        assert np.array_equal(probs.argmax(axis=1), e.predict(X))

    def test_predict_proba_rows_sum_to_one(self):
        e, X, _ = fit_tiny(make_keys(3), [4, 2, 2])
        P = e.predict_proba(X)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-6)

    def test_identical_inputs_identical_outputs(self):
        e, X, _ = fit_tiny(make_keys(2), [2, 2])
        assert np.array_equal(e.predict_proba(X[:3]), e.predict_proba(X[:3]))

    def test_dim_mismatch_rejected(self):
        e, _, _ = fit_tiny(make_keys(1), [2])
        with pytest.raises(ValueError, match="dims"):
            e.predict(np.zeros((1, 1, 8, 8)))

    def test_single_image_helpers(self):
        e, X, _ = fit_tiny(make_keys(2), [2, 2])
        probs = predict_frontend(e, X[0])
        assert probs.shape == (3,)
        assert predict_label(e, X[0]) in (0, 1, 2)

    def test_vote_invariant_to_positive_logit_rescaling(self):
        e, X, _ = fit_tiny(make_keys(3), [2, 2, 2])
        before = e.predict(X)
        for spec in e.members_:
            spec.model.W2 *= 7.5  # scales logits positively
            spec.model.b2 *= 7.5
        assert np.array_equal(e.predict(X), before)

    def test_identity_member_sees_raw_images(self):
        e, X, y = fit_tiny([None], [2])
        # key=None member must classify raw images; accuracy near training acc
        spec = e.members_[0]
        assert spec.key is None
        assert np.array_equal(
            _shuffle_batch(X, 2, spec.permutation.zero_based()), X
        )

    def test_wrong_key_degrades_member(self):
        e, X, y = fit_tiny(make_keys(1), [4])
        from keyvote.keying import generate_permutation
        from keyvote.nn import forward_batch

        spec = e.members_[0]
        right = _shuffle_batch(X, 4, spec.permutation.zero_based())
        acc_right = np.mean(forward_batch(spec.model, right).argmax(1) == y)
        wrong_perm = generate_permutation(SecretKey(b"\xee" * 16), 16)
        wrong = _shuffle_batch(X, 4, wrong_perm.zero_based())
        acc_wrong = np.mean(forward_batch(spec.model, wrong).argmax(1) == y)
        assert acc_right > acc_wrong


class TestOracle:
    def test_counter_counts_every_image(self):
        e, X, _ = fit_tiny(make_keys(2), [2, 2])
        assert e.query_count == 0
        e.oracle_batch(X[:5])
        e.oracle_batch(X[:3])
        assert e.query_count == 8
        e.reset_query_count()
        assert e.query_count == 0

    def test_components_agree_with_predict_ops(self):
        e, X, _ = fit_tiny(make_keys(3), [4, 2, 2])
        probs, labels = e.oracle_batch(X[:10])
        assert np.array_equal(probs, e.predict_proba(X[:10]))
        assert np.array_equal(labels, e.predict(X[:10]))

    def test_single_image_oracle_op(self):
        e, X, _ = fit_tiny(make_keys(1), [2])
        probs, label = oracle(e, X[0])
        assert probs.shape == (3,)
        assert e.query_count == 1

    def test_predict_does_not_count(self):
        e, X, _ = fit_tiny(make_keys(1), [2])
        e.predict(X)
        e.predict_proba(X)
        assert e.query_count == 0

    def test_counter_reaches_square_budget(self):
        e, X, _ = fit_tiny(make_keys(1), [2])
        batch = np.repeat(X[:1], 100, axis=0)
        for _ in range(20):
            e.oracle_batch(batch)
        assert e.query_count == 2000

    def test_counter_is_thread_safe(self):
        e, X, _ = fit_tiny(make_keys(1), [2])

        def worker():
            for _ in range(20):
                e.oracle_batch(X[:2])

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert e.query_count == 8 * 20 * 2


class TestManifest:
    def test_round_trip(self, tmp_path):
        e, X, y = fit_tiny(make_keys(3), [4, 2, 2], seed=2)
        path = save_manifest(e, tmp_path, name="ens")
        loaded = load_manifest(path)
        assert len(loaded.members_) == 3
        assert loaded.n_classes_ == e.n_classes_
        assert np.array_equal(loaded.predict(X), e.predict(X))
        assert np.array_equal(loaded.predict_proba(X), e.predict_proba(X))
        assert [m.key.hex for m in loaded.members_] == [m.key.hex for m in e.members_]

    def test_identity_member_round_trip(self, tmp_path):
        e, X, _ = fit_tiny([None], [2])
        loaded = load_manifest(save_manifest(e, tmp_path))
        assert loaded.members_[0].key is None
        assert np.array_equal(loaded.predict(X), e.predict(X))

    def test_bad_manifest_rejected(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{}")
        with pytest.raises(DataError):
            load_manifest(p)
        p.write_text("not json")
        with pytest.raises(DataError):
            load_manifest(p)
