import math

import numpy as np
import pytest

from callscore.errors import ConvergenceError, DataError
from callscore.models import (
    ScoredDataset,
    SplitSpec,
    _rank_auc,
    load_model,
    predict_forest,
    predict_logistic,
    predict_tree_proba,
    predict_tree_votes,
    save_model,
    split,
    train_forest,
    train_logistic,
    train_tree,
    undersample,
)


def xor_data(rng, n=400, noise=0.05):
    X = rng.random((n, 2))
    y = (X[:, 0] > 0.5) ^ (X[:, 1] > 0.5)
    flip = rng.random(n) < noise
    return X, y ^ flip


def informative_data(rng, n=600, m=8, effect=2.0):
    X = rng.normal(size=(n, m))
    logit = effect * X[:, 0] - 0.5
    y = rng.random(n) < 1 / (1 + np.exp(-logit))
    return X, y


# ---------------------------------------------------------------------------
# Split and undersample.
# ---------------------------------------------------------------------------

def test_split_70_30_exact():
    y = np.zeros(100, dtype=bool)
    y[:30] = True
    train, test = split(y, SplitSpec(train_fraction=0.7, seed=1))
    assert len(train) == 70 and len(test) == 30
    assert len(np.intersect1d(train, test)) == 0
    assert len(np.union1d(train, test)) == 100


def test_split_deterministic():
    y = np.random.default_rng(0).random(200) < 0.2
    a = split(y, SplitSpec(seed=42))
    b = split(y, SplitSpec(seed=42))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = split(y, SplitSpec(seed=43))
    assert not np.array_equal(a[0], c[0])


def test_split_stratification_tolerance():
    y = np.zeros(200, dtype=bool)
    y[:10] = True  # 5% positives
    train, test = split(y, SplitSpec(train_fraction=0.7, seed=3))
    test_pos = int(y[test].sum())
    assert abs(test_pos - 3) <= 1


def test_split_too_few_minority():
    y = np.zeros(50, dtype=bool)
    y[0] = True
    with pytest.raises(DataError):
        split(y, SplitSpec())


def test_undersample_to_balance():
    y = np.zeros(1000, dtype=bool)
    y[:50] = True
    train = np.arange(1000)
    kept = undersample(train, y, ratio=1.0, seed=0)
    labels = y[kept]
    assert labels.sum() == 50
    assert (~labels).sum() == 50


def test_undersample_balanced_input_untouched():
    y = np.array([True] * 20 + [False] * 20)
    kept = undersample(np.arange(40), y, ratio=1.0, seed=0)
    assert len(kept) == 40


def test_undersample_deterministic():
    y = np.zeros(400, dtype=bool)
    y[:40] = True
    a = undersample(np.arange(400), y, seed=9)
    b = undersample(np.arange(400), y, seed=9)
    assert np.array_equal(a, b)


def test_undersample_unreachable_ratio():
    y = np.array([True] * 30 + [False] * 10)
    with pytest.raises(DataError):
        undersample(np.arange(40), y, ratio=0.1, seed=0)


def test_undersample_never_touches_test_set():
    rng = np.random.default_rng(3)
    y = rng.random(1000) < 0.1
    train, test = split(y, SplitSpec(train_fraction=0.7, seed=3))
    balanced = undersample(train, y, ratio=1.0, seed=3)
    assert set(balanced) <= set(train)
    assert abs(y[test].mean() - y.mean()) <= 1.5 / len(test) + 0.01


# ---------------------------------------------------------------------------
# Logistic regression.
# ---------------------------------------------------------------------------

def test_logistic_separable_perfect_train_accuracy(rng):
    X = np.vstack([rng.normal(-2, 0.3, size=(80, 2)), rng.normal(2, 0.3, size=(80, 2))])
    y = np.array([False] * 80 + [True] * 80)
    model = train_logistic(X, y)
    scores = predict_logistic(model, X)
    assert np.mean((scores > 0.5) == y) == 1.0


def test_logistic_constant_features_intercept_is_log_odds(rng):
    X = np.ones((120, 3)) * 7.0
    y = np.array([True] * 30 + [False] * 90)
    model = train_logistic(X, y)
    assert model.coef == pytest.approx(np.zeros(3))
    assert model.intercept == pytest.approx(math.log(30 / 90), abs=1e-6)


def test_logistic_scores_strictly_inside_unit_interval(rng):
    X, y = informative_data(rng, effect=8.0)
    model = train_logistic(X, y)
    scores = predict_logistic(model, X * 50)
    assert scores.min() > 0.0 and scores.max() < 1.0


def test_logistic_nonconvergence_reports_iterations(rng):
    X, y = informative_data(rng)
    with pytest.raises(ConvergenceError) as err:
        train_logistic(X, y, max_iter=2, tol=1e-14)
    assert err.value.iterations == 2


# ---------------------------------------------------------------------------
# Decision tree.
# ---------------------------------------------------------------------------

def test_tree_learns_xor(rng):
    X, y = xor_data(rng)
    tree = train_tree(X, y, cv_folds=5, seed=0)
    assert tree.depth >= 2
    pred = predict_tree_proba(tree, X) > 0.5
    assert np.mean(pred == y) > 0.9


def test_tree_pure_class_single_leaf():
    X = np.random.default_rng(0).random((40, 3))
    y = np.zeros(40, dtype=bool)
    from callscore.models import _grow_tree

    tree = _grow_tree(X, y, max_depth=None, min_leaf=5, mtry=None, rng=None)
    assert tree.n_nodes == 1
    assert tree.features_used == frozenset()


def test_tree_deterministic(rng):
    X, y = xor_data(rng)
    t1 = train_tree(X, y, cv_folds=5, seed=7)
    t2 = train_tree(X, y, cv_folds=5, seed=7)
    assert np.array_equal(t1.feature, t2.feature)
    assert np.array_equal(t1.threshold, t2.threshold)


def test_tree_requires_enough_per_class():
    X = np.random.default_rng(0).random((30, 2))
    y = np.zeros(30, dtype=bool)
    y[:4] = True
    with pytest.raises(DataError):
        train_tree(X, y, cv_folds=10)


def test_tree_features_used_sound_and_complete(rng):
    X, y = informative_data(rng, n=400, m=6)
    from callscore.models import _grow_tree

    tree = _grow_tree(X, y, max_depth=4, min_leaf=5, mtry=None, rng=None)
    base = predict_tree_proba(tree, X)
    for j in range(X.shape[1]):
        Xp = X.copy()
        Xp[:, j] = Xp[rng.permutation(len(X)), j]
        changed = not np.array_equal(predict_tree_proba(tree, Xp), base)
        if j not in tree.features_used:
            assert not changed, f"unused feature {j} changed predictions"
    used_changes = []
    for j in tree.features_used:
        Xp = X.copy()
        Xp[:, j] = Xp[rng.permutation(len(X)), j]
        used_changes.append(not np.array_equal(predict_tree_proba(tree, Xp), base))
    assert any(used_changes)


# ---------------------------------------------------------------------------
# Random forest.
# ---------------------------------------------------------------------------

def test_forest_single_tree_degenerates_to_tree(rng):
    X, y = informative_data(rng, n=300, m=5)
    from callscore.models import _grow_tree

    forest = train_forest(X, y, n_trees=1, mtry=5, max_depth=4, seed=0, bootstrap=False)
    alone = _grow_tree(X, y, max_depth=4, min_leaf=5, mtry=None, rng=None)
    assert np.allclose(predict_forest(forest, X).score, predict_tree_proba(alone, X))


def test_forest_recovers_signal(rng):
    X, y = informative_data(rng, n=800, m=10, effect=2.5)
    train_rows = np.arange(500)
    test_rows = np.arange(500, 800)
    forest = train_forest(X[train_rows], y[train_rows], n_trees=80, seed=0)
    scored = predict_forest(forest, X[test_rows], y[test_rows])
    assert _rank_auc(scored.y, scored.score) >= 0.75


def test_forest_vote_matrix_shape(rng):
    X, y = informative_data(rng, n=200, m=4)
    forest = train_forest(X, y, n_trees=30, seed=1)
    scored = predict_forest(forest, X[:50], y[:50])
    assert scored.per_tree_votes.shape == (30, 50)
    assert set(np.unique(scored.per_tree_votes)) <= {0, 1}


def test_forest_score_is_mean_of_tree_probs(rng):
    X, y = informative_data(rng, n=300, m=5)
    forest = train_forest(X, y, n_trees=20, seed=2)
    scored = predict_forest(forest, X, y)
    stacked = np.stack([predict_tree_proba(t, X) for t in forest.trees])
    assert np.array_equal(scored.score, stacked.mean(axis=0))


def test_forest_deterministic(rng):
    X, y = informative_data(rng, n=200, m=4)
    s1 = predict_forest(train_forest(X, y, n_trees=15, seed=5), X).score
    s2 = predict_forest(train_forest(X, y, n_trees=15, seed=5), X).score
    assert np.array_equal(s1, s2)


def test_forest_mtry_exceeds_features(rng):
    X, y = informative_data(rng, n=100, m=3)
    with pytest.raises(DataError):
        train_forest(X, y, n_trees=2, mtry=10)


def test_forest_membership_matrix(rng):
    X, y = informative_data(rng, n=300, m=6)
    forest = train_forest(X, y, n_trees=25, mtry=2, max_depth=3, seed=3)
    member = forest.feature_membership(6)
    for i, tree in enumerate(forest.trees):
        assert set(np.flatnonzero(member[i])) == set(tree.features_used)


def test_leaf_tie_breaks_toward_parent_majority():
    # one feature; left child pure negative, right child balanced -> parent
    # majority decides the right leaf's vote
    X = np.array([[0.0], [0.1], [0.2], [0.3], [0.8], [0.9], [1.0], [1.1]])
    y = np.array([False, False, False, False, True, True, False, False])
    from callscore.models import _grow_tree

    tree = _grow_tree(X, y, max_depth=1, min_leaf=2, mtry=None, rng=None)
    votes = predict_tree_votes(tree, X)
    # parent is 6 negatives / 2 positives -> majority 0; the tied right leaf
    # (2 pos, 2 neg) inherits it
    assert votes[-4:].tolist() == [0, 0, 0, 0]


# ---------------------------------------------------------------------------
# Persistence.
# ---------------------------------------------------------------------------

def test_model_json_round_trip(tmp_path, rng):
    X, y = informative_data(rng, n=200, m=4)
    logistic = train_logistic(X, y)
    save_model(logistic, tmp_path / "logit.json")
    again = load_model(tmp_path / "logit.json")
    assert np.allclose(again.coef, logistic.coef)
    assert again.intercept == pytest.approx(logistic.intercept)

    tree = train_tree(X, y, cv_folds=5, seed=0)
    save_model(tree, tmp_path / "tree.json")
    t2 = load_model(tmp_path / "tree.json")
    assert np.array_equal(predict_tree_proba(t2, X), predict_tree_proba(tree, X))
    assert t2.features_used == tree.features_used

    forest = train_forest(X, y, n_trees=5, seed=0)
    save_model(forest, tmp_path / "forest.json")
    f2 = load_model(tmp_path / "forest.json")
    assert np.array_equal(predict_forest(f2, X).score, predict_forest(forest, X).score)


def test_scored_dataset_validation():
    with pytest.raises(DataError):
        ScoredDataset(y=np.array([True, False]), score=np.array([0.5, 1.5]))
    with pytest.raises(DataError):
        ScoredDataset(y=np.array([True]), score=np.array([0.5, 0.5]))
