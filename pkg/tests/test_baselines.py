from dataclasses import replace

import numpy as np
import pytest

from hparams import hparams
from volseq import baselines
from volseq.feeder import make_fold_plan


def test_entropy_of_simple_slices():
	assert baselines.slice_entropy(np.full((8, 8), 17, dtype=np.uint8)) == 0.
	half = np.zeros((8, 8), dtype=np.uint8)
	half[:4] = 255
	assert baselines.slice_entropy(half) == pytest.approx(1.)

	assert baselines.slice_entropy(np.full((4, 4), 0.3)) == 0.
	assert baselines.slice_entropy(half.astype(np.float64) / 255.) == pytest.approx(1.)
	with pytest.raises(ValueError):
		baselines.slice_entropy(np.zeros((0, 4)))


def test_entropy_range(rng):
	for _ in range(10):
		image = rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
		assert 0. <= baselines.slice_entropy(image) <= 8.
	every_level = np.arange(256, dtype=np.uint8).reshape(16, 16)
	assert baselines.slice_entropy(every_level) == pytest.approx(8.)


def test_selection_takes_the_closest_entropies():
	selection = baselines.select_slices_from_entropies(np.arange(64) * 0.1, center=32, n=5)
	assert selection.indices == [30, 31, 32, 33, 34]
	assert selection.center_index == 32


def test_selection_ties_go_to_lower_indices():
	selection = baselines.select_slices_from_entropies(np.ones(64), center=32, n=5)
	assert selection.indices == [1, 2, 3, 4, 32]


def test_selection_errors():
	with pytest.raises(ValueError):
		baselines.select_slices_from_entropies(np.ones(4), center=2, n=5)
	with pytest.raises(ValueError):
		baselines.select_slices_from_entropies(np.ones(10), center=11, n=5)
	with pytest.raises(ValueError):
		baselines.select_slices_from_entropies(np.ones(10), center=5, n=4)


def test_select_slices_from_volume():
	voxels = np.zeros((8, 4, 4), dtype=np.uint8)
	#Slice s (1-based) holds s gray levels, so its entropy grows with s
	for s in range(1, 9):
		voxels[s - 1].flat[:] = np.arange(16) % s
	selection = baselines.select_slices(voxels, center=4, n=3)
	assert selection.indices == [3, 4, 5]
	assert selection.entropies.shape == (8,)


def test_gain_ratio_of_a_perfect_feature():
	labels = np.array([0, 1] * 50)
	assert baselines.gain_ratio(labels.astype(np.float64), labels) == pytest.approx(1.)


def test_gain_ratio_edge_cases(rng):
	labels = np.array([0, 1] * 50)
	assert baselines.gain_ratio(np.full(100, 2.5), labels) == 0.
	with pytest.raises(ValueError):
		baselines.gain_ratio(rng.random(10), np.ones(10, dtype=int))
	with pytest.raises(ValueError):
		baselines.gain_ratio(rng.random(10), np.ones(9, dtype=int))

	noise = baselines.gain_ratio(rng.random(2000), rng.integers(0, 2, size=2000))
	assert 0. <= noise < 0.02


def test_rank_features_prefers_lower_index_on_ties():
	labels = np.array([0, 1] * 20)
	X = np.stack([np.zeros(40), labels, np.zeros(40), labels], axis=1).astype(np.float64)
	assert baselines.rank_features(X, labels, k=1).selected.tolist() == [1]
	assert baselines.rank_features(X, labels, k=3).selected.tolist() == [0, 1, 3]
	assert baselines.rank_features(X, labels, k=10).selected.tolist() == [0, 1, 2, 3]


def test_svm_step():
	w, b = baselines.svm_step(np.array([2.]), 0.5, np.array([1.]), 1., 0.1, 0.1)
	np.testing.assert_allclose(w, [1.98])
	assert b == pytest.approx(0.495)

	w, b = baselines.svm_step(np.zeros(2), 0., np.array([1., 2.]), -1., 0.5, 0.1)
	np.testing.assert_allclose(w, [-0.5, -1.])
	assert b == -0.5


def test_svm_two_points():
	model = baselines.train_linear_svm(np.array([[1.], [-1.]]), np.array([1., -1.]), lam=0.5, epochs=50)
	assert model.predict(np.array([[1.], [-1.]])).tolist() == [1, 0]
	assert model.w[0] > 0.


def test_svm_separates_blobs(rng):
	X = np.concatenate([rng.standard_normal((100, 2)) + 3., rng.standard_normal((100, 2)) - 3.])
	y = np.array([1.] * 100 + [-1.] * 100)
	#Separable along (1, 1) before the SVM ever sees the data
	projection = X.sum(axis=1)
	assert projection[:100].min() > projection[100:].max()

	model = baselines.train_linear_svm(X, y, lam=1e-2, epochs=20, seed=1)
	errors = int(np.sum(model.predict(X) != (y > 0)))
	assert errors == 0
	assert abs(model.b) < np.linalg.norm(model.w)
	again = baselines.train_linear_svm(X, y, lam=1e-2, epochs=20, seed=1)
	np.testing.assert_array_equal(model.w, again.w)


def test_svm_objective_close_to_grid_search():
	rng = np.random.default_rng(5)
	X = np.concatenate([rng.standard_normal((20, 2)) + 0.8, rng.standard_normal((20, 2)) - 0.8])
	y = np.array([1.] * 20 + [-1.] * 20)
	lam = 0.1
	model = baselines.train_linear_svm(X, y, lam=lam, epochs=500, seed=0)

	w1, w2 = np.meshgrid(np.linspace(-2., 2., 81), np.linspace(-2., 2., 81), indexing='ij')
	W = np.stack([w1.ravel(), w2.ravel()], axis=1)
	best = np.inf
	for b in np.linspace(-1., 1., 41):
		margins = y[None, :] * (W @ X.T + b)
		objective = lam / 2. * ((W * W).sum(axis=1) + b * b) + np.maximum(0., 1. - margins).mean(axis=1)
		best = min(best, objective.min())

	assert baselines.svm_objective(model, X, y) <= 1.05 * best


def test_svm_rejects_bad_input():
	with pytest.raises(ValueError):
		baselines.train_linear_svm(np.ones((3, 2)), np.array([1., 1., 1.]))
	with pytest.raises(ValueError):
		baselines.train_linear_svm(np.ones((2, 2)), np.array([1., 0.]))
	with pytest.raises(ValueError):
		baselines.train_linear_svm(np.array([[np.nan], [1.]]), np.array([1., -1.]))


def test_majority_vote(rng):
	assert baselines.majority_vote([1, 1, 0]) == 1
	assert baselines.majority_vote([0, 0, 1, 1, 0]) == 0
	assert baselines.majority_vote([1]) == 1
	with pytest.raises(ValueError):
		baselines.majority_vote([1, 0])
	for _ in range(20):
		votes = rng.integers(0, 2, size=5)
		assert baselines.majority_vote(1 - votes) == 1 - baselines.majority_vote(votes)


def _svm_hparams():
	return hparams.parse(['center_slice=4', 'n_selected_features=4', 'svm_epochs=5', 'k=2', 'embedding_dim=8'])


def test_svm_baseline_reports(small_dataset):
	records, features = small_dataset
	hp = _svm_hparams()
	entropies = [baselines.entropy_profile(r.voxels) for r in records]
	plan = make_fold_plan(records, 2, seed=hp.seed)
	result = baselines.run_svm_baseline(records, features, entropies, plan, hp)

	assert len(result.positions) == 5
	assert result.ensemble.k == 2
	for fold in result.folds:
		assert len(fold['slices']) == 5 and 4 in fold['slices']
		for selected in fold['features'].values():
			assert len(selected) == 4
	data = result.to_dict(hp)
	assert data['svm']['n_selected_features'] == 4
	assert len(data['positions']) == 5


def test_svm_baseline_ignores_test_labels(small_dataset):
	records, features = small_dataset
	hp = _svm_hparams()
	entropies = [baselines.entropy_profile(r.voxels) for r in records]
	plan = make_fold_plan(records, 2, seed=hp.seed)
	before = baselines.run_svm_baseline(records, features, entropies, plan, hp)

	test_subjects = set(plan.folds[0]['test'])
	flipped = [replace(r, label=1 - r.label) if r.subject_id in test_subjects else r for r in records]
	after = baselines.run_svm_baseline(flipped, features, entropies, plan, hp)
	assert after.folds[0] == before.folds[0]


def test_majority_vote_keeps_up_with_best_slice(small_dataset):
	records, features = small_dataset
	hp = _svm_hparams().parse(['k=5', 'svm_epochs=20'])
	entropies = [baselines.entropy_profile(r.voxels) for r in records]
	result = baselines.run_svm_baseline(records, features, entropies, make_fold_plan(records, 5, seed=hp.seed), hp)
	best = max(report.mean['acc'] for report in result.positions)
	assert result.ensemble.mean['acc'] >= best - 0.02
