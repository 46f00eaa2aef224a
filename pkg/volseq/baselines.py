'''Entropy-guided slice selection, gain-ratio feature ranking, a linear SVM per slice and majority voting.'''
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit
from sklearn.preprocessing import StandardScaler

from infolog import log
from volseq.feeder import fold_indices
from volseq.metrics import aggregate_folds, evaluate_scores


@dataclass
class SliceSelection:
	indices: list #1-based, ascending
	entropies: np.ndarray #bits, one per slice
	center_index: int


@dataclass
class GainRatioRanking:
	scores: np.ndarray
	selected: np.ndarray
	bins: int


@dataclass
class LinearSvmModel:
	w: np.ndarray
	b: float
	lam: float

	def decision(self, X):
		return np.asarray(X, dtype=np.float64) @ self.w + self.b

	def predict(self, X):
		return (self.decision(X) >= 0.).astype(np.int64)


def slice_entropy(image):
	'''Shannon entropy (bits) of the 256-bin intensity histogram.

	uint8 slices use one bin per gray level. Other inputs are binned into 256 uniform bins over their range.
	'''
	image = np.asarray(image)
	if image.size == 0:
		raise ValueError('slice_entropy needs a nonempty slice')
	if image.dtype == np.uint8:
		counts = np.bincount(image.ravel(), minlength=256)
	else:
		values = image.astype(np.float64).ravel()
		counts, _ = np.histogram(values, bins=256, range=(values.min(), values.max()))
	return float(stats.entropy(counts, base=2))


def entropy_profile(voxels):
	return np.array([slice_entropy(s) for s in voxels])


def select_slices_from_entropies(entropies, center=32, n=5):
	'''The center slice plus the n - 1 slices whose entropy is closest to it, ties to the lower index.'''
	entropies = np.asarray(entropies, dtype=np.float64)
	D = len(entropies)
	if n % 2 == 0:
		raise ValueError('the number of selected slices must be odd')
	if D < n:
		raise ValueError(f'slice selection needs at least {n} slices, found {D}')
	if not 1 <= center <= D:
		raise ValueError(f'center slice {center} is outside 1..{D}')
	reference = entropies[center - 1]
	candidates = sorted((abs(entropies[i - 1] - reference), i) for i in range(1, D + 1) if i != center)
	chosen = [i for _, i in candidates[:n - 1]]
	return SliceSelection(indices=sorted(chosen + [center]), entropies=entropies, center_index=center)


def select_slices(volume, center=32, n=5):
	'''Slice selection of one loaded VolumeRecord (or a raw (D, H, W) grid).'''
	voxels = getattr(volume, 'voxels', volume)
	if voxels is None:
		raise ValueError('select_slices needs loaded voxels')
	return select_slices_from_entropies(entropy_profile(voxels), center, n)


def equal_frequency_cells(feature, bins=10):
	'''Cell index per value, cut at the inner quantiles; duplicate cut points are merged.'''
	feature = np.asarray(feature, dtype=np.float64)
	edges = np.unique(np.quantile(feature, np.linspace(0., 1., bins + 1)[1:-1]))
	return np.searchsorted(edges, feature, side='right')


def gain_ratio(feature, labels, bins=10):
	'''Information gain of the discretized feature over the labels divided by its split information.'''
	feature = np.asarray(feature, dtype=np.float64)
	labels = np.asarray(labels, dtype=np.int64)
	if feature.shape != labels.shape or feature.size < 2:
		raise ValueError('gain_ratio needs at least two paired values')
	if len(np.unique(labels)) < 2:
		raise ValueError('gain_ratio needs both classes')
	cells = equal_frequency_cells(feature, bins)
	cell_ids, cell_counts = np.unique(cells, return_counts=True)
	split_info = stats.entropy(cell_counts, base=2)
	if len(cell_ids) < 2 or split_info == 0.:
		return 0.
	class_entropy = stats.entropy(np.bincount(labels, minlength=2), base=2)
	conditional = sum(count / labels.size * stats.entropy(np.bincount(labels[cells == cell], minlength=2), base=2)
		for cell, count in zip(cell_ids, cell_counts))
	return float((class_entropy - conditional) / split_info)


def rank_features(X, y, k=128, bins=10):
	'''Top-k columns of X by gain ratio, ties to the lower column index.'''
	X = np.asarray(X, dtype=np.float64)
	scores = np.array([gain_ratio(X[:, j], y, bins) for j in range(X.shape[1])])
	order = np.lexsort((np.arange(len(scores)), -scores))
	return GainRatioRanking(scores=scores, selected=np.sort(order[:min(k, len(scores))]), bins=bins)


def svm_step(w, b, x, y, eta, lam):
	'''One subgradient step on lam/2 (|w|^2 + b^2) + hinge(y (w.x + b)). The bias is a weight on a constant 1 input.'''
	margin = y * (x @ w + b)
	w = (1. - eta * lam) * w
	b = (1. - eta * lam) * b
	if margin < 1.:
		w = w + eta * y * x
		b = b + eta * y
	return w, b


def svm_objective(model, X, y):
	'''lam/2 (|w|^2 + b^2) + mean hinge loss, the quantity train_linear_svm minimizes.'''
	X = np.asarray(X, dtype=np.float64)
	y = np.asarray(y, dtype=np.float64)
	hinge = np.maximum(0., 1. - y * model.decision(X))
	return float(model.lam / 2. * (model.w @ model.w + model.b ** 2) + hinge.mean())


def train_linear_svm(X, y, lam=1e-2, epochs=20, seed=0):
	"""
	Linear SVM by seeded stochastic subgradient descent with step 1 / (lam t)

	y holds -1/+1 labels. After every step (w, b) is projected onto the ball of radius 1 / sqrt(lam),
	which holds the optimum. The returned parameters average the iterates of the second half of training.
	"""
	X = np.asarray(X, dtype=np.float64)
	y = np.asarray(y, dtype=np.float64)
	if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
		raise ValueError('train_linear_svm needs an (n, d) matrix and n labels')
	if not np.isin(y, (-1., 1.)).all() or len(np.unique(y)) < 2:
		raise ValueError('train_linear_svm needs -1/+1 labels with both classes present')
	if not np.all(np.isfinite(X)):
		raise ValueError('train_linear_svm got non-finite features')
	if lam <= 0. or epochs < 1:
		raise ValueError('lam must be positive and epochs at least 1')

	n, d = X.shape
	radius = 1. / np.sqrt(lam)
	rng = np.random.default_rng(seed)
	w, b = np.zeros(d), 0.
	w_sum, b_sum, n_avg = np.zeros(d), 0., 0
	total = epochs * n
	t = 0
	for _ in range(epochs):
		for i in rng.permutation(n):
			t += 1
			w, b = svm_step(w, b, X[i], y[i], 1. / (lam * t), lam)
			norm = np.sqrt(w @ w + b * b)
			if norm > radius:
				w, b = w * (radius / norm), b * (radius / norm)
			if 2 * t > total:
				w_sum += w
				b_sum += b
				n_avg += 1
	return LinearSvmModel(w=w_sum / n_avg, b=float(b_sum / n_avg), lam=lam)


def majority_vote(votes):
	votes = np.asarray(votes, dtype=np.int64)
	if votes.ndim != 1 or len(votes) % 2 == 0:
		raise ValueError('majority_vote needs an odd number of votes')
	return int(2 * votes.sum() > len(votes))


@dataclass
class SvmBaselineResult:
	positions: list #CrossValReport per selected-slice position (ascending slice order)
	ensemble: object #CrossValReport of the majority vote
	folds: list #per fold: {'slices': [...], 'features': {slice: [...]}}

	def to_dict(self, hparams):
		return {
			'svm': {'lambda': hparams.svm_lambda, 'epochs': hparams.svm_epochs,
				'gain_ratio_bins': hparams.gain_ratio_bins, 'n_selected_features': hparams.n_selected_features,
				'center_slice': hparams.center_slice},
			'positions': [r.to_dict() for r in self.positions],
			'ensemble': self.ensemble.to_dict(),
			'folds': self.folds,
		}


def run_svm_baseline(records, features, entropies, plan, hparams, tqdm=lambda x: x):
	"""
	Per fold: choose slices from the mean entropy profile of the training volumes, rank features of each
	chosen slice by gain ratio on training data, standardize, fit an SVM per slice, then majority-vote.

	Args:
		- records: VolumeRecords
		- features: FeatureSequences aligned with records, one row per slice
		- entropies: per-record raw-slice entropy profiles (see entropy_profile)
		- plan: FoldPlan
		- hparams: hyper parameters (center slice, counts, SVM settings, threshold)

	Returns:
		- SvmBaselineResult
	"""
	labels = np.array([r.label for r in records])
	n = hparams.n_selected_slices
	per_position = [[] for _ in range(n)]
	ensemble, folds = [], []
	for fold in tqdm(range(plan.k)):
		idx = fold_indices(plan, records, fold)
		#No early stopping here, validation subjects are part of the fit
		fit = idx['train'] + idx['validation']
		test = idx['test']
		profile = np.mean([entropies[i] for i in fit], axis=0)
		selection = select_slices_from_entropies(profile, hparams.center_slice, n)
		votes = []
		chosen = {}
		for position, s in enumerate(selection.indices):
			X_fit = np.stack([np.asarray(features[i].features[s - 1], dtype=np.float64) for i in fit])
			X_test = np.stack([np.asarray(features[i].features[s - 1], dtype=np.float64) for i in test])
			ranking = rank_features(X_fit, labels[fit], hparams.n_selected_features, hparams.gain_ratio_bins)
			scaler = StandardScaler().fit(X_fit[:, ranking.selected])
			model = train_linear_svm(scaler.transform(X_fit[:, ranking.selected]), 2 * labels[fit] - 1,
				hparams.svm_lambda, hparams.svm_epochs, hparams.seed + fold)
			decision = model.decision(scaler.transform(X_test[:, ranking.selected]))
			per_position[position].append(evaluate_scores(expit(decision), labels[test], hparams.threshold))
			votes.append((decision >= 0.).astype(np.int64))
			chosen[str(s)] = ranking.selected.tolist()
		votes = np.stack(votes)
		#Vote share: thresholding at 0.5 gives majority_vote of each column
		share = votes.mean(axis=0)
		ensemble.append(evaluate_scores(share, labels[test], 0.5))
		folds.append({'slices': selection.indices, 'features': chosen})
		log(f'svm fold {fold}: slices {selection.indices}, vote acc={ensemble[-1].acc:.4f}')
	return SvmBaselineResult(positions=[aggregate_folds(r) for r in per_position], ensemble=aggregate_folds(ensemble),
		folds=folds)
