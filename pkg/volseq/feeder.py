'''Subject-level fold planning and class-balanced batching.'''
import json
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from volseq.errors import DataError

SUBSETS = ('train', 'validation', 'test')


@dataclass
class FoldPlan:
	'''Per fold, disjoint sorted subject-id lists under `train`, `validation` and `test`.'''
	k: int
	folds: list
	seed: int

	def to_dict(self):
		return {'k': self.k, 'seed': self.seed, 'folds': [{s: list(f[s]) for s in SUBSETS} for f in self.folds]}

	def save(self, path):
		with open(path, 'w', encoding='utf-8') as f:
			json.dump(self.to_dict(), f, indent=2, sort_keys=True)

	@classmethod
	def load(cls, path):
		with open(path, encoding='utf-8') as f:
			data = json.load(f)
		try:
			plan = cls(k=int(data['k']), folds=[{s: list(fold[s]) for s in SUBSETS} for fold in data['folds']],
				seed=int(data['seed']))
		except (KeyError, TypeError, ValueError) as e:
			raise DataError(f'{path}: malformed fold plan ({e})') from e
		if len(plan.folds) != plan.k:
			raise DataError(f'{path}: fold plan declares k={plan.k} but lists {len(plan.folds)} folds')
		return plan


@dataclass
class BatchPlan:
	batches: list
	batch_size: int
	seed: int = 0


def subject_labels(records):
	'''Majority label per subject, ties go to glaucoma (1).'''
	votes = defaultdict(Counter)
	for r in records:
		votes[r.subject_id][r.label] += 1
	return {s: int(c[1] >= c[0]) for s, c in votes.items()}


def make_fold_plan(records, k, seed, val_fraction=0.1):
	"""
	Plans k subject-level folds

	Test groups come from a stratified k-fold over subjects (stratified by the subject's majority
	label). Within each fold, about val_fraction of the remaining subjects of each class are held out
	for validation; a class with a single remaining subject keeps it for training.
	"""
	if k < 2:
		raise ValueError(f'k must be at least 2, found {k}')
	labels = subject_labels(records)
	subjects = sorted(labels)
	y = np.array([labels[s] for s in subjects])
	for cls in (0, 1):
		count = int((y == cls).sum())
		if count < k:
			raise DataError(f'too few subjects: class {cls} has {count} subjects, k={k} folds need at least {k}')

	skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
	folds = []
	for fold, (rest, test) in enumerate(skf.split(np.zeros(len(subjects)), y)):
		train, validation = [], []
		for cls in (0, 1):
			members = [subjects[i] for i in rest if y[i] == cls]
			if len(members) < 2:
				train.extend(members)
				continue
			n_val = min(len(members) - 1, max(1, int(round(val_fraction * len(members)))))
			cls_train, cls_val = train_test_split(members, test_size=n_val, random_state=seed + fold)
			train.extend(cls_train)
			validation.extend(cls_val)
		folds.append({'train': sorted(train), 'validation': sorted(validation),
			'test': sorted(subjects[i] for i in test)})
	return FoldPlan(k=k, folds=folds, seed=seed)


def fold_indices(plan, records, fold):
	'''Maps the subject sets of one fold to record indices, returns {subset: [indices]}.'''
	if not 0 <= fold < plan.k:
		raise ValueError(f'fold must be in [0, {plan.k}), found {fold}')
	where = {}
	for subset in SUBSETS:
		for subject in plan.folds[fold][subset]:
			where[subject] = subset
	out = {subset: [] for subset in SUBSETS}
	for i, r in enumerate(records):
		if r.subject_id not in where:
			raise DataError(f'subject {r.subject_id!r} of volume {r.volume_id!r} is not part of the fold plan')
		out[where[r.subject_id]].append(i)
	return out


def balanced_batches(labels, train_indices, batch_size, seed):
	"""
	Class-balanced batches over one epoch

	Every batch holds ceil(b/2) glaucoma and floor(b/2) normal indices. The number of batches is set by
	the class that needs the most batches to be seen once; the other class is topped up by sampling
	with replacement.
	"""
	if batch_size < 2:
		raise ValueError('batch_size must be at least 2 for balanced batches')
	train_indices = list(train_indices)
	by_class = {cls: np.array([i for i in train_indices if labels[i] == cls], dtype=np.int64) for cls in (0, 1)}
	for cls, members in by_class.items():
		if len(members) == 0:
			raise ValueError(f'class {cls} is absent from the training indices')

	quota = {1: (batch_size + 1) // 2, 0: batch_size // 2}
	n_batches = max(-(-len(by_class[c]) // quota[c]) for c in (0, 1))
	rng = np.random.default_rng(seed)
	streams = {}
	for cls in (1, 0):
		needed = n_batches * quota[cls]
		members = by_class[cls]
		order = rng.permutation(members)
		if needed > len(order):
			order = np.concatenate([order, rng.choice(members, size=needed - len(order), replace=True)])
		streams[cls] = order[:needed]

	batches = []
	for b in range(n_batches):
		pos = streams[1][b * quota[1]:(b + 1) * quota[1]]
		neg = streams[0][b * quota[0]:(b + 1) * quota[0]]
		batches.append([int(i) for i in np.concatenate([pos, neg])])
	return BatchPlan(batches=batches, batch_size=batch_size, seed=seed)
