import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from infolog import log
from volseq.errors import DataError, TrainingDiverged
from volseq.feeder import balanced_batches
from volseq.metrics import auc, basic_metrics, confusion
from volseq.models.head import HeadParams, head_backward, head_forward_batch, map_params, named_arrays
from volseq.utils import ValueWindow

P_CLAMP = 1e-12


@dataclass(frozen=True)
class FocalConfig:
	alpha: float = 0.3 #Weight of class 1, class 0 gets 1 - alpha
	gamma: float = 2.

	def __post_init__(self):
		if not 0. < self.alpha <= 1.:
			raise ValueError(f'alpha must be in (0, 1], found {self.alpha}')
		if self.gamma < 0.:
			raise ValueError(f'gamma must be >= 0, found {self.gamma}')


@dataclass(frozen=True)
class OptimConfig:
	lr0: float = 1e-4
	beta1: float = 0.9
	beta2: float = 0.999
	eps: float = 1e-8
	decay_factor: float = 0.9
	decay_period_epochs: int = 5
	batch_size: int = 16
	max_epochs: int = 100
	patience: int = 6
	seed: int = 1234

	def __post_init__(self):
		if self.lr0 <= 0.:
			raise ValueError('lr0 must be positive')
		if not (0. <= self.beta1 < 1. and 0. <= self.beta2 < 1.):
			raise ValueError('beta1 and beta2 must be in [0, 1)')
		if self.patience < 1:
			raise ValueError('patience must be at least 1')
		if self.decay_period_epochs < 1 or self.max_epochs < 1:
			raise ValueError('decay_period_epochs and max_epochs must be at least 1')


@dataclass
class AdamState:
	m: list
	v: list


@dataclass
class TrainHistory:
	train_loss: list = field(default_factory=list)
	val_loss: list = field(default_factory=list)
	val_f1: list = field(default_factory=list)
	val_auc: list = field(default_factory=list)
	lr: list = field(default_factory=list)
	best_epoch: Optional[int] = None #0-based index into the per-epoch lists
	stopped_early: bool = False
	initial_val_loss: Optional[float] = None #before the first update

	@property
	def epochs_run(self):
		return len(self.train_loss)

	def to_csv(self, path):
		with open(path, 'w', newline='', encoding='utf-8') as f:
			writer = csv.writer(f)
			writer.writerow(['epoch', 'train_loss', 'val_loss', 'val_f1', 'lr'])
			for epoch in range(self.epochs_run):
				writer.writerow([epoch, repr(self.train_loss[epoch]), repr(self.val_loss[epoch]),
					repr(self.val_f1[epoch]), repr(self.lr[epoch])])


def focal_loss(p, y, cfg):
	"""
	-alpha_t (1 - p_t)^gamma log(p_t) and its derivative with respect to p

	p_t is p for y = 1 and 1 - p for y = 0, alpha_t is alpha for y = 1 and 1 - alpha for y = 0.
	p is clamped to [1e-12, 1 - 1e-12] first. Scalars in, floats out; arrays in, arrays out.
	"""
	scalar = np.ndim(p) == 0 and np.ndim(y) == 0
	p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1. - P_CLAMP)
	y = np.asarray(y)
	positive = y == 1
	p_t = np.where(positive, p, 1. - p)
	alpha_t = np.where(positive, cfg.alpha, 1. - cfg.alpha)
	log_pt = np.log(p_t)
	modulation = (1. - p_t) ** cfg.gamma
	loss = -alpha_t * modulation * log_pt

	dL_dpt = -alpha_t * modulation / p_t
	if cfg.gamma > 0.:
		dL_dpt = dL_dpt + alpha_t * cfg.gamma * (1. - p_t) ** (cfg.gamma - 1.) * log_pt
	dL_dp = np.where(positive, dL_dpt, -dL_dpt)
	if scalar:
		return float(loss), float(dL_dp)
	return loss, dL_dp


def lr_at(epoch, cfg):
	if epoch < 0:
		raise ValueError('epoch must be >= 0')
	return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period_epochs)


def _flatten(params):
	if isinstance(params, HeadParams):
		return [value for _, value in named_arrays(params)]
	return [np.asarray(value, dtype=np.float64) for value in params]


def _rebuild(template, values):
	if isinstance(template, HeadParams):
		it = iter(values)
		return map_params(lambda _: next(it), template)
	return list(values)


def adam_step(params, grads, state, t, lr, cfg):
	"""
	One bias-corrected Adam update

	params and grads are HeadParams or sequences of arrays. state is an AdamState or None
	(zero moments). Returns (new params, new state); inputs are left untouched.
	"""
	if t < 1:
		raise ValueError('the Adam step index starts at 1')
	values, gradients = _flatten(params), _flatten(grads)
	if len(values) != len(gradients) or any(v.shape != g.shape for v, g in zip(values, gradients)):
		raise ValueError('adam_step: parameter and gradient shapes differ')
	if state is None:
		state = AdamState([np.zeros_like(v) for v in values], [np.zeros_like(v) for v in values])
	m = [cfg.beta1 * m_ + (1. - cfg.beta1) * g for m_, g in zip(state.m, gradients)]
	v = [cfg.beta2 * v_ + (1. - cfg.beta2) * g * g for v_, g in zip(state.v, gradients)]
	c1 = 1. - cfg.beta1 ** t
	c2 = 1. - cfg.beta2 ** t
	updated = [value - lr * (m_ / c1) / (np.sqrt(v_ / c2) + cfg.eps) for value, m_, v_ in zip(values, m, v)]
	return _rebuild(params, updated), AdamState(m, v)


class EarlyStopping:
	'''Strict improvement on validation loss, stop after `patience` consecutive misses.'''
	def __init__(self, patience):
		self.patience = patience
		self.best_loss = np.inf
		self.best_epoch = None
		self.bad_epochs = 0

	def update(self, val_loss, epoch):
		'''Returns (improved, should_stop).'''
		if val_loss < self.best_loss:
			self.best_loss = val_loss
			self.best_epoch = epoch
			self.bad_epochs = 0
			return True, False
		self.bad_epochs += 1
		return False, self.bad_epochs >= self.patience


def _matrix(seq):
	return np.asarray(getattr(seq, 'features', seq), dtype=np.float64)


def _depth_groups(features, indices):
	'''Indices grouped by sequence length, groups and members in first-seen order.'''
	groups = {}
	for position, i in enumerate(indices):
		groups.setdefault(_matrix(features[i]).shape[0], []).append((position, i))
	return list(groups.values())


def predict_proba(params, features, indices=None, batch_size=64):
	'''Eval-mode probabilities for features[indices], in index order.'''
	indices = list(range(len(features))) if indices is None else list(indices)
	out = np.empty(len(indices))
	for group in _depth_groups(features, indices):
		for start in range(0, len(group), batch_size):
			chunk = group[start:start + batch_size]
			X = np.stack([_matrix(features[i]) for _, i in chunk])
			p, _ = head_forward_batch(X, params)
			out[[position for position, _ in chunk]] = p
	return out


def pooled_features(params, features, indices=None, batch_size=64):
	'''Eval-mode pooled vectors (the classifier input) for features[indices].'''
	indices = list(range(len(features))) if indices is None else list(indices)
	out = np.empty((len(indices), params.pooled_dim))
	for group in _depth_groups(features, indices):
		for start in range(0, len(group), batch_size):
			chunk = group[start:start + batch_size]
			_, trace = head_forward_batch(np.stack([_matrix(features[i]) for _, i in chunk]), params)
			out[[position for position, _ in chunk]] = trace.pooled
	return out


def _batch_gradients(params, features, labels, batch, fcfg, rng):
	'''Mean focal loss of one batch and its gradients, groups summed in fixed order.'''
	B = len(batch)
	total_loss = 0.
	total = None
	for group in _depth_groups(features, batch):
		X = np.stack([_matrix(features[i]) for _, i in group])
		y = np.array([labels[i] for _, i in group])
		p, trace = head_forward_batch(X, params, train=True, rng=rng)
		loss, dL_dp = focal_loss(p, y, fcfg)
		total_loss += float(loss.sum())
		grads, _ = head_backward(trace, dL_dp / B, params)
		flat = _flatten(grads)
		total = flat if total is None else [a + b for a, b in zip(total, flat)]
	return total_loss / B, _rebuild(params, total)


def validation_scores(params, features, labels, indices, fcfg):
	'''(mean focal loss, F1 at 0.5, AUC or nan) on features[indices].'''
	p = predict_proba(params, features, indices)
	y = np.array([labels[i] for i in indices])
	loss, _ = focal_loss(p, y, fcfg)
	f1 = basic_metrics(confusion(p, y)).f1
	try:
		val_auc = auc(p, y)
	except ValueError:
		val_auc = float('nan')
	return float(np.mean(loss)), f1, val_auc


def train_model(features, labels, fold, head, fcfg, ocfg, name='train'):
	"""
	Trains the head on one fold

	Args:
		- features: FeatureSequences (or (D, E) arrays), the frozen extractor's output
		- labels: 0/1 label per feature sequence
		- fold: {'train': [...], 'validation': [...]} indices into features (see feeder.fold_indices)
		- head: initial HeadParams
		- fcfg, ocfg: FocalConfig and OptimConfig
		- name: Optional, prefix of the per-epoch log lines

	Returns:
		- (parameters with the lowest validation loss, TrainHistory)
	"""
	train, validation = list(fold['train']), list(fold['validation'])
	if not train or not validation:
		raise DataError('train_model needs nonempty train and validation subsets')
	labels = [int(y) for y in labels]

	history = TrainHistory()
	history.initial_val_loss, _, _ = validation_scores(head, features, labels, validation, fcfg)
	stopper = EarlyStopping(ocfg.patience)
	best = head
	params = head
	state = None
	step = 0
	dropout_rng = np.random.default_rng([ocfg.seed, 1])
	loss_window = ValueWindow(100)
	time_window = ValueWindow(100)

	for epoch in range(ocfg.max_epochs):
		lr = lr_at(epoch, ocfg)
		plan = balanced_batches(labels, train, ocfg.batch_size, ocfg.seed + epoch)
		batch_losses = []
		for batch in plan.batches:
			start_time = time.time()
			loss, grads = _batch_gradients(params, features, labels, batch, fcfg, dropout_rng)
			if not np.isfinite(loss):
				log(f'Loss exploded to {loss} at epoch {epoch}, step {step + 1}')
				raise TrainingDiverged(f'non-finite training loss at epoch {epoch}, step {step + 1}')
			step += 1
			params, state = adam_step(params, grads, state, step, lr, ocfg)
			batch_losses.append(loss)
			loss_window.append(loss)
			time_window.append(time.time() - start_time)

		val_loss, val_f1, val_auc = validation_scores(params, features, labels, validation, fcfg)
		if not np.isfinite(val_loss):
			log(f'Loss exploded to {val_loss} on validation at epoch {epoch}')
			raise TrainingDiverged(f'non-finite validation loss at epoch {epoch}')
		history.train_loss.append(float(np.mean(batch_losses)))
		history.val_loss.append(val_loss)
		history.val_f1.append(val_f1)
		history.val_auc.append(val_auc)
		history.lr.append(lr)

		improved, stop = stopper.update(val_loss, epoch)
		if improved:
			best = map_params(np.copy, params)
		log(f'{name} epoch {epoch:3d} [{time_window.average:.3f} sec/step, lr={lr:.3e}, loss={history.train_loss[-1]:.5f}, '
			f'avg_loss={loss_window.average:.5f}, val_loss={val_loss:.5f}, val_f1={val_f1:.4f}]{" *" if improved else ""}')
		if stop:
			history.stopped_early = True
			log(f'{name}: validation loss did not improve for {ocfg.patience} epochs, stopping after epoch {epoch}')
			break

	history.best_epoch = stopper.best_epoch
	return best, history
