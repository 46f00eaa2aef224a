'''Cross-validation driver, report export and validation-set sweeps.'''
import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from infolog import log
from volseq.errors import ConfigError
from volseq.feeder import fold_indices, make_fold_plan
from volseq.metrics import aggregate_folds, evaluate_scores, format_table
from volseq.models import create_model, save_head
from volseq.train import predict_proba, train_model
from volseq.utils import plot

SWEEP_GRIDS = ('gru_sizes', 'dropout', 'focal', 'lr_batch')


def _embedding_dim(features):
	return np.asarray(getattr(features[0], 'features', features[0])).shape[1]


def cross_validate(records, features, hparams, cell=None, plan=None, out_dir=None, tqdm=lambda x: x, name='cv'):
	"""
	k-fold cross-validation of the sequence head

	Args:
		- records: VolumeRecords (labels and subjects)
		- features: FeatureSequences aligned with records (see datasets.preprocessor.build_features)
		- hparams: hyper parameters (head sizes, focal loss, optimizer, k, seed, threshold)
		- cell: Optional, 'gru' or 'lstm', defaults to hparams.cell
		- plan: Optional, a FoldPlan to reuse, built from hparams.k and hparams.seed otherwise
		- out_dir: Optional, per-fold history, plot, checkpoint and predictions are written here
		- tqdm: Optional, provides a nice progress bar

	Returns:
		- (CrossValReport, list of TrainHistory)
	"""
	if len(records) != len(features):
		raise ValueError('records and features must be aligned')
	cell = cell or hparams.cell
	plan = plan or make_fold_plan(records, hparams.k, hparams.seed, hparams.val_fraction)
	labels = [r.label for r in records]
	fcfg, ocfg = hparams.focal_config(), hparams.optim_config()
	input_dim = _embedding_dim(features)

	reports, histories = [], []
	for fold in tqdm(range(plan.k)):
		indices = fold_indices(plan, records, fold)
		head = create_model(cell, input_dim, hparams, seed=hparams.seed + fold)
		best, history = train_model(features, labels, indices, head, fcfg, ocfg, name=f'{name} fold {fold}')
		test = indices['test']
		scores = predict_proba(best, features, test)
		report = evaluate_scores(scores, [labels[i] for i in test], hparams.threshold)
		log(f'{name} fold {fold}: best epoch {history.best_epoch}, test acc={report.acc:.4f} auc={report.auc:.4f} '
			f'f1={report.f1:.4f} mcc={report.mcc:.4f}')
		if out_dir:
			_write_fold(out_dir, fold, best, history, [records[i].volume_id for i in test], scores,
				[labels[i] for i in test])
		reports.append(report)
		histories.append(history)
	return aggregate_folds(reports), histories


def _write_fold(out_dir, fold, params, history, ids, scores, labels):
	fold_dir = os.path.join(out_dir, f'fold-{fold}')
	os.makedirs(fold_dir, exist_ok=True)
	history.to_csv(os.path.join(fold_dir, 'history.csv'))
	plot.plot_history(history, os.path.join(fold_dir, 'history.png'), info=f'Fold {fold}')
	save_head(os.path.join(fold_dir, 'head.ckpt'), params)
	with open(os.path.join(fold_dir, 'predictions.csv'), 'w', newline='', encoding='utf-8') as f:
		writer = csv.writer(f)
		writer.writerow(['id', 'label', 'score'])
		for volume_id, label, score in zip(ids, labels, scores):
			writer.writerow([volume_id, label, repr(float(score))])


def write_json(path, payload):
	'''Deterministic JSON: sorted keys, no timestamps.'''
	with open(path, 'w', encoding='utf-8') as f:
		json.dump(payload, f, indent=2, sort_keys=True)
		f.write('\n')


def write_cross_val(out_dir, report, config, method='GRU', extra=None):
	'''report.json (per-fold and aggregate) and report.txt (table), returns the JSON path.'''
	os.makedirs(out_dir, exist_ok=True)
	payload = {'method': method, 'seed': config.seed, 'report': report.to_dict()}
	if extra:
		payload.update(extra)
	path = os.path.join(out_dir, 'report.json')
	write_json(path, payload)
	with open(os.path.join(out_dir, 'report.txt'), 'w', encoding='utf-8') as f:
		f.write(format_table([(method, report)], title=f'{report.k}-fold cross-validation, '
			f'95% CI half-width = t(0.975, {report.k - 1}) * sd / sqrt({report.k}) (seed {config.seed})'))
	return path


@dataclass
class SweepTable:
	grid: str
	rows: list #dicts holding the grid coordinates and the mean validation F1

	def to_csv(self, path):
		keys = list(self.rows[0])
		with open(path, 'w', newline='', encoding='utf-8') as f:
			writer = csv.writer(f)
			writer.writerow(keys)
			for row in self.rows:
				writer.writerow([row[k] for k in keys])

	def format(self):
		if self.grid == 'gru_sizes':
			return _format_matrix(self.rows, 'gru1', 'gru2', 'GRU-1 \\ GRU-2', descending=True)
		if self.grid == 'focal':
			return _format_matrix(self.rows, 'alpha', 'gamma', 'alpha \\ gamma')
		if self.grid == 'lr_batch':
			return _format_matrix(self.rows, 'lr', 'batch_size', 'lr \\ batch')
		lines = ['dropout  F1 (%)']
		lines += [f'{row["dropout"]:<7g}  {100 * row["f1"]:.2f}' for row in self.rows]
		return '\n'.join(lines) + '\n'


def _format_matrix(rows, row_key, col_key, corner, descending=False):
	row_values = sorted({r[row_key] for r in rows}, reverse=descending)
	col_values = sorted({r[col_key] for r in rows}, reverse=descending)
	cells = {(r[row_key], r[col_key]): r['f1'] for r in rows}
	table = [[corner] + [f'{c:g}' for c in col_values]]
	for rv in row_values:
		table.append([f'{rv:g}'] + [f'{100 * cells[(rv, cv)]:.2f}' if (rv, cv) in cells else '-' for cv in col_values])
	widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
	return '\n'.join('  '.join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table) + '\n'


def sweep_points(grid, hparams):
	if grid == 'gru_sizes':
		sizes = sorted(set(hparams.sweep_gru_sizes), reverse=True)
		return [{'gru1': a, 'gru2': b} for a in sizes for b in sizes if a >= b]
	if grid == 'dropout':
		return [{'dropout': d} for d in hparams.sweep_dropout]
	if grid == 'focal':
		return [{'alpha': a, 'gamma': g} for a in hparams.sweep_alpha for g in hparams.sweep_gamma]
	if grid == 'lr_batch':
		return [{'lr': l, 'batch_size': b} for l in hparams.sweep_lr for b in hparams.sweep_batch_size]
	raise ConfigError(f'unknown sweep grid {grid!r}, expected one of {SWEEP_GRIDS}')


def _overrides(point):
	if 'gru1' in point:
		return [f'gru_sizes=[{point["gru1"]}, {point["gru2"]}]']
	if 'dropout' in point:
		return [f'dropout_rate={point["dropout"]}']
	if 'lr' in point:
		return [f'lr0={point["lr"]}', f'batch_size={point["batch_size"]}']
	return [f'alpha={point["alpha"]}', f'gamma={point["gamma"]}']


def run_sweep(records, features, hparams, grid, tqdm=lambda x: x):
	"""
	Scores every grid point by the validation F1 of its best checkpoint

	The first hparams.sweep_folds folds of the plan are used and their F1 averaged. Test subjects
	are never touched.
	"""
	points = sweep_points(grid, hparams)
	if not points:
		raise ConfigError(f'the {grid} sweep grid is empty')
	plan = make_fold_plan(records, hparams.k, hparams.seed, hparams.val_fraction)
	labels = [r.label for r in records]
	input_dim = _embedding_dim(features)
	n_folds = min(hparams.sweep_folds, plan.k)
	rows = []
	for point in tqdm(points):
		hp = hparams.parse(_overrides(point))
		scores = []
		for fold in range(n_folds):
			indices = fold_indices(plan, records, fold)
			head = create_model(hp.cell, input_dim, hp, seed=hp.seed + fold)
			_, history = train_model(features, labels, indices, head, hp.focal_config(), hp.optim_config(),
				name=f'sweep {point} fold {fold}')
			scores.append(history.val_f1[history.best_epoch])
		rows.append(dict(point, f1=float(np.mean(scores))))
		log(f'sweep {grid} {point}: validation F1 {rows[-1]["f1"]:.4f}')
	return SweepTable(grid, rows)
