import json

import pytest

from hparams import hparams
from volseq import evaluate
from volseq.errors import ConfigError
from volseq.feeder import make_fold_plan


def _hparams(*extra):
	return hparams.parse(['gru_sizes=[8,4]', 'lr0=0.01', 'batch_size=4', 'max_epochs=30', 'patience=30',
		'dropout_rate=0.1'] + list(extra))


def test_cross_validation_separates_synthetic_classes(small_dataset, tmp_path):
	records, features = small_dataset
	hp = _hparams('k=5')
	report, histories = evaluate.cross_validate(records, features, hp, out_dir=str(tmp_path))
	assert report.k == 5
	assert sum(r.n_pos + r.n_neg for r in report.per_fold) == len(records)
	assert report.mean['auc'] >= 0.9
	assert report.mean['f1'] >= 0.85
	assert len(histories) == 5
	for history in histories:
		assert history.val_loss[history.best_epoch] < history.initial_val_loss
		assert history.val_loss[history.best_epoch] <= history.val_loss[0]
	assert (tmp_path / 'fold-4' / 'predictions.csv').exists()

	path = evaluate.write_cross_val(str(tmp_path), report, hp, method='GRU')
	with open(path, encoding='utf-8') as f:
		payload = json.load(f)
	assert payload['method'] == 'GRU' and payload['seed'] == hp.seed
	assert (tmp_path / 'report.txt').read_text().startswith('5-fold cross-validation')


def test_cross_validation_is_deterministic(small_dataset):
	records, features = small_dataset
	hp = _hparams('k=2', 'max_epochs=2')
	plan = make_fold_plan(records, 2, hp.seed)
	a, _ = evaluate.cross_validate(records, features, hp, plan=plan)
	b, _ = evaluate.cross_validate(records, features, hp, plan=plan)
	assert a.to_dict() == b.to_dict()

	lstm, _ = evaluate.cross_validate(records, features, hp, cell='lstm', plan=plan)
	assert lstm.k == 2
	with pytest.raises(ValueError):
		evaluate.cross_validate(records, features[:-1], hp)


def test_sweep_points():
	hp = hparams.parse(['sweep_gru_sizes=[128,512,256]'])
	points = evaluate.sweep_points('gru_sizes', hp)
	assert len(points) == 6
	assert all(p['gru1'] >= p['gru2'] for p in points)
	assert len(evaluate.sweep_points('focal', hp)) == 12
	assert [p['dropout'] for p in evaluate.sweep_points('dropout', hp)] == [0., 0.1, 0.2, 0.3, 0.4, 0.5]
	with pytest.raises(ConfigError):
		evaluate.sweep_points('momentum', hp)


def test_learning_rate_batch_grid():
	points = evaluate.sweep_points('lr_batch', hparams)
	assert len(points) == 25
	assert sorted({p['lr'] for p in points}) == [1e-5, 5e-5, 1e-4, 5e-4, 1e-3]
	assert sorted({p['batch_size'] for p in points}) == [8, 16, 32, 64, 128]
	assert len({(p['lr'], p['batch_size']) for p in points}) == 25
	assert 'lr_batch' in evaluate.SWEEP_GRIDS


def test_sweep_table_formats():
	table = evaluate.SweepTable('focal', [
		{'alpha': 0.2, 'gamma': 0., 'f1': 0.5},
		{'alpha': 0.2, 'gamma': 2., 'f1': 0.75},
		{'alpha': 0.3, 'gamma': 0., 'f1': 1.},
	])
	lines = table.format().splitlines()
	assert lines[0].split() == ['alpha', '\\', 'gamma', '0', '2']
	assert lines[1].split() == ['0.2', '50.00', '75.00']
	assert lines[2].split() == ['0.3', '100.00', '-']


def test_sweep_uses_validation_scores(small_dataset, tmp_path):
	records, features = small_dataset
	hp = _hparams('k=2', 'max_epochs=2', 'sweep_dropout=[0.0,0.3]')
	table = evaluate.run_sweep(records, features, hp, 'dropout')
	assert [row['dropout'] for row in table.rows] == [0., 0.3]
	assert all(0. <= row['f1'] <= 1. for row in table.rows)
	table.to_csv(str(tmp_path / 'sweep.csv'))
	assert (tmp_path / 'sweep.csv').read_text().splitlines()[0] == 'dropout,f1'


def test_lstm_cross_validation_separates_synthetic_classes(small_dataset):
	records, features = small_dataset
	report, _ = evaluate.cross_validate(records, features, _hparams('k=5'), cell='lstm')
	assert report.mean['auc'] >= 0.85


def test_learning_rate_batch_sweep(small_dataset, tmp_path):
	records, features = small_dataset
	hp = _hparams('k=2', 'max_epochs=2', 'sweep_lr=[0.01,0.001]', 'sweep_batch_size=[4,8]')
	table = evaluate.run_sweep(records, features, hp, 'lr_batch')
	assert [(row['lr'], row['batch_size']) for row in table.rows] == [(0.01, 4), (0.01, 8), (0.001, 4), (0.001, 8)]
	lines = table.format().splitlines()
	assert lines[0].split() == ['lr', '\\', 'batch', '4', '8']
	assert [line.split()[0] for line in lines[1:]] == ['0.001', '0.01']
	table.to_csv(str(tmp_path / 'sweep.csv'))
	assert (tmp_path / 'sweep.csv').read_text().splitlines()[0] == 'lr,batch_size,f1'
