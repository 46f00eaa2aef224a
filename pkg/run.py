import argparse
import json
import os
import sys

import infolog
from datasets import preprocessor
from datasets.synthetic import synthetic_from_hparams, write_dataset
from datasets.volume import load_manifest
from hparams import hparams_debug_string, load_hparams
from infolog import log
from tqdm import tqdm
from volseq import baselines, evaluate, explain
from volseq.errors import ConfigError, DataError, ExternalDependencyUnavailable, TrainingDiverged
from volseq.extractors import fingerprint, preprocessing_hash
from volseq.feeder import fold_indices, make_fold_plan
from volseq.metrics import evaluate_scores, format_table
from volseq.models import create_model, load_head, save_head
from volseq.train import predict_proba, train_model
from volseq.utils import plot

ABLATIONS = ('lstm', 'resnet', 'svm')


def prepare_run(args):
	'''Loads the configuration, creates out_dir/<run-id>/, starts the run log and echoes the config.'''
	hp = load_hparams(args.config, args.set)
	run_name = args.name or f'{args.command}-seed{hp.seed}'
	run_dir = os.path.join(hp.out_dir, run_name)
	os.makedirs(run_dir, exist_ok=True)
	infolog.init(os.path.join(run_dir, 'Terminal_log'), run_name)
	evaluate.write_json(os.path.join(run_dir, 'config.json'), hp.model_dump(mode='json'))
	log(hparams_debug_string(hp))
	return run_dir, hp


def _records(hp):
	records = load_manifest(hp.manifest)
	if not records:
		raise DataError(f'{hp.manifest} lists no volumes')
	return records


def _features(args, hp, records):
	return preprocessor.build_features(records, hp, n_jobs=args.jobs, tqdm=tqdm)


def _fingerprint(hp):
	return fingerprint(hp.extractor_spec(), preprocessing_hash(hp.target_size, hp.channel_mean, hp.channel_std))


def cmd_synth(args):
	run_dir, hp = prepare_run(args)
	records = synthetic_from_hparams(hp)
	path = write_dataset(records, hp.data_dir, hp.manifest)
	n_pos = sum(r.label for r in records)
	evaluate.write_json(os.path.join(run_dir, 'report.json'), {
		'manifest': path, 'seed': hp.seed, 'volumes': len(records), 'glaucoma': n_pos,
	})
	log(f'Wrote {len(records)} synthetic volumes ({n_pos} glaucoma, {len(records) - n_pos} normal) to {hp.data_dir}, manifest {path}')


def cmd_ingest(args):
	run_dir, hp = prepare_run(args)
	records = load_manifest(hp.manifest)
	problems = preprocessor.validate_records(records, hp.data_dir, n_jobs=args.jobs, tqdm=tqdm)
	evaluate.write_json(os.path.join(run_dir, 'report.json'), {
		'manifest': hp.manifest, 'seed': hp.seed, 'volumes': len(records),
		'problems': [{'volume_id': v, 'error': msg} for v, msg in problems],
	})
	for volume_id, msg in problems:
		log(f'{volume_id}: {msg}')
	if problems:
		raise DataError(f'{len(problems)} of {len(records)} volumes failed validation: '
			+ ', '.join(v for v, _ in problems))
	log(f'{len(records)} volumes OK')


def cmd_extract(args):
	run_dir, hp = prepare_run(args)
	features = _features(args, hp, _records(hp))
	log(f'Cached {len(features)} feature sequences under {hp.cache_dir} ({_fingerprint(hp)})')


def cmd_train(args):
	run_dir, hp = prepare_run(args)
	if not 0 <= args.fold < hp.k:
		raise ConfigError(f'--fold must be in [0, {hp.k}), found {args.fold}')
	records = _records(hp)
	features = _features(args, hp, records)
	plan = make_fold_plan(records, hp.k, hp.seed, hp.val_fraction)
	plan.save(os.path.join(run_dir, 'fold_plan.json'))
	indices = fold_indices(plan, records, args.fold)
	labels = [r.label for r in records]
	head = create_model(hp.cell, features[0].embedding_dim, hp, seed=hp.seed + args.fold)
	best, history = train_model(features, labels, indices, head, hp.focal_config(), hp.optim_config(),
		name=f'fold {args.fold}')

	save_head(os.path.join(run_dir, 'head.ckpt'), best)
	history.to_csv(os.path.join(run_dir, 'history.csv'))
	plot.plot_history(history, os.path.join(run_dir, 'history.png'), info=f'Fold {args.fold}')
	test = indices['test']
	report = evaluate_scores(predict_proba(best, features, test), [labels[i] for i in test], hp.threshold)
	evaluate.write_json(os.path.join(run_dir, 'report.json'), {
		'fold': args.fold, 'seed': hp.seed, 'best_epoch': history.best_epoch,
		'initial_val_loss': history.initial_val_loss, 'test': report.to_dict(),
	})
	log(format_table([(f'{hp.cell.upper()} fold {args.fold}', report)]))


def _cross_validate(args, hp, run_dir, method, cell=None):
	records = _records(hp)
	features = _features(args, hp, records)
	plan = make_fold_plan(records, hp.k, hp.seed, hp.val_fraction)
	plan.save(os.path.join(run_dir, 'fold_plan.json'))
	report, histories = evaluate.cross_validate(records, features, hp, cell=cell, plan=plan, out_dir=run_dir, tqdm=tqdm)
	evaluate.write_cross_val(run_dir, report, hp, method=method, extra={
		'extractor': _fingerprint(hp),
		'best_epochs': [h.best_epoch for h in histories],
	})
	log(format_table([(method, report)]))
	return report


def cmd_cv(args):
	run_dir, hp = prepare_run(args)
	_cross_validate(args, hp, run_dir, f'{hp.extractor_kind} + {hp.cell.upper()}')


def cmd_sweep(args):
	run_dir, hp = prepare_run(args)
	records = _records(hp)
	features = _features(args, hp, records)
	table = evaluate.run_sweep(records, features, hp, args.grid, tqdm=tqdm)
	table.to_csv(os.path.join(run_dir, f'sweep-{args.grid}.csv'))
	text = table.format()
	with open(os.path.join(run_dir, f'sweep-{args.grid}.txt'), 'w', encoding='utf-8') as f:
		f.write(text)
	evaluate.write_json(os.path.join(run_dir, 'report.json'), {'grid': args.grid, 'seed': hp.seed, 'rows': table.rows})
	log(text)


def resnet_hparams(hp):
	'''ResNet34 ablation settings. The encoder comes from resnet_weights, never from the shared backbone_weights.'''
	return hp.parse(['extractor_kind=resnet34_imagenet', 'embedding_dim=512', 'emits_attention=false',
		'extractor_input_size=null', f'backbone_weights={json.dumps(hp.resnet_weights)}'])


def cmd_ablate(args):
	run_dir, hp = prepare_run(args)
	if args.which == 'lstm':
		_cross_validate(args, hp, run_dir, f'{hp.extractor_kind} + LSTM', cell='lstm')
	elif args.which == 'resnet':
		_cross_validate(args, resnet_hparams(hp), run_dir, 'ResNet34 + GRU')
	else:
		_svm(args, hp, run_dir)


def _check_slice_selection(hp, records):
	depth = min(r.depth for r in records)
	if not 1 <= hp.center_slice <= depth:
		raise ConfigError(f'center_slice {hp.center_slice} is outside 1..{depth} (shallowest volume)')
	if hp.n_selected_slices > depth:
		raise ConfigError(f'n_selected_slices {hp.n_selected_slices} exceeds the shallowest volume depth {depth}')


def _svm(args, hp, run_dir):
	records = _records(hp)
	_check_slice_selection(hp, records)
	features = _features(args, hp, records)
	entropies = preprocessor.entropy_profiles(records, hp.data_dir, n_jobs=args.jobs, tqdm=tqdm)
	plan = make_fold_plan(records, hp.k, hp.seed, hp.val_fraction)
	plan.save(os.path.join(run_dir, 'fold_plan.json'))
	result = baselines.run_svm_baseline(records, features, entropies, plan, hp, tqdm=tqdm)
	payload = result.to_dict(hp)
	payload.update({'seed': hp.seed, 'extractor': _fingerprint(hp)})
	evaluate.write_json(os.path.join(run_dir, 'report.json'), payload)
	rows = [(f'SVM (slice position {j + 1})', r) for j, r in enumerate(result.positions)]
	rows.append(('SVM (majority voting)', result.ensemble))
	text = format_table(rows, title=f'{hp.k}-fold entropy-selected slices + gain ratio + linear SVM (seed {hp.seed})')
	with open(os.path.join(run_dir, 'report.txt'), 'w', encoding='utf-8') as f:
		f.write(text)
	log(text)


def cmd_explain(args):
	run_dir, hp = prepare_run(args)
	if not os.path.isfile(args.checkpoint):
		raise ConfigError(f'checkpoint not found: {args.checkpoint}')
	params = load_head(args.checkpoint)
	records = _records(hp)
	by_id = {r.volume_id: r for r in records}
	if args.volume_id not in by_id:
		raise DataError(f'unknown volume_id {args.volume_id!r}')
	if args.export in ('head_pooled', 'both') and params.input_dim != hp.embedding_dim:
		raise ConfigError(f'{args.checkpoint} expects {params.input_dim}-dimensional features, '
			f'the configured extractor emits {hp.embedding_dim}')
	slices = args.slices or hp.explain_slices
	depth = by_id[args.volume_id].depth
	for s in slices:
		if not 1 <= s <= depth:
			raise DataError(f'{args.volume_id}: slice {s} is outside 1..{depth}')
	if args.export in ('slice_features', 'both'):
		shallowest = min(records, key=lambda r: r.depth)
		if not 1 <= hp.export_slice <= shallowest.depth:
			raise ConfigError(f'export_slice {hp.export_slice} is outside 1..{shallowest.depth} ({shallowest.volume_id})')
	attention_hp = hp
	if hp.extractor_kind == 'stub' and not hp.emits_attention:
		attention_hp = hp.parse(['emits_attention=true'])

	prepared, _, stacks = preprocessor.volume_attention(by_id[args.volume_id], attention_hp)
	for s in slices:
		rollout_map = explain.attention_rollout(stacks[s - 1])
		explain.render_heatmap(rollout_map, prepared.slices[s - 1], os.path.join(run_dir, f'{args.volume_id}-slice{s:03d}.png'),
			alpha=hp.heatmap_alpha)
		plot.plot_rollout(rollout_map.rollout, os.path.join(run_dir, f'{args.volume_id}-slice{s:03d}-rollout.png'),
			info=f'{args.volume_id} slice {s}')
	log(f'Wrote {len(slices)} rollout overlays for {args.volume_id}')

	if args.export:
		features = _features(args, hp, records)
		ids = [r.volume_id for r in records]
		labels = [r.label for r in records]
		if args.export in ('slice_features', 'both'):
			path = os.path.join(run_dir, f'embeddings-slice{hp.export_slice:03d}.csv')
			explain.export_embeddings(path, ids, explain.slice_feature_rows(features, hp.export_slice), labels,
				'slice_features', _fingerprint(hp))
			log(f'Exported slice {hp.export_slice} features to {path}')
		if args.export in ('head_pooled', 'both'):
			path = os.path.join(run_dir, 'embeddings-head_pooled.csv')
			explain.export_embeddings(path, ids, explain.head_pooled_rows(params, features), labels, 'head_pooled',
				_fingerprint(hp))
			log(f'Exported pooled head vectors to {path}')


def _add_common(parser):
	parser.add_argument('--config', default=None, help='JSON file of hyper-parameter values')
	parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
		help='Hyper-parameter override, repeatable, values are parsed as JSON when possible')
	parser.add_argument('--name', help='Run id, defaults to <command>-seed<seed>')
	parser.add_argument('--jobs', type=int, default=1, help='Worker processes for per-volume work')


def build_parser():
	parser = argparse.ArgumentParser(description='Slice-sequence classification of 3D OCT volumes')
	commands = parser.add_subparsers(dest='command', required=True)

	for name, func, help_text in (
			('synth', cmd_synth, 'Generate a synthetic dataset (manifest + raw voxel files)'),
			('ingest', cmd_ingest, 'Validate that every manifest record loads with its declared shape'),
			('extract', cmd_extract, 'Fill the feature cache'),
			('train', cmd_train, 'Train the head on one fold'),
			('cv', cmd_cv, 'k-fold cross-validation'),
			('sweep', cmd_sweep, 'Validation-set sweeps over head sizes, dropout, focal loss parameters or learning rate x batch size'),
			('ablate', cmd_ablate, 'LSTM, ResNet34 or entropy + SVM ablations'),
			('explain', cmd_explain, 'Attention rollout overlays and embedding export')):
		sub = commands.add_parser(name, help=help_text)
		_add_common(sub)
		sub.set_defaults(func=func)
		if name == 'train':
			sub.add_argument('--fold', type=int, default=0, help='0-based fold index')
		elif name == 'sweep':
			sub.add_argument('--grid', required=True, choices=evaluate.SWEEP_GRIDS)
		elif name == 'ablate':
			sub.add_argument('which', choices=ABLATIONS)
		elif name == 'explain':
			sub.add_argument('--checkpoint', required=True, help='Head checkpoint written by train or cv')
			sub.add_argument('--volume_id', required=True)
			sub.add_argument('--slices', type=int, nargs='+', help='1-based slices, defaults to hparams.explain_slices')
			sub.add_argument('--export', choices=('slice_features', 'head_pooled', 'both', ''), default='both',
				help='Embedding exports for external t-SNE, empty to skip')
	return parser


def main(argv=None):
	args = build_parser().parse_args(argv)
	try:
		args.func(args)
	except ConfigError as e:
		log(f'Configuration error: {e}')
		return 2
	except ExternalDependencyUnavailable as e:
		log(f'{e}')
		return 3
	except (ValueError, TrainingDiverged) as e:
		log(f'Error: {e}')
		return 1
	return 0


if __name__ == '__main__':
	sys.exit(main())
