from concurrent.futures import ProcessPoolExecutor
from functools import partial

from datasets import volume
from infolog import log
from volseq.baselines import entropy_profile
from volseq.cache import cache_get, cache_put
from volseq.errors import DataError
from volseq.extractors import create_extractor, extract_features, fingerprint, preprocessing_hash

_extractors = {}


def _run(tasks, n_jobs, tqdm):
	'''Runs zero-argument tasks, inline when n_jobs == 1, results in submission order.'''
	if n_jobs <= 1:
		return [task() for task in tqdm(tasks)]
	with ProcessPoolExecutor(max_workers=n_jobs) as executor:
		futures = [executor.submit(task) for task in tasks]
		return [future.result() for future in tqdm(futures)]


def validate_records(records, data_dir, n_jobs=1, tqdm=lambda x: x):
	"""
	Checks that every record of a manifest loads and matches its declared shape

	Args:
		- records: VolumeRecords from load_manifest
		- data_dir: root the relative paths are resolved against
		- n_jobs: Optional, number of worker processes
		- tqdm: Optional, provides a nice progress bar

	Returns:
		- A list of (volume_id, error message) tuples, empty when the dataset is clean
	"""
	results = _run([partial(_check_one, r, data_dir) for r in records], n_jobs, tqdm)
	return [(r.volume_id, msg) for r, msg in zip(records, results) if msg is not None]


def _check_one(record, data_dir):
	try:
		volume.load_voxels(record, data_dir)
	except DataError as e:
		return str(e)
	return None


def _extractor_for(spec):
	#One instance per process, backbones are expensive to load
	if spec not in _extractors:
		_extractors[spec] = create_extractor(spec)
	return _extractors[spec]


def _features_one(record, data_dir, cache_dir, spec, prep, batch_size):
	target, mean, std = prep
	key = fingerprint(spec, preprocessing_hash(target, mean, std))
	if cache_dir:
		cached = cache_get(cache_dir, record.volume_id, key)
		if cached is not None:
			return cached
	loaded = volume.load_voxels(record, data_dir)
	prepared = volume.preprocess(loaded, target, mean, std)
	seq, _ = extract_features(_extractor_for(spec), prepared, batch_size=batch_size)
	if cache_dir:
		cache_put(cache_dir, seq, key)
	return seq


def build_features(records, hparams, n_jobs=1, tqdm=lambda x: x, cache_dir=None):
	"""
	Computes (or reads from the feature cache) one FeatureSequence per record

	Args:
		- records: VolumeRecords, voxels may be unloaded
		- hparams: hyper parameters (paths, preprocessing constants and extractor)
		- n_jobs: Optional, number of worker processes
		- tqdm: Optional, provides a nice progress bar
		- cache_dir: Optional, overrides hparams.cache_dir, '' disables caching

	Returns:
		- A list of FeatureSequence aligned with records
	"""
	spec = hparams.extractor_spec()
	prep = (tuple(hparams.target_size), tuple(hparams.channel_mean), tuple(hparams.channel_std))
	store = hparams.cache_dir if cache_dir is None else cache_dir
	tasks = [partial(_features_one, r, hparams.data_dir, store, spec, prep, hparams.extract_batch_size)
		for r in records]
	features = _run(tasks, n_jobs, tqdm)
	log(f'Features ready for {len(features)} volumes ({fingerprint(spec, preprocessing_hash(*prep))})')
	return features


def volume_attention(record, hparams):
	'''Preprocesses one volume and returns (PreprocessedVolume, FeatureSequence, AttentionStacks) from an attention-emitting extractor.'''
	spec = hparams.extractor_spec()
	if not spec.emits_attention:
		raise DataError(f'extractor {spec.kind} is configured without attention output (set emits_attention=true)')
	loaded = volume.load_voxels(record, hparams.data_dir)
	prepared = volume.preprocess(loaded, hparams.target_size, hparams.channel_mean, hparams.channel_std)
	seq, stacks = extract_features(_extractor_for(spec), prepared, batch_size=hparams.extract_batch_size)
	return prepared, seq, stacks


def _entropy_one(record, data_dir):
	return entropy_profile(volume.load_voxels(record, data_dir).voxels)


def entropy_profiles(records, data_dir, n_jobs=1, tqdm=lambda x: x):
	'''Raw 8-bit slice entropies (bits) of every volume, aligned with records.'''
	return _run([partial(_entropy_one, r, data_dir) for r in records], n_jobs, tqdm)
