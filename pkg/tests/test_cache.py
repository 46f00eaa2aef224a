import glob
import os

import numpy as np

from volseq.cache import cache_get, cache_put
from volseq.extractors import ExtractorSpec, FeatureSequence, fingerprint, preprocessing_hash

PREP = preprocessing_hash((128, 128), (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
KEY = fingerprint(ExtractorSpec(kind='stub', embedding_dim=16, seed=7), PREP)


def _seq(rng, volume_id='V0001'):
	return FeatureSequence(volume_id, rng.standard_normal((6, 16)).astype(np.float32))


def test_round_trip_is_bitwise(tmp_path, rng):
	seq = _seq(rng)
	cache_put(str(tmp_path), seq, KEY)
	hit = cache_get(str(tmp_path), 'V0001', KEY)
	assert hit.volume_id == 'V0001'
	assert hit.features.dtype == np.float32
	assert hit.features.tobytes() == seq.features.tobytes()
	assert not glob.glob(os.path.join(str(tmp_path), '*.tmp'))


def test_different_seed_misses(tmp_path, rng):
	cache_put(str(tmp_path), _seq(rng), KEY)
	other = fingerprint(ExtractorSpec(kind='stub', embedding_dim=16, seed=8), PREP)
	assert cache_get(str(tmp_path), 'V0001', other) is None


def test_unknown_volume_misses(tmp_path, rng):
	cache_put(str(tmp_path), _seq(rng), KEY)
	assert cache_get(str(tmp_path), 'V0002', KEY) is None
	assert cache_get(str(tmp_path / 'absent'), 'V0001', KEY) is None


def test_corrupt_entry_is_absent(tmp_path, rng, capsys):
	cache_put(str(tmp_path), _seq(rng), KEY)
	(entry,) = glob.glob(os.path.join(str(tmp_path), '*.feat'))
	with open(entry, 'r+b') as f:
		f.truncate(os.path.getsize(entry) - 3)
	assert cache_get(str(tmp_path), 'V0001', KEY) is None
	assert 'corrupt' in capsys.readouterr().out

	with open(entry, 'wb') as f:
		f.write(b'junk')
	assert cache_get(str(tmp_path), 'V0001', KEY) is None


def test_overwrite_replaces_entry(tmp_path, rng):
	cache_put(str(tmp_path), _seq(rng), KEY)
	newer = _seq(rng)
	cache_put(str(tmp_path), newer, KEY)
	np.testing.assert_array_equal(cache_get(str(tmp_path), 'V0001', KEY).features, newer.features)
	assert len(glob.glob(os.path.join(str(tmp_path), '*.feat'))) == 1
