'''Per-volume feature cache.

One file per (volume, extractor fingerprint):

	magic 'VSQF' | u16 version | u32 len + fingerprint (utf-8) | u32 len + volume_id (utf-8)
	| u32 rows | u32 cols | rows*cols little-endian float32, row-major

Writes go to a temporary file in the same directory and are renamed into place, so readers
never observe a partial entry.
'''
import hashlib
import os
import struct
import tempfile

import numpy as np

from infolog import warn
from volseq.extractors import FeatureSequence

_MAGIC = b'VSQF'
_VERSION = 1


def _entry_path(store, volume_id, fingerprint):
	key = hashlib.sha1(f'{fingerprint}|{volume_id}'.encode('utf-8')).hexdigest()[:16]
	safe_id = ''.join(c if c.isalnum() or c in '-_' else '_' for c in volume_id)
	return os.path.join(store, f'{safe_id}.{key}.feat')


def _encode(text):
	raw = text.encode('utf-8')
	return struct.pack('<I', len(raw)) + raw


def cache_put(store, seq, fingerprint):
	os.makedirs(store, exist_ok=True)
	features = np.ascontiguousarray(seq.features, dtype='<f4')
	rows, cols = features.shape
	header = _MAGIC + struct.pack('<H', _VERSION) + _encode(fingerprint) + _encode(seq.volume_id) \
		+ struct.pack('<II', rows, cols)
	fd, tmp = tempfile.mkstemp(dir=store, suffix='.tmp')
	try:
		with os.fdopen(fd, 'wb') as f:
			f.write(header)
			f.write(features.tobytes())
		os.replace(tmp, _entry_path(store, seq.volume_id, fingerprint))
	except BaseException:
		if os.path.exists(tmp):
			os.remove(tmp)
		raise


def cache_get(store, volume_id, fingerprint):
	'''Returns the cached FeatureSequence or None. Corrupt entries are reported and treated as absent.'''
	path = _entry_path(store, volume_id, fingerprint)
	if not os.path.isfile(path):
		return None
	try:
		with open(path, 'rb') as f:
			data = f.read()
		return _decode(data, volume_id, fingerprint)
	except (ValueError, struct.error) as e:
		warn(f'ignoring corrupt feature cache entry {path}: {e}')
		return None


def _decode(data, volume_id, fingerprint):
	if data[:4] != _MAGIC:
		raise ValueError('bad magic')
	(version,) = struct.unpack_from('<H', data, 4)
	if version != _VERSION:
		raise ValueError(f'unsupported version {version}')
	offset = 6
	stored = []
	for _ in range(2):
		(n,) = struct.unpack_from('<I', data, offset)
		offset += 4
		stored.append(data[offset:offset + n].decode('utf-8'))
		offset += n
	if stored != [fingerprint, volume_id]:
		raise ValueError(f'entry holds {stored[1]!r} / {stored[0]!r}')
	rows, cols = struct.unpack_from('<II', data, offset)
	offset += 8
	payload = data[offset:]
	if len(payload) != rows * cols * 4:
		raise ValueError(f'expected {rows * cols * 4} payload bytes, found {len(payload)}')
	features = np.frombuffer(payload, dtype='<f4').reshape(rows, cols).astype(np.float32)
	return FeatureSequence(volume_id, features)
