import csv
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from volseq.errors import ConfigError, DataError

MANIFEST_HEADER = ['volume_id', 'subject_id', 'label', 'laterality', 'signal_strength',
	'relative_path', 'depth', 'height', 'width']
LATERALITIES = ('left', 'right', 'unknown')


@dataclass
class VolumeRecord:
	'''One 3D scan. `voxels` is a (D, H, W) uint8 grid, None until load_voxels runs.
	'''
	volume_id: str
	subject_id: str
	label: int
	laterality: str = 'unknown'
	signal_strength: Optional[int] = None
	relative_path: str = ''
	depth: int = 0
	height: int = 0
	width: int = 0
	voxels: Optional[np.ndarray] = None

	@property
	def shape(self):
		return (self.depth, self.height, self.width)

	@property
	def loaded(self):
		return self.voxels is not None


@dataclass
class PreprocessedVolume:
	'''Slices resized and normalized: `slices` is (D, H, W, C) float32.
	'''
	volume_id: str
	slices: np.ndarray
	channel_stats_applied: tuple

	@property
	def depth(self):
		return self.slices.shape[0]


def load_manifest(path):
	'''Reads the CSV manifest. Voxels are left unloaded.

	Rows are numbered from 1 after the header in error messages.
	'''
	if not os.path.isfile(path):
		raise ConfigError(f'manifest not found: {path}')
	records = []
	seen = set()
	with open(path, newline='', encoding='utf-8') as f:
		reader = csv.reader(f)
		header = next(reader, None)
		if header is None:
			return records
		if [h.strip() for h in header] != MANIFEST_HEADER:
			raise DataError(f'{path}: manifest header must be {",".join(MANIFEST_HEADER)}')
		for row_number, row in enumerate(reader, start=1):
			if not row or all(not cell.strip() for cell in row):
				continue
			record = _parse_row(row, row_number)
			if record.volume_id in seen:
				raise DataError(f'duplicate volume_id {record.volume_id!r} at row {row_number}')
			seen.add(record.volume_id)
			records.append(record)
	return records


def _parse_row(row, row_number):
	if len(row) != len(MANIFEST_HEADER):
		raise DataError(f'row {row_number}: expected {len(MANIFEST_HEADER)} fields, found {len(row)}')
	fields = dict(zip(MANIFEST_HEADER, (cell.strip() for cell in row)))
	try:
		label = int(fields['label'])
		depth, height, width = int(fields['depth']), int(fields['height']), int(fields['width'])
		signal = int(fields['signal_strength']) if fields['signal_strength'] else None
	except ValueError as e:
		raise DataError(f'row {row_number}: {e}') from e
	if label not in (0, 1):
		raise DataError(f'row {row_number}: label must be 0 or 1, found {label}')
	if min(depth, height, width) < 1:
		raise DataError(f'row {row_number}: depth, height and width must be positive')
	if not fields['volume_id'] or not fields['subject_id']:
		raise DataError(f'row {row_number}: volume_id and subject_id are required')
	laterality = fields['laterality'] or 'unknown'
	if laterality not in LATERALITIES:
		raise DataError(f'row {row_number}: laterality must be one of {LATERALITIES}')
	return VolumeRecord(volume_id=fields['volume_id'], subject_id=fields['subject_id'], label=label,
		laterality=laterality, signal_strength=signal, relative_path=fields['relative_path'],
		depth=depth, height=height, width=width)


def write_manifest(path, records):
	with open(path, 'w', newline='', encoding='utf-8') as f:
		writer = csv.writer(f)
		writer.writerow(MANIFEST_HEADER)
		for r in records:
			writer.writerow([r.volume_id, r.subject_id, r.label, r.laterality,
				'' if r.signal_strength is None else r.signal_strength, r.relative_path, r.depth, r.height, r.width])


def load_voxels(record, data_dir):
	'''Populates record.voxels from the raw little-endian uint8 file (slice-major).
	'''
	if record.loaded:
		return record
	path = os.path.join(data_dir, record.relative_path)
	try:
		raw = np.fromfile(path, dtype=np.uint8)
	except OSError as e:
		raise DataError(f'{record.volume_id}: cannot read {path}: {e}') from e
	expected = record.depth * record.height * record.width
	if raw.size != expected:
		raise DataError(f'{record.volume_id}: shape mismatch, declared {record.depth}x{record.height}x{record.width} '
			f'({expected} bytes) but {path} holds {raw.size} bytes')
	return replace(record, voxels=raw.reshape(record.shape))


def save_voxels(record, data_dir):
	path = os.path.join(data_dir, record.relative_path)
	os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
	np.ascontiguousarray(record.voxels, dtype=np.uint8).tofile(path)


def resize_bilinear(image, shape):
	'''Bilinear resize of a 2D grid with corner-aligned sampling: output pixel j maps to input
	coordinate j * (n_in - 1) / (n_out - 1), so the four corners are preserved exactly.
	'''
	image = np.asarray(image, dtype=np.float64)
	if image.shape == tuple(shape):
		return image.copy()
	factors = [o / i for o, i in zip(shape, image.shape)]
	out = ndimage.zoom(image, factors, order=1, mode='nearest', grid_mode=False)
	if out.shape != tuple(shape):
		raise ValueError(f'resize produced {out.shape}, expected {tuple(shape)}')
	return out


def preprocess(volume, target=(128, 128), mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)):
	'''Resize every slice to `target` and normalize it per channel.

	Intensities are mapped to [0, 1], each slice is resized on its own, then replicated on
	len(mean) channels and normalized as (x - mean) / std. Slice order is preserved.
	'''
	if not volume.loaded:
		raise DataError(f'{volume.volume_id}: voxels are not loaded')
	if len(mean) != len(std):
		raise ValueError('mean and std must have one entry per channel')
	if any(s == 0 for s in std):
		raise ValueError('std components must be nonzero')
	voxels = volume.voxels
	if voxels.ndim != 3 or voxels.size == 0:
		raise DataError(f'{volume.volume_id}: empty volume')

	scaled = voxels.astype(np.float64) / 255.
	resized = np.stack([resize_bilinear(s, target) for s in scaled])
	mean = np.asarray(mean, dtype=np.float64)
	std = np.asarray(std, dtype=np.float64)
	slices = (resized[..., None] - mean) / std
	return PreprocessedVolume(volume_id=volume.volume_id, slices=slices.astype(np.float32),
		channel_stats_applied=(tuple(mean.tolist()), tuple(std.tolist())))
