'''Class-separable synthetic volumes for desk-scale runs.

Normal volumes have a mean intensity of mu_neg, glaucoma volumes a mean of mu_pos with a contiguous
band of slices darkened by band_drop. Every volume belongs to its own subject.
'''
import os

import numpy as np

from datasets.volume import VolumeRecord, save_voxels, write_manifest


def make_synthetic_dataset(n_pos, n_neg, D, seed, height=64, width=128, mu_neg=0.3, mu_pos=0.6,
		noise=0.05, band_drop=0.15):
	if n_pos < 1 or n_neg < 1:
		raise ValueError('make_synthetic_dataset needs at least one volume per class')
	if D < 1 or height < 1 or width < 1:
		raise ValueError('volume dimensions must be positive')
	if mu_pos == mu_neg:
		raise ValueError('class means must differ')

	records = []
	labels = [1] * n_pos + [0] * n_neg
	for index, label in enumerate(labels):
		rng = np.random.default_rng([seed, index])
		mu = mu_pos if label == 1 else mu_neg
		intensity = mu + noise * rng.standard_normal((D, height, width))
		if label == 1:
			length = max(1, D // 4)
			start = int(rng.integers(0, D - length + 1))
			intensity[start:start + length] -= band_drop
		voxels = np.clip(np.rint(intensity * 255.), 0, 255).astype(np.uint8)
		volume_id = f'V{index:04d}'
		records.append(VolumeRecord(volume_id=volume_id, subject_id=f'S{index:04d}', label=label,
			laterality='unknown', relative_path=f'volumes/{volume_id}.raw', depth=D, height=height, width=width,
			voxels=voxels))
	return records


def write_dataset(records, data_dir, manifest_path=None):
	'''Writes the raw voxel files and the manifest (data_dir/manifest.csv by default), returns the manifest path.'''
	os.makedirs(data_dir, exist_ok=True)
	for record in records:
		save_voxels(record, data_dir)
	path = manifest_path or os.path.join(data_dir, 'manifest.csv')
	os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
	write_manifest(path, records)
	return path


def synthetic_from_hparams(hparams):
	return make_synthetic_dataset(hparams.synth_n_pos, hparams.synth_n_neg, hparams.synth_depth, hparams.seed,
		height=hparams.synth_height, width=hparams.synth_width, mu_neg=hparams.synth_mu_neg,
		mu_pos=hparams.synth_mu_pos, noise=hparams.synth_noise, band_drop=hparams.synth_band_drop)
