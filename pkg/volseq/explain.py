'''Attention rollout heatmaps and embedding export for external t-SNE.'''
import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from datasets.volume import resize_bilinear
from volseq.errors import DataError
from volseq.train import pooled_features
from volseq.utils import plot

SOURCES = ('slice_features', 'head_pooled')
_STOCHASTIC_ATOL = 1e-6


@dataclass
class RolloutMap:
	volume_id: str
	slice_index: int
	rollout: np.ndarray #(T, T), row-stochastic
	heatmap: np.ndarray #(g, g) in [0, 1]
	cumulative: list #running product after each layer, cumulative[-1] is rollout


@dataclass
class EmbeddingExport:
	ids: list
	rows: np.ndarray
	labels: np.ndarray
	source: str
	metadata: dict


def _check_stochastic(matrix, what):
	if np.any(matrix < -_STOCHASTIC_ATOL) or not np.allclose(matrix.sum(axis=-1), 1., rtol=0., atol=_STOCHASTIC_ATOL):
		raise ValueError(f'{what} is not row-stochastic')


def attention_rollout(stack, residual=0.5):
	"""
	Cumulative attention over all layers

	Each layer is mixed with the identity (residual * A + (1 - residual) * I), row-normalized and
	multiplied onto the running product from the left. The heatmap is the class-token row over the
	patch tokens, reshaped to the patch grid and min-max normalized (all zeros when constant).
	"""
	layers = np.asarray(stack.layers, dtype=np.float64)
	if layers.ndim != 3 or layers.shape[1] != layers.shape[2]:
		raise ValueError(f'expected (L, T, T) attention, found shape {layers.shape}')
	T = layers.shape[1]
	grid = math.isqrt(T - 1) if T > 1 else 0
	if grid < 1 or grid * grid != T - 1:
		raise ValueError(f'{T} tokens is not one class token plus a square patch grid')

	identity = np.eye(T)
	rollout = identity
	cumulative = []
	for l, A in enumerate(layers):
		_check_stochastic(A, f'attention layer {l}')
		mixed = residual * A + (1. - residual) * identity
		mixed = mixed / mixed.sum(axis=-1, keepdims=True)
		rollout = mixed @ rollout
		_check_stochastic(rollout, f'rollout after layer {l}')
		cumulative.append(rollout)

	relevance = rollout[0, 1:].reshape(grid, grid)
	span = relevance.max() - relevance.min()
	heatmap = (relevance - relevance.min()) / span if span > 0 else np.zeros_like(relevance)
	return RolloutMap(volume_id=stack.volume_id, slice_index=stack.slice_index, rollout=rollout, heatmap=heatmap,
		cumulative=cumulative)


def upsample_heatmap(heatmap, shape):
	return np.clip(resize_bilinear(heatmap, shape), 0., 1.)


def render_heatmap(rollout_map, image, path, alpha=0.5):
	'''Writes the heatmap, upsampled to the slice, over the gray slice as a PNG. Returns the composite.'''
	image = np.asarray(image, dtype=np.float64)
	if image.ndim == 3:
		image = image[..., 0]
	heat = upsample_heatmap(rollout_map.heatmap, image.shape)
	return plot.overlay_heatmap(image, heat, path, alpha=alpha)


def slice_feature_rows(features, slice_index):
	'''Row slice_index (1-based) of every FeatureSequence.'''
	rows = []
	for seq in features:
		if not 1 <= slice_index <= seq.depth:
			raise DataError(f'{seq.volume_id}: slice {slice_index} is unavailable (depth {seq.depth})')
		rows.append(np.asarray(seq.features[slice_index - 1], dtype=np.float64))
	return np.stack(rows)


def head_pooled_rows(params, features):
	return pooled_features(params, features)


def export_embeddings(path, ids, rows, labels, source, fingerprint=''):
	"""
	CSV with header id,label,f0..f{d-1} (17 significant digits) and a `<path>.meta.json` sidecar

	Returns the EmbeddingExport that was written.
	"""
	if source not in SOURCES:
		raise ValueError(f'unknown embedding source {source!r}, expected one of {SOURCES}')
	rows = np.asarray(rows, dtype=np.float64)
	labels = np.asarray(labels, dtype=np.int64)
	if rows.ndim != 2 or len(rows) != len(labels) or len(rows) != len(ids):
		raise ValueError('ids, rows and labels must have one entry per exported volume')
	with open(path, 'w', newline='', encoding='utf-8') as f:
		writer = csv.writer(f)
		writer.writerow(['id', 'label'] + [f'f{j}' for j in range(rows.shape[1])])
		for volume_id, label, row in zip(ids, labels, rows):
			writer.writerow([volume_id, int(label)] + ['%.17g' % v for v in row])
	metadata = {'source': source, 'fingerprint': fingerprint, 'rows': int(rows.shape[0]), 'dim': int(rows.shape[1])}
	with open(path + '.meta.json', 'w', encoding='utf-8') as f:
		json.dump(metadata, f, indent=2, sort_keys=True)
	return EmbeddingExport(ids=list(ids), rows=rows, labels=labels, source=source, metadata=metadata)


def load_embeddings(path):
	with open(path, newline='', encoding='utf-8') as f:
		reader = csv.reader(f)
		header = next(reader, None)
		if not header or header[:2] != ['id', 'label']:
			raise DataError(f'{path}: not an embedding export')
		ids, labels, rows = [], [], []
		for row in reader:
			ids.append(row[0])
			labels.append(int(row[1]))
			rows.append([float(v) for v in row[2:]])
	try:
		with open(path + '.meta.json', encoding='utf-8') as f:
			metadata = json.load(f)
	except FileNotFoundError:
		metadata = {}
	rows = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 2)
	return EmbeddingExport(ids=ids, rows=rows, labels=np.array(labels, dtype=np.int64),
		source=metadata.get('source', ''), metadata=metadata)
