import hashlib
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from datasets.volume import resize_bilinear
from volseq.errors import DataError, ExternalDependencyUnavailable

KINDS = ('vit_large_retfound', 'resnet34_imagenet', 'stub')
_POOL_GRID = 8


@dataclass(frozen=True)
class ExtractorSpec:
	kind: str = 'stub'
	embedding_dim: int = 64
	input_size: tuple = (128, 128)
	seed: int = 7
	emits_attention: bool = False
	pooling: str = 'cls' #'cls' or 'mean', backbones only
	weights: Optional[str] = None
	attention_layers: int = 4 #stub only

	def __post_init__(self):
		if self.kind not in KINDS:
			raise ValueError(f'unknown extractor kind {self.kind!r}, expected one of {KINDS}')
		if self.embedding_dim <= 0:
			raise ValueError('embedding_dim must be positive')
		if self.kind == 'stub' and self.embedding_dim < 8:
			raise ValueError('the stub extractor needs embedding_dim >= 8')
		if self.pooling not in ('cls', 'mean'):
			raise ValueError(f'pooling must be cls or mean, found {self.pooling!r}')


@dataclass
class FeatureSequence:
	'''Row i holds the feature vector of slice i.'''
	volume_id: str
	features: np.ndarray

	@property
	def depth(self):
		return self.features.shape[0]

	@property
	def embedding_dim(self):
		return self.features.shape[1]


@dataclass
class AttentionStack:
	'''Head-averaged attention of one slice: `layers` is (L, T, T), every row a probability vector.'''
	volume_id: str
	slice_index: int
	layers: np.ndarray


def preprocessing_hash(target, mean, std):
	text = f'{tuple(target)}|{tuple(float(m) for m in mean)}|{tuple(float(s) for s in std)}'
	return hashlib.sha1(text.encode('utf-8')).hexdigest()[:8]


def fingerprint(spec, prep_hash):
	'''`kind:dim:inputsize:seed:prep-hash`, the cache key of everything this extractor produces.'''
	h, w = spec.input_size
	kind = spec.kind if spec.pooling == 'cls' or spec.kind == 'stub' else f'{spec.kind}-{spec.pooling}'
	return f'{kind}:{spec.embedding_dim}:{h}x{w}:{spec.seed}:{prep_hash}'


def pool_slice(image, grid=_POOL_GRID):
	'''Average-pools a (..., H, W) grid to (..., grid*grid), H and W must be multiples of grid.'''
	*lead, h, w = image.shape
	if h % grid or w % grid:
		raise ValueError(f'slice {h}x{w} is not divisible into a {grid}x{grid} grid')
	blocks = image.reshape(*lead, grid, h // grid, grid, w // grid)
	return blocks.mean(axis=(-3, -1)).reshape(*lead, grid * grid)


class StubExtractor:
	'''Deterministic stand-in for a pretrained encoder.

	feature = tanh(P . pool(slice) + b) on the first E - 2 coordinates, then the slice mean and
	the slice standard deviation. P ((E-2) x 64) and b (E-2) are uniform in [-1, 1] and fully
	determined by (seed, E). The mean/std coordinates make class-separable synthetic data
	linearly separable.
	'''
	def __init__(self, spec, bias=None):
		self.spec = spec
		E = spec.embedding_dim
		rng = np.random.default_rng(spec.seed)
		self.P = rng.uniform(-1., 1., size=(E - 2, _POOL_GRID * _POOL_GRID))
		self.b = rng.uniform(-1., 1., size=E - 2)
		if bias is not None:
			self.b = np.broadcast_to(np.asarray(bias, dtype=np.float64), (E - 2,)).copy()
		self._attention_scales = rng.uniform(0.5, 2., size=spec.attention_layers)

	def extract_slices(self, images):
		'''(N, H, W) single-channel slices -> (N, E) float32. Row n only depends on slice n.'''
		images = np.asarray(images, dtype=np.float64)
		pooled = pool_slice(images)
		projected = (pooled[:, None, :] * self.P[None, :, :]).sum(axis=-1) + self.b
		stats = np.stack([images.mean(axis=(1, 2)), images.std(axis=(1, 2))], axis=1)
		return np.concatenate([np.tanh(projected), stats], axis=1).astype(np.float32)

	def attention(self, image):
		'''Synthetic (L, T, T) row-stochastic attention over 1 + 8*8 tokens of one slice.'''
		pooled = pool_slice(np.asarray(image, dtype=np.float64))
		tokens = np.concatenate([[pooled.mean()], pooled])
		similarity = tokens[:, None] * tokens[None, :]
		return np.stack([softmax(scale * similarity, axis=-1) for scale in self._attention_scales])


class BackboneExtractor:
	'''Adapter around an externally supplied, frozen encoder executed by tensorflow.

	The encoder is a Keras model (or SavedModel) taking (N, h, w, 3) images. ViT encoders return
	either token embeddings (N, T, E) or [tokens, attention_1, ..., attention_L] with attention
	shaped (N, heads, T, T); ResNet encoders return pooled (N, E) features.
	'''
	def __init__(self, spec):
		self.spec = spec
		if not spec.weights or not os.path.exists(spec.weights):
			raise ExternalDependencyUnavailable(
				f'external dependency unavailable: weights for {spec.kind} not found ({spec.weights!r})')
		try:
			import tensorflow as tf
		except ImportError as e:
			raise ExternalDependencyUnavailable(f'external dependency unavailable: tensorflow ({e})') from e
		self._tf = tf
		try:
			self._model = tf.keras.models.load_model(spec.weights, compile=False)
		except (OSError, ValueError) as e:
			raise ExternalDependencyUnavailable(
				f'external dependency unavailable: cannot load {spec.weights}: {e}') from e

	def _resize(self, images):
		h, w = self.spec.input_size
		return np.stack([np.stack([resize_bilinear(img[..., c], (h, w)) for c in range(img.shape[-1])], axis=-1)
			for img in images]).astype(np.float32)

	def backbone_extract(self, images):
		'''(N, H, W, 3) -> ((N, E) features, (N, L, T, T) head-averaged attention or None).'''
		outputs = self._model(self._resize(images), training=False)
		if not isinstance(outputs, (list, tuple)):
			outputs = [outputs]
		outputs = [np.asarray(o) for o in outputs]
		tokens, attention = outputs[0], outputs[1:]
		if tokens.ndim == 3:
			tokens = tokens[:, 0, :] if self.spec.pooling == 'cls' else tokens[:, 1:, :].mean(axis=1)
		if tokens.shape[-1] != self.spec.embedding_dim:
			raise DataError(f'{self.spec.kind}: encoder returned {tokens.shape[-1]}-d features, '
				f'declared {self.spec.embedding_dim}')
		stack = None
		if self.spec.emits_attention:
			if not attention:
				raise DataError(f'{self.spec.kind}: encoder does not expose attention maps')
			stack = np.stack([a.mean(axis=1) for a in attention], axis=1).astype(np.float64)
		return tokens.astype(np.float32), stack


def create_extractor(spec):
	if spec.kind == 'stub':
		return StubExtractor(spec)
	return BackboneExtractor(spec)


def stub_extract(seed, E, image, bias=None):
	'''Single-slice convenience over StubExtractor.'''
	extractor = StubExtractor(ExtractorSpec(kind='stub', embedding_dim=E, seed=seed), bias=bias)
	return extractor.extract_slices(np.asarray(image)[None])[0]


def extract_features(extractor, volume, batch_size=16):
	'''Runs the extractor over every slice of a PreprocessedVolume.

	Returns (FeatureSequence, list of AttentionStack or None).
	'''
	slices = volume.slices
	if slices.ndim != 4:
		raise DataError(f'{volume.volume_id}: expected (D, H, W, C) slices, found shape {slices.shape}')
	emits = extractor.spec.emits_attention
	if isinstance(extractor, StubExtractor):
		features = extractor.extract_slices(slices[..., 0])
		attention = [extractor.attention(s[..., 0]) for s in slices] if emits else None
	else:
		if slices.shape[-1] != 3:
			raise DataError(f'{volume.volume_id}: backbones take 3-channel slices, found {slices.shape[-1]}')
		chunks, attention = [], [] if emits else None
		for start in range(0, len(slices), batch_size):
			feats, stack = extractor.backbone_extract(slices[start:start + batch_size])
			chunks.append(feats)
			if emits:
				attention.extend(stack)
		features = np.concatenate(chunks)
	if not np.all(np.isfinite(features)):
		raise DataError(f'{volume.volume_id}: extractor produced non-finite features')
	stacks = None
	if attention is not None:
		stacks = [AttentionStack(volume.volume_id, i + 1, np.asarray(a)) for i, a in enumerate(attention)]
	return FeatureSequence(volume.volume_id, features), stacks
