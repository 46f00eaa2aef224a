'''The sequence head: two bidirectional recurrent layers, dropout, max pooling over slices and a sigmoid unit.'''
import json
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy.special import expit

from volseq.errors import DataError
from volseq.models import modules

_MAGIC = b'VSQH'
_VERSION = 1


@dataclass
class HeadParams:
	layer1: modules.BiLayerParams
	layer2: modules.BiLayerParams
	dropout_rate: float
	W_prime: np.ndarray #(1, 2 * layer2.hidden)
	b_prime: np.ndarray #(1,)
	cell: str = 'gru'

	def __post_init__(self):
		if self.layer2.input_dim != 2 * self.layer1.hidden:
			raise ValueError(f'layer2 input dim {self.layer2.input_dim} must equal 2 * layer1 hidden ({2 * self.layer1.hidden})')
		if self.W_prime.shape != (1, 2 * self.layer2.hidden):
			raise ValueError(f'W_prime must be (1, {2 * self.layer2.hidden}), found {self.W_prime.shape}')
		if self.b_prime.shape != (1,):
			raise ValueError(f'b_prime must be (1,), found {self.b_prime.shape}')
		if not 0. <= self.dropout_rate < 1.:
			raise ValueError(f'dropout_rate must be in [0, 1), found {self.dropout_rate}')

	@property
	def input_dim(self):
		return self.layer1.input_dim

	@property
	def hidden_sizes(self):
		return (self.layer1.hidden, self.layer2.hidden)

	@property
	def pooled_dim(self):
		return 2 * self.layer2.hidden


@dataclass
class ForwardTrace:
	'''Everything head_backward needs. Arrays are batched along the first axis.'''
	X: np.ndarray
	out1: np.ndarray
	cache1: tuple
	H_G: np.ndarray
	cache2: tuple
	mask: Optional[np.ndarray] #already scaled by 1 / (1 - rate); None in eval mode
	dropped: np.ndarray
	pooled: np.ndarray
	argmax: np.ndarray
	logit: np.ndarray
	p: np.ndarray
	signature: tuple


def _signature(params):
	return (params.cell, params.input_dim, params.hidden_sizes)


def named_arrays(params):
	'''Stable (name, array) listing of every learnable array, the order optimizer state follows.'''
	out = []
	for layer_name in ('layer1', 'layer2'):
		layer = getattr(params, layer_name)
		for direction in ('forward', 'backward'):
			for name, value in modules.arrays(getattr(layer, direction)):
				out.append((f'{layer_name}.{direction}.{name}', value))
	out.append(('W_prime', params.W_prime))
	out.append(('b_prime', params.b_prime))
	return out


def map_params(fn, params):
	'''New HeadParams with fn applied to every learnable array.'''
	def layer(l):
		return modules.BiLayerParams(modules.map_arrays(fn, l.forward), modules.map_arrays(fn, l.backward))
	return HeadParams(layer(params.layer1), layer(params.layer2), params.dropout_rate, fn(params.W_prime),
		fn(params.b_prime), params.cell)


def init_head(input_dim, hidden=(256, 128), cell='gru', dropout_rate=0.3, seed=0):
	'''Seeded uniform initialization in [-1/sqrt(hidden), 1/sqrt(hidden)] per matrix.'''
	if cell not in modules.DIRECTION_TYPES:
		raise ValueError(f'unknown cell {cell!r}')
	h1, h2 = hidden
	rng = np.random.default_rng(seed)
	layer1 = modules.BiLayerParams(modules.init_direction(cell, input_dim, h1, rng),
		modules.init_direction(cell, input_dim, h1, rng))
	layer2 = modules.BiLayerParams(modules.init_direction(cell, 2 * h1, h2, rng),
		modules.init_direction(cell, 2 * h1, h2, rng))
	bound = 1. / np.sqrt(2 * h2)
	W_prime = rng.uniform(-bound, bound, size=(1, 2 * h2))
	return HeadParams(layer1, layer2, dropout_rate, W_prime, np.zeros(1), cell)


def dropout_mask(shape, rate, rng):
	'''Inverted dropout mask: kept units carry 1 / (1 - rate), dropped units 0.'''
	if rate == 0.:
		return np.ones(shape)
	return (rng.random(shape) >= rate) / (1. - rate)


def head_forward_batch(X, params, train=False, rng=None, mask=None):
	"""
	Forward pass over a (B, D, E) batch of equally long feature sequences

	In train mode the inverted dropout mask is `mask` when given, else drawn from `rng`.
	Returns (p of shape (B,), ForwardTrace).
	"""
	X = np.asarray(X, dtype=np.float64)
	if X.ndim != 3 or X.shape[2] != params.input_dim:
		raise ValueError(f'expected (B, D, {params.input_dim}) features, found shape {X.shape}')
	out1, cache1 = modules.bidirectional(X, params.layer1)
	H_G, cache2 = modules.bidirectional(out1, params.layer2)
	if train:
		if mask is None:
			if rng is None:
				raise ValueError('train mode needs an rng or a fixed dropout mask')
			mask = dropout_mask(H_G.shape, params.dropout_rate, rng)
		elif mask.shape != H_G.shape:
			raise ValueError(f'dropout mask has shape {mask.shape}, expected {H_G.shape}')
		dropped = H_G * mask
	else:
		mask = None
		dropped = H_G
	pooled, argmax = modules.adaptive_max_pool(dropped)
	logit = pooled @ params.W_prime[0] + params.b_prime[0]
	p = expit(logit)
	return p, ForwardTrace(X, out1, cache1, H_G, cache2, mask, dropped, pooled, argmax, logit, p, _signature(params))


def head_forward(seq, params, mode='eval', seed=None, mask=None):
	'''Single sequence forward pass. `seq` is a FeatureSequence or a (D, E) array. Returns (p, trace).'''
	features = getattr(seq, 'features', seq)
	features = np.asarray(features, dtype=np.float64)
	if features.ndim != 2:
		raise ValueError(f'expected a (D, E) feature matrix, found shape {features.shape}')
	if mode not in ('train', 'eval'):
		raise ValueError(f'mode must be train or eval, found {mode!r}')
	batch_mask = None if mask is None else np.asarray(mask, dtype=np.float64)[None]
	rng = np.random.default_rng(seed) if seed is not None else None
	p, trace = head_forward_batch(features[None], params, train=mode == 'train', rng=rng, mask=batch_mask)
	return float(p[0]), trace


def head_backward(trace, dL_dp, params):
	"""
	Exact gradients of a loss L(p) given dL/dp per batch item

	Returns (HeadParams of gradients, dL/dX with the shape of trace.X).
	"""
	if trace.signature != _signature(params):
		raise ValueError(f'trace/params mismatch: trace built for {trace.signature}, params are {_signature(params)}')
	B = trace.X.shape[0]
	dL_dp = np.broadcast_to(np.asarray(dL_dp, dtype=np.float64), (B,))

	dlogit = dL_dp * trace.p * (1. - trace.p)
	dW_prime = (dlogit @ trace.pooled)[None, :]
	db_prime = np.array([dlogit.sum()])
	dpooled = dlogit[:, None] * params.W_prime[0][None, :]

	#Max pooling routes the gradient to the recorded argmax rows only
	ddropped = np.zeros_like(trace.dropped)
	np.put_along_axis(ddropped, trace.argmax[:, None, :], dpooled[:, None, :], axis=1)
	dH_G = ddropped if trace.mask is None else ddropped * trace.mask

	g2, dout1 = modules.bidirectional_backward(dH_G, trace.cache2, params.layer2)
	g1, dX = modules.bidirectional_backward(dout1, trace.cache1, params.layer1)
	grads = HeadParams(g1, g2, params.dropout_rate, dW_prime, db_prime, params.cell)
	return grads, dX


def save_head(path, params):
	'''Checkpoint: magic, version, JSON manifest of names and shapes, then float64 little-endian arrays.'''
	named = named_arrays(params)
	manifest = json.dumps({
		'cell': params.cell,
		'dropout_rate': params.dropout_rate,
		'arrays': [[name, list(value.shape)] for name, value in named],
	}, sort_keys=True).encode('utf-8')
	with open(path, 'wb') as f:
		f.write(_MAGIC + struct.pack('<HI', _VERSION, len(manifest)) + manifest)
		for _, value in named:
			f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())


def load_head(path):
	try:
		with open(path, 'rb') as f:
			data = f.read()
	except OSError as e:
		raise DataError(f'cannot read checkpoint {path}: {e}') from e
	if len(data) < 10 or data[:4] != _MAGIC:
		raise DataError(f'{path} is not a head checkpoint')
	version, n = struct.unpack_from('<HI', data, 4)
	if version != _VERSION:
		raise DataError(f'{path}: unsupported checkpoint version {version}')
	try:
		manifest = json.loads(data[10:10 + n].decode('utf-8'))
		arrays = [(str(name), tuple(int(d) for d in shape)) for name, shape in manifest['arrays']]
		cell, dropout_rate = manifest['cell'], float(manifest['dropout_rate'])
	except (UnicodeDecodeError, KeyError, TypeError, ValueError) as e:
		raise DataError(f'{path}: unreadable checkpoint manifest ({e})') from e
	offset = 10 + n
	values = {}
	for name, shape in arrays:
		if any(d < 0 for d in shape):
			raise DataError(f'{path}: negative dimension in {name} {shape}')
		size = int(np.prod(shape)) * 8
		if offset + size > len(data):
			raise DataError(f'{path}: checkpoint is truncated at {name}')
		values[name] = np.frombuffer(data[offset:offset + size], dtype='<f8').reshape(shape).copy()
		offset += size
	if offset != len(data):
		raise DataError(f'{path}: {len(data) - offset} trailing bytes after the last array')

	cls = modules.DIRECTION_TYPES.get(cell) if isinstance(cell, str) else None
	if cls is None:
		raise DataError(f'{path}: unknown cell {cell!r}')
	try:
		def direction(prefix):
			return cls(**{f.name: values[f'{prefix}.{f.name}'] for f in fields(cls)})
		layers = [modules.BiLayerParams(direction(f'{l}.forward'), direction(f'{l}.backward')) for l in ('layer1', 'layer2')]
		for layer in layers:
			modules.check_direction(layer.forward)
			modules.check_direction(layer.backward)
		return HeadParams(layers[0], layers[1], dropout_rate, values['W_prime'], values['b_prime'], cell)
	except (KeyError, ValueError) as e:
		raise DataError(f'{path}: inconsistent checkpoint ({e})') from e
