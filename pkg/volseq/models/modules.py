'''Recurrent building blocks of the sequence head, with analytic backward passes.

Everything is batched: sequences are (B, D, I) float64 arrays, states are (B, H).
Gate conventions:

	GRU   z = s(W_z x + U_z h + b_z), r = s(W_r x + U_r h + b_r),
	      c = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * c
	LSTM  i, f, o = s(W x + U h + b), g = tanh(W_g x + U_g h + b_g),
	      c' = f * c + i * g, h' = o * tanh(c')
'''
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit


@dataclass
class GruDirectionParams:
	W_z: np.ndarray
	W_r: np.ndarray
	W_h: np.ndarray
	U_z: np.ndarray
	U_r: np.ndarray
	U_h: np.ndarray
	b_z: np.ndarray
	b_r: np.ndarray
	b_h: np.ndarray

	gates = ('z', 'r', 'h')

	@property
	def hidden(self):
		return self.U_z.shape[0]

	@property
	def input_dim(self):
		return self.W_z.shape[1]


@dataclass
class LstmDirectionParams:
	W_i: np.ndarray
	W_f: np.ndarray
	W_o: np.ndarray
	W_g: np.ndarray
	U_i: np.ndarray
	U_f: np.ndarray
	U_o: np.ndarray
	U_g: np.ndarray
	b_i: np.ndarray
	b_f: np.ndarray
	b_o: np.ndarray
	b_g: np.ndarray

	gates = ('i', 'f', 'o', 'g')

	@property
	def hidden(self):
		return self.U_i.shape[0]

	@property
	def input_dim(self):
		return self.W_i.shape[1]


@dataclass
class BiLayerParams:
	forward: object
	backward: object

	def __post_init__(self):
		if self.forward.hidden != self.backward.hidden:
			raise ValueError('both directions of a bidirectional layer must share the hidden size')

	@property
	def hidden(self):
		return self.forward.hidden

	@property
	def input_dim(self):
		return self.forward.input_dim


DIRECTION_TYPES = {'gru': GruDirectionParams, 'lstm': LstmDirectionParams}


def arrays(params):
	'''Field-ordered (name, array) pairs of a direction's parameters.'''
	return [(f.name, getattr(params, f.name)) for f in fields(params)]


def map_arrays(fn, params):
	return type(params)(**{name: fn(value) for name, value in arrays(params)})


def check_direction(params):
	H, I = params.hidden, params.input_dim
	for name, value in arrays(params):
		expected = {'W': (H, I), 'U': (H, H), 'b': (H,)}[name[0]]
		if value.shape != expected:
			raise ValueError(f'{name} has shape {value.shape}, expected {expected}')


def init_direction(cell, input_dim, hidden, rng):
	'''Uniform in [-1/sqrt(hidden), 1/sqrt(hidden)] for every matrix and bias.'''
	cls = DIRECTION_TYPES[cell]
	bound = 1. / np.sqrt(hidden)
	shapes = {'W': (hidden, input_dim), 'U': (hidden, hidden), 'b': (hidden,)}
	return cls(**{f.name: rng.uniform(-bound, bound, size=shapes[f.name[0]]) for f in fields(cls)})


def zeros_direction(cell, input_dim, hidden):
	cls = DIRECTION_TYPES[cell]
	shapes = {'W': (hidden, input_dim), 'U': (hidden, hidden), 'b': (hidden,)}
	return cls(**{f.name: np.zeros(shapes[f.name[0]]) for f in fields(cls)})


def _gru_step(proj, state, p):
	(h_prev,) = state
	z = expit(proj['z'] + h_prev @ p.U_z.T)
	r = expit(proj['r'] + h_prev @ p.U_r.T)
	rh = r * h_prev
	c = np.tanh(proj['h'] + rh @ p.U_h.T)
	h = (1. - z) * h_prev + z * c
	return (h,), (h_prev, z, r, rh, c)


def _gru_step_backward(dstate, cache, p, grads):
	(dh,) = dstate
	h_prev, z, r, rh, c = cache
	dz = dh * (c - h_prev)
	dc = dh * z
	dh_prev = dh * (1. - z)

	da_h = dc * (1. - c * c)
	grads.U_h += da_h.T @ rh
	drh = da_h @ p.U_h
	dr = drh * h_prev
	dh_prev += drh * r

	da_z = dz * z * (1. - z)
	grads.U_z += da_z.T @ h_prev
	dh_prev += da_z @ p.U_z

	da_r = dr * r * (1. - r)
	grads.U_r += da_r.T @ h_prev
	dh_prev += da_r @ p.U_r
	return {'z': da_z, 'r': da_r, 'h': da_h}, (dh_prev,)


def _lstm_step(proj, state, p):
	h_prev, c_prev = state
	i = expit(proj['i'] + h_prev @ p.U_i.T)
	f = expit(proj['f'] + h_prev @ p.U_f.T)
	o = expit(proj['o'] + h_prev @ p.U_o.T)
	g = np.tanh(proj['g'] + h_prev @ p.U_g.T)
	c = f * c_prev + i * g
	tc = np.tanh(c)
	h = o * tc
	return (h, c), (h_prev, c_prev, i, f, o, g, tc)


def _lstm_step_backward(dstate, cache, p, grads):
	dh, dc = dstate
	h_prev, c_prev, i, f, o, g, tc = cache
	dc = dc + dh * o * (1. - tc * tc)
	da = {
		'i': dc * g * i * (1. - i),
		'f': dc * c_prev * f * (1. - f),
		'o': dh * tc * o * (1. - o),
		'g': dc * i * (1. - g * g),
	}
	dh_prev = np.zeros_like(h_prev)
	for gate, d in da.items():
		U = getattr(p, f'U_{gate}')
		getattr(grads, f'U_{gate}')[...] += d.T @ h_prev
		dh_prev += d @ U
	return da, (dh_prev, dc * f)


_STEPS = {
	GruDirectionParams: (_gru_step, _gru_step_backward, 1),
	LstmDirectionParams: (_lstm_step, _lstm_step_backward, 2),
}


def _project(xs, p):
	'''Input projections W x + b of every gate for every timestep at once.'''
	return {gate: xs @ getattr(p, f'W_{gate}').T + getattr(p, f'b_{gate}') for gate in p.gates}


def _check_input(xs, p):
	if xs.ndim != 3:
		raise ValueError(f'expected a (B, D, I) batch of sequences, found shape {xs.shape}')
	if xs.shape[1] < 1:
		raise ValueError('sequences must hold at least one timestep')
	if xs.shape[2] != p.input_dim:
		raise ValueError(f'input width {xs.shape[2]} does not match the layer input dim {p.input_dim}')


def scan(xs, p, reverse=False):
	'''Runs one direction over (B, D, I) inputs from a zero state. Returns (B, D, H) outputs and the step caches.'''
	_check_input(xs, p)
	step, _, n_states = _STEPS[type(p)]
	B, D, _ = xs.shape
	proj = _project(xs, p)
	state = tuple(np.zeros((B, p.hidden)) for _ in range(n_states))
	hs = np.empty((B, D, p.hidden))
	caches = [None] * D
	for t in (range(D - 1, -1, -1) if reverse else range(D)):
		state, caches[t] = step({gate: v[:, t] for gate, v in proj.items()}, state, p)
		hs[:, t] = state[0]
	return hs, caches


def scan_backward(dhs, xs, caches, p, reverse=False):
	'''Backpropagation through time for one direction. Returns (gradients, d inputs).'''
	_, step_backward, n_states = _STEPS[type(p)]
	B, D, _ = xs.shape
	grads = map_arrays(np.zeros_like, p)
	dproj = {gate: np.empty((B, D, p.hidden)) for gate in p.gates}
	dstate = tuple(np.zeros((B, p.hidden)) for _ in range(n_states))
	for t in (range(D) if reverse else range(D - 1, -1, -1)):
		dstate = (dstate[0] + dhs[:, t],) + dstate[1:]
		da, dstate = step_backward(dstate, caches[t], p, grads)
		for gate, d in da.items():
			dproj[gate][:, t] = d

	dxs = np.zeros_like(xs)
	for gate, d in dproj.items():
		W = getattr(p, f'W_{gate}')
		getattr(grads, f'W_{gate}')[...] = np.einsum('bdh,bdi->hi', d, xs)
		getattr(grads, f'b_{gate}')[...] = d.sum(axis=(0, 1))
		dxs += d @ W
	return grads, dxs


def bidirectional(xs, layer):
	'''(B, D, I) -> (B, D, 2H): row i is the forward state at i concatenated with the backward state at i.'''
	fwd, fwd_cache = scan(xs, layer.forward)
	bwd, bwd_cache = scan(xs, layer.backward, reverse=True)
	return np.concatenate([fwd, bwd], axis=-1), (xs, fwd_cache, bwd_cache)


def bidirectional_backward(dout, cache, layer):
	xs, fwd_cache, bwd_cache = cache
	H = layer.hidden
	g_fwd, dx_fwd = scan_backward(dout[..., :H], xs, fwd_cache, layer.forward)
	g_bwd, dx_bwd = scan_backward(dout[..., H:], xs, bwd_cache, layer.backward, reverse=True)
	return BiLayerParams(g_fwd, g_bwd), dx_fwd + dx_bwd


def gru_cell(x, h_prev, params):
	'''One GRU step. x is (I,) or (B, I), h_prev is (H,) or (B, H).'''
	x, h_prev = np.asarray(x, dtype=np.float64), np.asarray(h_prev, dtype=np.float64)
	single = x.ndim == 1
	xb, hb = np.atleast_2d(x), np.atleast_2d(h_prev)
	if xb.shape[1] != params.input_dim or hb.shape[1] != params.hidden:
		raise ValueError('gru_cell: dimension mismatch between inputs and parameters')
	proj = {gate: v[:, 0] for gate, v in _project(xb[:, None, :], params).items()}
	(h,), _ = _gru_step(proj, (hb,), params)
	return h[0] if single else h


def lstm_cell(x, h_prev, c_prev, params):
	'''One LSTM step. Returns (h, c).'''
	x = np.asarray(x, dtype=np.float64)
	single = x.ndim == 1
	xb = np.atleast_2d(x)
	hb = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
	cb = np.atleast_2d(np.asarray(c_prev, dtype=np.float64))
	if xb.shape[1] != params.input_dim or hb.shape[1] != params.hidden or cb.shape != hb.shape:
		raise ValueError('lstm_cell: dimension mismatch between inputs and parameters')
	proj = {gate: v[:, 0] for gate, v in _project(xb[:, None, :], params).items()}
	(h, c), _ = _lstm_step(proj, (hb, cb), params)
	return (h[0], c[0]) if single else (h, c)


def bigru_layer(seq, params):
	'''(D, I) sequence -> (D, 2H) with zero initial states in both directions.'''
	seq = np.asarray(seq, dtype=np.float64)
	if seq.ndim != 2:
		raise ValueError(f'expected a (D, I) sequence, found shape {seq.shape}')
	out, _ = bidirectional(seq[None], params)
	return out[0]


def adaptive_max_pool(H_G):
	'''Max over the timestep axis of (D, C) or (B, D, C). Ties go to the smallest index.

	Returns (pooled, argmax) with 0-based argmax indices.
	'''
	H_G = np.asarray(H_G)
	if H_G.ndim < 2 or H_G.shape[-2] == 0:
		raise ValueError('adaptive_max_pool needs a non-empty sequence')
	argmax = np.argmax(H_G, axis=-2)
	pooled = np.take_along_axis(H_G, argmax[..., None, :], axis=-2)[..., 0, :]
	return pooled, argmax
