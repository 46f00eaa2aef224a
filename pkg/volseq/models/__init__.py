from .head import HeadParams, head_backward, head_forward, head_forward_batch, init_head, load_head, save_head


def create_model(name, input_dim, hparams, seed=None):
	'''Fresh head parameters for `name` ('gru' or 'lstm') sized by hparams.'''
	if name not in ('gru', 'lstm'):
		raise ValueError('Unknown model: ' + name)
	return init_head(input_dim, hidden=tuple(hparams.gru_sizes), cell=name, dropout_rate=hparams.dropout_rate,
		seed=hparams.seed if seed is None else seed)
