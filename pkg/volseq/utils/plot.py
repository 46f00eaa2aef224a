import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

import numpy as np


def split_title_line(title_text, max_words=5):
	"""
	A function that splits any string based on specific character
	(returning it with the string), with maximum number of words on it
	"""
	seq = title_text.split()
	return '\n'.join([' '.join(seq[i:i + max_words]) for i in range(0, len(seq), max_words)])


def plot_history(history, path, info=None, split_title=False):
	'''Train/validation loss per epoch with validation F1 on a twin axis, best epoch marked.'''
	epochs = np.arange(len(history.train_loss))
	fig = plt.figure(figsize=(8, 5))
	ax = fig.add_subplot(111)
	ax.plot(epochs, history.train_loss, label='train loss')
	ax.plot(epochs, history.val_loss, label='validation loss')
	if history.best_epoch is not None:
		ax.axvline(history.best_epoch, color='gray', linestyle='--', linewidth=1)
	ax.set_xlabel('Epoch')
	ax.set_ylabel('Focal loss')
	ax.legend(loc='upper left')

	ax2 = ax.twinx()
	ax2.plot(epochs, history.val_f1, color='tab:green', label='validation F1')
	ax2.set_ylim(0., 1.)
	ax2.set_ylabel('F1')
	ax2.legend(loc='upper right')

	if info is not None:
		plt.title(split_title_line(info) if split_title else info)
	plt.tight_layout()
	plt.savefig(path, format='png')
	plt.close()


def plot_rollout(rollout, path, info=None):
	'''Rollout matrix as an image, rows are query tokens.'''
	fig = plt.figure(figsize=(6, 5))
	ax = fig.add_subplot(111)
	im = ax.imshow(rollout, aspect='auto', origin='upper', interpolation='none')
	fig.colorbar(im, ax=ax)
	plt.xlabel('Key token')
	plt.ylabel('Query token')
	if info is not None:
		plt.title(info)
	plt.tight_layout()
	plt.savefig(path, format='png')
	plt.close()


def overlay_heatmap(image, heatmap, path, alpha=0.5, cmap='jet'):
	'''Writes a gray slice with a color-mapped [0, 1] heatmap of the same shape blended on top, returns the RGB array.'''
	image = np.asarray(image, dtype=np.float64)
	span = image.max() - image.min()
	gray = (image - image.min()) / span if span > 0 else np.zeros_like(image)
	colored = matplotlib.colormaps[cmap](np.clip(heatmap, 0., 1.))[..., :3]
	composite = np.clip((1. - alpha) * gray[..., None] + alpha * colored, 0., 1.)
	plt.imsave(path, composite, format='png', metadata={'Software': None})
	return composite
