import numpy as np
import pytest
from scipy.special import softmax

from volseq.errors import DataError
from volseq.explain import (attention_rollout, export_embeddings, head_pooled_rows, load_embeddings, render_heatmap,
	slice_feature_rows, upsample_heatmap)
from volseq.extractors import AttentionStack, ExtractorSpec, StubExtractor
from volseq.models import init_head
from volseq.utils import plot


def _stack(layers):
	return AttentionStack('V0001', 3, np.asarray(layers, dtype=np.float64))


@pytest.mark.parametrize('L', [1, 4, 24])
def test_identity_attention_rolls_out_to_identity(L):
	result = attention_rollout(_stack(np.broadcast_to(np.eye(5), (L, 5, 5))))
	np.testing.assert_allclose(result.rollout, np.eye(5), atol=1e-12)
	np.testing.assert_array_equal(result.heatmap, np.zeros((2, 2)))
	assert result.volume_id == 'V0001' and result.slice_index == 3


def test_uniform_attention_single_layer():
	T = 5
	result = attention_rollout(_stack(np.full((1, T, T), 1. / T)))
	expected = np.full((T, T), 0.5 / T) + 0.5 * np.eye(T)
	np.testing.assert_allclose(result.rollout, expected, atol=1e-12)


def test_two_layers_match_scratch_product(rng):
	T = 10
	layers = softmax(rng.standard_normal((2, T, T)), axis=-1)
	result = attention_rollout(_stack(layers))
	mixed = [0.5 * A + 0.5 * np.eye(T) for A in layers]
	np.testing.assert_allclose(result.rollout, mixed[1] @ mixed[0], rtol=0., atol=1e-12)
	np.testing.assert_allclose(result.rollout.sum(axis=1), np.ones(T), atol=1e-12)
	assert result.heatmap.shape == (3, 3)
	assert result.heatmap.min() == 0. and result.heatmap.max() == 1.


def test_every_running_product_is_row_stochastic(rng):
	T, L = 17, 24
	layers = softmax(4. * rng.standard_normal((L, T, T)), axis=-1)
	result = attention_rollout(_stack(layers))
	assert len(result.cumulative) == L
	for product in result.cumulative:
		assert product.min() >= 0.
		np.testing.assert_allclose(product.sum(axis=1), np.ones(T), rtol=0., atol=1e-6)
	np.testing.assert_array_equal(result.cumulative[-1], result.rollout)


def test_rollout_rejects_negative_running_product():
	with pytest.raises(ValueError, match='rollout after layer 0'):
		attention_rollout(_stack(np.full((1, 5, 5), 1. / 5)), residual=-1.)


def test_rollout_rejects_bad_attention():
	with pytest.raises(ValueError, match='row-stochastic'):
		attention_rollout(_stack(2. * np.eye(5)[None]))
	with pytest.raises(ValueError):
		attention_rollout(_stack(np.full((1, 6, 6), 1. / 6)))
	with pytest.raises(ValueError):
		attention_rollout(_stack(np.full((6, 6), 1. / 6)))


def test_stub_attention_rollout(rng):
	extractor = StubExtractor(ExtractorSpec(kind='stub', embedding_dim=8, emits_attention=True, attention_layers=3))
	layers = extractor.attention(rng.random((16, 16)))
	assert layers.shape == (3, 65, 65)
	result = attention_rollout(_stack(layers))
	assert result.heatmap.shape == (8, 8)
	assert 0. <= result.heatmap.min() and result.heatmap.max() <= 1.


def test_upsampled_peak_stays_in_place():
	heatmap = np.zeros((3, 3))
	heatmap[1, 1] = 1.
	up = upsample_heatmap(heatmap, (11, 21))
	assert up.shape == (11, 21)
	assert np.unravel_index(np.argmax(up), up.shape) == (5, 10)
	assert up.max() == pytest.approx(1.)


def test_render_is_deterministic(tmp_path, rng):
	result = attention_rollout(_stack(softmax(rng.standard_normal((2, 17, 17)), axis=-1)))
	image = rng.random((32, 32, 3))
	a, b = tmp_path / 'a.png', tmp_path / 'b.png'
	composite = render_heatmap(result, image, str(a), alpha=0.5)
	render_heatmap(result, image, str(b), alpha=0.5)
	assert composite.shape == (32, 32, 3)
	assert a.read_bytes() == b.read_bytes()

	plot.plot_rollout(result.rollout, str(tmp_path / 'rollout.png'), info='V0001 slice 3')
	assert (tmp_path / 'rollout.png').stat().st_size > 0


def test_export_round_trip(tmp_path, rng):
	rows = rng.standard_normal((4, 6))
	path = str(tmp_path / 'embedding.csv')
	written = export_embeddings(path, ['a', 'b', 'c', 'd'], rows, [1, 0, 1, 0], 'slice_features', 'stub:8:16x16:7:abc')
	assert written.metadata == {'source': 'slice_features', 'fingerprint': 'stub:8:16x16:7:abc', 'rows': 4, 'dim': 6}

	loaded = load_embeddings(path)
	assert loaded.ids == ['a', 'b', 'c', 'd']
	assert loaded.labels.tolist() == [1, 0, 1, 0]
	np.testing.assert_array_equal(loaded.rows, rows)
	assert loaded.source == 'slice_features'


def test_export_errors(tmp_path, rng):
	with pytest.raises(ValueError, match='unknown embedding source'):
		export_embeddings(str(tmp_path / 'x.csv'), ['a'], rng.random((1, 3)), [1], 'tsne')
	with pytest.raises(ValueError):
		export_embeddings(str(tmp_path / 'x.csv'), ['a', 'b'], rng.random((1, 3)), [1], 'head_pooled')
	(tmp_path / 'junk.csv').write_text('x,y\n1,2\n', encoding='utf-8')
	with pytest.raises(DataError):
		load_embeddings(str(tmp_path / 'junk.csv'))


def test_slice_and_pooled_rows(small_dataset):
	records, features = small_dataset
	rows = slice_feature_rows(features, 4)
	assert rows.shape == (20, 8)
	np.testing.assert_array_equal(rows[2], features[2].features[3])
	with pytest.raises(DataError):
		slice_feature_rows(features, 9)
	with pytest.raises(DataError):
		slice_feature_rows(features, 0)

	pooled = head_pooled_rows(init_head(8, hidden=(4, 3), seed=0), features[:10])
	assert pooled.shape == (10, 6)
