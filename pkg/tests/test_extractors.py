import numpy as np
import pytest

from datasets.volume import PreprocessedVolume
from volseq.errors import ExternalDependencyUnavailable
from volseq.extractors import (AttentionStack, ExtractorSpec, StubExtractor, create_extractor, extract_features,
	fingerprint, pool_slice, preprocessing_hash, stub_extract)


def _volume(slices):
	slices = np.asarray(slices, dtype=np.float32)
	return PreprocessedVolume('V', np.repeat(slices[..., None], 3, axis=-1), ((0.,), (1.,)))


def _stub(E=16, seed=7, attention=False):
	return StubExtractor(ExtractorSpec(kind='stub', embedding_dim=E, seed=seed, emits_attention=attention))


def test_identical_slices_give_identical_rows(rng):
	s = rng.standard_normal((16, 16))
	seq, stacks = extract_features(_stub(), _volume([s, s]))
	assert stacks is None
	np.testing.assert_array_equal(seq.features[0], seq.features[1])


def test_permuting_slices_permutes_rows(rng):
	slices = rng.standard_normal((5, 16, 16))
	order = [3, 0, 4, 1, 2]
	seq, _ = extract_features(_stub(), _volume(slices))
	permuted, _ = extract_features(_stub(), _volume(slices[order]))
	np.testing.assert_allclose(permuted.features, seq.features[order], rtol=0., atol=1e-7)


def test_changing_one_slice_changes_one_row(rng):
	slices = rng.standard_normal((4, 16, 16))
	before, _ = extract_features(_stub(), _volume(slices))
	slices[2] += 1.
	after, _ = extract_features(_stub(), _volume(slices))
	changed = np.abs(before.features - after.features).max(axis=1) > 1e-6
	assert changed.tolist() == [False, False, True, False]


def test_stub_is_deterministic(rng):
	slices = rng.standard_normal((3, 16, 16))
	a, _ = extract_features(_stub(seed=7), _volume(slices))
	b, _ = extract_features(_stub(seed=7), _volume(slices))
	assert a.features.tobytes() == b.features.tobytes()
	c, _ = extract_features(_stub(seed=8), _volume(slices))
	assert not np.array_equal(a.features, c.features)


def test_stub_zero_slice_with_zero_bias():
	out = stub_extract(7, 16, np.zeros((128, 128)), bias=0.)
	assert out.shape == (16,)
	np.testing.assert_array_equal(out, np.zeros(16))


def test_stub_constant_shift_moves_the_mean_only(rng):
	image = rng.random((128, 128))
	a = stub_extract(7, 16, image)
	b = stub_extract(7, 16, image + 0.25)
	np.testing.assert_allclose(b[-2:] - a[-2:], [0.25, 0.], atol=1e-6)


def test_stub_matches_reference(rng):
	image = rng.standard_normal((128, 128))
	E, seed = 12, 3
	ref_rng = np.random.default_rng(seed)
	P = ref_rng.uniform(-1., 1., size=(E - 2, 64))
	b = ref_rng.uniform(-1., 1., size=E - 2)
	pooled = np.array([[image[16 * i:16 * (i + 1), 16 * j:16 * (j + 1)].mean() for j in range(8)] for i in range(8)]).ravel()
	expected = np.concatenate([np.tanh(P @ pooled + b), [image.mean(), image.std()]])
	np.testing.assert_allclose(stub_extract(seed, E, image), expected, atol=1e-6)


def test_pool_slice_needs_a_divisible_grid():
	assert pool_slice(np.ones((16, 24))).shape == (64,)
	with pytest.raises(ValueError):
		pool_slice(np.ones((10, 16)))


def test_spec_validation():
	with pytest.raises(ValueError):
		ExtractorSpec(kind='stub', embedding_dim=4)
	with pytest.raises(ValueError):
		ExtractorSpec(kind='vgg')
	with pytest.raises(ValueError):
		ExtractorSpec(kind='stub', pooling='max')


def test_stub_attention_is_row_stochastic(rng):
	seq, stacks = extract_features(_stub(attention=True), _volume(rng.standard_normal((3, 16, 16))))
	assert len(stacks) == 3
	assert all(isinstance(s, AttentionStack) for s in stacks)
	assert [s.slice_index for s in stacks] == [1, 2, 3]
	layers = stacks[1].layers
	assert layers.shape == (4, 65, 65)
	assert np.all(layers >= 0.)
	np.testing.assert_allclose(layers.sum(axis=-1), 1., atol=1e-6)


def test_backbone_without_weights_is_unavailable(tmp_path):
	for kind, dim in (('vit_large_retfound', 1024), ('resnet34_imagenet', 512)):
		with pytest.raises(ExternalDependencyUnavailable, match='external dependency unavailable'):
			create_extractor(ExtractorSpec(kind=kind, embedding_dim=dim, input_size=(224, 224)))
		with pytest.raises(ExternalDependencyUnavailable):
			create_extractor(ExtractorSpec(kind=kind, embedding_dim=dim, weights=str(tmp_path / 'missing.keras')))


def test_fingerprint_covers_every_key_part():
	prep = preprocessing_hash((128, 128), (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
	spec = ExtractorSpec(kind='stub', embedding_dim=64, input_size=(128, 128), seed=7)
	assert fingerprint(spec, prep) == f'stub:64:128x128:7:{prep}'
	assert fingerprint(ExtractorSpec(kind='stub', embedding_dim=64, seed=8), prep) != fingerprint(spec, prep)
	assert preprocessing_hash((128, 128), (0.5,), (0.5,)) != prep
