import numpy as np
import pytest

from datasets.synthetic import make_synthetic_dataset
from datasets.volume import preprocess
from volseq.extractors import ExtractorSpec, StubExtractor, extract_features

#Desk-sized configuration shared by the end-to-end tests
TINY = [
	'synth_n_pos=6', 'synth_n_neg=6', 'synth_depth=8', 'synth_height=16', 'synth_width=16',
	'target_size=[16,16]', 'embedding_dim=8', 'gru_sizes=[4,3]', 'k=2', 'batch_size=4', 'max_epochs=2',
	'center_slice=4', 'n_selected_features=4', 'svm_epochs=5', 'export_slice=4', 'explain_slices=[1,4,8]',
]


def stub_features(records, target=(16, 16), embedding_dim=8, seed=7):
	extractor = StubExtractor(ExtractorSpec(kind='stub', embedding_dim=embedding_dim, seed=seed))
	return [extract_features(extractor, preprocess(r, target))[0] for r in records]


@pytest.fixture
def rng():
	return np.random.default_rng(0)


@pytest.fixture
def small_dataset():
	records = make_synthetic_dataset(10, 10, 8, seed=3, height=16, width=16)
	return records, stub_features(records)


@pytest.fixture
def tiny_overrides():
	return [arg for override in TINY for arg in ('--set', override)]
