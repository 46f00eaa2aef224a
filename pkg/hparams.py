import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from volseq.errors import ConfigError


class HParams(BaseModel):
	model_config = ConfigDict(extra='forbid', validate_assignment=True)

	#Paths
	manifest: str = 'data/manifest.csv' #CSV manifest describing the volumes (see datasets/volume.py)
	data_dir: str = 'data' #Root that manifest relative_path entries are resolved against
	cache_dir: str = 'feature_cache' #Per-volume feature cache, keyed by extractor fingerprint
	out_dir: str = 'runs' #Every command writes into out_dir/<run-id>/
	###########################################################################################################################################

	#Pre-processing
	target_size: tuple[int, int] = (128, 128) #Every slice is resized to this (H, W) with corner-aligned bilinear interpolation
	channel_mean: tuple[float, ...] = (0.485, 0.456, 0.406) #ImageNet channel means, gray slices are replicated on every channel
	channel_std: tuple[float, ...] = (0.229, 0.224, 0.225) #ImageNet channel standard deviations
	###########################################################################################################################################

	#Feature extraction
	extractor_kind: Literal['stub', 'vit_large_retfound', 'resnet34_imagenet'] = 'stub'
	embedding_dim: int = Field(64, ge=8) #1024 for the ViT-large encoder, 512 for ResNet34, anything >= 8 for the stub
	extractor_input_size: Optional[tuple[int, int]] = None #Backbone input (H, W). None = (224, 224) for backbones, target_size for the stub
	extractor_seed: int = 7 #Stub projection seed
	emits_attention: bool = False #Whether the extractor also returns head-averaged attention per layer
	attention_layers: int = Field(4, ge=1) #Number of synthetic attention layers produced by the stub
	backbone_weights: Optional[str] = None #Externally supplied encoder (Keras model / SavedModel). Required for backbone kinds
	resnet_weights: Optional[str] = None #ResNet34 encoder for `ablate resnet`, which never reuses backbone_weights
	backbone_pooling: Literal['cls', 'mean'] = 'cls' #Global representation: class token or mean of patch tokens
	extract_batch_size: int = Field(16, ge=1) #Slices per backbone call
	###########################################################################################################################################

	#Sequence head
	cell: Literal['gru', 'lstm'] = 'gru' #Recurrent cell of both bidirectional layers ('lstm' is the ablation variant)
	gru_sizes: tuple[int, int] = (256, 128) #Hidden size of the first and second bidirectional layers (per direction)
	dropout_rate: float = Field(0.3, ge=0., lt=1.) #Inverted dropout on the concatenated sequence after the second layer
	###########################################################################################################################################

	#Focal loss
	alpha: float = Field(0.3, gt=0., le=1.) #Weight of class 1 (glaucoma), class 0 receives 1 - alpha
	gamma: float = Field(2., ge=0.) #Focusing parameter, 0 reduces to weighted cross-entropy
	###########################################################################################################################################

	#Optimization
	lr0: float = Field(1e-4, gt=0.) #Initial learning rate
	beta1: float = Field(0.9, ge=0., lt=1.) #Adam first moment decay
	beta2: float = Field(0.999, ge=0., lt=1.) #Adam second moment decay
	eps: float = Field(1e-8, gt=0.) #Adam stability constant
	decay_factor: float = Field(0.9, gt=0.) #Step decay factor of the learning rate
	decay_period_epochs: int = Field(5, ge=1) #Learning rate is multiplied by decay_factor every decay_period_epochs epochs
	batch_size: int = Field(16, ge=2) #Balanced batches: ceil(b/2) glaucoma + floor(b/2) normal
	max_epochs: int = Field(100, ge=1)
	patience: int = Field(6, ge=1) #Stop after this many consecutive epochs without validation loss improvement
	seed: int = 1234 #Reproduction seed of folds, batches, dropout masks and parameter initialization
	###########################################################################################################################################

	#Evaluation
	k: int = Field(5, ge=2) #Number of subject-level cross-validation folds
	val_fraction: float = Field(0.1, gt=0., lt=1.) #Share of the non-test subjects held out for validation
	threshold: float = Field(0.5, gt=0., lt=1.) #Predict glaucoma iff p >= threshold
	###########################################################################################################################################

	#SVM ablation
	center_slice: int = Field(32, ge=1) #1-based index of the central slice, always part of the selection
	n_selected_slices: int = Field(5, ge=1) #Odd, the ensemble votes over these
	n_selected_features: int = Field(128, ge=1) #Gain-ratio selected features per slice
	gain_ratio_bins: int = Field(10, ge=2) #Equal-frequency bins used to discretize features
	svm_lambda: float = Field(1e-2, gt=0.) #L2 regularization strength
	svm_epochs: int = Field(20, ge=1) #Passes of stochastic subgradient descent
	###########################################################################################################################################

	#Synthetic dataset
	synth_n_pos: int = Field(60, ge=1)
	synth_n_neg: int = Field(30, ge=1)
	synth_depth: int = Field(64, ge=1)
	synth_height: int = Field(64, ge=1)
	synth_width: int = Field(128, ge=1)
	synth_mu_neg: float = 0.3 #Mean intensity (in [0, 1]) of normal volumes
	synth_mu_pos: float = 0.6 #Mean intensity of glaucoma volumes
	synth_noise: float = 0.05 #Gaussian noise std, in [0, 1] intensity units
	synth_band_drop: float = 0.15 #Intensity removed from a contiguous slice range of glaucoma volumes
	###########################################################################################################################################

	#Sweeps
	sweep_gru_sizes: list[int] = [512, 256, 128] #Upper-triangular (GRU-1 >= GRU-2) grid of hidden sizes
	sweep_dropout: list[float] = [0., 0.1, 0.2, 0.3, 0.4, 0.5]
	sweep_alpha: list[float] = [0.2, 0.3, 0.4, 0.5]
	sweep_gamma: list[float] = [0., 2., 5.]
	sweep_lr: list[float] = [1e-5, 5e-5, 1e-4, 5e-4, 1e-3] #Initial Adam step sizes of the lr x batch_size grid
	sweep_batch_size: list[int] = [8, 16, 32, 64, 128]
	sweep_folds: int = Field(1, ge=1) #Folds whose validation set scores each grid point
	###########################################################################################################################################

	#Explainability
	explain_slices: list[int] = [1, 32, 64] #1-based slices rendered as rollout overlays
	export_slice: int = Field(32, ge=1) #Slice whose features are exported for external t-SNE
	heatmap_alpha: float = Field(0.5, ge=0., le=1.) #Opacity of the color-mapped heatmap over the slice

	@field_validator('channel_std')
	@classmethod
	def _nonzero_std(cls, value):
		if any(s == 0 for s in value):
			raise ValueError('channel_std components must be nonzero')
		return value

	@field_validator('n_selected_slices')
	@classmethod
	def _odd_votes(cls, value):
		if value % 2 == 0:
			raise ValueError('n_selected_slices must be odd so majority votes cannot tie')
		return value

	def values(self):
		return self.model_dump()

	def parse(self, overrides):
		'''Returns a copy with `key=value` overrides applied. Values are decoded as JSON when possible.
		'''
		if isinstance(overrides, str):
			overrides = [overrides]
		values = self.model_dump()
		for override in overrides:
			if '=' not in override:
				raise ConfigError(f'override must look like key=value, found {override!r}')
			key, raw = override.split('=', 1)
			key = key.strip()
			if key not in values:
				raise ConfigError(f'unknown hyper-parameter: {key}')
			values[key] = _decode(raw.strip())
		return _validate(values)

	def focal_config(self):
		from volseq.train import FocalConfig
		return FocalConfig(alpha=self.alpha, gamma=self.gamma)

	def optim_config(self):
		from volseq.train import OptimConfig
		return OptimConfig(lr0=self.lr0, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
			decay_factor=self.decay_factor, decay_period_epochs=self.decay_period_epochs,
			batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience, seed=self.seed)

	def extractor_spec(self):
		from volseq.extractors import ExtractorSpec
		input_size = self.extractor_input_size
		if input_size is None:
			input_size = self.target_size if self.extractor_kind == 'stub' else (224, 224)
		return ExtractorSpec(kind=self.extractor_kind, embedding_dim=self.embedding_dim,
			input_size=tuple(input_size), seed=self.extractor_seed, emits_attention=self.emits_attention,
			pooling=self.backbone_pooling, weights=self.backbone_weights, attention_layers=self.attention_layers)


def _decode(raw):
	try:
		return json.loads(raw)
	except json.JSONDecodeError:
		return raw


def _validate(values):
	try:
		return HParams.model_validate(values)
	except ValidationError as e:
		raise ConfigError(f'invalid hyper-parameters:\n{e}') from e


def load_hparams(path=None, overrides=()):
	'''Defaults, then the JSON config at `path` (if any), then `key=value` overrides. Flags win.
	'''
	values = hparams.model_dump()
	if path:
		try:
			with open(path, encoding='utf-8') as f:
				loaded = json.load(f)
		except FileNotFoundError as e:
			raise ConfigError(f'config file not found: {path}') from e
		except json.JSONDecodeError as e:
			raise ConfigError(f'config file {path} is not valid JSON: {e}') from e
		unknown = sorted(set(loaded) - set(values))
		if unknown:
			raise ConfigError(f'unknown hyper-parameters in {path}: {unknown}')
		values.update(loaded)
	return _validate(values).parse(list(overrides))


# Default hyperparameters
hparams = HParams()


def hparams_debug_string(hp=None):
	values = (hp or hparams).values()
	hp = ['  %s: %s' % (name, values[name]) for name in sorted(values)]
	return 'Hyperparameters:\n' + '\n'.join(hp)
