class VolseqError(Exception):
	'''Base class of every error raised on purpose by this package.'''


class DataError(VolseqError, ValueError):
	'''Input data is malformed: manifest rows, voxel files, checkpoints, unknown ids.'''


class ConfigError(VolseqError, ValueError):
	'''Configuration is invalid or names something that does not exist.'''


class ExternalDependencyUnavailable(VolseqError, RuntimeError):
	'''Pretrained weights or the runtime needed to execute them are missing.'''


class TrainingDiverged(VolseqError, RuntimeError):
	'''The training loss became non-finite.'''
