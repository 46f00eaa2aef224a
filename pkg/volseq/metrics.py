'''Confusion-based metrics, MCC, ROC AUC and fold aggregation with Student-t intervals.'''
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from sklearn.metrics import confusion_matrix, matthews_corrcoef, roc_auc_score

METRICS = ('acc', 'auc', 'sen', 'spe', 'prc', 'f1', 'mcc')


@dataclass(frozen=True)
class ConfusionCounts:
	tp: int
	tn: int
	fp: int
	fn: int

	def __post_init__(self):
		if min(self.tp, self.tn, self.fp, self.fn) < 0:
			raise ValueError('confusion counts must be nonnegative')

	@property
	def total(self):
		return self.tp + self.tn + self.fp + self.fn

	def __add__(self, other):
		return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class BasicMetrics:
	acc: float
	sen: float
	spe: float
	prc: float
	f1: float
	undefined: tuple = () #names of ratios whose denominator was zero (reported as 0)


@dataclass
class MetricsReport:
	acc: float
	sen: float
	spe: float
	prc: float
	f1: float
	mcc: float
	auc: float
	confusion_percent: list #rows: true glaucoma, true normal; columns: predicted glaucoma, predicted normal
	n_pos: int
	n_neg: int
	counts: ConfusionCounts
	undefined: list = field(default_factory=list)

	def to_dict(self):
		out = asdict(self)
		out['counts'] = asdict(self.counts)
		return out


@dataclass
class CrossValReport:
	per_fold: list
	mean: dict
	halfwidth95: dict
	k: int
	t_multiplier: float
	confusion_percent: list #pooled over the folds' summed counts

	def to_dict(self):
		return {
			'k': self.k,
			'interval': f'mean +/- t(0.975, k-1) * sd / sqrt(k), t = {self.t_multiplier:.6f}',
			'mean': self.mean,
			'halfwidth95': self.halfwidth95,
			'confusion_percent': self.confusion_percent,
			'per_fold': [r.to_dict() for r in self.per_fold],
		}


def _check_pair(scores, labels):
	scores = np.asarray(scores, dtype=np.float64)
	labels = np.asarray(labels, dtype=np.int64)
	if scores.shape != labels.shape or scores.ndim != 1:
		raise ValueError(f'scores and labels must be equally long vectors, found {scores.shape} and {labels.shape}')
	if scores.size == 0:
		raise ValueError('scores must not be empty')
	if not np.isin(labels, (0, 1)).all():
		raise ValueError('labels must be 0 or 1')
	return scores, labels


def confusion(scores, labels, threshold=0.5):
	'''Predict glaucoma iff score >= threshold.'''
	scores, labels = _check_pair(scores, labels)
	pred = (scores >= threshold).astype(np.int64)
	tn, fp, fn, tp = confusion_matrix(labels, pred, labels=[0, 1]).ravel()
	return ConfusionCounts(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))


def _label_arrays(c):
	'''(y_true, y_pred) vectors that reproduce the counts of c.'''
	y_true = np.repeat([1, 0, 0, 1], [c.tp, c.tn, c.fp, c.fn])
	y_pred = np.repeat([1, 0, 1, 0], [c.tp, c.tn, c.fp, c.fn])
	return y_true, y_pred


def _ratio(num, den, name, undefined):
	if den == 0:
		undefined.append(name)
		return 0.
	return num / den


def basic_metrics(c):
	if c.total == 0:
		raise ValueError('basic_metrics needs at least one counted prediction')
	undefined = []
	acc = (c.tp + c.tn) / c.total
	sen = _ratio(c.tp, c.tp + c.fn, 'sen', undefined)
	spe = _ratio(c.tn, c.tn + c.fp, 'spe', undefined)
	prc = _ratio(c.tp, c.tp + c.fp, 'prc', undefined)
	f1 = _ratio(2 * sen * prc, sen + prc, 'f1', undefined)
	return BasicMetrics(acc, sen, spe, prc, f1, tuple(undefined))


def mcc(c):
	'''Returns (mcc, defined). A zero denominator (checked on exact integer products) gives (0, False).'''
	if c.total == 0:
		raise ValueError('mcc needs at least one counted prediction')
	den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
	if den == 0:
		return 0., False
	return float(matthews_corrcoef(*_label_arrays(c))), True


def auc(scores, labels):
	'''ROC AUC, equal to the share of positive/negative pairs ranked correctly with ties counting 0.5.'''
	scores, labels = _check_pair(scores, labels)
	n_pos = int(labels.sum())
	n_neg = labels.size - n_pos
	if n_pos == 0 or n_neg == 0:
		raise ValueError('auc needs at least one positive and one negative')
	return float(roc_auc_score(labels, scores))


def _confusion_percent(c):
	def row(a, b):
		n = a + b
		return [a / n, b / n] if n else [0., 0.]
	return [row(c.tp, c.fn), row(c.fp, c.tn)]


def evaluate_scores(scores, labels, threshold=0.5):
	'''Full MetricsReport of one set of predictions.'''
	c = confusion(scores, labels, threshold)
	basic = basic_metrics(c)
	undefined = list(basic.undefined)
	m, defined = mcc(c)
	if not defined:
		undefined.append('mcc')
	try:
		a = auc(scores, labels)
	except ValueError:
		a = 0.
		undefined.append('auc')
	return MetricsReport(acc=basic.acc, sen=basic.sen, spe=basic.spe, prc=basic.prc, f1=basic.f1, mcc=m, auc=a,
		confusion_percent=_confusion_percent(c), n_pos=c.tp + c.fn, n_neg=c.tn + c.fp, counts=c, undefined=undefined)


def aggregate_folds(reports):
	"""
	Mean and 95% half-width per metric over folds

	half-width = t(0.975, k - 1) * sd / sqrt(k), sd with k - 1 degrees of freedom. The pooled
	confusion percentages come from the summed counts.
	"""
	k = len(reports)
	if k < 2:
		raise ValueError(f'aggregate_folds needs at least 2 folds, found {k}')
	t = float(stats.t.ppf(0.975, k - 1))
	mean, halfwidth = {}, {}
	for name in METRICS:
		values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
		mean[name] = float(values.mean())
		halfwidth[name] = float(t * values.std(ddof=1) / math.sqrt(k))
	pooled = reports[0].counts
	for r in reports[1:]:
		pooled = pooled + r.counts
	return CrossValReport(per_fold=list(reports), mean=mean, halfwidth95=halfwidth, k=k, t_multiplier=t,
		confusion_percent=_confusion_percent(pooled))


def format_table(rows, title=None):
	'''Plain-text table: rows are (name, MetricsReport or CrossValReport) pairs, values in percent.'''
	header = ['Method'] + [m.upper() for m in METRICS] + ['Confusion % (G->G, G->N, N->G, N->N)']
	lines = []
	for name, report in rows:
		cells = [name]
		if isinstance(report, CrossValReport):
			cells += [f'{100 * report.mean[m]:.2f} +/- {100 * report.halfwidth95[m]:.2f}' for m in METRICS]
		else:
			cells += [f'{100 * getattr(report, m):.2f}' for m in METRICS]
		cp = report.confusion_percent
		cells.append(' / '.join(f'{100 * v:.2f}' for v in cp[0] + cp[1]))
		lines.append(cells)
	widths = [max(len(str(r[i])) for r in [header] + lines) for i in range(len(header))]
	out = [] if title is None else [title]
	for r in [header] + lines:
		out.append('  '.join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
	return '\n'.join(out) + '\n'
