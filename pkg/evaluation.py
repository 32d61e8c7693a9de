"""
Evaluation metrics and report emission

Scores are anomaly scores (1 - p_normal): higher means more anomalous.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from g2d_config import get_thread_count

logger = logging.getLogger(__name__)

PAIRWISE_CHUNK = 256


class MetricError(ValueError):
    """A metric is undefined for the given input."""


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    frame_index: np.ndarray = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise MetricError(f"{self.scores.size} scores but {self.labels.size} labels")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise MetricError("anomaly scores must lie in [0, 1]")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise MetricError("labels must be 0 (normal) or 1 (anomaly)")
        if self.frame_index is not None:
            self.frame_index = np.asarray(self.frame_index, dtype=np.int64).ravel()
            if self.frame_index.shape != self.scores.shape:
                raise MetricError("frame_index length differs from scores")


@dataclass
class EvalReport:
    f1: float
    auc: float
    eer: float
    confusion: dict
    drift: dict = field(default_factory=dict)
    roc: tuple = (np.zeros(0), np.zeros(0))
    f1_vs_contamination: list = field(default_factory=list)
    frame_table: list = field(default_factory=list)
    projection: dict = None


def _require_both_classes(scored):
    n_pos = int(scored.labels.sum())
    n_neg = scored.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("metric needs both normal and anomalous samples")
    return n_pos, n_neg


def confusion(scored, threshold):
    """Counts with 'predicted anomaly' meaning score > threshold."""
    predicted = scored.scores > threshold
    actual = scored.labels == 1
    return {
        'tp': int(np.sum(predicted & actual)),
        'fp': int(np.sum(predicted & ~actual)),
        'tn': int(np.sum(~predicted & ~actual)),
        'fn': int(np.sum(~predicted & actual)),
    }


def f1(scored, alpha):
    """F1 of the anomaly class; 1.0 when nothing is predicted and nothing exists."""
    if scored.scores.size == 0:
        raise MetricError("f1 of an empty set")
    counts = confusion(scored, alpha)
    denominator = 2 * counts['tp'] + counts['fp'] + counts['fn']
    if denominator == 0:
        return 1.0
    return 2 * counts['tp'] / denominator


def roc_auc(scored):
    """Mann-Whitney U / (n+ * n-), ties counted one half."""
    n_pos, n_neg = _require_both_classes(scored)
    ranks = rankdata(scored.scores)
    rank_sum = ranks[scored.labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _rates(scored):
    """FPR and FNR for 'anomaly iff score >= t', t from +inf down through the distinct scores."""
    n_pos, n_neg = _require_both_classes(scored)
    thresholds = np.unique(scored.scores)[::-1]
    pos_scores = np.sort(scored.scores[scored.labels == 1])
    neg_scores = np.sort(scored.scores[scored.labels == 0])
    fp = neg_scores.size - np.searchsorted(neg_scores, thresholds, side='left')
    tp = pos_scores.size - np.searchsorted(pos_scores, thresholds, side='left')
    fpr = np.concatenate([[0.0], fp / n_neg])
    fnr = np.concatenate([[1.0], 1.0 - tp / n_pos])
    return np.concatenate([[np.inf], thresholds]), fpr, fnr


def roc_curve(scored):
    _, fpr, fnr = _rates(scored)
    return fpr, 1.0 - fnr


def eer(scored):
    """Equal error rate, linearly interpolated between the thresholds bracketing FPR = FNR."""
    _, fpr, fnr = _rates(scored)
    diff = fpr - fnr
    crossing = int(np.argmax(diff >= 0))
    if crossing == 0 or diff[crossing] == 0:
        return float(fpr[crossing])
    d_a, d_b = diff[crossing - 1], diff[crossing]
    weight = d_a / (d_a - d_b)
    return float(fpr[crossing - 1] + weight * (fpr[crossing] - fpr[crossing - 1]))


def frame_scores(patch_scored, frame_labels=None):
    """Frame score = max patch score; frame label = max patch label unless frame_labels is given."""
    if patch_scored.frame_index is None:
        raise MetricError("frame_scores needs frame indices on every patch")
    frames, inverse = np.unique(patch_scored.frame_index, return_inverse=True)
    scores = np.zeros(frames.size)
    labels = np.zeros(frames.size, dtype=np.int64)
    np.maximum.at(scores, inverse, patch_scored.scores)
    np.maximum.at(labels, inverse, patch_scored.labels)
    if frame_labels is not None:
        labels = np.asarray([frame_labels[int(f)] for f in frames], dtype=np.int64)
    return ScoredSet(scores=scores, labels=labels, frame_index=frames)


def _flatten(batch):
    batch = np.asarray(batch, dtype=np.float64)
    return batch.reshape(batch.shape[0], -1)


def _mean_pairwise(a, b, threads):
    chunks = [a[i:i + PAIRWISE_CHUNK] for i in range(0, a.shape[0], PAIRWISE_CHUNK)]

    def chunk_sum(chunk):
        return cdist(chunk, b).sum()

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sums = list(pool.map(chunk_sum, chunks))
    else:
        sums = [chunk_sum(chunk) for chunk in chunks]
    # fixed chunking and summation order keep the result independent of thread count
    return float(np.sum(sums)) / (a.shape[0] * b.shape[0])


def energy_distance(A, B, threads=None):
    """2 E|a-b| - E|a-a'| - E|b-b'| over all pairs (diagonal included)."""
    a, b = _flatten(A), _flatten(B)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("energy distance needs non-empty batches")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    threads = threads or get_thread_count()
    value = 2 * _mean_pairwise(a, b, threads) - _mean_pairwise(a, a, threads) - _mean_pairwise(b, b, threads)
    return max(value, 0.0)


def pca_project(samples, dim=2):
    """Project onto the top principal components; each component's largest loading is made positive."""
    x = _flatten(samples)
    if x.shape[0] < 3:
        raise MetricError(f"PCA needs at least 3 samples, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    covariance = centered.T @ centered / (x.shape[0] - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    if eigenvalues[-1] <= 0:
        raise MetricError("zero-variance data cannot be projected")
    order = np.argsort(eigenvalues)[::-1][:dim]
    components = eigenvectors[:, order]
    signs = np.sign(components[np.argmax(np.abs(components), axis=0), np.arange(components.shape[1])])
    components = components * np.where(signs == 0, 1.0, signs)
    return centered @ components


def median_smooth(values):
    """Median over each value and its immediate neighbours."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for i in range(values.size):
        out[i] = np.median(values[max(0, i - 1):i + 2])
    return out


def build_report(scored, alpha, drift=None, f1_vs_contamination=None, frame_level=None, projection=None):
    """Assemble an EvalReport; frame_level replaces patch-level scoring for the headline metrics."""
    headline = frame_level if frame_level is not None else scored
    fpr, tpr = roc_curve(headline)
    frame_table = []
    if frame_level is not None:
        frame_table = [(int(f), float(s), int(l)) for f, s, l in
                       zip(frame_level.frame_index, frame_level.scores, frame_level.labels)]
    return EvalReport(
        f1=f1(headline, alpha), auc=roc_auc(headline), eer=eer(headline),
        confusion=confusion(headline, alpha), drift=dict(drift or {}), roc=(fpr, tpr),
        f1_vs_contamination=list(f1_vs_contamination or []), frame_table=frame_table,
        projection=projection,
    )


def _write_rows(path, header, rows):
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def emit_report(report, out_dir, plots=True):
    """Write metrics.csv, roc.csv, f1_vs_contamination.csv, frames.csv and optionally plots.svg."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = [('f1', report.f1), ('auc', report.auc), ('eer', report.eer)]
    metrics += [(name, report.confusion[name]) for name in ('tp', 'fp', 'tn', 'fn') if name in report.confusion]
    metrics += [(f"drift_{name}", value) for name, value in sorted(report.drift.items())]

    paths = {
        'metrics': os.path.join(out_dir, 'metrics.csv'),
        'roc': os.path.join(out_dir, 'roc.csv'),
        'f1_vs_contamination': os.path.join(out_dir, 'f1_vs_contamination.csv'),
    }
    _write_rows(paths['metrics'], ['metric', 'value'], [(name, _fmt(value)) for name, value in metrics])
    fpr, tpr = report.roc
    _write_rows(paths['roc'], ['fpr', 'tpr'], [(_fmt(a), _fmt(b)) for a, b in zip(fpr, tpr)])
    _write_rows(paths['f1_vs_contamination'], ['fraction', 'f1'],
                [(_fmt(fraction), _fmt(value)) for fraction, value in report.f1_vs_contamination])
    if report.frame_table:
        paths['frames'] = os.path.join(out_dir, 'frames.csv')
        _write_rows(paths['frames'], ['frame', 'score', 'label'],
                    [(frame, _fmt(score), label) for frame, score, label in report.frame_table])
    if plots:
        paths['plots'] = os.path.join(out_dir, 'plots.svg')
        _render_svg(report, paths['plots'])
    logger.info(f"📊 Report written to {out_dir}: f1={report.f1:.4f}, auc={report.auc:.4f}, eer={report.eer:.4f}")
    return paths


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def read_metrics_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return {row['metric']: float(row['value']) for row in csv.DictReader(f)}


def _render_svg(report, path):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    panels = 2 + (report.projection is not None)
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 4))
    fpr, tpr = report.roc
    axes[0].plot(fpr, tpr, color='tab:blue')
    axes[0].plot([0, 1], [0, 1], linestyle='--', color='grey')
    axes[0].set(title=f"ROC (AUC={report.auc:.3f}, EER={report.eer:.3f})", xlabel='FPR', ylabel='TPR')

    if report.f1_vs_contamination:
        fractions, values = zip(*report.f1_vs_contamination)
        axes[1].plot([100 * f for f in fractions], values, marker='o')
        axes[1].set_ylim(0, 1.05)
    axes[1].set(title='F1 vs contamination', xlabel='outlier %', ylabel='F1')

    if report.projection is not None:
        for name, points in report.projection.items():
            axes[2].scatter(points[:, 0], points[:, 1], s=4, label=name)
        axes[2].legend()
        axes[2].set(title='PCA projection')

    fig.tight_layout()
    try:
        fig.savefig(path, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)
