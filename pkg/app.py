from flask import Flask, request, jsonify
import os
import csv
import logging
import threading
from datetime import datetime

import numpy as np
from werkzeug.exceptions import HTTPException

from checkpoint import CheckpointError, load_detector
from detector import classify_scores, score
from evaluation import read_metrics_csv
from g2d_config import SERVICE_CONFIG, get_run_dir
from logging_config import log_request_info, setup_logging
from nn_core import ShapeError

app = Flask(__name__)
logger = logging.getLogger(__name__)

# Detector of the current run directory, loaded on first use
_model_lock = threading.Lock()
_model_cache = {}


def run_dir():
    return app.config.get('G2D_RUN_DIR') or get_run_dir()


def get_model():
    """Load <run_dir>/checkpoints/detector once per run directory."""
    directory = run_dir()
    with _model_lock:
        if directory not in _model_cache:
            logger.info(f"📥 Loading detector from {directory}")
            _model_cache[directory] = load_detector(os.path.join(directory, 'checkpoints', 'detector'))
        return _model_cache[directory]


@app.after_request
def after_request(response):
    log_request_info(logger, request, response)
    return response


@app.errorhandler(Exception)
def handle_error(e):
    if isinstance(e, HTTPException):
        return jsonify({'error': e.description}), e.code
    logger.error(f"❌ Unhandled error on {request.path}: {e}", exc_info=True)
    return jsonify({'error': 'internal error'}), 500


@app.route('/health', methods=['GET'])
def health_check():
    """
    Health check endpoint
    """
    logger.info(f"🏥 Health check requested from IP: {request.remote_addr}")
    directory = run_dir()
    detector_path = os.path.join(directory, 'checkpoints', 'detector.json')

    health_status = {
        'status': 'healthy',
        'message': 'Server is running',
        'run_dir': directory,
        'detector_available': os.path.exists(detector_path),
        'report_available': os.path.exists(os.path.join(directory, 'report', 'metrics.csv')),
        'timestamp': datetime.now().isoformat()
    }

    logger.info(f"✅ Health check completed - detector available: {health_status['detector_available']}")
    return jsonify(health_status)


@app.route('/runs/metrics', methods=['GET'])
def run_metrics():
    """
    Headline metrics of the current run's evaluation report
    """
    path = os.path.join(run_dir(), 'report', 'metrics.csv')
    if not os.path.exists(path):
        logger.warning(f"⚠️ No evaluation report at {path}")
        return jsonify({'error': 'no evaluation report for this run'}), 404
    return jsonify({'metrics': read_metrics_csv(path), 'timestamp': datetime.now().isoformat()})


@app.route('/runs/regimes', methods=['GET'])
def run_regimes():
    """
    Per-epoch regime table, paginated with limit/offset
    """
    path = os.path.join(run_dir(), 'regimes.csv')
    if not os.path.exists(path):
        return jsonify({'error': 'no regime table for this run'}), 404
    try:
        limit = int(request.args.get('limit', 100))
        offset = int(request.args.get('offset', 0))
    except ValueError:
        return jsonify({'error': 'limit and offset must be integers'}), 400
    if limit < 1 or offset < 0:
        return jsonify({'error': 'limit must be positive and offset non-negative'}), 400

    with open(path, newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    return jsonify({
        'regimes': rows[offset:offset + limit],
        'pagination': {'limit': limit, 'offset': offset, 'total': len(rows)},
    })


@app.route('/score', methods=['POST'])
def score_samples():
    """
    Score a batch of samples: {"samples": [...], "alpha": 0.5}

    Each sample is a point (list of floats) or an image (nested C x H x W lists)
    in [-1, 1]. Returns the normal-class probability and verdict per sample.
    """
    payload = request.get_json(silent=True)
    if not isinstance(payload, dict) or 'samples' not in payload:
        return jsonify({'error': 'expected a JSON object with a "samples" list'}), 400
    alpha = payload.get('alpha', 0.5)
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        return jsonify({'error': 'alpha must be a number in (0, 1)'}), 400
    try:
        samples = np.asarray(payload['samples'], dtype=np.float32)
    except (TypeError, ValueError):
        return jsonify({'error': 'samples must be a rectangular numeric array'}), 400
    if samples.ndim < 2 or len(samples) == 0:
        return jsonify({'error': 'samples must be a non-empty list of samples'}), 400
    if len(samples) > SERVICE_CONFIG['max_samples_per_request']:
        return jsonify({'error': f"at most {SERVICE_CONFIG['max_samples_per_request']} samples per request"}), 400
    if not np.all(np.isfinite(samples)):
        return jsonify({'error': 'samples contain non-finite values'}), 400

    try:
        model = get_model()
    except CheckpointError as e:
        logger.error(f"❌ Detector unavailable: {e}")
        return jsonify({'error': 'no trained detector in the run directory'}), 503
    try:
        scores = score(model, samples)
    except ShapeError as e:
        return jsonify({'error': str(e)}), 400

    verdicts = classify_scores(scores, alpha)
    logger.info(f"🔍 Scored {len(scores)} samples: {sum(v.value == 'Anomaly' for v in verdicts)} anomalies at alpha={alpha}")
    return jsonify({
        'alpha': alpha,
        'scores': [float(s) for s in scores],
        'verdicts': [v.value for v in verdicts],
    })


if __name__ == '__main__':
    setup_logging()
    port = SERVICE_CONFIG['port']

    logger.info(f"🌐 Starting G2D scoring service on port {port}")
    logger.info(f"📁 Run directory: {run_dir()}")

    app.run(host='0.0.0.0', port=port)
