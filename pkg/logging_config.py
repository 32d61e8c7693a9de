#!/usr/bin/env python3
"""
Logging configuration for the G2D anomaly-detection pipeline

Console output uses the short format; the rotating log file and its
*_error companion use the detailed one.
"""

import logging
import logging.handlers
import os
from datetime import datetime

DETAILED_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
SIMPLE_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def _with_format(handler, level, formatter):
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def _rotating(path, level, formatter, max_bytes, backup_count):
    handler = logging.handlers.RotatingFileHandler(path, maxBytes=max_bytes, backupCount=backup_count,
                                                   encoding='utf-8')
    return _with_format(handler, level, formatter)


def error_log_path(log_file):
    """g2d.log -> g2d_error.log; a file without extension gets .log appended."""
    stem, ext = os.path.splitext(log_file)
    return f"{stem}_error{ext or '.log'}"


def setup_logging(log_level=None, log_file=None, max_bytes=10*1024*1024, backup_count=5):
    """
    Route every logger through the root: console, rotating file, rotating error file

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL), default $LOG_LEVEL or INFO
        log_file: Path to log file, default $LOG_FILE or g2d.log
        max_bytes: Maximum size of log file before rotation
        backup_count: Number of backup log files to keep
    """
    log_level = (log_level or os.environ.get('LOG_LEVEL', 'INFO')).upper()
    log_file = log_file or os.environ.get('LOG_FILE', 'g2d.log')
    numeric_level = logging.getLevelName(log_level)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {log_level}')

    if os.path.dirname(log_file):
        os.makedirs(os.path.dirname(log_file), exist_ok=True)
    detailed = logging.Formatter(DETAILED_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
    error_file = error_log_path(log_file)
    handlers = [
        _with_format(logging.StreamHandler(), numeric_level, logging.Formatter(SIMPLE_FORMAT, datefmt='%H:%M:%S')),
        _rotating(log_file, numeric_level, detailed, max_bytes, backup_count),
        _rotating(error_file, logging.ERROR, detailed, max_bytes, backup_count),
    ]

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root_logger.addHandler(handler)

    app_logger = logging.getLogger(__name__)
    app_logger.info("🔧 Logging Configuration Applied")
    app_logger.info(f"   - Log Level: {log_level}")
    app_logger.info(f"   - Log File: {log_file} (errors: {error_file})")
    app_logger.info(f"   - Rotation: {max_bytes} bytes x {backup_count} backups")
    return app_logger


def log_request_info(logger, request, response=None):
    """
    Log detailed request information for the scoring service

    Args:
        logger: Logger instance
        request: Flask request object
        response: Flask response object (optional)
    """
    logger.info(f"📨 Request: {request.method} {request.path}")
    logger.info(f"   - IP: {request.remote_addr}")
    logger.info(f"   - Content Length: {request.headers.get('Content-Length', 'Unknown')}")

    if request.args:
        logger.debug(f"   - Query Parameters: {dict(request.args)}")

    if response:
        logger.info(f"📤 Response: {response.status_code}")


def log_epoch(logger, phase, record, wall_time=None):
    """
    Log one epoch of a training loop

    Args:
        logger: Logger instance
        phase: Name of the training phase (gan, detector)
        record: Mapping of metric name to value, must contain 'epoch'
        wall_time: Seconds spent on the epoch (optional)
    """
    metrics = ", ".join(f"{key}={value:.6f}" for key, value in record.items()
                        if key != 'epoch' and isinstance(value, float))
    timing = f" ({wall_time:.2f}s)" if wall_time is not None else ""
    logger.info(f"📈 {phase} epoch {record['epoch']}: {metrics}{timing}")


def log_performance(logger, operation, start_time, end_time=None, slow_after=60.0):
    """
    Log performance metrics

    Args:
        logger: Logger instance
        operation: Name of the operation
        start_time: Start time (datetime)
        end_time: End time (datetime, optional)
        slow_after: Seconds after which the operation is reported as slow
    """
    if end_time is None:
        end_time = datetime.now()

    duration = (end_time - start_time).total_seconds()
    logger.info(f"⏱️ Performance: {operation} completed in {duration:.3f} seconds")

    if duration > slow_after:
        logger.warning(f"⚠️ Slow operation: {operation} took {duration:.3f} seconds")
    return duration


def log_startup(logger, app_name, version="1.0.0"):
    """Log application startup information"""
    logger.info("🚀 " + "="*60)
    logger.info(f"🚀 Starting {app_name} v{version}")
    logger.info(f"🚀 Startup Time: {datetime.now().isoformat()}")
    logger.info("🚀 " + "="*60)


def log_shutdown(logger, app_name):
    """Log application shutdown information"""
    logger.info("🛑 " + "="*60)
    logger.info(f"🛑 Shutting down {app_name}")
    logger.info(f"🛑 Shutdown Time: {datetime.now().isoformat()}")
    logger.info("🛑 " + "="*60)


def log_error_with_context(logger, error, context=""):
    """Log error with additional context"""
    logger.error(f"❌ Error: {error}")
    if context:
        logger.error(f"❌ Context: {context}")
    logger.exception("🔍 Full exception details:")
