"""Logging system for the lakf package: JSON run log plus a console stream."""

import json
import logging
import logging.handlers
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

LOG_MAX_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5


class RunContextFilter(logging.Filter):
    """Stamps every record with the fields of the current run (command, run_dir, ...)."""

    def __init__(self, run_context: Dict[str, Any]):
        super().__init__()
        self.run_context = dict(run_context)

    def filter(self, record: logging.LogRecord) -> bool:
        record.run = self.run_context
        return True


class JSONFormatter(logging.Formatter):
    """One JSON object per record; run fields go under "run", call-site data under "extra"."""

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        run = getattr(record, 'run', None)
        if run:
            log_data['run'] = run

        if hasattr(record, 'extra_data'):
            log_data['extra'] = record.extra_data

        if record.exc_info:
            log_data['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=str)


class ConsoleFormatter(logging.Formatter):
    """Human-readable line prefixed with the running command."""

    def __init__(self):
        super().__init__('%(asctime)s - %(name)s - %(levelname)s - %(message)s', datefmt='%Y-%m-%d %H:%M:%S')

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        command = (getattr(record, 'run', None) or {}).get('command')
        return f'[{command}] {line}' if command else line


class RotatingUTF8FileHandler(logging.handlers.RotatingFileHandler):
    """Rotating UTF-8 file handler that creates its directory."""

    def __init__(self, filename: str, maxBytes: int = LOG_MAX_BYTES,
                 backupCount: int = LOG_BACKUPS, encoding: str = 'utf-8'):
        Path(filename).parent.mkdir(parents=True, exist_ok=True)
        super().__init__(filename, maxBytes=maxBytes,
                         backupCount=backupCount, encoding=encoding)


def setup_logging(log_dir: str = 'logs', log_level: str = 'INFO',
                  console_output: bool = True, log_name: str = 'lakf.log',
                  run_context: Optional[Dict[str, Any]] = None) -> None:
    """
    Configures the root logger for one run.

    Args:
        log_dir: Directory for the JSON log file, usually ``<run_dir>/logs``
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL
        console_output: Also log human-readable lines to stderr
        log_name: File name of the JSON log inside log_dir
        run_context: Fields attached to every record, e.g. command and run_dir
    """
    log_level_num = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level_num)
    for handler in root_logger.handlers[:]:
        handler.close()
        root_logger.removeHandler(handler)

    handlers = []
    file_handler = RotatingUTF8FileHandler(os.path.join(log_dir, log_name))
    file_handler.setFormatter(JSONFormatter())
    handlers.append(file_handler)

    if console_output:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(ConsoleFormatter())
        handlers.append(console_handler)

    for handler in handlers:
        handler.setLevel(log_level_num)
        if run_context:
            handler.addFilter(RunContextFilter(run_context))
        root_logger.addHandler(handler)

    root_logger.debug(f'Logging initialized: level={log_level}, dir={log_dir}')


def get_logger(name: str) -> logging.Logger:
    """Returns the logger for a module (usually ``__name__``)."""
    return logging.getLogger(name)


class LoggerAdapter(logging.LoggerAdapter):
    """Adapter attaching fixed fields, merged with per-call ``extra``, to every record."""

    def process(self, msg: str, kwargs: Dict[str, Any]) -> tuple:
        extra = dict(self.extra)
        if 'extra' in kwargs:
            extra['extra_data'] = {**self.extra.get('extra_data', {}), **kwargs['extra']}
        kwargs['extra'] = extra
        return msg, kwargs


def get_logger_with_context(name: str, context: Dict[str, Any]) -> LoggerAdapter:
    """
    Returns a logger that tags every record with context data.

    Args:
        name: Logger name
        context: Key/value pairs emitted under "extra" in JSON records

    Returns:
        LoggerAdapter carrying the context
    """
    return LoggerAdapter(get_logger(name), {'extra_data': context})
