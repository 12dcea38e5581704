# utils/metrics_writer.py
import json
import logging
import os

logger = logging.getLogger(__name__)


class MetricsWriter:
    """Line-delimited JSON metrics stream. Truncated when opened, then append-only; every line is flushed
    so the file can be parsed while a run is still going."""

    def __init__(self, path):
        self.path = path
        self.records_written = 0
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        self._handle = open(path, "w", encoding="utf-8")
        logger.info(f"MetricsWriter: writing metrics to {path}")

    def write(self, record: dict):
        if self._handle is None:
            raise ValueError(f"MetricsWriter: {self.path} is already closed")
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._handle.flush()
        self.records_written += 1

    def close(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            logger.debug(f"MetricsWriter: closed {self.path} after {self.records_written} records.")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_metrics(path) -> list[dict]:
    """All records of a metrics file; a truncated last line (run still writing) is ignored."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning(f"read_metrics: skipping unparseable line in {path}")
    return records
