"""Data path for a bedside audio-visual collection study: device simulator,
transfer and curation pipeline, columnar research database and a streaming
client for training jobs."""

__version__ = "0.1.0"
