"""Parser adapters emitting canonical parse-output JSON files."""

__version__ = "0.1.0"
