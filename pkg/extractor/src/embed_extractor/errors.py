"""Extractor error types."""


class ExtractorError(Exception):
    """Base class for extraction failures."""


class ManifestError(ExtractorError):
    """Malformed or unreadable manifest."""


class MissingFileError(ExtractorError):
    """An image file named by the manifest does not exist."""


class CheckpointError(ExtractorError):
    """The requested encoder checkpoint cannot be loaded."""


class CurationError(ExtractorError):
    """Curation left nothing usable (e.g. zero retained classes)."""
