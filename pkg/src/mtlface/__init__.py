"""Joint age-invariant face recognition and face age synthesis."""
__version__ = "0.1.0"
