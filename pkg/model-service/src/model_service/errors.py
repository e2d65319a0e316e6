class ConfigError(Exception):
    """Bad configuration, flags, or file contents."""


class DegenerateClassError(Exception):
    """A labeled corpus or split is missing one of the two classes."""
