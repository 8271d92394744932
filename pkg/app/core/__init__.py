"""Core configuration, errors and atomic file output."""
