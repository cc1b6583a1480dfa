"""Format bridge from real imagery to the geosfm engine's input files.

Runs pluggable third-party feature extractors/matchers and (optionally) a
pretrained cross-view localizer, then writes the engine's correspondence and
prior text formats. No learning is implemented here; quality claims belong to
the chosen backends.
"""

__version__ = "0.1.0"
