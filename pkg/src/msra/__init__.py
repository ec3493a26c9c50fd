"""Link-level simulator for grant-free multi-sequence spreading random access."""

__version__ = "0.1.0"
