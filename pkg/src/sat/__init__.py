"""Flow-matching manipulation policy over joint-wise action tokens, with a
point-cloud observation tokenizer, an embodied joint codebook, and a synthetic
heterogeneous-embodiment benchmark. See README.md for the tour."""

__version__ = "0.1.0"
