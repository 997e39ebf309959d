"""Graph attention with expanding windows, random node identifiers, and
property oracles for synthetic graph classification benchmarks."""

__version__ = "0.1.0"
