"""Sequential recommendation with a jointly learned cluster-level causal graph."""
__version__ = "0.1.0"
