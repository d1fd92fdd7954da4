"""Knowledge-neuron laboratory on a tiny transformer over a synthetic two-hop fact world."""

__version__ = "0.1.0"
