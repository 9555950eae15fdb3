"""Edge-inferring graph networks and baselines for multi-neuron calcium-imaging time series."""

__version__ = "0.1.0"
