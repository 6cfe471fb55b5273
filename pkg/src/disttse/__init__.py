"""Distance-queried target speech extraction: simulation, data, model, training and sweeps."""

__version__ = "0.1.0"
