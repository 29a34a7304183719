"""Early-cycle prediction of battery capacity trajectories through monotone knots."""

__version__ = "0.1.0"
