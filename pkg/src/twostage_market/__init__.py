"""Two-stage electricity market: planner, equilibrium prices and bidding games."""
__version__ = "0.1.0"
