"""Selection particle filter, MSE bound constants and dual MPC for terrain-aided navigation."""

__version__ = "0.1.0"
