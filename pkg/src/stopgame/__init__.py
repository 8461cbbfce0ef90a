"""Two-player stopping game with partial observability: simulation, rollout, conjecture learning and equilibrium checks."""

__version__ = "0.1.0"
